"""TT-SVD assisted low-rank adaptation of CNN kernels, with baselines and an experiment harness."""
from .linalg import SvdResult, truncated_svd
from .nn import Model, backward, build_backbone, forward
from .peft import attach_lora_edge, merge_lora_edge, param_report, prepare
from .tt import TTCores, tt_param_count, tt_reconstruct, tt_svd

__version__ = "0.1.0"
