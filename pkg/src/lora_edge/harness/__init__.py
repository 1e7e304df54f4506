from .config import DataConfig, ExperimentConfig, load_config
from .data import ShiftSpec, WindowDataset, apply_shift, gen_synthetic, load_dataset, save_dataset, split
from .experiment import (
    RunResult, build_fixture, evaluate, finetune, pretrain, run_ablation_cores, run_comparison,
    run_init_sweep, steps_to_threshold,
)
from .metrics import confusion_matrix, macro_f1
