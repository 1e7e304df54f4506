"""Model bundles: ``manifest.json`` plus ``params.bin`` (raw little-endian float64)."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .nn import LayerSpec, Model
from .peft import AdapterState

FORMAT = "lora-edge-bundle"
FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "params.bin"


class BundleError(ValueError):
    pass


def _ordered_keys(m: Model):
    return sorted(m.params, key=lambda k: (k[0], k[1]))


def save_model(m: Model, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    slots, chunks, offset = [], [], 0
    for key in _ordered_keys(m):
        raw = np.ascontiguousarray(m.params[key], dtype="<f8").tobytes()
        slots.append({
            "layer": key[0],
            "name": key[1],
            "shape": list(m.params[key].shape),
            "offset": offset,
            "nbytes": len(raw),
            "trainable": bool(m.trainable[key]),
        })
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "input_shape": list(m.input_shape),
        "method": m.method,
        "layers": [L.to_dict() for L in m.layers],
        "slots": slots,
        "adapters": [a.to_record(i) for i, a in sorted(m.adapters.items())],
        "blob": {"file": BLOB, "dtype": "<f8", "nbytes": offset},
    }
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (path / BLOB).write_bytes(b"".join(chunks))
    return path


def load_model(path) -> Model:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError:
        raise BundleError(f"no {MANIFEST} in {path}") from None
    except json.JSONDecodeError as e:
        raise BundleError(f"malformed manifest: {e}") from None
    if manifest.get("format") != FORMAT:
        raise BundleError(f"not a model bundle: format={manifest.get('format')!r}")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise BundleError(
            f"bundle format version {manifest.get('format_version')} is not supported (expected {FORMAT_VERSION})"
        )
    try:
        blob = (path / BLOB).read_bytes()
    except FileNotFoundError:
        raise BundleError(f"no {BLOB} in {path}") from None
    if len(blob) != manifest["blob"]["nbytes"]:
        raise BundleError(f"{BLOB} has {len(blob)} bytes, manifest declares {manifest['blob']['nbytes']}")

    params, trainable = {}, {}
    for s in manifest["slots"]:
        n = int(np.prod(s["shape"])) * 8
        if s["nbytes"] != n or s["offset"] + n > len(blob):
            raise BundleError(f"slot ({s['layer']}, {s['name']}) does not fit the blob")
        key = (s["layer"], s["name"])
        params[key] = np.frombuffer(blob, dtype="<f8", count=n // 8, offset=s["offset"]).reshape(s["shape"]).astype(np.float64)
        trainable[key] = s["trainable"]

    layers = [LayerSpec.from_dict(d) for d in manifest["layers"]]
    m = Model(layers, manifest["input_shape"], params=params, trainable=trainable)
    for rec in manifest["adapters"]:
        i, a = AdapterState.from_record(rec)
        missing = [s for s in a.slots if (i, s) not in params]
        if missing:
            raise BundleError(f"adapter on layer {i} references missing slots {missing}")
        m.adapters[i] = a
    m.method = manifest.get("method")
    return m
