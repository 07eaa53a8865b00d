"""Named-tensor checkpoints: a JSON manifest followed by little-endian float32 payloads.

The container is the safetensors layout (8-byte little-endian header length,
JSON header with name/shape/dtype/offsets, raw payloads). Experts, router and
interaction layers share it and are told apart by name prefix:
``expert<m>/``, ``router/``, ``interaction/layer<l>/``.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
from safetensors.numpy import load_file, save_file

from .expert import ExpertBackbone, ExpertConfig
from .model import MoTConfig, MoTModel

PREFIXES = ("router/", "interaction/", "expert")


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    out = {}
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if not np.issubdtype(arr.dtype, np.floating):
            raise TypeError(f"tensor {name!r} has non-float dtype {arr.dtype}")
        out[name] = np.ascontiguousarray(arr, dtype="<f4")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_file(out, str(path), metadata={"meta": json.dumps(meta or {})})


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    from safetensors import safe_open

    with safe_open(str(path), framework="numpy") as fh:
        meta = json.loads((fh.metadata() or {}).get("meta", "{}"))
    return load_file(str(path)), meta


def model_state(model: MoTModel, include_experts: bool = True) -> dict[str, np.ndarray]:
    state = {k: p.data for k, p in model.trainable().items()}
    # no-crossattn models still own W_Q/K/V/O (unused); keep them for a faithful round trip
    for layer in model.layers:
        for k, p in layer.params.items():
            state.setdefault(f"interaction/layer{layer.index}/{k}", p.data)
    if include_experts:
        state.update({k: p.data for k, p in model.frozen_params().items()})
    return state


def load_model_state(model: MoTModel, tensors: dict[str, np.ndarray], strict: bool = True) -> None:
    own = {f"router/{k}": p for k, p in model.router.params.items()}
    for layer in model.layers:
        own.update({f"interaction/layer{layer.index}/{k}": p for k, p in layer.params.items()})
    own.update(model.frozen_params())
    missing = [k for k in own if k not in tensors and (strict or not k.startswith("expert"))]
    unknown = [k for k in tensors if k not in own]
    if missing or unknown:
        raise KeyError(f"checkpoint mismatch: missing {missing[:5]}, unexpected {unknown[:5]}")
    for k, arr in tensors.items():
        p = own[k]
        if p.shape != arr.shape:
            raise ValueError(f"{k}: checkpoint shape {arr.shape} != model shape {p.shape}")
        p.data[...] = arr


def save_experts(path, experts: list[ExpertBackbone], meta: dict | None = None) -> None:
    tensors = {f"expert{m}/{k}": p.data for m, e in enumerate(experts) for k, p in e.params.items()}
    meta = dict(meta or {}, experts=[asdict(e.cfg) for e in experts])
    save_tensors(path, tensors, meta)


def load_experts(path, dtype=np.float32) -> tuple[list[ExpertBackbone], dict]:
    tensors, meta = load_tensors(path)
    experts = []
    for m, cd in enumerate(meta["experts"]):
        pre = f"expert{m}/"
        params = {k[len(pre):]: v for k, v in tensors.items() if k.startswith(pre)}
        experts.append(ExpertBackbone(ExpertConfig(**cd), dtype=dtype, params=params).freeze())
    return experts, meta


def save_model(path, model: MoTModel, meta: dict | None = None) -> None:
    meta = dict(meta or {}, mot=asdict(model.cfg), experts=[asdict(e.cfg) for e in model.experts])
    save_tensors(path, model_state(model), meta)


def load_model(path, dtype=np.float32) -> tuple[MoTModel, dict]:
    tensors, meta = load_tensors(path)
    experts = []
    for m, cd in enumerate(meta["experts"]):
        pre = f"expert{m}/"
        params = {k[len(pre):]: v for k, v in tensors.items() if k.startswith(pre)}
        experts.append(ExpertBackbone(ExpertConfig(**cd), dtype=dtype, params=params))
    model = MoTModel(experts, MoTConfig(**meta["mot"]), dtype=dtype)
    load_model_state(model, tensors)
    return model, meta
