"""Model checkpoints: a JSON manifest plus one BFT1 file per parameter tensor.

Parameters are stored flattened as (1, 1, n) tensors; the manifest keeps the
real shapes, the network spec and any extra metadata (schedule constants,
config hash).
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np
import torch

from .denoiser import Denoiser, DenoiserSpec, ExpertPair
from .tensorio import FormatError, load_tensor, save_tensor
from .wsc import WscModel, WscSpec

_KINDS = {"denoiser": (Denoiser, DenoiserSpec), "wsc": (WscModel, WscSpec)}


def _kind_of(model):
    for kind, (cls, _) in _KINDS.items():
        if isinstance(model, cls):
            return kind
    raise TypeError(f"cannot checkpoint {type(model).__name__}")


def _write_state(model, out: Path, prefix: str):
    entries = []
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype(np.float32)
        rel = f"{prefix}{name}.bft"
        save_tensor(arr.reshape(1, 1, -1), out / rel)
        entries.append({"name": name, "shape": list(arr.shape), "file": rel})
    return entries


def _read_state(entries, root: Path):
    state = {}
    for e in entries:
        arr = load_tensor(root / e["file"])
        if arr.size != int(np.prod(e["shape"], dtype=np.int64)):
            raise FormatError(f"{e['file']}: size does not match shape {e['shape']}")
        state[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    return state


def save_model(model, out_dir, meta=None) -> Path:
    """Save a Denoiser, WscModel or ExpertPair under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if isinstance(model, ExpertPair):
        nets = {"low": model.low, "high": model.high}
        manifest = {"kind": "expert-pair", "split": model.split}
    else:
        nets = {"net": model}
        manifest = {"kind": _kind_of(model)}
    first = next(iter(nets.values()))
    manifest["spec"] = dataclasses.asdict(first.spec)
    manifest["nets"] = {k: _write_state(m, out, f"{k}.") for k, m in nets.items()}
    manifest["meta"] = meta or {}
    path = out / "checkpoint.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_model(path):
    """Inverse of :func:`save_model`; accepts the directory or the manifest path."""
    path = Path(path)
    if path.is_dir():
        path = path / "checkpoint.json"
    man = json.loads(path.read_text())
    kind = man["kind"]
    net_kind = "denoiser" if kind == "expert-pair" else kind
    if net_kind not in _KINDS:
        raise FormatError(f"unknown checkpoint kind {kind!r}")
    cls, spec_cls = _KINDS[net_kind]
    spec = spec_cls(**man["spec"])

    def build(entries):
        net = cls(spec)
        net.load_state_dict(_read_state(entries, path.parent))
        return net.eval()

    if kind == "expert-pair":
        return ExpertPair(build(man["nets"]["low"]), build(man["nets"]["high"]), man["split"]), man["meta"]
    return build(man["nets"]["net"]), man["meta"]
