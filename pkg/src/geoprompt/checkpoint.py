"""Checkpoint directories: one raw blob per parameter group plus a JSON index.

Layout::

    <dir>/index.json   name -> {group, offset, nbytes, shape, dtype, frozen, kind}
    <dir>/<group>.bin  little-endian tensor bytes, concatenated in index order
    <dir>/meta.json    config, architecture hash, epoch, best val DSC, history, seed, version
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import TrainConfig
from .errors import CompatibilityError, LoadError
from .prompts import PROMPT_NAMES

_DTYPES = {torch.float32: "float32", torch.float64: "float64", torch.int64: "int64"}


def _group(name: str) -> str:
    parts = name.split(".")
    if parts[0] == "encoder":
        return ".".join(parts[:2])
    if parts[0] == "prompt":
        return "prompts"
    return parts[0]


def _entries(model: torch.nn.Module):
    """(name, tensor, frozen, kind) with prompt rows split out by class."""
    frozen = {n for n, p in model.named_parameters() if not p.requires_grad}
    params = dict(model.named_parameters())
    for name, t in model.state_dict(keep_vars=False).items():
        if name == "prompts.P":
            for i, cls in enumerate(PROMPT_NAMES):
                yield f"prompt.{cls}", t[i], False, "param"
            continue
        yield name, t, name in frozen, "param" if name in params else "buffer"


def save_checkpoint(model, directory: str | Path, **meta) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    index, blobs = {}, {}
    for name, t, frozen, kind in _entries(model):
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise LoadError(f"cannot serialize {name} with dtype {t.dtype}")
        raw = t.numpy().astype(t.numpy().dtype.newbyteorder("<"), copy=False).tobytes()
        group = _group(name)
        buf = blobs.setdefault(group, bytearray())
        index[name] = {"group": group, "offset": len(buf), "nbytes": len(raw), "shape": list(t.shape),
                       "dtype": _DTYPES[t.dtype], "frozen": frozen, "kind": kind}
        buf.extend(raw)
    for group, buf in blobs.items():
        (d / f"{group}.bin").write_bytes(bytes(buf))
    (d / "index.json").write_text(json.dumps(index, indent=1))
    cfg: TrainConfig = model.cfg
    meta = {"config": cfg.to_dict(), "config_hash": cfg.architecture_hash(), "seed": cfg.seed,
            "code_version": __version__, **meta}
    (d / "meta.json").write_text(json.dumps(meta, indent=1, default=str))
    return d


def read_meta(directory: str | Path) -> dict:
    path = Path(directory) / "meta.json"
    if not path.exists():
        raise LoadError(f"{directory} is not a checkpoint (no meta.json)")
    return json.loads(path.read_text())


def read_state(directory: str | Path) -> dict[str, torch.Tensor]:
    d = Path(directory)
    index = json.loads((d / "index.json").read_text())
    blobs: dict[str, bytes] = {}
    state = {}
    rows = {}
    for name, e in index.items():
        if e["group"] not in blobs:
            blobs[e["group"]] = (d / f"{e['group']}.bin").read_bytes()
        raw = blobs[e["group"]][e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"]).newbyteorder("<")).reshape(e["shape"])
        t = torch.from_numpy(arr.astype(np.dtype(e["dtype"]), copy=True))
        if name.startswith("prompt."):
            rows[name.split(".", 1)[1]] = t
        else:
            state[name] = t
    if rows:
        state["prompts.P"] = torch.stack([rows[c] for c in PROMPT_NAMES])
    return state


def load_checkpoint(directory: str | Path, expect: TrainConfig | None = None):
    """Rebuild the model stored in ``directory``; returns (model, meta)."""
    from .model import LandmarkNet

    meta = read_meta(directory)
    cfg = TrainConfig.from_dict(meta["config"])
    if expect is not None and expect.architecture_hash() != meta["config_hash"]:
        raise CompatibilityError(
            f"checkpoint architecture {meta['config_hash']} does not match requested "
            f"{expect.architecture_hash()}: stored {json.dumps(cfg.architecture())}"
        )
    # stored weights replace any pretrained load
    cfg.pretrained_depth_weights = ""
    model = LandmarkNet(cfg)
    state = read_state(directory)
    own = model.state_dict()
    bad = [f"{k}: {tuple(v.shape)} vs {tuple(own[k].shape)}" for k, v in state.items()
           if k in own and v.shape != own[k].shape]
    missing = sorted(set(own) - set(state))
    if bad or missing:
        raise LoadError("checkpoint does not fit the model: " + "; ".join(bad + [f"missing {m}" for m in missing]))
    model.load_state_dict(state)
    return model, meta


def frozen_checksum(model) -> str:
    """SHA-256 over the bytes of every frozen parameter, in name order."""
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(model.frozen_parameters(), key=lambda x: x[0]):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
