"""Checkpoint persistence.

Layout: a magic line, one line of JSON metadata (sorted keys) that also
indexes the arrays, then the raw little-endian array bytes in index order.
Nothing time- or host-dependent is written, so saving the same state twice
yields identical bytes.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IntegrityError
from .transformer import ModelConfig

MAGIC = b"CMLMKD-CHECKPOINT\n"
FORMAT_VERSION = 1
_SECTIONS = ("param", "best", "adam_m", "adam_v")


@dataclass
class Checkpoint:
    kind: str
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    optimizer: dict | None = None
    best_params: dict[str, np.ndarray] | None = None

    def content_hash(self, use_best: bool = True) -> str:
        """Hash of the architecture and the weights a consumer would load.

        Optimizer moments and training progress are deliberately excluded.
        """
        params = self.best_params if use_best and self.best_params is not None else self.params
        return weights_hash(self.kind, self.model_config, bool(self.meta.get("causal", False)), params)


def weights_hash(kind: str, config: ModelConfig, causal: bool, params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    h.update(json.dumps({"kind": kind, "config": config.to_dict(), "causal": causal}, sort_keys=True).encode())
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name])
        h.update(name.encode())
        h.update(arr.dtype.str.encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def model_hash(model) -> str:
    kind = "teacher" if hasattr(model, "causal") else "student"
    return weights_hash(kind, model.config, bool(getattr(model, "causal", False)), model.state_dict())


def _arrays(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    if ckpt.best_params is not None:
        out += [(f"best/{k}", v) for k, v in ckpt.best_params.items()]
    if ckpt.optimizer is not None:
        out += [(f"adam_m/{k}", v) for k, v in ckpt.optimizer["m"].items()]
        out += [(f"adam_v/{k}", v) for k, v in ckpt.optimizer["v"].items()]
    return out


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    arrays = _arrays(ckpt)
    index = []
    blobs = []
    for key, arr in arrays:
        arr = np.ascontiguousarray(arr, dtype=np.asarray(arr).dtype.newbyteorder("<"))
        index.append([key, arr.dtype.str, list(arr.shape)])
        blobs.append(arr.tobytes())
    header = {
        "format_version": FORMAT_VERSION,
        "kind": ckpt.kind,
        "model_config": ckpt.model_config.to_dict(),
        "meta": ckpt.meta,
        "optimizer_t": None if ckpt.optimizer is None else int(ckpt.optimizer["t"]),
        "arrays": index,
    }
    tmp = Path(f"{path}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n")
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise IntegrityError(f"{path}: not a checkpoint file")
        header = json.loads(fh.readline())
        if header.get("format_version") != FORMAT_VERSION:
            raise IntegrityError(f"{path}: checkpoint format {header.get('format_version')} != {FORMAT_VERSION}")
        sections: dict[str, dict[str, np.ndarray]] = {s: {} for s in _SECTIONS}
        for key, dtype, shape in header["arrays"]:
            dt = np.dtype(dtype)
            n = int(np.prod(shape)) * dt.itemsize
            buf = fh.read(n)
            if len(buf) != n:
                raise IntegrityError(f"{path}: truncated while reading {key}")
            section, name = key.split("/", 1)
            sections[section][name] = np.frombuffer(buf, dtype=dt).reshape(shape).copy()
        if fh.read(1):
            raise IntegrityError(f"{path}: trailing bytes after the last array")
    optimizer = None
    if header["optimizer_t"] is not None:
        optimizer = {"t": header["optimizer_t"], "m": sections["adam_m"], "v": sections["adam_v"]}
    return Checkpoint(
        kind=header["kind"],
        model_config=ModelConfig.from_dict(header["model_config"]),
        params=sections["param"],
        meta=header["meta"],
        optimizer=optimizer,
        best_params=sections["best"] or None,
    )


def config_diff(a: ModelConfig, b: ModelConfig) -> dict[str, tuple]:
    da, db = a.to_dict(), b.to_dict()
    return {k: (da[k], db[k]) for k in da if da[k] != db[k]}


def load_into(model, ckpt: Checkpoint, use_best: bool = False) -> None:
    """Copy checkpoint parameters into ``model``; refuses on any config mismatch."""
    diff = config_diff(model.config, ckpt.model_config)
    if diff:
        lines = ", ".join(f"{k}: model={v[0]!r} checkpoint={v[1]!r}" for k, v in sorted(diff.items()))
        raise IntegrityError(f"model config differs from checkpoint config ({lines})")
    params = ckpt.best_params if use_best and ckpt.best_params is not None else ckpt.params
    model.load_state_dict(params)


def build_from_checkpoint(ckpt: Checkpoint, use_best: bool = True):
    """Instantiate the teacher or student described by ``ckpt`` with its weights."""
    from .transformer import build_student, build_teacher

    if ckpt.kind == "student":
        model = build_student(ckpt.model_config, 0)
    elif ckpt.kind == "teacher":
        model = build_teacher(ckpt.model_config, 0, causal=bool(ckpt.meta.get("causal", False)))
    else:
        raise IntegrityError(f"unknown checkpoint kind {ckpt.kind!r}")
    load_into(model, ckpt, use_best=use_best)
    return model.eval()
