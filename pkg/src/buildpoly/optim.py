"""Adam optimizer and the binary checkpoint format.

Checkpoint byte layout (all integers little-endian)::

    offset 0   8 bytes   magic b"BPCKPT01"
    offset 8   8 bytes   uint64 header length L
    offset 16  L bytes   UTF-8 JSON header
    offset 16+L          payload: raw float64 ("<f8") buffers, C order

The header is ``{"format": 1, "tensors": [...], "meta": {...}}`` where each
tensor entry is ``{"name", "shape", "dtype": "<f8", "offset", "nbytes"}`` and
``offset`` counts from the start of the payload.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import DataFormatError

MAGIC = b"BPCKPT01"


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = None


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    # updates each parameter has received; bias correction uses these, so a
    # parameter that sat out a training phase starts with a fresh correction
    t: dict[str, int] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray | None],
    state: AdamState,
    hyper: AdamConfig,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One Adam update.

    Parameters whose gradient is missing (``None``) are skipped entirely:
    value, moments and update count stay as they are. A zero array is a real
    gradient and counts as an update.
    """
    g_all = {k: grads[k] for k in params if grads.get(k) is not None}
    for k, g in g_all.items():
        if g.shape != params[k].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[k].shape} for {k}")
    if hyper.clip_norm is not None and g_all:
        total = np.sqrt(sum(float(np.sum(g * g)) for g in g_all.values()))
        if total > hyper.clip_norm:
            g_all = {k: g * (hyper.clip_norm / total) for k, g in g_all.items()}
    new_params, m_new, v_new, t_new = dict(params), dict(state.m), dict(state.v), dict(state.t)
    for k, g in g_all.items():
        p = params[k]
        t = state.t.get(k, 0) + 1
        m = hyper.beta1 * state.m.get(k, np.zeros_like(p)) + (1 - hyper.beta1) * g
        v = hyper.beta2 * state.v.get(k, np.zeros_like(p)) + (1 - hyper.beta2) * g * g
        m_hat = m / (1 - hyper.beta1**t)
        v_hat = v / (1 - hyper.beta2**t)
        new_params[k] = p - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
        m_new[k], v_new[k], t_new[k] = m, v, t
    return new_params, AdamState(step=state.step + 1, m=m_new, v=v_new, t=t_new)


class Adam:
    """Stateful wrapper that updates :class:`Tensor` parameters in place."""

    def __init__(self, params: dict[str, Tensor], config: AdamConfig | None = None):
        self.params = params
        self.config = config or AdamConfig()
        self.state = AdamState()

    def step(self) -> None:
        arrays = {k: p.data for k, p in self.params.items()}
        grads = {k: p.grad for k, p in self.params.items()}
        new, self.state = adam_step(arrays, grads, self.state, self.config)
        for k, p in self.params.items():
            p.data = new[k]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k, m in self.state.m.items():
            out[f"adam.m.{k}"] = m
            out[f"adam.v.{k}"] = self.state.v[k]
            out[f"adam.t.{k}"] = np.array(float(self.state.t[k]))
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step: int) -> None:
        self.state = AdamState(
            step=step,
            m={k[len("adam.m."):]: v for k, v in arrays.items() if k.startswith("adam.m.")},
            v={k[len("adam.v."):]: v for k, v in arrays.items() if k.startswith("adam.v.")},
            t={k[len("adam.t."):]: int(v) for k, v in arrays.items() if k.startswith("adam.t.")},
        )


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, buffers, offset = [], [], 0
    for name in sorted(arrays):
        buf = np.ascontiguousarray(arrays[name], dtype="<f8").tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(np.shape(arrays[name])),
                "dtype": "<f8",
                "offset": offset,
                "nbytes": len(buf),
            }
        )
        buffers.append(buf)
        offset += len(buf)
    header = json.dumps({"format": 1, "tensors": entries, "meta": meta or {}}).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for buf in buffers:
            fh.write(buf)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise DataFormatError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: corrupt header: {exc}") from exc
    base = 16 + hlen
    arrays = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        chunk = raw[start : start + entry["nbytes"]]
        if len(chunk) != entry["nbytes"]:
            raise DataFormatError(f"{path}: truncated buffer for {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype=entry["dtype"]).reshape(entry["shape"]).copy()
    return arrays, header.get("meta", {})
