"""Parameter containers, checkpoints and finite-difference gradient checks."""
from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional

import numpy as np

from .tensor import Node, Tensor, backward, no_grad, tracing

__all__ = ["Graph", "save_checkpoint", "load_checkpoint", "gradient_check", "CheckpointError"]


class CheckpointError(ValueError):
    pass


class Graph:
    """A differentiable network: named parameters plus a ``forward`` method.

    Subclasses register parameters in ``__init__`` through :meth:`add_param`
    and implement :meth:`forward`. The primitive sequence of one forward
    pass is available through :meth:`trace`.
    """

    def __init__(self, seed: int = 0):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.training = True
        self._rng = np.random.default_rng(seed)

    # construction ---------------------------------------------------------
    def add_param(self, name: str, shape, init: str = "he", fan_in: Optional[int] = None) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        if init == "zeros":
            data = np.zeros(shape, np.float32)
        elif init == "ones":
            data = np.ones(shape, np.float32)
        elif init == "he":
            fan = fan_in if fan_in is not None else int(np.prod(shape[1:]))
            data = (self._rng.standard_normal(shape) * np.sqrt(2.0 / max(fan, 1))).astype(np.float32)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        arr = np.asarray(value, dtype=np.float32).copy()
        self.buffers[name] = arr
        return arr

    # execution ------------------------------------------------------------
    def forward(self, x: Tensor) -> Tensor:  # pragma: no cover - abstract
        raise NotImplementedError

    def __call__(self, x) -> Tensor:
        return self.forward(x if isinstance(x, Tensor) else Tensor(x))

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Forward pass in eval mode without building a backward graph."""
        was = self.training
        self.training = False
        try:
            with no_grad():
                return self(x).data
        finally:
            self.training = was

    def trace(self, x) -> List[Node]:
        with tracing() as nodes:
            self(x)
        return list(nodes)

    # bookkeeping ----------------------------------------------------------
    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def gradients(self) -> Dict[str, np.ndarray]:
        return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict((k, p.data) for k, p in self.params.items())
        out.update(self.buffers)
        return out

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        expected = list(self.params) + list(self.buffers)
        missing = [k for k in expected if k not in state]
        if missing:
            raise CheckpointError(f"checkpoint missing entries: {missing[:5]}")
        for k, p in self.params.items():
            arr = np.asarray(state[k], dtype=np.float32)
            if arr.shape != p.data.shape:
                raise CheckpointError(f"{k}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()
        for k, buf in self.buffers.items():
            buf[...] = state[k]

    def save(self, path) -> None:
        save_checkpoint(self.state_dict(), path)

    def load(self, path) -> None:
        self.load_state_dict(load_checkpoint(path))


def save_checkpoint(state: Dict[str, np.ndarray], path) -> None:
    """Flat little-endian binary: count, then (name, rank, dims, float32 data)."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(state)))
        for name, arr in state.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr, dtype="<f4")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    buf = Path(path).read_bytes()
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    (count,) = take("<I")
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (nlen,) = take("<I")
        if pos + nlen > len(buf):
            raise CheckpointError(f"{path}: truncated checkpoint")
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        if pos + 4 * n > len(buf):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * n
    return out


def gradient_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: Optional[float] = None,
    n_samples: int = 32,
    seed: int = 0,
    dtype=np.float64,
) -> float:
    """Max relative error between backprop and central differences.

    ``loss_fn`` recomputes a scalar loss from the current values of
    ``params``. Entries are sampled uniformly across all parameters (all of
    them when there are fewer than ``n_samples``). Parameters are cast to
    ``dtype`` for the duration of the check and restored afterwards; the
    default step is 1e-5 in float64 and 1e-3 in float32.
    """
    params = list(params)
    if eps is None:
        eps = 1e-5 if np.dtype(dtype) == np.float64 else 1e-3
    if eps <= 0:
        raise ValueError("eps must be positive")
    saved = [(p.data, p.grad, p.requires_grad) for p in params]
    try:
        for p in params:
            p.data = p.data.astype(dtype)
            p.grad = None
            p.requires_grad = True
        backward(loss_fn())
        analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

        sizes = np.array([p.data.size for p in params])
        total = int(sizes.sum())
        rng = np.random.default_rng(seed)
        picks = np.arange(total) if total <= n_samples else rng.choice(total, size=n_samples, replace=False)
        bounds = np.cumsum(sizes)
        worst = 0.0
        with no_grad():
            for flat in np.sort(picks):
                which = int(np.searchsorted(bounds, flat, side="right"))
                local = int(flat - (bounds[which - 1] if which else 0))
                arr = params[which].data.reshape(-1)
                orig = arr[local]
                arr[local] = orig + eps
                up = float(loss_fn().data.sum())
                arr[local] = orig - eps
                down = float(loss_fn().data.sum())
                arr[local] = orig
                numeric = (up - down) / (2 * eps)
                a = float(analytic[which].reshape(-1)[local])
                worst = max(worst, abs(a - numeric) / max(1e-6, abs(numeric)))
        return worst
    finally:
        for p, (data, grad, rg) in zip(params, saved):
            p.data, p.grad, p.requires_grad = data, grad, rg
