"""U-Net, U-Net++ (3D) and DenseNet (2D) builders plus sliding-window inference."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from . import nn
from .nn import Graph, ShapeError, Tensor
from .volume import Volume

__all__ = [
    "UNetSpec",
    "UNetPPSpec",
    "DenseNetSpec",
    "UNet3D",
    "UNetPP3D",
    "DenseNet2D",
    "build_unet3d",
    "build_unetpp3d",
    "build_densenet2d",
    "build_model",
    "sliding_window_positions",
    "predict_probability",
]


@dataclass(frozen=True)
class UNetSpec:
    in_channels: int = 1
    base_width: int = 8
    depth: int = 3
    classes: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.depth < 1 or self.base_width < 1 or self.in_channels < 1:
            raise ValueError(f"invalid network spec {self}")
        if self.classes != 2:
            raise ValueError("only 2-class (background, lesion) outputs are supported")

    def width(self, level: int) -> int:
        return self.base_width * 2**level


@dataclass(frozen=True)
class UNetPPSpec(UNetSpec):
    pass


@dataclass(frozen=True)
class DenseNetSpec:
    in_channels: int = 1
    growth_rate: int = 8
    layers_per_block: int = 2
    blocks: int = 2
    classes: int = 2
    stem_channels: int = 8
    compression: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.growth_rate < 1 or self.blocks < 1 or self.layers_per_block < 1:
            raise ValueError(f"invalid DenseNet spec {self}")
        if self.classes != 2:
            raise ValueError("only 2-class outputs are supported")


class _SegNet(Graph):
    """Shared pieces of the 3D encoder-decoder networks."""

    leaky_slope = 0.01

    def __init__(self, spec: UNetSpec):
        super().__init__(spec.seed)
        self.spec = spec

    def _double_conv_params(self, prefix: str, cin: int, cout: int) -> None:
        for i, (a, b) in enumerate(((cin, cout), (cout, cout))):
            self.add_param(f"{prefix}.conv{i}.w", (b, a, 3, 3, 3))
            self.add_param(f"{prefix}.conv{i}.b", (b,), "zeros")
            self.add_param(f"{prefix}.norm{i}.gamma", (b,), "ones")
            self.add_param(f"{prefix}.norm{i}.beta", (b,), "zeros")

    def _double_conv(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        for i in range(2):
            x = nn.conv(x, p[f"{prefix}.conv{i}.w"], p[f"{prefix}.conv{i}.b"], padding=1)
            x = nn.instance_norm(x, p[f"{prefix}.norm{i}.gamma"], p[f"{prefix}.norm{i}.beta"])
            x = nn.leaky_relu(x, self.leaky_slope)
        return x

    def _up_params(self, prefix: str, cin: int, cout: int) -> None:
        self.add_param(f"{prefix}.w", (cin, cout, 2, 2, 2), fan_in=cin * 8)
        self.add_param(f"{prefix}.b", (cout,), "zeros")

    def _up(self, prefix: str, x: Tensor) -> Tensor:
        return nn.conv_transpose(x, self.params[f"{prefix}.w"], self.params[f"{prefix}.b"], stride=2)

    def _head_params(self) -> None:
        self.add_param("head.w", (self.spec.classes, self.spec.width(0), 1, 1, 1))
        self.add_param("head.b", (self.spec.classes,), "zeros")

    def _head(self, x: Tensor) -> Tensor:
        return nn.softmax_channels(nn.conv(x, self.params["head.w"], self.params["head.b"]))

    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 5 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(f"expected (N, {self.spec.in_channels}, X, Y, Z) input, got {x.shape}")
        div = 2**self.spec.depth
        if any(n % div for n in x.shape[2:]):
            raise ShapeError(f"spatial size {x.shape[2:]} not divisible by 2^depth = {div}")


class UNet3D(_SegNet):
    """Encoder of ``depth`` (double conv, max-pool) stages, a bottleneck double
    conv, and a symmetric decoder of (transposed conv, skip concat, double
    conv). Output is a two-channel softmax."""

    def __init__(self, spec: UNetSpec):
        super().__init__(spec)
        s = spec
        for i in range(s.depth + 1):
            self._double_conv_params(f"enc{i}", s.in_channels if i == 0 else s.width(i - 1), s.width(i))
        for i in reversed(range(s.depth)):
            self._up_params(f"up{i}", s.width(i + 1), s.width(i))
            self._double_conv_params(f"dec{i}", 2 * s.width(i), s.width(i))
        self._head_params()

    def forward(self, x: Tensor) -> Tensor:
        self._check_input(x)
        skips = []
        for i in range(self.spec.depth):
            x = self._double_conv(f"enc{i}", x)
            skips.append(x)
            x = nn.max_pool(x, 2)
        x = self._double_conv(f"enc{self.spec.depth}", x)
        for i in reversed(range(self.spec.depth)):
            x = nn.concat_channels([skips[i], self._up(f"up{i}", x)])
            x = self._double_conv(f"dec{i}", x)
        return self._head(x)


class UNetPP3D(_SegNet):
    """Nested U-Net: node X(i, j) for ``i + j <= depth``.

    X(i, 0) is the encoder; X(i, j) double-convolves the concatenation of
    X(i, 0..j-1) and the upsampled X(i+1, j-1). The head reads X(0, depth);
    there is no deep supervision.
    """

    def __init__(self, spec: UNetPPSpec):
        super().__init__(spec)
        s = spec
        for i in range(s.depth + 1):
            self._double_conv_params(f"x{i}_0", s.in_channels if i == 0 else s.width(i - 1), s.width(i))
        for j in range(1, s.depth + 1):
            for i in range(s.depth - j + 1):
                self._up_params(f"up{i}_{j}", s.width(i + 1), s.width(i))
                self._double_conv_params(f"x{i}_{j}", (j + 1) * s.width(i), s.width(i))
        self._head_params()

    def forward(self, x: Tensor) -> Tensor:
        self._check_input(x)
        d = self.spec.depth
        nodes: Dict[Tuple[int, int], Tensor] = {}
        h = x
        for i in range(d + 1):
            if i > 0:
                h = nn.max_pool(nodes[(i - 1, 0)], 2)
            nodes[(i, 0)] = self._double_conv(f"x{i}_0", h)
            # fill the diagonal that becomes computable once X(i, 0) exists
            for j in range(1, i + 1):
                r = i - j
                ins = [nodes[(r, k)] for k in range(j)] + [self._up(f"up{r}_{j}", nodes[(r + 1, j - 1)])]
                nodes[(r, j)] = self._double_conv(f"x{r}_{j}", nn.concat_channels(ins))
        return self._head(nodes[(0, d)])


class DenseNet2D(Graph):
    """Stem conv, then ``blocks`` x (dense block, transition), global average
    pool, linear head, 2-class softmax. Returns class probabilities (N, 2)."""

    def __init__(self, spec: DenseNetSpec):
        super().__init__(spec.seed)
        self.spec = spec
        s = spec
        self.add_param("stem.w", (s.stem_channels, s.in_channels, 3, 3))
        self.add_param("stem.b", (s.stem_channels,), "zeros")
        c = s.stem_channels
        self.channel_trace: List[int] = [c]
        for bi in range(s.blocks):
            for li in range(s.layers_per_block):
                self._bn_params(f"b{bi}.l{li}.bn", c)
                self.add_param(f"b{bi}.l{li}.w", (s.growth_rate, c, 3, 3))
                self.add_param(f"b{bi}.l{li}.b", (s.growth_rate,), "zeros")
                c += s.growth_rate
                self.channel_trace.append(c)
            cout = max(1, int(c * s.compression))
            self._bn_params(f"t{bi}.bn", c)
            self.add_param(f"t{bi}.w", (cout, c, 1, 1))
            self.add_param(f"t{bi}.b", (cout,), "zeros")
            c = cout
            self.channel_trace.append(c)
        self.add_param("fc.w", (c, s.classes), fan_in=c)
        self.add_param("fc.b", (s.classes,), "zeros")

    def _bn_params(self, prefix: str, c: int) -> None:
        self.add_param(f"{prefix}.gamma", (c,), "ones")
        self.add_param(f"{prefix}.beta", (c,), "zeros")
        self.add_buffer(f"{prefix}.running_mean", np.zeros(c))
        self.add_buffer(f"{prefix}.running_var", np.ones(c))

    def _bn_relu(self, prefix: str, x: Tensor) -> Tensor:
        p, b = self.params, self.buffers
        x = nn.batch_norm(
            x,
            p[f"{prefix}.gamma"],
            p[f"{prefix}.beta"],
            b[f"{prefix}.running_mean"],
            b[f"{prefix}.running_var"],
            training=self.training,
        )
        return nn.relu(x)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(f"expected (N, {self.spec.in_channels}, H, W) input, got {x.shape}")
        p = self.params
        h = nn.conv(x, p["stem.w"], p["stem.b"], padding=1)
        for bi in range(self.spec.blocks):
            feats = [h]
            for li in range(self.spec.layers_per_block):
                inp = feats[0] if len(feats) == 1 else nn.concat_channels(feats)
                y = self._bn_relu(f"b{bi}.l{li}.bn", inp)
                feats.append(nn.conv(y, p[f"b{bi}.l{li}.w"], p[f"b{bi}.l{li}.b"], padding=1))
            h = nn.concat_channels(feats)
            h = nn.conv(self._bn_relu(f"t{bi}.bn", h), p[f"t{bi}.w"], p[f"t{bi}.b"])
            if min(h.shape[2:]) >= 2:
                h = nn.avg_pool(h, 2)
        logits = nn.dense(nn.global_avg_pool(h), p["fc.w"], p["fc.b"])
        return nn.softmax_channels(logits)


def build_unet3d(spec: UNetSpec) -> UNet3D:
    return UNet3D(spec)


def build_unetpp3d(spec: UNetPPSpec) -> UNetPP3D:
    return UNetPP3D(spec)


def build_densenet2d(spec: DenseNetSpec) -> DenseNet2D:
    return DenseNet2D(spec)


def build_model(kind: str, spec: dict) -> Graph:
    """Build from a serialized spec (``kind`` in unet, unetpp, densenet)."""
    if kind == "unet":
        return UNet3D(UNetSpec(**spec))
    if kind == "unetpp":
        return UNetPP3D(UNetPPSpec(**spec))
    if kind == "densenet":
        return DenseNet2D(DenseNetSpec(**spec))
    raise ValueError(f"unknown model kind {kind!r}")


# ---------------------------------------------------------------------------
# Sliding-window inference
# ---------------------------------------------------------------------------


def sliding_window_positions(n: int, patch: int, overlap: float) -> List[int]:
    """Window starts covering ``[0, n)``; symmetric under ``s -> n - patch - s``."""
    if patch >= n:
        return [0]
    step = max(1, int(patch * (1.0 - overlap)))
    count = int(np.ceil((n - patch) / step)) + 1
    span = n - patch
    pos = [0] * count
    for i in range((count + 1) // 2):
        pos[i] = int(np.floor(i * span / (count - 1) + 0.5))
        pos[count - 1 - i] = span - pos[i]
    return pos


def _pad_to(arr: np.ndarray, shape) -> Tuple[np.ndarray, Tuple[slice, ...]]:
    pads = []
    for n, p in zip(arr.shape, shape):
        extra = max(0, p - n)
        pads.append((extra // 2, extra - extra // 2))
    if not any(a or b for a, b in pads):
        return arr, tuple(slice(None) for _ in shape)
    mode = "reflect" if all(n > 1 for n in arr.shape) else "edge"
    crop = tuple(slice(a, a + n) for (a, _), n in zip(pads, arr.shape))
    return np.pad(arr, pads, mode=mode), crop


def predict_probability(
    g: Graph,
    v,
    patch: Sequence[int] = (32, 32, 32),
    overlap: float = 0.5,
    batch_size: int = 4,
) -> Volume:
    """Lesion-channel probability map by uniform-weight sliding windows.

    ``v`` may be a :class:`Volume` or a 3D array. Volumes smaller than the
    patch along an axis are padded reflectively and the output cropped back.
    """
    data = v.data if isinstance(v, Volume) else np.asarray(v, dtype=np.float32)
    if not 0.0 <= overlap < 1.0:
        raise ValueError("overlap must lie in [0, 1)")
    patch = tuple(int(p) for p in patch)
    padded, crop = _pad_to(data, patch)
    starts = [sliding_window_positions(n, p, overlap) for n, p in zip(padded.shape, patch)]
    acc = np.zeros(padded.shape, np.float64)
    hits = np.zeros(padded.shape, np.float64)
    windows = [(a, b, c) for a in starts[0] for b in starts[1] for c in starts[2]]
    for k in range(0, len(windows), batch_size):
        chunk = windows[k : k + batch_size]
        sl = [tuple(slice(s, s + p) for s, p in zip(w, patch)) for w in chunk]
        batch = np.stack([padded[s][None] for s in sl]).astype(np.float32)
        probs = g.predict(batch)[:, 1]
        for s, pr in zip(sl, probs):
            acc[s] += pr
            hits[s] += 1.0
    out = (acc / hits)[crop]
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    if isinstance(v, Volume):
        return v.with_data(out)
    return Volume(out)
