"""MLP velocity field ``v(x, t)``, its target copy, and the binary checkpoint format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import ParamVector, Tensor

HIDDEN = (64, 64, 64)
MAGIC = b"OATFM1"


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


def make_layout(d: int, hidden=HIDDEN) -> tuple:
    sizes = (d + 1, *hidden, d)
    layout = []
    offset = 0
    for k in range(len(sizes) - 1):
        for name, shape in ((f"W{k}", (sizes[k], sizes[k + 1])), (f"b{k}", (sizes[k + 1],))):
            layout.append((name, offset, shape))
            offset += int(np.prod(shape))
    return tuple(layout)


@dataclass(frozen=True)
class VelocityField:
    """Fully connected network on ``concat(x, t)`` with SELU hidden activations and a linear head."""

    params: ParamVector
    d: int
    hidden: tuple[int, ...] = HIDDEN

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.d + 1, *self.hidden, self.d)

    def with_params(self, data: np.ndarray) -> VelocityField:
        return VelocityField(self.params.with_data(data), self.d, self.hidden)

    def __call__(self, x, t):
        return forward(self, x, t)


def init(d: int, seed: int, hidden=HIDDEN, zero_head: bool = False) -> VelocityField:
    """Seeded init: weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero."""
    if d < 1:
        raise ValueError("d must be at least 1")
    hidden = tuple(int(h) for h in hidden)
    layout = make_layout(d, hidden)
    rng = np.random.default_rng(seed)
    n = layout[-1][1] + int(np.prod(layout[-1][2]))
    data = np.zeros(n)
    n_layers = len(hidden) + 1
    for name, start, shape in layout:
        if name.startswith("W"):
            if zero_head and name == f"W{n_layers - 1}":
                continue
            bound = 1.0 / np.sqrt(shape[0])
            data[start : start + shape[0] * shape[1]] = rng.uniform(-bound, bound, size=shape[0] * shape[1])
    return VelocityField(ParamVector(data, layout), d, hidden)


def _prep_inputs(d: int, x, t):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != d:
        raise ValueError(f"expected positions of dimension {d}, got {x.shape[1]}")
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        t = np.full(x.shape[0], float(t))
    t = t.reshape(-1)
    if t.size != x.shape[0]:
        raise ValueError(f"got {t.size} times for {x.shape[0]} positions")
    return x, t, single


def forward_params(data: np.ndarray, layout, d: int, x, t) -> np.ndarray:
    """Plain numpy forward pass from a raw parameter array (no graph)."""
    x, t, single = _prep_inputs(d, x, t)
    h = np.concatenate([x, t[:, None]], axis=1)
    blocks = ParamVector(data, layout).blocks()
    n_layers = len(layout) // 2
    for k in range(n_layers):
        h = h @ blocks[f"W{k}"] + blocks[f"b{k}"]
        if k < n_layers - 1:
            h = dc.SELU_SCALE * np.where(h > 0, h, dc.SELU_ALPHA * np.expm1(np.minimum(h, 0.0)))
    if not np.all(np.isfinite(h)):
        raise dc.NonFiniteError("forward")
    return h[0] if single else h


def forward(field: VelocityField, x, t) -> np.ndarray:
    """Velocities at positions ``x`` (n x d, or one d-vector) and times ``t`` (scalar or n-vector)."""
    return forward_params(field.params.data, field.params.layout, field.d, x, t)


def forward_traced(flat: Tensor, layout, d: int, x, t) -> Tensor:
    """Forward pass recorded on the autodiff tape; ``flat`` is the parameter leaf."""
    x, t, _ = _prep_inputs(d, x, t)
    h = Tensor(np.concatenate([x, t[:, None]], axis=1))
    n_layers = len(layout) // 2
    for k in range(n_layers):
        (_, sw, shw), (_, sb, shb) = layout[2 * k], layout[2 * k + 1]
        h = dc.matmul(h, dc.block(flat, sw, shw)) + dc.block(flat, sb, shb)
        if k < n_layers - 1:
            h = dc.selu(h)
    return h


@dataclass
class TargetField:
    """Delayed copy of the online parameters.

    ``policy`` is ``"ema"`` (blend with ``decay`` every update) or ``"hard_copy"``
    (copy the online parameters whenever ``step % period == 0``).
    """

    params: ParamVector
    d: int
    hidden: tuple[int, ...] = HIDDEN
    policy: str = "hard_copy"
    decay: float = 0.999
    period: int = 500

    def __post_init__(self):
        if self.policy not in ("ema", "hard_copy"):
            raise ValueError(f"unknown target policy {self.policy!r}")
        if self.policy == "ema" and not 0.0 <= self.decay <= 1.0:
            raise ValueError("EMA decay must lie in [0, 1]")
        if self.policy == "hard_copy" and self.period < 1:
            raise ValueError("hard-copy period must be positive")

    @classmethod
    def from_online(cls, online: VelocityField, **policy) -> TargetField:
        return cls(online.params.with_data(online.params.data), online.d, online.hidden, **policy)

    def as_field(self) -> VelocityField:
        return VelocityField(self.params, self.d, self.hidden)

    def __call__(self, x, t):
        return forward_params(self.params.data, self.params.layout, self.d, x, t)


def update_target(target: TargetField, online: VelocityField, step: int) -> TargetField:
    if target.params.layout != online.params.layout:
        raise ValueError("target and online parameter layouts differ")
    if target.policy == "ema":
        lam = target.decay
        data = lam * target.params.data + (1.0 - lam) * online.params.data
    elif step % target.period == 0:
        data = online.params.data
    else:
        return target
    return TargetField(target.params.with_data(data), target.d, target.hidden, target.policy, target.decay, target.period)


# checkpoint layout: magic, u32 d, u32 n_layer_sizes, u32 sizes..., u64 n_params, f64 params (all little-endian)


def save_checkpoint(field: VelocityField, path) -> None:
    sizes = field.layer_sizes
    header = MAGIC + struct.pack("<II", field.d, len(sizes)) + struct.pack(f"<{len(sizes)}I", *sizes)
    header += struct.pack("<Q", field.params.data.size)
    Path(path).write_bytes(header + field.params.data.astype("<f8").tobytes())


def load_checkpoint(path) -> VelocityField:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not an oatflow checkpoint")
    try:
        pos = len(MAGIC)
        d, n_sizes = struct.unpack_from("<II", raw, pos)
        pos += 8
        sizes = struct.unpack_from(f"<{n_sizes}I", raw, pos)
        pos += 4 * n_sizes
        (n_params,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated header") from e
    if n_sizes < 2 or sizes[0] != d + 1 or sizes[-1] != d:
        raise CheckpointError(f"{path}: layer sizes {sizes} inconsistent with d={d}")
    hidden = tuple(sizes[1:-1])
    layout = make_layout(d, hidden)
    expected = layout[-1][1] + int(np.prod(layout[-1][2]))
    if n_params != expected or len(raw) - pos != 8 * n_params:
        raise CheckpointError(f"{path}: parameter count mismatch")
    data = np.frombuffer(raw, dtype="<f8", offset=pos, count=n_params).astype(np.float64)
    return VelocityField(ParamVector(data, layout), d, hidden)
