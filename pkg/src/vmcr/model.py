"""Tiny configurable U-Net emitting two-channel logits (artery, vein).

No normalization layers: keeps the op set small and avoids train/eval mode
state. He (fan-in) init, zero biases. The same topology is instantiated
twice as student and teacher; the teacher starts as an exact copy and never
receives gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, concat_channels, conv2d, maxpool2, no_grad, upsample_nearest2
from .errors import ConfigError, ShapeError


@dataclass
class UNetConfig:
    depth: int = 3
    base_channels: int = 8
    in_channels: int = 3
    out_channels: int = 2  # one sigmoid head per vessel class

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.out_channels != 2:
            raise ConfigError("out_channels is fixed at 2 (artery, vein)")


@dataclass
class ModelPair:
    student: dict[str, Tensor]
    teacher: dict[str, Tensor]
    config: UNetConfig = field(default_factory=UNetConfig)


def layer_shapes(cfg: UNetConfig) -> dict[str, tuple]:
    """Per-layer parameter shapes, in deterministic construction order."""
    chans = [cfg.base_channels * 2 ** i for i in range(cfg.depth + 1)]
    shapes: dict[str, tuple] = {}

    def block(prefix, cin, cout):
        shapes[f"{prefix}.conv1.w"] = (cout, cin, 3, 3)
        shapes[f"{prefix}.conv1.b"] = (cout,)
        shapes[f"{prefix}.conv2.w"] = (cout, cout, 3, 3)
        shapes[f"{prefix}.conv2.b"] = (cout,)

    prev = cfg.in_channels
    for i in range(cfg.depth):
        block(f"enc{i}", prev, chans[i])
        prev = chans[i]
    block("bottleneck", chans[cfg.depth - 1], chans[cfg.depth])
    for i in reversed(range(cfg.depth)):
        block(f"dec{i}", chans[i + 1] + chans[i], chans[i])
    shapes["head.w"] = (cfg.out_channels, chans[0], 1, 1)
    shapes["head.b"] = (cfg.out_channels,)
    return shapes


def param_count(cfg: UNetConfig) -> int:
    return sum(int(np.prod(s)) for s in layer_shapes(cfg).values())


def init_params(cfg: UNetConfig, seed: int, dtype=np.float32) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in layer_shapes(cfg).items():
        if name.endswith(".b"):
            data = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            data = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        params[name] = Tensor(data, requires_grad=True)
    return params


def build(cfg: UNetConfig, seed: int) -> ModelPair:
    """He-initialized student; teacher starts as an exact copy (no grads)."""
    student = init_params(cfg, seed)
    teacher = {k: Tensor(p.data.copy(), requires_grad=False)
               for k, p in student.items()}
    return ModelPair(student=student, teacher=teacher, config=cfg)


def _double_conv(params, prefix, x: Tensor) -> Tensor:
    x = conv2d(x, params[f"{prefix}.conv1.w"], params[f"{prefix}.conv1.b"], pad=1).relu()
    x = conv2d(x, params[f"{prefix}.conv2.w"], params[f"{prefix}.conv2.b"], pad=1).relu()
    return x


def forward(params: dict[str, Tensor], x, cfg: UNetConfig,
            with_grad: bool = True) -> Tensor:
    """Run the U-Net; returns N x 2 x H x W logits.

    with_grad=False builds no graph (teacher inference path).
    """
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"expected NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if c != cfg.in_channels:
        raise ShapeError(f"input channels {c} != configured {cfg.in_channels}")
    div = 2 ** cfg.depth
    if h % div or w % div:
        raise ShapeError(f"spatial dims {h}x{w} not divisible by 2^depth={div}")

    if not with_grad:
        with no_grad():
            return forward(params, x, cfg, with_grad=True)

    skips = []
    cur = x
    for i in range(cfg.depth):
        cur = _double_conv(params, f"enc{i}", cur)
        skips.append(cur)
        cur = maxpool2(cur)
    cur = _double_conv(params, "bottleneck", cur)
    for i in reversed(range(cfg.depth)):
        cur = upsample_nearest2(cur)
        cur = _double_conv(params, f"dec{i}", concat_channels(cur, skips[i]))
    return conv2d(cur, params["head.w"], params["head.b"], pad=0)


def clone_params(params: dict[str, Tensor], requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(p.data.copy(), requires_grad=requires_grad)
            for k, p in params.items()}
