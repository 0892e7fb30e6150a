"""Parameter containers and the composite layers of both backbones.

Parameters are addressed by dotted paths (``attn1.mask.down0.conv1.weight``)
built from attribute names in registration order, so names and
initialisation order are stable across runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import ops
from .tensor import Tensor, add, mul


class ConfigurationError(ValueError):
    """An architecture description cannot be built."""


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def state_dict(self) -> dict[str, np.ndarray]:
        """Parameters then buffers, keyed by dotted name (arrays are live references)."""
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, arr in own.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise ValueError(f"{name}: expected dims {arr.shape}, got {src.shape}")
            arr[...] = src

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(arr.astype(dtype), requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, pad: int = 0,
                 bias: bool = True, rng: Optional[np.random.Generator] = None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride, self.pad = stride, pad
        # He-normal on fan-in
        std = np.sqrt(2.0 / (cin * k * k))
        self.weight = _param(rng.standard_normal((cout, cin, k, k)) * std, dtype)
        self.bias = _param(np.zeros(cout), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.scale = _param(np.ones(channels), dtype)
        self.shift = _param(np.zeros(channels), dtype)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ops.batchnorm2d(x, self.scale, self.shift, self.running_mean, self.running_var,
                               self.training, self.momentum, self.eps)


class Dense(Module):
    def __init__(self, fin: int, fout: int, rng: Optional[np.random.Generator] = None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = np.sqrt(6.0 / (fin + fout))
        self.weight = _param(rng.uniform(-bound, bound, (fin, fout)), dtype)
        self.bias = _param(np.zeros(fout), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.dense(x, self.weight, self.bias)


# -- residual unit ----------------------------------------------------------

@dataclass(frozen=True)
class ResidualUnitSpec:
    in_channels: int
    out_channels: int
    stride: int = 1

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ConfigurationError(f"residual unit stride must be 1 or 2, got {self.stride}")

    @property
    def projection(self) -> bool:
        return self.in_channels != self.out_channels or self.stride != 1


class ResidualUnit(Module):
    """relu(BN(conv3x3(relu(BN(conv3x3(x))))) + skip(x)); skip is a strided 1x1 conv + BN when shapes change."""

    def __init__(self, spec: ResidualUnitSpec, rng=None, dtype=np.float32):
        super().__init__()
        self.spec = spec
        cin, cout, s = spec.in_channels, spec.out_channels, spec.stride
        self.conv1 = Conv2d(cin, cout, 3, stride=s, pad=1, bias=False, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(cout, dtype=dtype)
        self.conv2 = Conv2d(cout, cout, 3, stride=1, pad=1, bias=False, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(cout, dtype=dtype)
        if spec.projection:
            self.proj = Conv2d(cin, cout, 1, stride=s, pad=0, bias=False, rng=rng, dtype=dtype)
            self.proj_bn = BatchNorm2d(cout, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.dims[1] != self.spec.in_channels:
            raise ops.DimensionError(
                f"residual unit expects {self.spec.in_channels} channels, got {x.dims[1]}"
            )
        h = ops.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        skip = self.proj_bn(self.proj(x)) if self.spec.projection else x
        return ops.relu(add(h, skip))


# -- attention module -------------------------------------------------------

@dataclass(frozen=True)
class AttentionModuleSpec:
    channels: int
    trunk_depth: int = 2
    mask_levels: int = 2
    units_per_level: int = 1
    combine: str = "residual"  # "residual": (1 + M) * T ; "plain": M * T

    def __post_init__(self):
        if self.channels < 1 or self.trunk_depth < 1 or self.mask_levels < 1 or self.units_per_level < 1:
            raise ConfigurationError(f"invalid attention module spec {self}")
        if self.combine not in ("residual", "plain"):
            raise ConfigurationError(f"unknown combine rule {self.combine!r}")

    def check_input_size(self, h: int, w: int) -> None:
        """Spatial dims must survive ``mask_levels`` exact halvings."""
        div = 2 ** self.mask_levels
        if h % div or w % div:
            raise ConfigurationError(
                f"attention module with {self.mask_levels} mask levels needs spatial dims divisible "
                f"by {div}, got {h}x{w}"
            )


def _unit_stack(n: int, channels: int, rng, dtype) -> Module:
    stack = Module()
    for i in range(n):
        setattr(stack, f"unit{i}", ResidualUnit(ResidualUnitSpec(channels, channels), rng=rng, dtype=dtype))
    return stack


def _run_stack(stack: Module, x: Tensor) -> Tensor:
    for unit in stack._modules.values():
        x = unit(x)
    return x


class MaskBranch(Module):
    """Bottom-up/top-down soft mask with values in (0, 1), same dims as its input.

    Descent level i: maxpool(2) then residual unit(s).  Ascent level i:
    bilinear upsample to the level-i resolution, add the level-i feature
    (the input itself for i = 0), residual unit(s).  A 1x1 conv and a
    sigmoid produce the mask.
    """

    def __init__(self, spec: AttentionModuleSpec, rng=None, dtype=np.float32):
        super().__init__()
        self.spec = spec
        c = spec.channels
        for i in range(spec.mask_levels):
            setattr(self, f"down{i}", _unit_stack(spec.units_per_level, c, rng, dtype))
        for i in reversed(range(spec.mask_levels)):
            setattr(self, f"up{i}", _unit_stack(spec.units_per_level, c, rng, dtype))
        self.out = Conv2d(c, c, 1, bias=True, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        feats = [x]
        h = x
        for i in range(self.spec.mask_levels):
            h = _run_stack(getattr(self, f"down{i}"), ops.maxpool2d(h, 2, 2))
            feats.append(h)
        for i in reversed(range(self.spec.mask_levels)):
            ref = feats[i]
            h = ops.upsample_bilinear(h, ref.dims[2], ref.dims[3])
            h = _run_stack(getattr(self, f"up{i}"), add(h, ref))
        return ops.sigmoid(self.out(h))


class AttentionModule(Module):
    """Trunk of residual units gated by a mask branch: out = (1 + M) * T."""

    def __init__(self, spec: AttentionModuleSpec, rng=None, dtype=np.float32):
        super().__init__()
        self.spec = spec
        self.trunk = _unit_stack(spec.trunk_depth, spec.channels, rng, dtype)
        self.mask = MaskBranch(spec, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (output, mask); the mask is kept for visualisation."""
        self.spec.check_input_size(x.dims[2], x.dims[3])
        t = _run_stack(self.trunk, x)
        m = self.mask(x)
        if self.spec.combine == "plain":
            return mul(m, t), m
        return mul(add(m, 1.0), t), m
