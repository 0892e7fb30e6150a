"""Backbones, the two-headed multi-task model, and probability-averaging ensembles."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import ops
from .layers import (
    AttentionModule,
    AttentionModuleSpec,
    BatchNorm2d,
    ConfigurationError,
    Conv2d,
    Dense,
    Module,
    ResidualUnit,
    ResidualUnitSpec,
)
from .tensor import Tensor, as_tensor, no_grad, resolve_dtype

BACKBONES = ("attention_net", "resnet_lite")


class UnsupportedBackboneError(RuntimeError):
    """Requested operation does not exist for this backbone."""


@dataclass(frozen=True)
class MultiTaskModelSpec:
    """Declarative description of a multi-task model; fully determines the parameter layout.

    ``stage_channels`` is the per-stage channel plan.  For the attention net
    each entry is one attention module (``mask_levels`` aligned with it) and
    ``embedding_dim`` is the width of the final strided residual unit.  For
    the ResNet each entry is a stage of ``units_per_stage`` residual units
    and the embedding is the last stage's width.
    """

    backbone: str = "attention_net"
    input_size: int = 64
    num_age_buckets: int = 11
    gender_augmentation: bool = True
    detach_gender_input: bool = False
    stem_channels: int = 32
    stage_channels: tuple = (32, 64, 128)
    mask_levels: tuple = (2, 2, 1)
    trunk_depth: int = 2
    units_per_stage: int = 2
    embedding_dim: int = 256
    age_hidden: int = 64
    attention_combine: str = "residual"
    precision: str = "f32"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))
        object.__setattr__(self, "mask_levels", tuple(self.mask_levels))
        if self.backbone not in BACKBONES:
            raise ConfigurationError(f"unknown backbone {self.backbone!r}; expected one of {BACKBONES}")
        if self.num_age_buckets < 2 or self.embedding_dim < 1 or self.age_hidden < 1:
            raise ConfigurationError(f"invalid head sizes in {self}")
        if self.backbone == "attention_net" and len(self.mask_levels) != len(self.stage_channels):
            raise ConfigurationError("mask_levels must give one entry per attention module")
        if self.backbone == "resnet_lite" and self.embedding_dim != self.stage_channels[-1]:
            raise ConfigurationError("resnet_lite embedding_dim must equal the last stage width")
        resolve_dtype(self.precision)

    @property
    def gender_head_in(self) -> int:
        return self.embedding_dim

    @property
    def age_head_in(self) -> int:
        return self.embedding_dim + 2 if self.gender_augmentation else self.embedding_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["mask_levels"] = list(self.mask_levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MultiTaskModelSpec":
        return cls(**d)


def attention_net_spec(**overrides) -> MultiTaskModelSpec:
    """Default three-module attention network (stem 32, modules at 32/64/128, embedding 256)."""
    return MultiTaskModelSpec(backbone="attention_net", **overrides)


def resnet_lite_spec(**overrides) -> MultiTaskModelSpec:
    """ResNet-18 topology: 4 stages x 2 units at 64/128/256/512."""
    base = dict(backbone="resnet_lite", stem_channels=64, stage_channels=(64, 128, 256, 512),
                mask_levels=(), units_per_stage=2, embedding_dim=512)
    base.update(overrides)
    return MultiTaskModelSpec(**base)


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _stem_out(size: int) -> int:
    return _conv_out(_conv_out(size, 7, 2, 3), 2, 2, 0)


# -- backbones ---------------------------------------------------------------

class Stem(Module):
    """7x7 stride-2 conv, BN, ReLU, 2x2 max pool: total downsampling x4."""

    def __init__(self, cin, cout, rng, dtype):
        super().__init__()
        self.conv = Conv2d(cin, cout, 7, stride=2, pad=3, bias=False, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(cout, dtype=dtype)

    def forward(self, x):
        return ops.maxpool2d(ops.relu(self.bn(self.conv(x))), 2, 2)


class AttentionNet(Module):
    """stem -> [attention module -> strided residual unit] x K -> global average pool.

    The strided unit after the last module widens to ``embedding_dim``.
    """

    def __init__(self, spec: MultiTaskModelSpec, rng, dtype):
        super().__init__()
        self.module_specs = []
        self.stem = Stem(3, spec.stem_channels, rng, dtype)
        cin = spec.stem_channels
        for i, (c, levels) in enumerate(zip(spec.stage_channels, spec.mask_levels), start=1):
            if cin != c:
                setattr(self, f"adapt{i}", ResidualUnit(ResidualUnitSpec(cin, c, 1), rng=rng, dtype=dtype))
            mspec = AttentionModuleSpec(c, trunk_depth=spec.trunk_depth, mask_levels=levels,
                                        combine=spec.attention_combine)
            self.module_specs.append(mspec)
            setattr(self, f"attn{i}", AttentionModule(mspec, rng=rng, dtype=dtype))
            cout = spec.stage_channels[i] if i < len(spec.stage_channels) else spec.embedding_dim
            setattr(self, f"down{i}", ResidualUnit(ResidualUnitSpec(c, cout, 2), rng=rng, dtype=dtype))
            cin = cout

    @staticmethod
    def feature_sizes(spec: MultiTaskModelSpec) -> list[int]:
        """Spatial size entering each attention module, then the final map size."""
        s = _stem_out(spec.input_size)
        sizes = []
        for _ in spec.stage_channels:
            sizes.append(s)
            s = _conv_out(s, 3, 2, 1)
        sizes.append(s)
        return sizes

    @staticmethod
    def validate(spec: MultiTaskModelSpec) -> None:
        if spec.input_size % 4:
            raise ConfigurationError(f"input size {spec.input_size} must be divisible by 4 (stem downsampling)")
        sizes = AttentionNet.feature_sizes(spec)
        for i, (s, levels) in enumerate(zip(sizes, spec.mask_levels), start=1):
            if s % (2 ** levels):
                raise ConfigurationError(
                    f"input size {spec.input_size} gives a {s}x{s} map at attention module {i}, "
                    f"not divisible by 2^{levels}; pad the input (e.g. 200 -> 224)"
                )

    def forward(self, x: Tensor):
        taps = []
        h = self.stem(x)
        for i in range(1, len(self.module_specs) + 1):
            adapt = self._modules.get(f"adapt{i}")
            if adapt is not None:
                h = adapt(h)
            h, mask = getattr(self, f"attn{i}")(h)
            taps.append(mask)
            h = getattr(self, f"down{i}")(h)
        return ops.global_avg_pool(h), taps


class ResNetLite(Module):
    """ResNet-18 layout: stem, then stages of basic residual units, first unit of stages 2+ strided."""

    def __init__(self, spec: MultiTaskModelSpec, rng, dtype):
        super().__init__()
        self.stem = Stem(3, spec.stem_channels, rng, dtype)
        cin = spec.stem_channels
        for si, c in enumerate(spec.stage_channels, start=1):
            stage = Module()
            for u in range(spec.units_per_stage):
                stride = 2 if (u == 0 and si > 1) else 1
                setattr(stage, f"unit{u}", ResidualUnit(ResidualUnitSpec(cin, c, stride), rng=rng, dtype=dtype))
                cin = c
            setattr(self, f"stage{si}", stage)
        self.n_stages = len(spec.stage_channels)

    @staticmethod
    def validate(spec: MultiTaskModelSpec) -> None:
        if spec.input_size < 8:
            raise ConfigurationError(f"input size {spec.input_size} too small for the ResNet stem")

    def forward(self, x: Tensor):
        h = self.stem(x)
        for si in range(1, self.n_stages + 1):
            for unit in getattr(self, f"stage{si}")._modules.values():
                h = unit(h)
        return ops.global_avg_pool(h), []


# -- multi-task model ---------------------------------------------------------

@dataclass
class ModelOutput:
    embedding: Tensor
    gender_logits: Tensor
    gender_probs: Tensor
    age_logits: Tensor
    age_probs: Tensor
    taps: list = field(default_factory=list)


@dataclass
class Prediction:
    """Per-image probability vectors: ``gender_probs`` (N, 2), ``age_probs`` (N, B).

    Gender index 0 is male, 1 female.
    """

    gender_probs: np.ndarray
    age_probs: np.ndarray

    def __post_init__(self):
        self.gender_probs = np.atleast_2d(np.asarray(self.gender_probs))
        self.age_probs = np.atleast_2d(np.asarray(self.age_probs))
        if self.gender_probs.shape[1] != 2:
            raise ValueError(f"gender_probs must have 2 columns, got {self.gender_probs.shape}")
        if len(self.gender_probs) != len(self.age_probs):
            raise ValueError("gender_probs and age_probs disagree on sample count")

    def __len__(self):
        return len(self.gender_probs)

    @property
    def num_age_buckets(self) -> int:
        return self.age_probs.shape[1]

    @property
    def gender_labels(self) -> np.ndarray:
        return np.argmax(self.gender_probs, axis=1)

    @property
    def age_buckets(self) -> np.ndarray:
        return np.argmax(self.age_probs, axis=1)

    @property
    def female_probs(self) -> np.ndarray:
        return self.gender_probs[:, 1]


class MultiTaskModel(Module):
    """Backbone embedding feeding a gender head and an age head.

    With gender augmentation the age head sees ``concat(embedding, gender_probs)``.
    Initialisation order is backbone, gender head, age head, so toggling the
    augmentation leaves backbone and gender-head weights unchanged.
    """

    def __init__(self, spec: MultiTaskModelSpec):
        super().__init__()
        self.spec = spec
        dtype = resolve_dtype(spec.precision)
        self.dtype = dtype
        rng = np.random.default_rng(spec.seed)
        if spec.backbone == "attention_net":
            AttentionNet.validate(spec)
            self.backbone = AttentionNet(spec, rng, dtype)
        else:
            ResNetLite.validate(spec)
            self.backbone = ResNetLite(spec, rng, dtype)
        self.gender_head = Dense(spec.gender_head_in, 2, rng=rng, dtype=dtype)
        self.age_hidden = Dense(spec.age_head_in, spec.age_hidden, rng=rng, dtype=dtype)
        self.age_head = Dense(spec.age_hidden, spec.num_age_buckets, rng=rng, dtype=dtype)

    def forward(self, images) -> ModelOutput:
        x = as_tensor(images, dtype=self.dtype)
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))
        s = self.spec.input_size
        if x.ndim != 4 or x.dims[1] != 3 or x.dims[2] != s or x.dims[3] != s:
            raise ops.DimensionError(f"model built for (N, 3, {s}, {s}) input, got {x.dims}")
        emb, taps = self.backbone(x)
        gender_logits = self.gender_head(emb)
        gender_probs = ops.softmax(gender_logits, axis=1)
        age_in = emb
        if self.spec.gender_augmentation:
            g = gender_probs.detach() if self.spec.detach_gender_input else gender_probs
            age_in = ops.concat([emb, g], axis=1)
        age_logits = self.age_head(ops.relu(self.age_hidden(age_in)))
        age_probs = ops.softmax(age_logits, axis=1)
        return ModelOutput(emb, gender_logits, gender_probs, age_logits, age_probs, taps)


def build_model(spec: MultiTaskModelSpec) -> MultiTaskModel:
    return MultiTaskModel(spec)


def build_attention_net(spec: Optional[MultiTaskModelSpec] = None, **overrides) -> MultiTaskModel:
    spec = spec or attention_net_spec(**overrides)
    if spec.backbone != "attention_net":
        raise ConfigurationError("build_attention_net needs an attention_net spec")
    return MultiTaskModel(spec)


def build_resnet_lite(spec: Optional[MultiTaskModelSpec] = None, **overrides) -> MultiTaskModel:
    spec = spec or resnet_lite_spec(**overrides)
    if spec.backbone != "resnet_lite":
        raise ConfigurationError("build_resnet_lite needs a resnet_lite spec")
    return MultiTaskModel(spec)


class _EvalMode:
    def __init__(self, model: Module):
        self.model = model

    def __enter__(self):
        self.was_training = self.model.training
        self.model.eval()
        return self.model

    def __exit__(self, *exc):
        self.model.train(self.was_training)


def eval_mode(model: Module) -> _EvalMode:
    """Context manager: eval mode inside, previous mode restored after."""
    return _EvalMode(model)


def forward_multitask(model: MultiTaskModel, images, batch_size: int = 64) -> Prediction:
    """Inference-only forward in eval mode (running BN statistics); returns probabilities."""
    images = images.data if isinstance(images, Tensor) else np.asarray(images)
    g, a = [], []
    with eval_mode(model), no_grad():
        for start in range(0, len(images), batch_size):
            out = model(images[start:start + batch_size])
            g.append(out.gender_probs.data)
            a.append(out.age_probs.data)
    if not g:
        return Prediction(np.zeros((0, 2)), np.zeros((0, model.spec.num_age_buckets)))
    return Prediction(np.concatenate(g), np.concatenate(a))


def attention_taps(model: MultiTaskModel, images) -> list[np.ndarray]:
    """Mask M(x) of every attention module, in forward order, as (N, C, h, w) copies."""
    if model.spec.backbone != "attention_net":
        raise UnsupportedBackboneError(f"attention taps need an attention_net backbone, got {model.spec.backbone}")
    with eval_mode(model), no_grad():
        out = model(images)
    return [t.data.copy() for t in out.taps]


# -- ensemble -----------------------------------------------------------------

def ensemble_predict(predictions: Sequence[Prediction]) -> Prediction:
    """Elementwise mean of member probability vectors."""
    preds = list(predictions)
    if len(preds) < 2:
        raise ValueError(f"an ensemble needs at least 2 members, got {len(preds)}")
    b = preds[0].num_age_buckets
    for p in preds[1:]:
        if p.num_age_buckets != b:
            raise ValueError(f"ensemble members disagree on age bucket count: {b} vs {p.num_age_buckets}")
        if len(p) != len(preds[0]):
            raise ValueError("ensemble members predicted different numbers of samples")
    gender = np.mean(np.stack([p.gender_probs.astype(np.float64) for p in preds]), axis=0)
    age = np.mean(np.stack([p.age_probs.astype(np.float64) for p in preds]), axis=0)
    return Prediction(gender, age)


@dataclass
class EnsembleSpec:
    members: list

    def __post_init__(self):
        if len(self.members) < 2:
            raise ValueError("an ensemble needs at least 2 members")


class Ensemble:
    """Averages the probability outputs of several trained multi-task models."""

    def __init__(self, models: Sequence[MultiTaskModel]):
        self.models = list(models)
        if len(self.models) < 2:
            raise ValueError("an ensemble needs at least 2 members")
        b = {m.spec.num_age_buckets for m in self.models}
        if len(b) != 1:
            raise ValueError(f"ensemble members disagree on age bucket count: {sorted(b)}")

    @property
    def num_age_buckets(self) -> int:
        return self.models[0].spec.num_age_buckets

    def member_predictions(self, images) -> list[Prediction]:
        return [forward_multitask(m, images) for m in self.models]

    def predict(self, images) -> Prediction:
        return ensemble_predict(self.member_predictions(images))
