"""Temporal-convolutional keyword models.

TcResNet8 treats the MFCC coefficient axis as input channels and convolves
along time only. The encoder/tail split (stem + first block vs the rest) is
what the progressive strategy shares across tasks. SubNet is the width-scaled
column grown per task on top of the shared encoder; its widths scale with the
task's keyword count relative to the pretraining keyword count.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterVector, Segment, Tensor
from .errors import ConfigError, ShapeError


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv1d:
    def __init__(self, rng, prefix: str, c_in: int, c_out: int, k: int, stride: int = 1,
                 bias: bool = False):
        self.stride = stride
        self.w = Tensor(_kaiming_uniform(rng, (c_out, c_in, k), c_in * k), requires_grad=True)
        self.b = Tensor(np.zeros(c_out), requires_grad=True) if bias else None
        self.segments = [Segment(f"{prefix}.w", self.w)]
        if self.b is not None:
            self.segments.append(Segment(f"{prefix}.b", self.b))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv1d(x, self.w, self.b, stride=self.stride)


class BatchNorm1d:
    def __init__(self, prefix: str, c: int):
        self.gamma = Tensor(np.ones(c), requires_grad=True)
        self.beta = Tensor(np.zeros(c), requires_grad=True)
        self.running_mean = Tensor(np.zeros(c))
        self.running_var = Tensor(np.ones(c))
        self.segments = [
            Segment(f"{prefix}.gamma", self.gamma),
            Segment(f"{prefix}.beta", self.beta),
            Segment(f"{prefix}.running_mean", self.running_mean, trainable=False),
            Segment(f"{prefix}.running_var", self.running_var, trainable=False),
        ]

    def __call__(self, x: Tensor, training: bool, update_running: bool = True) -> Tensor:
        return ad.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=training, update_running=update_running,
        )


class Dense:
    def __init__(self, rng, prefix: str, c_in: int, c_out: int):
        self.w = Tensor(_kaiming_uniform(rng, (c_out, c_in), c_in), requires_grad=True)
        self.b = Tensor(np.zeros(c_out), requires_grad=True)
        self.segments = [Segment(f"{prefix}.w", self.w), Segment(f"{prefix}.b", self.b)]

    def __call__(self, x: Tensor) -> Tensor:
        return ad.dense(x, self.w, self.b)


class ResidualBlock:
    """Two temporal convs with BN/ReLU plus a 1x1 strided shortcut."""

    def __init__(self, rng, prefix: str, c_in: int, c_out: int, k: int = 3, stride: int = 2):
        self.conv1 = Conv1d(rng, f"{prefix}.conv1", c_in, c_out, k, stride=stride)
        self.bn1 = BatchNorm1d(f"{prefix}.bn1", c_out)
        self.conv2 = Conv1d(rng, f"{prefix}.conv2", c_out, c_out, k, stride=1)
        self.bn2 = BatchNorm1d(f"{prefix}.bn2", c_out)
        self.conv_sc = Conv1d(rng, f"{prefix}.shortcut", c_in, c_out, 1, stride=stride)
        self.bn_sc = BatchNorm1d(f"{prefix}.bn_sc", c_out)
        self.segments = (
            self.conv1.segments + self.bn1.segments
            + self.conv2.segments + self.bn2.segments
            + self.conv_sc.segments + self.bn_sc.segments
        )

    def __call__(self, x: Tensor, training: bool, update_running: bool = True) -> Tensor:
        h = ad.relu(self.bn1(self.conv1(x), training, update_running))
        h = self.bn2(self.conv2(h), training, update_running)
        sc = self.bn_sc(self.conv_sc(x), training, update_running)
        return ad.relu(ad.add(h, sc))


class Model:
    """Base: owns a ParameterVector and a mode flag."""

    def __init__(self):
        self.params: ParameterVector | None = None
        self.training = True

    def train(self):
        self.training = True

    def eval(self):
        self.training = False

    def describe(self) -> dict:
        assert self.params is not None
        return {
            "class": type(self).__name__,
            "total_params": self.params.total_count,
            "trainable_params": self.params.trainable_count,
            "segments": [
                {"name": s.name, "shape": list(s.tensor.data.shape), "trainable": s.trainable}
                for s in self.params.segments
            ],
        }


class TcResNet8(Model):
    """Stem conv + three residual blocks + global pool + linear head.

    Channel plan [16, 24, 32, 48]; stem kernel 9 then kernel 3 everywhere;
    each block halves the time axis at its entry.
    """

    CHANNELS = (16, 24, 32, 48)
    STEM_KERNEL = 9
    BLOCK_KERNEL = 3

    def __init__(self, n_mfcc: int = 40, n_classes: int = 15, seed: int = 0):
        super().__init__()
        if n_mfcc < 1:
            raise ConfigError("model.n_mfcc", f"must be >= 1, got {n_mfcc}")
        if n_classes < 2:
            raise ConfigError("model.n_classes", f"must be >= 2, got {n_classes}")
        self.n_mfcc = n_mfcc
        self.n_classes = n_classes
        rng = np.random.default_rng(seed)
        c0, c1, c2, c3 = self.CHANNELS

        self.conv0 = Conv1d(rng, "stem.conv", n_mfcc, c0, self.STEM_KERNEL, stride=1)
        self.bn0 = BatchNorm1d("stem.bn", c0)
        self.block1 = ResidualBlock(rng, "block1", c0, c1, self.BLOCK_KERNEL)
        self.block2 = ResidualBlock(rng, "block2", c1, c2, self.BLOCK_KERNEL)
        self.block3 = ResidualBlock(rng, "block3", c2, c3, self.BLOCK_KERNEL)
        self.head = Dense(rng, "head", c3, n_classes)

        self.params = ParameterVector(
            self.conv0.segments + self.bn0.segments
            + self.block1.segments + self.block2.segments + self.block3.segments
            + self.head.segments
        )

    # encoder = stem + block1 (the shared feature extractor); tail = the rest
    ENCODER_PREFIXES = ("stem.", "block1.")

    def encoder_forward(self, x: Tensor, update_running: bool = True) -> Tensor:
        if x.data.ndim != 3 or x.data.shape[1] != self.n_mfcc:
            raise ShapeError(f"expected input [B, {self.n_mfcc}, T], got {x.data.shape}")
        h = ad.relu(self.bn0(self.conv0(x), self.training, update_running))
        return self.block1(h, self.training, update_running)

    def tail_forward(self, h: Tensor, update_running: bool = True) -> Tensor:
        h = self.block2(h, self.training, update_running)
        h = self.block3(h, self.training, update_running)
        return self.head(ad.global_avg_pool(h))

    def forward(self, x: Tensor, update_running: bool = True) -> Tensor:
        return self.tail_forward(
            self.encoder_forward(x, update_running), update_running
        )

    __call__ = forward

    def encoder_channels(self) -> int:
        return self.CHANNELS[1]

    def encoder_segments(self) -> list[Segment]:
        assert self.params is not None
        return [s for s in self.params.segments if s.name.startswith(self.ENCODER_PREFIXES)]

    def tail_segments(self) -> list[Segment]:
        assert self.params is not None
        return [s for s in self.params.segments if not s.name.startswith(self.ENCODER_PREFIXES)]


BASE_SUBNET_CHANNELS = (16, 48)


@dataclass(frozen=True)
class ScalingConfig:
    """Width plan for per-task sub-networks.

    alpha = mu * C_t / C_0 where C_t is the task's keyword count and c0 the
    pretraining keyword count; sub-net widths are alpha times the base plan.
    """

    mu: float = 1.0
    c0: int = 15

    def validate(self):
        if not self.mu > 0:
            raise ConfigError("pcl.mu", f"must be > 0, got {self.mu}")
        if self.c0 < 1:
            raise ConfigError("pcl.c0", f"must be >= 1, got {self.c0}")


def width_multiplier(c_t: int, cfg: ScalingConfig) -> float:
    cfg.validate()
    if c_t < 1:
        raise ConfigError("task.keywords", f"need at least 1 keyword, got {c_t}")
    return cfg.mu * c_t / cfg.c0


def scale_channels(alpha: float, base_channels: tuple[int, ...] = BASE_SUBNET_CHANNELS) -> tuple[int, ...]:
    """Round-half-up width scaling, clamped below at one channel."""
    if not alpha > 0:
        raise ConfigError("pcl.alpha", f"must be > 0, got {alpha}")
    scaled = []
    for c in base_channels:
        v = int(np.floor(alpha * c + 0.5))
        if v < 1:
            warnings.warn(
                f"width multiplier {alpha:.4g} drives a {c}-channel layer below 1; clamping",
                RuntimeWarning,
                stacklevel=2,
            )
            v = 1
        scaled.append(v)
    return tuple(scaled)


@dataclass(frozen=True)
class SubNetSpec:
    alpha: float
    n_classes: int
    scaled_channels: tuple[int, int]
    fixed: bool = False
    base_channels: tuple[int, int] = BASE_SUBNET_CHANNELS


class SubNet(Model):
    """Per-task column: two temporal convs + 1x1 shortcut + single head.

    Consumes the shared encoder's feature map [B, c_in, T]; downsamples time
    by 2 at entry like a trunk block.
    """

    def __init__(self, c_in: int, spec: SubNetSpec, seed: int = 0):
        super().__init__()
        self.spec = spec
        self.n_classes = spec.n_classes
        rng = np.random.default_rng(seed)
        c1, c2 = spec.scaled_channels
        self.conv_a = Conv1d(rng, "sub.conv_a", c_in, c1, 3, stride=2)
        self.bn_a = BatchNorm1d("sub.bn_a", c1)
        self.conv_b = Conv1d(rng, "sub.conv_b", c1, c2, 3, stride=1)
        self.bn_b = BatchNorm1d("sub.bn_b", c2)
        self.conv_sc = Conv1d(rng, "sub.shortcut", c_in, c2, 1, stride=2)
        self.bn_sc = BatchNorm1d("sub.bn_sc", c2)
        self.head = Dense(rng, "sub.head", c2, spec.n_classes)
        self.params = ParameterVector(
            self.conv_a.segments + self.bn_a.segments
            + self.conv_b.segments + self.bn_b.segments
            + self.conv_sc.segments + self.bn_sc.segments
            + self.head.segments
        )

    def forward(self, h: Tensor, update_running: bool = True) -> Tensor:
        z = ad.relu(self.bn_a(self.conv_a(h), self.training, update_running))
        z = self.bn_b(self.conv_b(z), self.training, update_running)
        sc = self.bn_sc(self.conv_sc(h), self.training, update_running)
        z = ad.relu(ad.add(z, sc))
        return self.head(ad.global_avg_pool(z))

    __call__ = forward


def make_subnet_spec(c_t: int, cfg: ScalingConfig, fixed: bool = False) -> SubNetSpec:
    alpha = width_multiplier(c_t, cfg)
    channels = BASE_SUBNET_CHANNELS if fixed else scale_channels(alpha)
    return SubNetSpec(alpha=alpha, n_classes=c_t, scaled_channels=channels, fixed=fixed)


def instantiate_subnet(
    c_t: int, cfg: ScalingConfig, c_in: int, fixed: bool = False, seed: int = 0
) -> SubNet:
    """Build the per-task column sized for a task with c_t keywords."""
    return SubNet(c_in, make_subnet_spec(c_t, cfg, fixed=fixed), seed=seed)


def count_parameters(params: ParameterVector) -> int:
    """Trainable parameter count; running stats excluded."""
    return params.trainable_count


def describe_text(model: Model) -> str:
    d = model.describe()
    lines = [
        f"{d['class']}: {d['trainable_params']} trainable / {d['total_params']} total",
    ]
    for s in d["segments"]:
        flag = "" if s["trainable"] else "  (frozen)"
        shape = "x".join(str(v) for v in s["shape"]) if s["shape"] else "scalar"
        lines.append(f"  {s['name']:<28} {shape:<12}{flag}")
    return "\n".join(lines)


def describe_json(model: Model) -> str:
    return json.dumps(model.describe(), indent=2, sort_keys=True)
