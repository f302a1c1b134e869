"""Hidden-state alignment between a frozen small model and the model being
trained: layer-pair selection, dimension interpolation, projection losses,
the linearly decaying loss weight, and the cosine-similarity diagnostic.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from . import tensor as T
from .tensor import Tensor

NAMED_VARIANTS = ("L2E", "L2M", "L2L", "M2E", "M2M", "M2L")
LOSS_KINDS = ("cosine", "logsum")
REDUCTIONS = ("mean", "sum")

_PAIR_RE = re.compile(r"^L(\d+)-F(\d+)$")


@dataclass(frozen=True)
class LayerPairStrategy:
    """Either a named variant (L2E, ..., M2L), an Lx-Fy pair counting x back
    from the teacher's last layer, or an explicit (teacher, target) pair."""

    name: str | None = None
    teacher_layer: int | None = None
    target_layer: int | None = None

    @classmethod
    def parse(cls, text: str) -> "LayerPairStrategy":
        token = text.strip()
        if token.upper() in NAMED_VARIANTS:
            return cls(name=token.upper())
        m = _PAIR_RE.match(token.upper())
        if m:
            return cls(name=token.upper())
        raise ConfigError(f"unknown layer-pair strategy {text!r}")

    @classmethod
    def explicit(cls, teacher_layer: int, target_layer: int) -> "LayerPairStrategy":
        return cls(teacher_layer=int(teacher_layer), target_layer=int(target_layer))

    def token(self) -> str:
        if self.name is not None:
            return self.name
        return f"pair({self.teacher_layer},{self.target_layer})"


@dataclass
class AlignmentSpec:
    strategy: LayerPairStrategy
    loss_kind: str = "cosine"
    lambda0: float = 0.1
    s_stop: int = 1500
    token_reduction: str = "mean"
    early_layer: int = 3

    def __post_init__(self):
        if self.lambda0 < 0:
            raise ConfigError(f"lambda0 must be >= 0, got {self.lambda0}")
        if self.s_stop < 1:
            raise ConfigError(f"s_stop must be >= 1, got {self.s_stop}")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.token_reduction not in REDUCTIONS:
            raise ConfigError(f"token_reduction must be one of {REDUCTIONS}")

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy.token(),
            "loss_kind": self.loss_kind,
            "lambda0": self.lambda0,
            "s_stop": self.s_stop,
            "token_reduction": self.token_reduction,
            "early_layer": self.early_layer,
        }


def select_layers(strategy: LayerPairStrategy, num_teacher_layers: int,
                  num_target_layers: int, early_index: int = 3):
    """Resolve a strategy to concrete (teacher_layer, target_layer) indices.

    Named variants: teacher L -> last layer, M -> ceil(L_T/2); target
    E -> early_index, M -> ceil(L_M/2), L -> last. Lx-Fy counts x back from
    the teacher's last layer and takes y as an absolute target layer.
    """
    if strategy.teacher_layer is not None:
        teacher, target = strategy.teacher_layer, strategy.target_layer
    elif strategy.name in NAMED_VARIANTS:
        teacher = num_teacher_layers if strategy.name[0] == "L" else math.ceil(num_teacher_layers / 2)
        kind = strategy.name[2]
        if kind == "E":
            target = early_index
        elif kind == "M":
            target = math.ceil(num_target_layers / 2)
        else:
            target = num_target_layers
    else:
        m = _PAIR_RE.match(strategy.name or "")
        if not m:
            raise ConfigError(f"cannot resolve strategy {strategy!r}")
        teacher = num_teacher_layers - int(m.group(1)) + 1
        target = int(m.group(2))
    if not 1 <= teacher <= num_teacher_layers:
        raise ConfigError(
            f"teacher layer {teacher} out of range 1..{num_teacher_layers} "
            f"for strategy {strategy.token()}")
    if not 1 <= target <= num_target_layers:
        raise ConfigError(
            f"target layer {target} out of range 1..{num_target_layers} "
            f"for strategy {strategy.token()}")
    return teacher, target


@dataclass(frozen=True)
class InterpolationPlan:
    """Index/weight table resampling a d_src vector to d_dst entries."""

    d_src: int
    d_dst: int
    lo: np.ndarray
    hi: np.ndarray
    beta: np.ndarray


def build_interpolation_plan(d_src: int, d_dst: int) -> InterpolationPlan:
    if d_src < 1 or d_dst < 1:
        raise ShapeError(f"interpolation needs positive dims, got {d_src} -> {d_dst}")
    if d_dst == 1:
        # degenerate target: the u_j formula divides by d_dst - 1
        u = np.zeros(1)
    else:
        # multiply first: j * (d_src - 1) is exact, so a single division
        # yields correctly rounded u_j and pins u[-1] to exactly d_src - 1
        u = np.arange(d_dst) * float(d_src - 1) / float(d_dst - 1)
    lo = np.floor(u).astype(np.int64)
    beta = u - lo
    hi = np.minimum(lo + 1, d_src - 1)
    return InterpolationPlan(d_src, d_dst, lo, hi, beta)


def interpolate_hidden(h: np.ndarray, d_dst: int) -> np.ndarray:
    """Linear interpolation along the last (hidden) axis, applied
    independently per leading index. Identity when dims already match;
    endpoints always map exactly."""
    h = np.asarray(h)
    if h.ndim == 0 or h.shape[-1] == 0:
        raise ShapeError("interpolate_hidden: empty input")
    d_src = h.shape[-1]
    if d_src == d_dst:
        return h.copy()
    plan = build_interpolation_plan(d_src, d_dst)
    return (1.0 - plan.beta) * h[..., plan.lo] + plan.beta * h[..., plan.hi]


def interpolate_tensor(h: Tensor, d_dst: int) -> Tensor:
    """Tape-recorded version of interpolate_hidden for the training path."""
    d_src = h.shape[-1]
    if d_src == d_dst:
        return h
    plan = build_interpolation_plan(d_src, d_dst)
    return T.interp_last(h, plan.lo, plan.hi, plan.beta)


def _check_pair(h_m, h_t):
    if h_m.shape != h_t.shape:
        raise ShapeError(f"aligned hidden states differ: {h_m.shape} vs {h_t.shape}")


def _reduce(per_token: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return T.tmean(per_token)
    if reduction == "sum":
        return T.tsum(per_token)
    raise ConfigError(f"unknown reduction {reduction!r}")


def proj_loss_cosine(h_m: Tensor, h_t: Tensor, reduction: str = "mean") -> Tensor:
    """Negative cosine similarity between per-token normalized states.

    h_t is treated as constant; gradients flow only into h_m.
    """
    _check_pair(h_m, h_t)
    cos = T.tsum(T.mul(T.l2_normalize_rows(h_m), T.l2_normalize_rows(h_t)), axis=-1)
    return T.scale(_reduce(cos, reduction), -1.0)


def proj_loss_logsum(h_m: Tensor, h_t: Tensor, reduction: str = "mean") -> Tensor:
    """Log-sum-exp over feature dims of squared normalized differences;
    large per-dimension discrepancies dominate the objective."""
    _check_pair(h_m, h_t)
    diff = T.sub(T.l2_normalize_rows(h_m), T.l2_normalize_rows(h_t))
    per_token = T.logsumexp(T.mul(diff, diff))
    return _reduce(per_token, reduction)


PROJ_LOSSES = {"cosine": proj_loss_cosine, "logsum": proj_loss_logsum}


def lambda_at(s: int, lambda0: float, s_stop: int) -> float:
    """Alignment weight at step s: lambda0 * max(0, (S_stop - s) / S_stop)."""
    if s < 0:
        raise ConfigError(f"step must be >= 0, got {s}")
    return lambda0 * max(0.0, (s_stop - s) / s_stop)


@dataclass(frozen=True)
class ScheduleState:
    """Snapshot of the decay schedule at one step."""

    step: int
    weight: float

    @classmethod
    def at(cls, s: int, spec: "AlignmentSpec") -> "ScheduleState":
        return cls(step=s, weight=lambda_at(s, spec.lambda0, spec.s_stop))


def cosine_similarity_metric(h_m: np.ndarray, h_t: np.ndarray) -> float:
    """Mean per-token cosine similarity; diagnostic only, never on the tape."""
    h_m, h_t = np.asarray(h_m), np.asarray(h_t)
    _check_pair(h_m, h_t)
    nm = np.maximum(np.linalg.norm(h_m, axis=-1), T.L2_NORM_EPS)
    nt = np.maximum(np.linalg.norm(h_t, axis=-1), T.L2_NORM_EPS)
    return float(np.mean(np.sum(h_m * h_t, axis=-1) / (nm * nt)))
