"""Selective feature distillation, inter-related distillation and loss composition.

All losses take target activations (with gradient) and source activations;
source values are always detached so no gradient reaches the frozen model.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np
import torch

from .errors import ConfigurationError, NumericError, ShapeError, StructuralError
from .model import Detector, TapActivation, TapPoint

MODES = ("sid", "lwf_all_outputs", "none")
REDUCTIONS = ("sum", "mean")


@dataclass(frozen=True)
class DistillConfig:
    """Where and how strongly to distill.

    ``feature_taps`` and ``ir_taps`` name tap *locations*; every level of a
    location present in the detector is used (see :func:`resolve_taps`).
    """
    mode: str = "sid"
    feature_taps: tuple[str, ...] = ()
    ir_taps: tuple[str, ...] = ()
    lambda1: float = 1.0
    lambda2: float = 1.0
    ir_sample_count: int = 2
    old_class_only: bool = True
    reduction: str = "sum"
    restore: bool = False

    def __post_init__(self):
        object.__setattr__(self, "feature_taps", tuple(self.feature_taps))
        object.__setattr__(self, "ir_taps", tuple(self.ir_taps))
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown distill mode '{self.mode}' (choose from {MODES})")
        if self.reduction not in REDUCTIONS:
            raise ConfigurationError(f"unknown reduction '{self.reduction}'")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigurationError("lambda1 and lambda2 must be nonnegative")
        if self.ir_taps and self.ir_sample_count < 2:
            raise ConfigurationError("inter-related distillation needs ir_sample_count >= 2")

    @property
    def active(self) -> bool:
        return self.mode != "none" and bool(self.feature_taps or self.ir_taps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["feature_taps"] = list(self.feature_taps)
        d["ir_taps"] = list(self.ir_taps)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown distill config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class LossBreakdown:
    model_loss: float
    dist_loss: float
    ir_loss: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


def _values(a):
    return a.values if isinstance(a, TapActivation) else a


def _name(a, default="<tap>"):
    return a.tap.name if isinstance(a, TapActivation) else default


def feature_distillation_loss(target_act, source_act, reduction: str = "sum") -> torch.Tensor:
    """Squared L2 distance between target and (detached) source activations."""
    t = _values(target_act)
    s = _values(source_act).detach()
    if t.shape != s.shape:
        raise ShapeError(f"tap {_name(target_act)}: target shape {tuple(t.shape)} != source shape {tuple(s.shape)}")
    sq = (t - s).pow(2).sum()
    if reduction == "sum":
        return sq
    if reduction == "mean":
        return sq / t.numel()
    raise ConfigurationError(f"unknown reduction '{reduction}'")


def aggregate_feature_distillation(target_acts: Sequence, source_acts: Sequence,
                                   reduction: str = "sum") -> torch.Tensor:
    if len(target_acts) != len(source_acts):
        raise ConfigurationError(f"{len(target_acts)} target taps vs {len(source_acts)} source taps")
    total = torch.zeros(())
    for t, s in zip(target_acts, source_acts):
        if isinstance(t, TapActivation) and isinstance(s, TapActivation) and t.tap.name != s.tap.name:
            raise ConfigurationError(f"tap misalignment: target '{t.tap.name}' vs source '{s.tap.name}'")
        total = total + feature_distillation_loss(t, s, reduction)
    return total


def pairwise_feature_distance(act_i: torch.Tensor, act_j: torch.Tensor) -> torch.Tensor:
    """Squared Euclidean distance between two flattened activations."""
    a, b = act_i.reshape(-1), act_j.reshape(-1)
    if a.shape != b.shape:
        raise ShapeError(f"cannot compare activations of length {a.numel()} and {b.numel()}")
    return (a - b).pow(2).sum()


def pairwise_distance_matrix(acts: torch.Tensor) -> torch.Tensor:
    """(I, ...) activations -> (I, I) matrix of squared distances."""
    flat = acts.reshape(acts.shape[0], -1)
    diff = flat[:, None, :] - flat[None, :, :]
    return diff.pow(2).sum(-1)


def inter_related_loss(target_taps: Sequence, source_taps: Sequence, reduction: str = "sum") -> torch.Tensor:
    """Mismatch of pairwise instance geometry between target and source.

    Each element of ``target_taps``/``source_taps`` holds the activations of
    the same I sampled instances at one tap, shape (I, C, H, W). The loss sums
    ``(D_t(i, j) - D_s(i, j))**2`` over taps and unordered pairs i < j. With
    ``reduction="mean"`` distances are taken per element (divided by C*H*W).
    """
    if len(target_taps) != len(source_taps):
        raise ConfigurationError(f"{len(target_taps)} target taps vs {len(source_taps)} source taps")
    total = torch.zeros(())
    for t_act, s_act in zip(target_taps, source_taps):
        t, s = _values(t_act), _values(s_act).detach()
        if t.shape != s.shape:
            raise ShapeError(f"tap {_name(t_act)}: target shape {tuple(t.shape)} != source shape {tuple(s.shape)}")
        n = t.shape[0]
        if n < 2:
            raise ConfigurationError("inter-related distillation needs at least 2 samples")
        d_t = pairwise_distance_matrix(t)
        d_s = pairwise_distance_matrix(s)
        if reduction == "mean":
            per_sample = t[0].numel()
            d_t, d_s = d_t / per_sample, d_s / per_sample
        iu = torch.triu_indices(n, n, offset=1)
        total = total + (d_t[iu[0], iu[1]] - d_s[iu[0], iu[1]]).pow(2).sum()
    return total


def select_ir_samples(batch_size: int, count: int, rng: np.random.Generator) -> list[int]:
    """Draw ``count`` distinct batch indices for inter-related distillation."""
    if count < 2:
        raise ConfigurationError("need at least 2 inter-relation samples")
    if count > batch_size:
        raise ConfigurationError(f"cannot draw {count} inter-relation samples from a batch of {batch_size}")
    return [int(k) for k in rng.choice(batch_size, size=count, replace=False)]


def old_class_channel_slice(act: TapActivation, old_class_ids) -> TapActivation:
    """Restrict a class-wise activation to the old-class channels (ascending id order)."""
    if not act.tap.classwise:
        raise StructuralError(f"tap '{act.tap.name}' is class-agnostic; only class-wise taps can be sliced")
    ids = sorted(int(c) for c in old_class_ids)
    if ids and ids[-1] >= act.values.shape[1]:
        raise ConfigurationError(f"class id {ids[-1]} out of range for tap '{act.tap.name}'")
    if ids == list(range(act.values.shape[1])):
        return act
    return TapActivation(act.tap, act.values[:, ids])


def total_loss(model_loss, dist_loss, ir_loss, lambda1: float = 1.0, lambda2: float = 1.0) -> LossBreakdown:
    """Weighted sum: model + lambda1 * dist + lambda2 * ir."""
    terms = {"model_loss": float(model_loss), "dist_loss": float(dist_loss), "ir_loss": float(ir_loss),
             "lambda1": float(lambda1), "lambda2": float(lambda2)}
    for name, v in terms.items():
        if not math.isfinite(v):
            raise NumericError(f"non-finite {name}: {v}")
    total = terms["model_loss"] + terms["lambda1"] * terms["dist_loss"] + terms["lambda2"] * terms["ir_loss"]
    return LossBreakdown(terms["model_loss"], terms["dist_loss"], terms["ir_loss"], total)


# --- tap resolution and presets ---------------------------------------------

def resolve_taps(locations: Sequence[str], detector: Detector) -> list[TapPoint]:
    """All taps of ``detector`` at the given locations, in detector order."""
    present = {t.location for t in detector.tap_points()}
    missing = [loc for loc in locations if loc not in present]
    if missing:
        raise ConfigurationError(f"{detector.family} has no taps at {missing}")
    wanted = set(locations)
    return [t for t in detector.tap_points() if t.location in wanted]


FCOS_OUTPUTS = ("output_classification", "output_centerness")

# Presets average squared gaps per element. Literal sums grow with tap size and,
# at unit weights, swamp the detection loss on these heads.
PRESET_REDUCTION = "mean"
CENTERNET_BACKBONE = ("output_heatmap_layer1", "up_conv", "backbone_stage")

_ABLATIONS = {
    # fcos_style, one row per ablation configuration
    ("fcos_style", "none"): dict(mode="none"),
    ("fcos_style", "lwf"): dict(mode="lwf_all_outputs",
                               feature_taps=FCOS_OUTPUTS + ("output_regression",)),
    ("fcos_style", "outputs"): dict(feature_taps=FCOS_OUTPUTS),
    ("fcos_style", "outputs+restore"): dict(feature_taps=FCOS_OUTPUTS, restore=True),
    ("fcos_style", "outputs+tower+restore"): dict(feature_taps=FCOS_OUTPUTS + ("head_tower",), restore=True),
    ("fcos_style", "outputs+tower+backbone+restore"): dict(
        feature_taps=FCOS_OUTPUTS + ("head_tower", "backbone_stage"), restore=True),
    ("fcos_style", "sid"): dict(feature_taps=FCOS_OUTPUTS + ("head_tower",), ir_taps=("head_tower",),
                                ir_sample_count=2, restore=True),
    # centernet_style
    ("centernet_style", "none"): dict(mode="none"),
    ("centernet_style", "lwf"): dict(mode="lwf_all_outputs", feature_taps=(
        "output_heatmap_layer2", "output_regression", "output_offset")),
    ("centernet_style", "heatmap1"): dict(feature_taps=("output_heatmap_layer1",)),
    ("centernet_style", "heatmap2"): dict(feature_taps=("output_heatmap_layer2",)),
    ("centernet_style", "heatmap1+restore"): dict(feature_taps=("output_heatmap_layer1",), restore=True),
    ("centernet_style", "heatmap1+up+restore"): dict(
        feature_taps=("output_heatmap_layer1", "up_conv"), restore=True),
    ("centernet_style", "heatmap1+up+backbone+restore"): dict(feature_taps=CENTERNET_BACKBONE, restore=True),
    ("centernet_style", "sid"): dict(feature_taps=CENTERNET_BACKBONE, ir_taps=CENTERNET_BACKBONE,
                                     ir_sample_count=2, restore=True),
}


def preset_kinds(family: str) -> list[str]:
    return [k for f, k in _ABLATIONS if f == family]


def preset_config(family: str, kind: str = "sid", ir_sample_count: int | None = None, **overrides) -> DistillConfig:
    """Named distillation configuration for a detector family.

    ``kind`` is one of ``preset_kinds(family)``: ``sid`` (full method),
    ``lwf`` (all outputs, no restore), ``none`` (plain fine-tuning) or an
    ablation row such as ``outputs+restore``.
    """
    if family not in ("fcos_style", "centernet_style"):
        raise ConfigurationError(f"unknown detector family '{family}'")
    try:
        base = {"reduction": PRESET_REDUCTION, **_ABLATIONS[(family, kind)]}
    except KeyError:
        raise ConfigurationError(f"no preset '{kind}' for {family}; choose from {preset_kinds(family)}") from None
    if ir_sample_count is not None:
        if not base.get("ir_taps"):
            raise ConfigurationError(f"preset '{kind}' has no inter-related term")
        base["ir_sample_count"] = ir_sample_count
    base.update(overrides)
    return DistillConfig(**base)


PRESET_KEYS = {
    "sid-fcos": ("fcos_style", "sid"),
    "sid-centernet": ("centernet_style", "sid"),
}


def preset_by_key(key: str, family: str) -> DistillConfig:
    """Resolve a preset key: ``sid-fcos``, ``sid-centernet``, ``lwf``, ``none`` or ``<family-kind>``."""
    if key in PRESET_KEYS:
        fam, kind = PRESET_KEYS[key]
        if fam != family:
            raise ConfigurationError(f"preset '{key}' is for {fam}, not {family}")
        return preset_config(fam, kind)
    return preset_config(family, key)


def with_overrides(config: DistillConfig, **changes) -> DistillConfig:
    return replace(config, **changes)
