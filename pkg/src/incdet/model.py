"""Toy anchor-free detectors with named tap points.

Two families are provided:

* ``fcos_style``: strided backbone, FPN, one head shared over the pyramid
  levels with a classification tower (feeding classification and
  center-ness) and a regression tower (feeding point-to-side distances).
* ``centernet_style``: strided backbone, upsampling convolutions back to
  stride 4, and three two-layer branches (heatmap, size, offset). The first
  heatmap layer is class-agnostic, the second is class-wise.

Every tap records the raw output of the named layer (pre-activation for the
output heads).
"""
from __future__ import annotations

import copy
import hashlib
import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, StructuralError, TapError

FAMILIES = ("fcos_style", "centernet_style")

LOCATIONS = (
    "output_classification", "output_centerness", "output_regression",
    "output_heatmap_layer1", "output_heatmap_layer2", "output_offset",
    "head_tower", "up_conv", "backbone_stage",
)
CLASSWISE_LOCATIONS = frozenset({"output_classification", "output_heatmap_layer2"})

# focal-loss prior: new logits start at sigmoid(bias) == 0.01 (fcos) / 0.1 (centernet)
PRIOR_BIAS = {"fcos_style": -math.log((1 - 0.01) / 0.01), "centernet_style": -2.19}


@dataclass(frozen=True)
class DetectorConfig:
    family: str
    num_classes: int
    input_resolution: tuple[int, int] = (64, 64)
    backbone_channels: tuple[int, ...] = (16, 32, 64)
    fpn_enabled: bool | None = None
    head_tower_depth: int = 4
    head_channels: int = 32
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_resolution", tuple(int(v) for v in self.input_resolution))
        object.__setattr__(self, "backbone_channels", tuple(int(v) for v in self.backbone_channels))
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown detector family '{self.family}' (choose from {FAMILIES})")
        expected_fpn = self.family == "fcos_style"
        if self.fpn_enabled is None:
            object.__setattr__(self, "fpn_enabled", expected_fpn)
        elif bool(self.fpn_enabled) != expected_fpn:
            raise ConfigurationError(f"{self.family} requires fpn_enabled={expected_fpn}")
        if self.num_classes < 1:
            raise ConfigurationError("num_classes must be positive")
        if len(self.backbone_channels) < 2 or min(self.backbone_channels) < 1:
            raise ConfigurationError("need at least two backbone stages with positive widths")
        if self.head_tower_depth < 1 or self.head_channels < 4:
            raise ConfigurationError("head_tower_depth must be >= 1 and head_channels >= 4")
        stride = self.total_stride
        h, w = self.input_resolution
        if h < stride or w < stride or h % stride or w % stride:
            raise ConfigurationError(
                f"input resolution {self.input_resolution} must be a positive multiple of the "
                f"backbone stride {stride} for {self.family}")

    @property
    def total_stride(self) -> int:
        return 2 ** (len(self.backbone_channels) + 1)

    @property
    def stage_strides(self) -> list[int]:
        return [2 ** (k + 2) for k in range(len(self.backbone_channels))]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_resolution"] = list(self.input_resolution)
        d["backbone_channels"] = list(self.backbone_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown detector config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("input_resolution", "backbone_channels"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class TapPoint:
    name: str
    location: str
    level: int = 0

    @property
    def classwise(self) -> bool:
        return self.location in CLASSWISE_LOCATIONS


def tap(location: str, level: int = 0) -> TapPoint:
    if location not in LOCATIONS:
        raise TapError(f"unknown tap location '{location}'")
    return TapPoint(f"{location}.{level}", location, level)


@dataclass
class TapActivation:
    tap: TapPoint
    values: torch.Tensor  # (batch, channels, height, width)


@dataclass(frozen=True)
class ClasswiseLayerView:
    """Per-class parameter blocks of a class-wise layer (one output channel per class)."""
    layer_id: str
    slices: dict[int, dict[str, torch.Tensor]] = field(repr=False)


def _conv_gn(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.GroupNorm(min(8, cout), cout),
        nn.ReLU(inplace=True),
    )


class Backbone(nn.Module):
    def __init__(self, channels: Sequence[int]):
        super().__init__()
        self.stem = _conv_gn(3, channels[0], stride=2)
        stages, cin = [], channels[0]
        for ch in channels:
            stages.append(nn.Sequential(_conv_gn(cin, ch, stride=2), _conv_gn(ch, ch)))
            cin = ch
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class Detector(nn.Module):
    """Common interface of both detector families."""

    classwise_layer_id: str

    def __init__(self, config: DetectorConfig):
        super().__init__()
        self.config = config

    @property
    def family(self) -> str:
        return self.config.family

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def tap_points(self) -> list[TapPoint]:
        raise NotImplementedError

    def taps_at(self, location: str) -> list[TapPoint]:
        return [t for t in self.tap_points() if t.location == location]

    def forward_all(self, x: torch.Tensor) -> tuple[dict[str, list[torch.Tensor]], dict[str, torch.Tensor]]:
        raise NotImplementedError

    def forward(self, x):
        return self.forward_all(x)[0]

    def classwise_layer(self) -> nn.Conv2d:
        return self.get_submodule(self.classwise_layer_id)


class FCOSStyleDetector(Detector):
    classwise_layer_id = "head.cls_logits"

    def __init__(self, config: DetectorConfig):
        super().__init__(config)
        c = config.head_channels
        self.backbone = Backbone(config.backbone_channels)
        self.lateral = nn.ModuleList(nn.Conv2d(ch, c, 1) for ch in config.backbone_channels)
        self.fpn_out = nn.ModuleList(nn.Conv2d(c, c, 3, padding=1) for _ in config.backbone_channels)
        self.head = nn.Module()
        self.head.cls_tower = nn.Sequential(*[_conv_gn(c, c) for _ in range(config.head_tower_depth)])
        self.head.reg_tower = nn.Sequential(*[_conv_gn(c, c) for _ in range(config.head_tower_depth)])
        self.head.cls_logits = nn.Conv2d(c, config.num_classes, 3, padding=1)
        self.head.centerness = nn.Conv2d(c, 1, 3, padding=1)
        self.head.bbox_pred = nn.Conv2d(c, 4, 3, padding=1)
        for m in [*self.head.cls_tower.modules(), *self.head.reg_tower.modules(),
                  self.head.cls_logits, self.head.centerness, self.head.bbox_pred]:
            if isinstance(m, nn.Conv2d):
                nn.init.normal_(m.weight, std=0.01)
                nn.init.zeros_(m.bias)
        nn.init.constant_(self.head.cls_logits.bias, PRIOR_BIAS["fcos_style"])

    @property
    def strides(self) -> list[int]:
        return self.config.stage_strides

    def tap_points(self):
        n = len(self.config.backbone_channels)
        out = [tap("backbone_stage", k) for k in range(n)]
        for loc in ("head_tower", "output_classification", "output_centerness", "output_regression"):
            out += [tap(loc, k) for k in range(n)]
        return out

    def forward_all(self, x):
        feats = self.backbone(x)
        taps = {f"backbone_stage.{k}": f for k, f in enumerate(feats)}
        lat = [l(f) for l, f in zip(self.lateral, feats)]
        for k in range(len(lat) - 2, -1, -1):
            lat[k] = lat[k] + F.interpolate(lat[k + 1], size=lat[k].shape[-2:], mode="nearest")
        pyramid = [conv(p) for conv, p in zip(self.fpn_out, lat)]
        outputs = {"classification": [], "centerness": [], "regression": []}
        for k, p in enumerate(pyramid):
            ct = self.head.cls_tower(p)
            rt = self.head.reg_tower(p)
            cls = self.head.cls_logits(ct)
            ctr = self.head.centerness(ct)
            reg = self.head.bbox_pred(rt)
            taps[f"head_tower.{k}"] = ct
            taps[f"output_classification.{k}"] = cls
            taps[f"output_centerness.{k}"] = ctr
            taps[f"output_regression.{k}"] = reg
            outputs["classification"].append(cls)
            outputs["centerness"].append(ctr)
            outputs["regression"].append(reg)
        return outputs, taps


class CenterNetStyleDetector(Detector):
    classwise_layer_id = "heatmap.1"
    output_stride = 4

    def __init__(self, config: DetectorConfig):
        super().__init__(config)
        c = config.head_channels
        self.backbone = Backbone(config.backbone_channels)
        n_up = len(config.backbone_channels) - 1
        ups, cin = [], config.backbone_channels[-1]
        for _ in range(n_up):
            ups.append(_conv_gn(cin, c))
            cin = c
        self.up = nn.ModuleList(ups)
        self.heatmap = nn.ModuleList([nn.Conv2d(c, c, 3, padding=1), nn.Conv2d(c, config.num_classes, 1)])
        self.size = nn.ModuleList([nn.Conv2d(c, c, 3, padding=1), nn.Conv2d(c, 2, 1)])
        self.offset = nn.ModuleList([nn.Conv2d(c, c, 3, padding=1), nn.Conv2d(c, 2, 1)])
        nn.init.constant_(self.heatmap[1].bias, PRIOR_BIAS["centernet_style"])
        for branch in (self.size, self.offset):
            nn.init.zeros_(branch[1].bias)

    def tap_points(self):
        n = len(self.config.backbone_channels)
        out = [tap("backbone_stage", k) for k in range(n)]
        out += [tap("up_conv", k) for k in range(n - 1)]
        out += [tap(loc) for loc in ("output_heatmap_layer1", "output_heatmap_layer2",
                                     "output_regression", "output_offset")]
        return out

    def forward_all(self, x):
        feats = self.backbone(x)
        taps = {f"backbone_stage.{k}": f for k, f in enumerate(feats)}
        y = feats[-1]
        for k, up in enumerate(self.up):
            y = up(F.interpolate(y, scale_factor=2, mode="nearest"))
            taps[f"up_conv.{k}"] = y
        h1 = self.heatmap[0](y)
        hm = self.heatmap[1](F.relu(h1))
        wh = self.size[1](F.relu(self.size[0](y)))
        off = self.offset[1](F.relu(self.offset[0](y)))
        taps["output_heatmap_layer1.0"] = h1
        taps["output_heatmap_layer2.0"] = hm
        taps["output_regression.0"] = wh
        taps["output_offset.0"] = off
        return {"heatmap": [hm], "size": [wh], "offset": [off]}, taps


_FAMILY_CLASSES = {"fcos_style": FCOSStyleDetector, "centernet_style": CenterNetStyleDetector}


def build_detector(config: DetectorConfig) -> Detector:
    """Construct a detector; parameters are a pure function of ``config.seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        return _FAMILY_CLASSES[config.family](config)


def forward_with_taps(detector: Detector, batch: torch.Tensor, taps: Sequence[TapPoint | str] = ()):
    """Run the detector and return ``(outputs, [TapActivation, ...])`` in request order."""
    available = {t.name: t for t in detector.tap_points()}
    wanted = []
    for t in taps:
        name = t if isinstance(t, str) else t.name
        if name not in available:
            raise TapError(f"unknown tap '{name}'; available taps: {sorted(available)}")
        wanted.append(available[name])
    h, w = detector.config.input_resolution
    if batch.ndim != 4 or tuple(batch.shape[-2:]) != (h, w) or batch.shape[1] != 3:
        raise ConfigurationError(f"batch shape {tuple(batch.shape)} does not match (B, 3, {h}, {w})")
    outputs, recorded = detector.forward_all(batch)
    return outputs, [TapActivation(t, recorded[t.name]) for t in wanted]


def images_to_tensor(images: Sequence[np.ndarray]) -> torch.Tensor:
    """Stack (H, W, 3) arrays into a float32 (B, 3, H, W) tensor."""
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def _classwise_param_names(detector: Detector) -> tuple[str, str]:
    lid = detector.classwise_layer_id
    return f"{lid}.weight", f"{lid}.bias"


def classwise_layer_view(detector: Detector, layer_id: str | None = None) -> ClasswiseLayerView:
    """Expose the per-class blocks of a class-wise layer.

    Only the final classification convolution (fcos_style) and heatmap
    layer-2 (centernet_style) partition their parameters by class.
    """
    layer_id = layer_id or detector.classwise_layer_id
    if layer_id != detector.classwise_layer_id:
        raise StructuralError(
            f"layer '{layer_id}' is not class-wise; the class-wise layer of this "
            f"{detector.family} detector is '{detector.classwise_layer_id}'")
    layer = detector.get_submodule(layer_id)
    return ClasswiseLayerView(layer_id, {
        c: {"weight": layer.weight[c], "bias": layer.bias[c]} for c in range(detector.num_classes)
    })


def expand_classes(detector: Detector, num_new: int, seed: int) -> Detector:
    """Return a copy of ``detector`` with ``num_new`` extra class channels.

    All existing parameters are copied exactly. New class-wise weights are
    drawn from N(0, 0.01^2) and new biases start at the focal prior, so the
    new classes begin nearly inactive.
    """
    if num_new < 1:
        raise ConfigurationError("num_new must be >= 1")
    cfg = detector.config
    new_cfg = DetectorConfig(**{**cfg.to_dict(), "num_classes": cfg.num_classes + num_new,
                                "input_resolution": cfg.input_resolution,
                                "backbone_channels": cfg.backbone_channels})
    out = build_detector(new_cfg)
    wname, bname = _classwise_param_names(detector)
    old_state = detector.state_dict()
    gen = torch.Generator().manual_seed(seed)
    state = {}
    for name, value in old_state.items():
        if name == wname:
            extra = torch.randn((num_new, *value.shape[1:]), generator=gen, dtype=value.dtype) * 0.01
            state[name] = torch.cat([value, extra])
        elif name == bname:
            extra = torch.full((num_new,), PRIOR_BIAS[cfg.family], dtype=value.dtype)
            state[name] = torch.cat([value, extra])
        else:
            state[name] = value.clone()
    out.load_state_dict(state)
    out.train(detector.training)
    return out


def restore_old_class_parameters(target: Detector, source: Detector, old_class_ids,
                                 layer: str | None = None) -> Detector:
    """Copy of ``target`` whose old-class blocks in the class-wise layer come from ``source``."""
    if target.family != source.family:
        raise StructuralError("source and target detectors belong to different families")
    view_t = classwise_layer_view(target, layer)
    classwise_layer_view(source, layer)
    old = sorted(int(c) for c in old_class_ids)
    if old and (old[0] < 0 or old[-1] >= source.num_classes):
        raise ConfigurationError(f"old class ids {old} not all in the source's {source.num_classes} classes")
    out = copy.deepcopy(target)
    src_layer = source.get_submodule(view_t.layer_id)
    dst_layer = out.get_submodule(view_t.layer_id)
    with torch.no_grad():
        for c in old:
            dst_layer.weight[c].copy_(src_layer.weight[c])
            dst_layer.bias[c].copy_(src_layer.bias[c])
    return out


def parameter_fingerprint(detector: nn.Module) -> str:
    h = hashlib.sha256()
    for name, value in sorted(detector.state_dict().items()):
        h.update(name.encode())
        h.update(value.detach().cpu().numpy().tobytes())
    return h.hexdigest()[:16]


# --- checkpoints ------------------------------------------------------------

@dataclass
class Checkpoint:
    detector: Detector
    class_names: list[str]
    metadata: dict = field(default_factory=dict)


def save_checkpoint(path, detector: Detector, class_names: Sequence[str], metadata: dict | None = None) -> Path:
    """Write a zip archive with config.json, classes.json, meta.json and params.npz."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    np.savez(buf, **{k: v.detach().cpu().numpy() for k, v in detector.state_dict().items()})
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, payload in (
            ("config.json", json.dumps(detector.config.to_dict(), indent=2, sort_keys=True)),
            ("classes.json", json.dumps(list(class_names), indent=2)),
            ("meta.json", json.dumps(metadata or {}, indent=2, sort_keys=True)),
        ):
            zf.writestr(zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0)), payload)
        zf.writestr(zipfile.ZipInfo("params.npz", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        config = DetectorConfig.from_dict(json.loads(zf.read("config.json")))
        classes = json.loads(zf.read("classes.json"))
        meta = json.loads(zf.read("meta.json"))
        with np.load(io.BytesIO(zf.read("params.npz"))) as arrays:
            state = {k: torch.from_numpy(arrays[k].copy()) for k in arrays.files}
    detector = build_detector(config)
    detector.load_state_dict(state)
    detector.eval()
    return Checkpoint(detector, classes, meta)
