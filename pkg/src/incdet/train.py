"""Base training, incremental distillation steps and multi-step scenarios."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import detection
from .data import DetectionDataset
from .distill import (
    DistillConfig, LossBreakdown, aggregate_feature_distillation, inter_related_loss,
    old_class_channel_slice, resolve_taps, select_ir_samples, total_loss,
)
from .errors import ConfigurationError, NumericError, ResumeError
from .metrics import EvalReport, evaluate_report
from .model import (
    Checkpoint, Detector, DetectorConfig, TapActivation, build_detector, expand_classes,
    forward_with_taps, load_checkpoint, parameter_fingerprint, restore_old_class_parameters,
    save_checkpoint,
)
from .protocol import IncrementalScenario, StepDataset, step_class_partition

log = logging.getLogger(__name__)

DEFAULT_BATCH = {"fcos_style": 4, "centernet_style": 16}
DEFAULT_LR = {"fcos_style": 0.01, "centernet_style": 0.02}
BASE_ITERATIONS = 2000
ITERATIONS_PER_NEW_CLASS = 500
INCREMENTAL_LR_FACTOR = 0.1  # incremental steps start one decade below the base rate


@dataclass(frozen=True)
class TrainConfig:
    detector: DetectorConfig
    distill: DistillConfig = field(default_factory=lambda: DistillConfig(mode="none"))
    scenario: IncrementalScenario | None = None
    scenario_id: str = "default"
    step_index: int = 0
    batch_size: int | None = None
    iterations: int = BASE_ITERATIONS
    lr: float | None = None
    lr_decay_at: tuple[float, ...] = (0.75,)
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: float | None = 10.0
    old_class_negatives: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.batch_size is None:
            object.__setattr__(self, "batch_size", DEFAULT_BATCH[self.detector.family])
        object.__setattr__(self, "lr_decay_at", tuple(self.lr_decay_at))
        if self.iterations < 1:
            raise ConfigurationError("iterations must be positive")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be positive")
        if self.distill.ir_taps and self.distill.mode == "sid" and self.batch_size < self.distill.ir_sample_count:
            raise ConfigurationError(
                f"batch size {self.batch_size} smaller than ir_sample_count {self.distill.ir_sample_count}")

    @property
    def initial_lr(self) -> float:
        """Explicit ``lr``, else the family default (one decade lower for incremental steps)."""
        if self.lr is not None:
            return self.lr
        factor = INCREMENTAL_LR_FACTOR if self.step_index > 0 else 1.0
        return DEFAULT_LR[self.detector.family] * factor

    def lr_at(self, iteration: int) -> float:
        n_decays = sum(iteration >= round(f * self.iterations) for f in self.lr_decay_at)
        return self.initial_lr * self.lr_decay_factor ** n_decays

    def to_dict(self) -> dict:
        return {
            "detector": self.detector.to_dict(),
            "distill": self.distill.to_dict(),
            "scenario": None if self.scenario is None else self.scenario.to_dict(),
            "scenario_id": self.scenario_id,
            "step_index": self.step_index,
            "batch_size": self.batch_size,
            "iterations": self.iterations,
            "lr": self.initial_lr,
            "lr_decay_at": list(self.lr_decay_at),
            "lr_decay_factor": self.lr_decay_factor,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "grad_clip": self.grad_clip,
            "old_class_negatives": self.old_class_negatives,
            "seed": self.seed,
        }

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


@dataclass
class StepResult:
    checkpoint: Checkpoint
    log: list[dict]
    report: EvalReport | None
    checkpoint_path: Path | None = None

    @property
    def detector(self) -> Detector:
        return self.checkpoint.detector


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index batches over shuffled epochs."""
    order, pos = rng.permutation(n), 0
    while True:
        if pos + batch_size > n:
            order, pos = rng.permutation(n), 0
        yield order[pos:pos + batch_size] if batch_size <= n else rng.choice(n, batch_size)
        pos += batch_size


def predict(detector: Detector, dataset, batch_size: int = 32):
    """Detections for every image of ``dataset`` (evaluation mode, no gradients)."""
    was_training = detector.training
    detector.eval()
    samples = list(dataset.samples)
    records = []
    from .model import images_to_tensor
    with torch.no_grad():
        for k in range(0, len(samples), batch_size):
            chunk = samples[k:k + batch_size]
            x = images_to_tensor([s.image for s in chunk])
            outputs, _ = forward_with_taps(detector, x, [])
            records += detection.decode(detector, outputs, [s.image_id for s in chunk])
    detector.train(was_training)
    return records


def evaluate_detector(detector: Detector, dataset, old_class_ids, new_class_ids,
                      thresholds=(0.5,), class_names=()) -> EvalReport:
    """Evaluate on ``dataset`` using only ground truth of the evaluated classes."""
    classes = set(old_class_ids) | set(new_class_ids)
    preds = [p for p in predict(detector, dataset) if p.class_id in classes]
    gts = dataset.ground_truth(classes)
    return evaluate_report(preds, gts, old_class_ids, new_class_ids, thresholds, class_names)


def _check_finite(breakdown_terms: dict, iteration: int, last_ok: int):
    for name, v in breakdown_terms.items():
        if not math.isfinite(v):
            raise NumericError(f"non-finite {name} at iteration {iteration}; last finite iteration {last_ok}")


def _fit(target: Detector, data: detection.EncodedDataset, config: TrainConfig, trained_classes,
         source: Detector | None = None, old_class_ids=()) -> list[dict]:
    cfg = config.distill
    distilling = source is not None and cfg.active
    feat_taps = resolve_taps(cfg.feature_taps, target) if distilling else []
    ir_taps = resolve_taps(cfg.ir_taps, target) if distilling else []
    wanted = list(dict.fromkeys([*feat_taps, *ir_taps]))
    old = sorted(old_class_ids)

    params = [p for p in target.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=config.initial_lr, momentum=config.momentum, weight_decay=config.weight_decay)
    batch_rng = np.random.default_rng([config.seed, config.step_index, 0])
    ir_rng = np.random.default_rng([config.seed, config.step_index, 1])
    batches = _batches(len(data.image_ids), config.batch_size, batch_rng)
    target.train()
    records, last_ok = [], -1
    banner = {"config_hash": config.config_hash(), "seed": config.seed}
    zero = torch.zeros(())
    for it in range(config.iterations):
        lr = config.lr_at(it)
        for g in opt.param_groups:
            g["lr"] = lr
        x, targets = data.batch(next(batches))
        outputs, t_acts = forward_with_taps(target, x, wanted)
        model_loss = detection.detection_loss(target, outputs, targets, trained_classes)
        dist_loss, ir_loss = zero, zero
        if distilling:
            with torch.no_grad():
                _, s_acts = forward_with_taps(source, x, wanted)
            t_by, s_by = {a.tap.name: a for a in t_acts}, {a.tap.name: a for a in s_acts}
            if cfg.old_class_only:
                t_by = {n: old_class_channel_slice(a, old) if a.tap.classwise else a for n, a in t_by.items()}
            if feat_taps:
                dist_loss = aggregate_feature_distillation(
                    [t_by[t.name] for t in feat_taps], [s_by[t.name] for t in feat_taps], cfg.reduction)
            if ir_taps:
                pick = torch.as_tensor(select_ir_samples(x.shape[0], cfg.ir_sample_count, ir_rng))
                ir_loss = inter_related_loss(
                    [t_by[t.name].values[pick] for t in ir_taps],
                    [s_by[t.name].values[pick] for t in ir_taps], cfg.reduction)
        lam1 = cfg.lambda1 if distilling else 0.0
        lam2 = cfg.lambda2 if distilling else 0.0
        loss = model_loss + lam1 * dist_loss + lam2 * ir_loss
        terms = {"model_loss": model_loss.item(), "dist_loss": float(dist_loss.detach()), "ir_loss": float(ir_loss.detach())}
        _check_finite(terms, it, last_ok)
        breakdown = total_loss(terms["model_loss"], terms["dist_loss"], terms["ir_loss"], lam1, lam2)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if config.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
        opt.step()
        last_ok = it
        records.append({"step": config.step_index, "iteration": it, "lr": lr,
                        "lambda1": lam1, "lambda2": lam2, **breakdown.to_dict(), **banner})
    target.eval()
    return records


def _metadata(config: TrainConfig, extra: dict | None = None) -> dict:
    meta = {"step_index": config.step_index, "scenario_id": config.scenario_id, "seed": config.seed,
            "config_hash": config.config_hash(), "train_config": config.to_dict(),
            "loss_hyperparameters": detection.loss_hyperparameters(config.detector.family)}
    meta.update(extra or {})
    return meta


def _emit(result: StepResult, out_dir, name: str) -> StepResult:
    if out_dir is None:
        return result
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ck = result.checkpoint
    result.checkpoint_path = save_checkpoint(out_dir / f"{name}.ckpt", ck.detector, ck.class_names, ck.metadata)
    write_loss_log(out_dir / f"{name}.losses.jsonl", result.log)
    if result.report is not None:
        from .metrics import write_report
        write_report(out_dir / f"{name}.report.json", result.report)
    return result


def write_loss_log(path, records: Sequence[dict]) -> None:
    Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def read_loss_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def _class_names(dataset, config: TrainConfig):
    if config.scenario is not None:
        return list(config.scenario.class_names)
    return list(getattr(dataset, "class_names", ()))


def train_base(config: TrainConfig, dataset, test_dataset=None, out_dir=None, name: str = "step0") -> StepResult:
    """First training step: plain detector training on the base classes."""
    if config.step_index != 0:
        raise ConfigurationError("train_base runs step 0 only")
    if len(dataset) == 0:
        raise ConfigurationError("empty training set")
    detector = build_detector(config.detector)
    classes = list(range(config.detector.num_classes))
    data = detection.encode_dataset(detector, dataset.samples)
    records = _fit(detector, data, config, classes)
    class_names = _class_names(dataset, config)
    ck = Checkpoint(detector, class_names, _metadata(config))
    report = None
    if test_dataset is not None:
        report = evaluate_detector(detector, test_dataset, [], classes, class_names=class_names)
        report.provenance = {"config_hash": config.config_hash(), "seed": config.seed, "step": 0}
    return _emit(StepResult(ck, records, report), out_dir, name)


def _as_checkpoint(source) -> Checkpoint:
    if isinstance(source, Checkpoint):
        return source
    if isinstance(source, StepResult):
        return source.checkpoint
    return load_checkpoint(source)


def train_incremental_step(source_checkpoint, step_dataset: StepDataset, config: TrainConfig,
                           test_dataset=None, out_dir=None, name: str | None = None) -> StepResult:
    """One incremental step: expand, train with distillation, optionally restore.

    The source model is never modified; the target starts as a copy of the
    source with extra class channels. Restore of the old-class blocks of the
    class-wise layer happens once, after the last optimizer update.
    """
    if config.step_index < 1:
        raise ConfigurationError("incremental steps have step_index >= 1")
    if config.scenario is None:
        raise ConfigurationError("incremental training needs the scenario in its TrainConfig")
    old, new = step_class_partition(config.scenario, config.step_index)
    if set(step_dataset.visible_classes) - new:
        raise ConfigurationError(
            f"step dataset exposes classes {sorted(set(step_dataset.visible_classes) - new)} "
            f"that are not new in step {config.step_index}")
    src = _as_checkpoint(source_checkpoint)
    source = copy.deepcopy(src.detector)
    if source.num_classes != len(old):
        raise ConfigurationError(
            f"source has {source.num_classes} classes but step {config.step_index} expects {len(old)} old classes")
    source.eval()
    for p in source.parameters():
        p.requires_grad_(False)
    source_fp = parameter_fingerprint(source)

    target = expand_classes(source, len(new), seed=config.seed + 7919 * config.step_index)
    for p in target.parameters():
        p.requires_grad_(True)
    if config.distill.active:
        _check_tap_alignment(source, target, config.distill, old)

    trained = sorted(set(range(target.num_classes))) if config.old_class_negatives else sorted(new)
    data = detection.encode_dataset(target, step_dataset.samples)
    records = _fit(target, data, config, trained, source=source, old_class_ids=old)

    events = {"final_iteration": config.iterations - 1, "fingerprint_after_training": parameter_fingerprint(target)}
    if config.distill.restore and config.distill.mode != "none":
        target = restore_old_class_parameters(target, source, old)
        events.update(restore_applied_after_iteration=config.iterations - 1,
                      fingerprint_after_restore=parameter_fingerprint(target))
    assert parameter_fingerprint(source) == source_fp, "source parameters changed during training"
    events["source_fingerprint"] = source_fp

    class_names = list(config.scenario.class_names[: target.num_classes])
    ck = Checkpoint(target, class_names, _metadata(config, {"events": events}))
    report = None
    if test_dataset is not None:
        report = evaluate_detector(target, test_dataset, sorted(old), sorted(new), class_names=class_names)
        report.provenance = {"config_hash": config.config_hash(), "seed": config.seed,
                             "step": config.step_index, "distill_mode": config.distill.mode}
    return _emit(StepResult(ck, records, report), out_dir, name or f"step{config.step_index}")


def _check_tap_alignment(source: Detector, target: Detector, cfg: DistillConfig, old):
    taps = list(dict.fromkeys([*resolve_taps(cfg.feature_taps, target), *resolve_taps(cfg.ir_taps, target)]))
    h, w = source.config.input_resolution
    probe = torch.zeros(1, 3, h, w)
    with torch.no_grad():
        _, s_acts = forward_with_taps(source, probe, taps)
        _, t_acts = forward_with_taps(target, probe, taps)
    for s, t in zip(s_acts, t_acts):
        if t.tap.classwise and cfg.old_class_only:
            t = old_class_channel_slice(t, old)
        if s.values.shape != t.values.shape:
            raise ConfigurationError(
                f"tap '{s.tap.name}': source shape {tuple(s.values.shape)} vs target {tuple(t.values.shape)}")


def incremental_iterations(num_new: int) -> int:
    return ITERATIONS_PER_NEW_CLASS * num_new


def run_scenario(scenario: IncrementalScenario, base_config: TrainConfig, per_step_configs: Sequence,
                 train_dataset: DetectionDataset, test_dataset: DetectionDataset | None = None,
                 out_dir=None, start_step: int = 0) -> list[StepResult]:
    """Train every step of ``scenario`` in order, chaining checkpoints.

    ``per_step_configs[k]`` is either a full :class:`TrainConfig` or a dict of
    overrides applied to ``base_config`` for step ``k``. With ``out_dir`` set,
    each step's checkpoint, loss log and report are written there and
    ``start_step > 0`` resumes from the persisted checkpoint of the step before.
    """
    from .protocol import step_test_data, step_train_data
    if len(per_step_configs) != scenario.num_steps:
        raise ConfigurationError(f"need {scenario.num_steps} step configs, got {len(per_step_configs)}")
    results: list[StepResult] = []
    if start_step > 0:
        if out_dir is None:
            raise ResumeError("resuming requires an output directory with earlier checkpoints")
        for k in range(start_step):
            path = Path(out_dir) / f"step{k}.ckpt"
            if not path.exists():
                raise ResumeError(f"cannot resume at step {start_step}: checkpoint of step {k} missing ({path})")
            ck = load_checkpoint(path)
            logp = Path(out_dir) / f"step{k}.losses.jsonl"
            repp = Path(out_dir) / f"step{k}.report.json"
            from .metrics import read_report
            results.append(StepResult(ck, read_loss_log(logp) if logp.exists() else [],
                                      read_report(repp) if repp.exists() else None, path))
    for k in range(start_step, scenario.num_steps):
        spec = per_step_configs[k]
        cfg = spec if isinstance(spec, TrainConfig) else replace(base_config, **(spec or {}))
        seen = len(scenario.seen_classes(k))
        det = replace(cfg.detector, num_classes=len(scenario.steps[0])) if k == 0 else cfg.detector
        cfg = replace(cfg, detector=det, scenario=scenario, step_index=k)
        train_k = step_train_data(train_dataset, scenario, k)
        test_k = step_test_data(test_dataset, scenario, k) if test_dataset is not None else None
        if k == 0:
            res = train_base(cfg, train_k, test_k, out_dir, name="step0")
        else:
            res = train_incremental_step(results[-1].checkpoint, train_k, cfg, test_k, out_dir, name=f"step{k}")
        assert res.detector.num_classes == seen
        results.append(res)
    return results
