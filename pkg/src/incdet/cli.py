"""Command-line entry points: dataset generation, protocols, training, evaluation, reports.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric failure.
Relative output paths resolve against ``--output-root``, falling back to the
``INCDET_OUTPUT_ROOT`` environment variable and then the working directory.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

from .data import VOC_CLASSES, SplitSpec, SynthSpec, generate_synthetic, load_voc_annotations, synthetic_catalog, write_voc
from .distill import preset_by_key, with_overrides
from .errors import (
    AnnotationParseError, CatalogError, ConfigurationError, NumericError, ResumeError, ShapeError,
    StructuralError, TapError,
)
from .metrics import EvalReport, read_report, write_report
from .model import DetectorConfig, load_checkpoint
from .protocol import IncrementalScenario, make_scenario, step_class_partition, step_test_data, step_train_data
from .train import (
    BASE_ITERATIONS, TrainConfig, evaluate_detector, incremental_iterations, train_base,
    train_incremental_step,
)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
OUTPUT_ROOT_ENV = "INCDET_OUTPUT_ROOT"


# --- experiment configuration ---------------------------------------------------

def _strict(cls, d, section: str):
    if not isinstance(d, dict):
        raise ConfigurationError(f"section '{section}' must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigurationError(f"unknown keys in '{section}': {sorted(unknown)}")
    return cls(**d)


@dataclass(frozen=True)
class DatasetSection:
    source: str = "synthetic"  # synthetic | voc
    path: str | None = None
    train_split: str = "train"
    test_split: str = "test"
    classes: int = 6
    train_images: int = 400
    test_images: int = 160
    image_size: tuple[int, int] = (64, 64)

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(self.image_size))
        if self.source not in ("synthetic", "voc"):
            raise ConfigurationError(f"dataset.source must be 'synthetic' or 'voc', got '{self.source}'")
        if self.source == "voc" and not self.path:
            raise ConfigurationError("dataset.path is required when dataset.source is 'voc'")


@dataclass(frozen=True)
class ScenarioSection:
    step_sizes: tuple[int, ...] = (4, 2)
    file: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "step_sizes", tuple(int(s) for s in self.step_sizes))


@dataclass(frozen=True)
class DetectorSection:
    family: str = "fcos_style"
    backbone_channels: tuple[int, ...] = (16, 32, 64)
    head_tower_depth: int = 4
    head_channels: int = 32

    def __post_init__(self):
        object.__setattr__(self, "backbone_channels", tuple(int(c) for c in self.backbone_channels))


@dataclass(frozen=True)
class DistillSection:
    preset: str = "none"
    overrides: dict = field(default_factory=dict)


@dataclass(frozen=True)
class TrainSection:
    batch_size: int | None = None
    iterations: int | None = None
    lr: float | None = None
    lr_decay_at: tuple[float, ...] = (0.75,)
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: float | None = 10.0
    old_class_negatives: bool = False

    def __post_init__(self):
        object.__setattr__(self, "lr_decay_at", tuple(self.lr_decay_at))


_SECTIONS = {"dataset": DatasetSection, "scenario": ScenarioSection, "detector": DetectorSection,
             "distill": DistillSection, "train": TrainSection}


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    scenario: ScenarioSection = field(default_factory=ScenarioSection)
    detector: DetectorSection = field(default_factory=DetectorSection)
    distill: DistillSection = field(default_factory=DistillSection)
    train: TrainSection = field(default_factory=TrainSection)
    output_dir: str = "run"
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - {*_SECTIONS, "output_dir", "seed"}
        if unknown:
            raise ConfigurationError(f"unknown top-level config keys: {sorted(unknown)}")
        kw = {k: _strict(c, d[k], k) for k, c in _SECTIONS.items() if k in d}
        cfg = cls(**kw, output_dir=str(d.get("output_dir", "run")), seed=int(d.get("seed", 0)))
        DetectorConfig(cfg.detector.family, 1)  # validates family early
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        return json.loads(json.dumps(d))

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, assignments: Sequence[str]) -> dict:
    """Apply ``key.path=value`` assignments (values parsed as JSON when possible)."""
    d = json.loads(json.dumps(d))
    for item in assignments:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigurationError(f"--set expects key=value, got '{item}'")
        *parents, leaf = key.split(".")
        node = d
        for p in parents:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"--set {key}: '{p}' is not a section")
        node[leaf] = _parse_value(value)
    return d


def load_experiment(path: str | None, assignments: Sequence[str] = ()) -> ExperimentConfig:
    d = {}
    if path:
        p = Path(path)
        try:
            d = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{p}: invalid JSON ({exc})") from None
    return ExperimentConfig.from_dict(apply_overrides(d, assignments))


# --- helpers ----------------------------------------------------------------------

def output_root(args) -> Path:
    root = args.output_root or os.environ.get(OUTPUT_ROOT_ENV) or "."
    return Path(root)


def _resolve(args, path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else output_root(args) / p


def _banner(config_hash: str, seed: int):
    print(f"# config {config_hash} seed {seed}")


def load_datasets(cfg: ExperimentConfig):
    ds = cfg.dataset
    if ds.source == "synthetic":
        return SplitSpec(seed=cfg.seed, train_images=ds.train_images, test_images=ds.test_images,
                         class_catalog=synthetic_catalog(ds.classes), image_size=ds.image_size).build()
    return (load_voc_annotations(ds.path, ds.train_split), load_voc_annotations(ds.path, ds.test_split))


def load_scenario(cfg: ExperimentConfig, class_names, args=None) -> IncrementalScenario:
    if cfg.scenario.file:
        path = _resolve(args, cfg.scenario.file) if args is not None else Path(cfg.scenario.file)
        sc = IncrementalScenario.load(path)
        if sc.class_names != tuple(sorted(class_names)):
            raise ConfigurationError(f"scenario {path} lists classes that differ from the dataset catalog")
        return sc
    return make_scenario(class_names, cfg.scenario.step_sizes, seed=cfg.seed)


def train_config(cfg: ExperimentConfig, scenario: IncrementalScenario, step: int) -> TrainConfig:
    seen = len(scenario.seen_classes(step))
    det = DetectorConfig(cfg.detector.family, seen, input_resolution=cfg.dataset.image_size,
                         backbone_channels=cfg.detector.backbone_channels,
                         head_tower_depth=cfg.detector.head_tower_depth,
                         head_channels=cfg.detector.head_channels, seed=cfg.seed)
    t = cfg.train
    if t.iterations is not None:
        iterations = t.iterations
    else:
        iterations = BASE_ITERATIONS if step == 0 else incremental_iterations(len(scenario.steps[step]))
    distill = preset_by_key(cfg.distill.preset, det.family) if step > 0 else preset_by_key("none", det.family)
    if step > 0 and cfg.distill.overrides:
        distill = with_overrides(distill, **cfg.distill.overrides)
    return TrainConfig(det, distill, scenario, scenario_id=_scenario_id(scenario), step_index=step,
                       batch_size=t.batch_size, iterations=iterations, lr=t.lr, lr_decay_at=t.lr_decay_at,
                       lr_decay_factor=t.lr_decay_factor, momentum=t.momentum, weight_decay=t.weight_decay,
                       grad_clip=t.grad_clip, old_class_negatives=t.old_class_negatives, seed=cfg.seed)


def _scenario_id(sc: IncrementalScenario) -> str:
    return hashlib.sha256(json.dumps(sc.to_dict(), sort_keys=True).encode()).hexdigest()[:8]


def _print_json(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


# --- commands ---------------------------------------------------------------------

def cmd_gen_synth(args) -> int:
    spec = SynthSpec(seed=args.seed, num_images=args.images, class_catalog=synthetic_catalog(args.classes),
                     image_size=(args.size, args.size), id_prefix=args.split)
    dataset = generate_synthetic(spec)
    root = _resolve(args, args.out)
    write_voc(dataset, root, args.split)
    manifest = {"spec": json.loads(json.dumps(asdict(spec))), "seed": args.seed,
                "config_hash": hashlib.sha256(json.dumps(asdict(spec), sort_keys=True).encode()).hexdigest()[:12]}
    (root / f"{args.split}.synth.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _banner(manifest["config_hash"], args.seed)
    print(f"wrote {len(dataset)} images to {root} (split '{args.split}')")
    counts = dataset.instance_counts()
    for k, name in enumerate(dataset.class_names):
        print(f"{name}\t{counts[k]}")
    return EXIT_OK


def cmd_make_protocol(args) -> int:
    if args.dataset:
        names = load_voc_annotations(args.dataset, args.split, load_images=False).class_names
    elif args.classes == "voc":
        names = VOC_CLASSES
    elif args.classes.isdigit():
        names = synthetic_catalog(int(args.classes))
    else:
        names = [n.strip() for n in args.classes.split(",") if n.strip()]
    try:
        sizes = [int(s) for s in args.steps.split(",")]
    except ValueError:
        raise ConfigurationError(f"--steps expects comma-separated integers, got '{args.steps}'") from None
    sc = make_scenario(names, sizes, seed=args.seed)
    out = _resolve(args, args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    sc.save(out)
    for k in range(sc.num_steps):
        print(f"step {k}: {', '.join(sc.step_names(k))}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = list(args.set or [])
    if getattr(args, "distill", None):
        overrides.append(f"distill.preset={args.distill}")
    cfg = load_experiment(args.config, overrides)
    train, test = load_datasets(cfg)
    sc = load_scenario(cfg, train.class_names, args)
    step = args.step
    if not 0 <= step < sc.num_steps:
        raise ConfigurationError(f"--step {step} outside scenario with {sc.num_steps} steps")
    tcfg = train_config(cfg, sc, step)
    out_dir = _resolve(args, cfg.output_dir)
    _banner(tcfg.config_hash(), tcfg.seed)
    train_k, test_k = step_train_data(train, sc, step), step_test_data(test, sc, step)
    if step == 0:
        res = train_base(tcfg, train_k, test_k, out_dir)
    else:
        source = Path(args.source) if args.source else out_dir / f"step{step - 1}.ckpt"
        if not source.exists():
            raise ResumeError(f"step {step} needs the step {step - 1} checkpoint; not found: {source}")
        res = train_incremental_step(source, train_k, tcfg, test_k, out_dir)
    res.report.provenance.update(method=cfg.distill.preset if step > 0 else "base",
                                 experiment_hash=cfg.config_hash())
    write_report(out_dir / f"step{step}.report.json", res.report)
    r = res.report
    f1 = "-" if r.f1i is None else f"{r.f1i:.4f}"
    print(f"step {step}: mAP {r.overall_map:.4f}  F1^i {f1}  -> {res.checkpoint_path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_experiment(args.config, args.set or [])
    ck = load_checkpoint(args.checkpoint)
    _, test = load_datasets(cfg)
    sc = load_scenario(cfg, test.class_names, args)
    step = args.step
    if not 0 <= step < sc.num_steps:
        raise ConfigurationError(f"--step {step} outside scenario with {sc.num_steps} steps")
    if ck.detector.num_classes != len(sc.seen_classes(step)):
        raise ConfigurationError(
            f"checkpoint has {ck.detector.num_classes} classes; step {step} expects {len(sc.seen_classes(step))}")
    old, new = step_class_partition(sc, step) if step > 0 else (set(), set(sc.steps[0]))
    meta = ck.metadata
    _banner(meta.get("config_hash", "unknown"), meta.get("seed", cfg.seed))
    report = evaluate_detector(ck.detector, step_test_data(test, sc, step), sorted(old), sorted(new),
                               thresholds=args.iou, class_names=list(sc.class_names[: ck.detector.num_classes]))
    report.provenance = {"config_hash": meta.get("config_hash"), "seed": meta.get("seed"), "step": step,
                         "method": args.method or meta.get("train_config", {}).get("distill", {}).get("mode", "base"),
                         "checkpoint": Path(args.checkpoint).name}
    out = _resolve(args, args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(out, report)
    _print_json({k: v for k, v in report.to_dict().items() if k in ("overall_map", "p_old", "p_new", "f1i")})
    return EXIT_OK


def _pct(v):
    return "-" if v is None else f"{100 * v:.1f}"


def report_rows(paths: Sequence[str]) -> list[dict]:
    rows = []
    for p in paths:
        r: EvalReport = read_report(p)
        prov = r.provenance
        rows.append({"file": str(p), "method": prov.get("method") or Path(p).stem,
                     "step": prov.get("step"), "overall_map": r.overall_map, "f1i": r.f1i,
                     "p_old": r.p_old, "p_new": r.p_new,
                     "config_hash": prov.get("config_hash"), "seed": prov.get("seed")})
    return rows


def format_table(rows: Sequence[dict]) -> str:
    """Methods as rows, steps as columns; cells read ``mAP / F1^i`` in percent."""
    methods = list(dict.fromkeys(r["method"] for r in rows))
    steps = sorted({r["step"] for r in rows}, key=lambda s: (s is None, s))
    cells = {(r["method"], r["step"]): f"{_pct(r['overall_map'])} / {_pct(r['f1i'])}" for r in rows}
    header = ["method"] + [f"step {s}" if s is not None else "step ?" for s in steps]
    body = [[m] + [cells.get((m, s), "") for s in steps] for m in methods]
    widths = [max(len(row[k]) for row in [header] + body) for k in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in [header] + body]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n\ncells: mAP / F1^i (%)\n"


def cmd_report(args) -> int:
    rows = report_rows(args.reports)
    text = format_table(rows)
    print(text, end="")
    out = _resolve(args, args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.with_suffix(".txt").write_text(text)
    out.with_suffix(".json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


# --- parser -----------------------------------------------------------------------

def _iou_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",")]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="incdet", description="Incremental anchor-free detection experiments.")
    p.add_argument("--output-root", help=f"base directory for relative outputs (default ${OUTPUT_ROOT_ENV} or .)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", help="write a synthetic shapes dataset in VOC layout")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--images", type=int, default=400)
    g.add_argument("--classes", type=int, default=6)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--split", default="train")
    g.add_argument("--out", default="synth")
    g.set_defaults(func=cmd_gen_synth)

    m = sub.add_parser("make-protocol", help="write an incremental scenario file")
    m.add_argument("--classes", default="voc", help="'voc', a synthetic class count, or a comma list")
    m.add_argument("--dataset", help="take the class catalog from a VOC-layout dataset")
    m.add_argument("--split", default="train")
    m.add_argument("--steps", required=True, help="comma-separated step sizes, e.g. 15,5")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", default="scenario.json")
    m.set_defaults(func=cmd_make_protocol)

    def train_args(sp, step_default, fixed_step=False):
        sp.add_argument("--config", help="experiment config (JSON)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        if not fixed_step:
            sp.add_argument("--step", type=int, default=step_default)
        sp.add_argument("--distill", help="distillation preset key (sid-fcos, sid-centernet, lwf, none, ...)")
        sp.add_argument("--source", help="source checkpoint (default: previous step in output_dir)")
        sp.set_defaults(func=cmd_train)

    train_args(sub.add_parser("train", help="train one step of the scenario"), 0)
    tb = sub.add_parser("train-base", help="alias for 'train --step 0'")
    train_args(tb, 0, fixed_step=True)
    tb.set_defaults(step=0)
    train_args(sub.add_parser("train-incremental", help="train an incremental step (default 1)"), 1)

    e = sub.add_parser("evaluate", help="evaluate a checkpoint on the step's test view")
    e.add_argument("--config")
    e.add_argument("--set", action="append", metavar="KEY=VALUE")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--step", type=int, required=True)
    e.add_argument("--iou", type=_iou_list, default=[0.5], help="comma-separated IoU thresholds")
    e.add_argument("--method", help="method label stored in the report")
    e.add_argument("--out", default="eval.report.json")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="tabulate report files as 'mAP / F1^i' cells")
    r.add_argument("reports", nargs="+")
    r.add_argument("--out", default="report", help="path prefix for the .txt and .json outputs")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "train-incremental" and args.step < 1:
        print("error: train-incremental needs --step >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigurationError, CatalogError, TapError, StructuralError, ShapeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, AnnotationParseError, ResumeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
