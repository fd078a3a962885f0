"""Class-incremental scenarios and per-step data visibility."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .data import DetectionDataset, DetectionSample
from .errors import ConfigurationError


@dataclass(frozen=True)
class IncrementalScenario:
    """Alphabetically ordered classes split into consecutive training steps.

    Class ids are indices into ``class_names``. Old-class exemplars are never
    replayed, so ``exemplars_allowed`` is always ``False``.
    """
    class_names: tuple[str, ...]
    step_sizes: tuple[int, ...]
    seed: int = 0
    exemplars_allowed: bool = False

    def __post_init__(self):
        if list(self.class_names) != sorted(self.class_names) or len(set(self.class_names)) != len(self.class_names):
            raise ConfigurationError("class_names must be unique and alphabetically sorted")
        if not self.step_sizes or any(int(s) < 1 for s in self.step_sizes):
            raise ConfigurationError(f"step sizes must be positive integers, got {list(self.step_sizes)}")
        if sum(self.step_sizes) > len(self.class_names):
            raise ConfigurationError(
                f"step sizes sum to {sum(self.step_sizes)} but only {len(self.class_names)} classes exist")
        if self.exemplars_allowed:
            raise ConfigurationError("exemplar replay is not part of this protocol")

    @property
    def steps(self) -> list[range]:
        out, start = [], 0
        for size in self.step_sizes:
            out.append(range(start, start + size))
            start += size
        return out

    @property
    def num_steps(self) -> int:
        return len(self.step_sizes)

    def seen_classes(self, step_index: int) -> list[int]:
        """All class ids introduced up to and including ``step_index``."""
        return list(range(sum(self.step_sizes[: step_index + 1])))

    def step_names(self, step_index: int) -> list[str]:
        return [self.class_names[c] for c in self.steps[step_index]]

    def to_dict(self) -> dict:
        return {"class_names": list(self.class_names), "step_sizes": list(self.step_sizes),
                "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "IncrementalScenario":
        unknown = set(d) - {"class_names", "step_sizes", "seed", "steps"}
        if unknown:
            raise ConfigurationError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(tuple(d["class_names"]), tuple(int(s) for s in d["step_sizes"]), int(d.get("seed", 0)))

    def save(self, path) -> None:
        d = self.to_dict()
        d["steps"] = [self.step_names(k) for k in range(self.num_steps)]
        Path(path).write_text(json.dumps(d, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "IncrementalScenario":
        return cls.from_dict(json.loads(Path(path).read_text()))


def make_scenario(class_names: Iterable[str], step_sizes: Sequence[int], seed: int = 0) -> IncrementalScenario:
    """Sort ``class_names`` alphabetically and assign consecutive id ranges to steps."""
    names = tuple(sorted(class_names))
    sizes = tuple(int(s) for s in step_sizes)
    if sum(sizes) > len(names):
        raise ConfigurationError(f"step sizes {list(sizes)} exceed the {len(names)} available classes")
    return IncrementalScenario(names, sizes, seed)


def step_class_partition(scenario: IncrementalScenario, step_index: int) -> tuple[set[int], set[int]]:
    """(old, new) class ids for an incremental step; step 0 has no old classes."""
    if not 1 <= step_index < scenario.num_steps:
        raise ConfigurationError(
            f"step index {step_index} is not an incremental step (valid: 1..{scenario.num_steps - 1})")
    new = set(scenario.steps[step_index])
    old = set(range(scenario.steps[step_index].start))
    return old, new


@dataclass(frozen=True)
class StepDataset:
    class_names: tuple[str, ...]
    samples: tuple[DetectionSample, ...]
    visible_classes: frozenset[int]

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def ground_truth(self, class_ids=None):
        return DetectionDataset(self.class_names, self.samples).ground_truth(class_ids)


def filter_annotations(full_dataset, visible_classes: Iterable[int]) -> StepDataset:
    """Drop annotations of non-visible classes, then images left with none.

    Pixels are untouched: objects of hidden classes stay in the images as
    unlabeled content.
    """
    visible = frozenset(int(c) for c in visible_classes)
    if not visible:
        raise ConfigurationError("visible_classes must be nonempty")
    kept = []
    for s in full_dataset.samples:
        anns = tuple((c, b) for c, b in s.annotations if c in visible)
        if anns:
            kept.append(s if len(anns) == len(s.annotations) else DetectionSample(s.image_id, s.image, anns))
    return StepDataset(tuple(full_dataset.class_names), tuple(kept), visible)


def step_train_data(full_train, scenario: IncrementalScenario, step_index: int) -> StepDataset:
    """Training data for a step: only this step's classes are labelled."""
    return filter_annotations(full_train, scenario.steps[step_index])


def step_test_data(full_test, scenario: IncrementalScenario, step_index: int) -> DetectionDataset:
    """Test data after a step: every image, labelled for all classes seen so far."""
    seen = set(scenario.seen_classes(step_index))
    return DetectionDataset(tuple(full_test.class_names), tuple(
        DetectionSample(s.image_id, s.image, tuple((c, b) for c, b in s.annotations if c in seen))
        for s in full_test.samples))
