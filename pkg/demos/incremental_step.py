"""
One incremental step on the synthetic shapes benchmark
=======================================================

Trains a small FCOS-style detector on four shape classes, then adds the
remaining two classes with plain fine-tuning and with selective plus
inter-related distillation. Pass a number of base iterations as the first
argument to trade accuracy for time (default 2000, about a minute per run
on one CPU core).
"""

import sys

from incdet.data import SplitSpec
from incdet.distill import preset_config
from incdet.model import DetectorConfig
from incdet.protocol import make_scenario, step_test_data, step_train_data
from incdet.train import TrainConfig, incremental_iterations, train_base, train_incremental_step

base_iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
family = "fcos_style"

# Six synthetic classes, sorted alphabetically: four in the base step, two added later
train, test = SplitSpec(seed=0).build()
scenario = make_scenario(train.class_names, [4, 2])
print("base classes:", scenario.step_names(0))
print("new classes: ", scenario.step_names(1))

# Base step: ordinary detector training on images holding base-class objects
base_cfg = TrainConfig(DetectorConfig(family, 4), scenario=scenario, iterations=base_iterations)
base = train_base(base_cfg, step_train_data(train, scenario, 0), step_test_data(test, scenario, 0))
print(f"base mAP@0.5: {base.report.overall_map:.3f}")

# Incremental step: only new-class labels are visible, the base model is the frozen source
step_iterations = max(1, incremental_iterations(2) * base_iterations // 2000)
for kind in ("none", "sid"):
    cfg = TrainConfig(DetectorConfig(family, 6), distill=preset_config(family, kind), scenario=scenario,
                      step_index=1, iterations=step_iterations)
    res = train_incremental_step(base.checkpoint, step_train_data(train, scenario, 1), cfg,
                                 step_test_data(test, scenario, 1))
    r = res.report
    label = "fine-tune" if kind == "none" else "SID"
    print(f"{label:9s}  P_o {r.p_old:.3f}  P_n {r.p_new:.3f}  F1^i {r.f1i:.3f}  mAP {r.overall_map:.3f}")
