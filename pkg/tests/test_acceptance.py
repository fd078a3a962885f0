"""Acceptance suite: one test (or parametrized group) per criterion.

Criteria 7 and 8 train real detectors on the synthetic benchmark (4 base +
2 incremental classes, 3 seeds) and share the trained models through a
session fixture. The whole module runs in roughly a quarter of an hour on
one CPU core.
"""
import math
import time
from statistics import mean

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from incdet import train as train_mod
from incdet.data import VOC_CLASSES, DetectionDataset, DetectionSample, SplitSpec
from incdet.distill import (
    aggregate_feature_distillation, feature_distillation_loss, inter_related_loss, pairwise_feature_distance,
    preset_config,
)
from incdet.metrics import DetectionRecord, average_precision, evaluate_report, f1i
from incdet.model import DetectorConfig, classwise_layer_view
from incdet.protocol import make_scenario, step_class_partition, step_test_data, step_train_data
from incdet.train import TrainConfig, train_base, train_incremental_step
from oracles import ap_by_cutoffs, central_difference, ir_loss_loop, sum_sq_loop

SEEDS = (0, 1, 2)
FAMILIES = ("fcos_style", "centernet_style")


def rel_err(got, want):
    return abs(got - want) / max(abs(want), 1e-300)


# --- 1. loss oracle equivalence ----------------------------------------------------

@pytest.mark.criterion(1, "loss oracle equivalence (rel err < 1e-12, < 10 s)")
def test_c1_loss_oracles(record_detail):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        shape = tuple(rng.integers(1, 4, size=4))
        a, b = rng.normal(size=shape), rng.normal(size=shape)
        got = feature_distillation_loss(torch.from_numpy(a), torch.from_numpy(b)).item()
        worst = max(worst, rel_err(got, sum_sq_loop(a, b)))
    for _ in range(50):
        n = int(rng.integers(1, 40))
        a, b = rng.normal(size=n), rng.normal(size=n)
        got = pairwise_feature_distance(torch.from_numpy(a), torch.from_numpy(b)).item()
        worst = max(worst, rel_err(got, sum_sq_loop(a, b)))
    for _ in range(50):
        n_taps, n_samples = int(rng.integers(1, 4)), int(rng.integers(2, 5))
        shapes = [(n_samples, *rng.integers(1, 4, size=3)) for _ in range(n_taps)]
        ts = [rng.normal(size=s) for s in shapes]
        ss = [rng.normal(size=s) for s in shapes]
        got = inter_related_loss([torch.from_numpy(x) for x in ts], [torch.from_numpy(x) for x in ss]).item()
        worst = max(worst, rel_err(got, ir_loss_loop(ts, ss)))
    elapsed = time.perf_counter() - t0
    record_detail(f"max rel err {worst:.2e}, {elapsed:.2f} s")
    assert worst < 1e-12
    assert elapsed < 10


# --- 2. gradient checks ---------------------------------------------------------------

@pytest.mark.criterion(2, "gradient checks vs central differences (max rel err < 1e-4, < 30 s)")
def test_c2_gradients(record_detail):
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()

    def max_rel(analytic, numeric):
        return float(np.max(np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)))

    # Eq. 1 on one 1x2x4x4 tap
    x, s = rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(1, 2, 4, 4))
    xt = torch.from_numpy(x.copy()).requires_grad_(True)
    aggregate_feature_distillation([xt], [torch.from_numpy(s)]).backward()
    numeric = central_difference(lambda v: sum_sq_loop(v, s), x, eps=1e-5)
    err1 = max_rel(xt.grad.numpy(), numeric)

    # Eq. 3 on two instances, each a 1x2x4x4 activation
    x, s = rng.normal(size=(2, 2, 4, 4)), rng.normal(size=(2, 2, 4, 4))
    xt = torch.from_numpy(x.copy()).requires_grad_(True)
    inter_related_loss([xt], [torch.from_numpy(s)]).backward()
    numeric = central_difference(lambda v: ir_loss_loop([v], [s]), x, eps=1e-5)
    err3 = max_rel(xt.grad.numpy(), numeric)
    elapsed = time.perf_counter() - t0
    record_detail(f"feature {err1:.1e}, inter-related {err3:.1e}, {elapsed:.2f} s")
    assert err1 < 1e-4 and err3 < 1e-4
    assert elapsed < 30


# --- 3. F1^i properties ----------------------------------------------------------------

@pytest.mark.criterion(3, "F1^i properties and report consistency")
@given(st.floats(0, 1), st.floats(0, 1))
def test_c3_f1i_symmetry_and_zero(p, q):
    assert f1i(p, q) == f1i(q, p)
    assert f1i(0.0, q) == 0.0


@pytest.mark.criterion(3, "F1^i properties and report consistency")
@pytest.mark.parametrize("p", [0.0, 0.25, 0.5, 1.0])
def test_c3_f1i_equal_case(p):
    assert f1i(p, p) == p


@pytest.mark.criterion(3, "F1^i properties and report consistency")
def test_c3_report_consistency():
    rng = np.random.default_rng(3)
    for trial in range(20):
        gts, preds = {}, []
        for i in range(8):
            img = f"im{i}"
            gts[img] = []
            for _ in range(int(rng.integers(1, 4))):
                c = int(rng.integers(0, 4))
                x0, y0 = rng.uniform(0, 40, size=2)
                box = (x0, y0, x0 + rng.uniform(5, 20), y0 + rng.uniform(5, 20))
                gts[img].append((c, box))
                if rng.random() < 0.8:
                    jitter = rng.normal(0, 2, size=4)
                    b = (box[0] + jitter[0], box[1] + jitter[1], box[2] + 25 + jitter[2], box[3] + 25 + jitter[3])
                    preds.append(DetectionRecord(img, c if rng.random() < 0.8 else int(rng.integers(0, 4)),
                                                 float(rng.random()), (b[0], b[1], max(b[2], b[0] + 1), max(b[3], b[1] + 1))))
        rep = evaluate_report(preds, gts, [0, 1], [2, 3])
        assert abs(rep.f1i - f1i(rep.p_old, rep.p_new)) <= 1e-12
        if rep.p_old == rep.p_new:
            assert rep.f1i == pytest.approx(rep.overall_map, abs=1e-12)


# --- 4. AP oracle -------------------------------------------------------------------------

@pytest.mark.criterion(4, "AP equals cutoff-enumeration oracle (exact, < 10 s)")
def test_c4_ap_oracle(record_detail):
    rng = np.random.default_rng(11)
    t0 = time.perf_counter()
    for _ in range(200):
        n_img = int(rng.integers(1, 4))
        gts = {}
        for i in range(n_img):
            boxes = []
            for _ in range(int(rng.integers(0, 4))):
                x0, y0 = rng.integers(0, 20, size=2)
                boxes.append((float(x0), float(y0), float(x0 + rng.integers(2, 10)), float(y0 + rng.integers(2, 10))))
            gts[f"i{i}"] = boxes
        preds = []
        for _ in range(int(rng.integers(0, 11))):
            img = f"i{int(rng.integers(0, n_img))}"
            x0, y0 = rng.integers(0, 20, size=2)
            box = (float(x0), float(y0), float(x0 + rng.integers(2, 10)), float(y0 + rng.integers(2, 10)))
            score = float(rng.integers(0, 5)) / 4  # frequent ties
            preds.append((img, score, box))
        got = average_precision([DetectionRecord(i, 0, s, b) for i, s, b in preds], gts, 0.5)
        assert got == ap_by_cutoffs(preds, gts, 0.5)
    elapsed = time.perf_counter() - t0
    record_detail(f"200 instances, {elapsed:.2f} s")
    assert elapsed < 10


# --- 5. restore exactness -------------------------------------------------------------------

@pytest.mark.criterion(5, "restore exactness on both families")
@pytest.mark.parametrize("family", FAMILIES)
def test_c5_restore_exact(family, monkeypatch):
    train, _ = SplitSpec(seed=5, train_images=40, test_images=8).build()
    sc = make_scenario(train.class_names, [4, 2], seed=5)
    base = train_base(TrainConfig(DetectorConfig(family, 4, seed=5), scenario=sc, iterations=5, seed=5),
                      step_train_data(train, sc, 0))
    captured = {}
    real = train_mod.restore_old_class_parameters

    def spy(target, source, old, layer=None):
        captured["pre"] = {k: v.clone() for k, v in target.state_dict().items()}
        return real(target, source, old, layer)

    monkeypatch.setattr(train_mod, "restore_old_class_parameters", spy)
    cfg = TrainConfig(DetectorConfig(family, 6, seed=5), distill=preset_config(family, "sid"), scenario=sc,
                      step_index=1, iterations=5, seed=5)
    res = train_incremental_step(base.checkpoint, step_train_data(train, sc, 1), cfg)
    lid = classwise_layer_view(res.detector).layer_id
    src, out, pre = base.detector.state_dict(), res.detector.state_dict(), captured["pre"]
    changed = 0
    for name, value in out.items():
        if name.startswith(lid + "."):
            assert torch.equal(value[:4], src[name])
            assert torch.equal(value[4:], pre[name][4:])
            changed += int(not torch.equal(pre[name][:4], src[name]))
        else:
            assert torch.equal(value, pre[name])
    assert changed > 0  # training did move the old slices, so the check is not vacuous


# --- 6. protocol invariants -------------------------------------------------------------------

def _voc_like_dataset(seed=0, n=60):
    rng = np.random.default_rng(seed)
    names = tuple(sorted(VOC_CLASSES))
    im = np.zeros((4, 4, 3), np.float32)
    samples = []
    for i in range(n):
        anns = tuple((int(rng.integers(0, 20)), (0.0, 0.0, 2.0, 2.0)) for _ in range(int(rng.integers(1, 5))))
        samples.append(DetectionSample(f"v{i}", im, anns))
    return DetectionDataset(names, tuple(samples))


@pytest.mark.criterion(6, "protocol partitions and filtered step data")
@pytest.mark.parametrize("sizes", [[15, 5], [10, 2, 2, 2, 2, 2], [15, 1, 1, 1, 1, 1]])
def test_c6_protocol(sizes):
    ds = _voc_like_dataset()
    sc = make_scenario(VOC_CLASSES, sizes)
    for k in range(1, sc.num_steps):
        old, new = step_class_partition(sc, k)
        assert not old & new and old | new == set(sc.seen_classes(k))
        step = step_train_data(ds, sc, k)
        assert all(c in new for s in step for c, _ in s.annotations)
        assert all(s.annotations for s in step)
        expected = {s.image_id for s in ds if any(c in new for c, _ in s.annotations)}
        assert {s.image_id for s in step} == expected


# --- 7 / 8. directional reproduction on the synthetic benchmark ----------------------------------

ABLATION = ("none", "outputs", "outputs+tower+restore")


@pytest.fixture(scope="session")
def synthetic_runs():
    """Base, fine-tune and SID (plus fcos ablation rows) for each family and seed."""
    runs = {}
    timing = {f: 0.0 for f in FAMILIES}
    for family in FAMILIES:
        kinds = ["none", "sid"] + (["outputs", "outputs+tower+restore"] if family == "fcos_style" else [])
        for seed in SEEDS:
            t0 = time.perf_counter()
            train, test = SplitSpec(seed=seed).build()
            sc = make_scenario(train.class_names, [4, 2], seed=seed)
            base = train_base(TrainConfig(DetectorConfig(family, 4, seed=seed), scenario=sc, seed=seed),
                              step_train_data(train, sc, 0), step_test_data(test, sc, 0))
            runs[family, seed, "base"] = base.report
            timing[family] += time.perf_counter() - t0
            for kind in kinds:
                t0 = time.perf_counter()
                cfg = TrainConfig(DetectorConfig(family, 6, seed=seed), distill=preset_config(family, kind),
                                  scenario=sc, step_index=1, iterations=train_mod.incremental_iterations(2),
                                  seed=seed)
                res = train_incremental_step(base.checkpoint, step_train_data(train, sc, 1), cfg,
                                             step_test_data(test, sc, 1))
                runs[family, seed, kind] = res.report
                if kind in ("none", "sid"):
                    timing[family] += time.perf_counter() - t0
    runs["timing"] = timing
    return runs


@pytest.mark.criterion(7, "SID beats fine-tuning on old classes and F1^i; fine-tuning forgets (< 45 min)")
@pytest.mark.parametrize("family", FAMILIES)
def test_c7_sid_vs_finetune(family, synthetic_runs, record_detail):
    r = synthetic_runs
    po_sid = mean(r[family, s, "sid"].p_old for s in SEEDS)
    po_ft = mean(r[family, s, "none"].p_old for s in SEEDS)
    f1_sid = mean(r[family, s, "sid"].f1i for s in SEEDS)
    f1_ft = mean(r[family, s, "none"].f1i for s in SEEDS)
    base_ap = mean(r[family, s, "base"].overall_map for s in SEEDS)
    minutes = sum(r["timing"].values()) / 60
    record_detail(f"{family}: base {base_ap:.3f}, Po sid {po_sid:.3f} vs ft {po_ft:.3f}, "
                  f"F1i sid {f1_sid:.3f} vs ft {f1_ft:.3f}, {minutes:.1f} min total")
    assert base_ap >= 0.6
    assert po_sid > po_ft + 0.15
    assert f1_sid > f1_ft
    assert po_ft < 0.5 * base_ap
    assert minutes < 45


@pytest.mark.criterion(8, "fcos ablation: none < outputs < outputs+tower+restore (gaps >= 0.02)")
def test_c8_ablation_monotone(synthetic_runs, record_detail):
    m = [mean(synthetic_runs["fcos_style", s, k].overall_map for s in SEEDS) for k in ABLATION]
    record_detail(" < ".join(f"{k} {v:.3f}" for k, v in zip(ABLATION, m)))
    assert m[1] - m[0] >= 0.02
    assert m[2] - m[1] >= 0.02


# --- 9. determinism ------------------------------------------------------------------------------

@pytest.mark.criterion(9, "identical config and seed reproduce logs and reports")
@pytest.mark.parametrize("family", FAMILIES)
def test_c9_determinism(family, tmp_path):
    train, test = SplitSpec(seed=3, train_images=60, test_images=20).build()
    sc = make_scenario(train.class_names, [4, 2], seed=3)

    def run(out):
        base = train_base(TrainConfig(DetectorConfig(family, 4, seed=3), scenario=sc, iterations=15, seed=3),
                          step_train_data(train, sc, 0), step_test_data(test, sc, 0), out)
        cfg = TrainConfig(DetectorConfig(family, 6, seed=3), distill=preset_config(family, "sid"), scenario=sc,
                          step_index=1, iterations=15, seed=3)
        return train_incremental_step(base.checkpoint, step_train_data(train, sc, 1), cfg,
                                      step_test_data(test, sc, 1), out)

    a, b = run(tmp_path / "a"), run(tmp_path / "b")
    assert a.log == b.log
    assert all(math.isfinite(r["total"]) for r in a.log)
    for name in ("step0.losses.jsonl", "step0.report.json", "step1.losses.jsonl", "step1.report.json", "step1.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
