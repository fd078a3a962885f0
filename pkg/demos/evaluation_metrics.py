"""
Average precision and the F1^i score
====================================

"""

from incdet.metrics import DetectionRecord, average_precision, evaluate_report, f1i

# Ground truth for two images: class 0 is an old class, class 1 a new one
gts = {
    "img0": [(0, (10, 10, 30, 30)), (1, (40, 40, 60, 60))],
    "img1": [(0, (5, 5, 25, 25))],
}

# Detections: one good old-class hit, one miss, one good new-class hit
preds = [
    DetectionRecord("img0", 0, 0.9, (11, 11, 30, 31)),
    DetectionRecord("img1", 0, 0.4, (40, 40, 50, 50)),
    DetectionRecord("img0", 1, 0.8, (41, 39, 60, 61)),
]

# AP for the old class alone: one of two objects found at the top of the ranking
old_gt = {k: [b for c, b in v if c == 0] for k, v in gts.items()}
print("AP(class 0):", average_precision([p for p in preds if p.class_id == 0], old_gt))

# The report splits classes into old and new and combines them with a harmonic mean
report = evaluate_report(preds, gts, old_class_ids=[0], new_class_ids=[1])
print("P_o", report.p_old, "P_n", report.p_new, "F1^i", report.f1i, "mAP", report.overall_map)

# A model that keeps old classes but never learns new ones scores zero
print("F1^i(0.9, 0.0) =", f1i(0.9, 0.0))
