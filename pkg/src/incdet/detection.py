"""Standard per-family detection losses, target encoding and box decoding.

fcos_style: sigmoid focal loss on classification, binary cross-entropy on
center-ness and L1 on log-scaled side distances at positive locations.
centernet_style: penalty-reduced focal loss on a Gaussian heatmap, L1 on
size and offset at object centres.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .metrics import DetectionRecord
from .model import CenterNetStyleDetector, Detector, FCOSStyleDetector

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
CENTERNET_ALPHA = 2.0
CENTERNET_BETA = 4.0
CENTERNET_SIZE_WEIGHT = 0.1
CENTER_SAMPLING_RADIUS = 1.5


def loss_hyperparameters(family: str) -> dict:
    if family == "fcos_style":
        return {"focal_alpha": FOCAL_ALPHA, "focal_gamma": FOCAL_GAMMA,
                "center_sampling_radius": CENTER_SAMPLING_RADIUS}
    return {"focal_alpha": CENTERNET_ALPHA, "focal_beta": CENTERNET_BETA,
            "size_weight": CENTERNET_SIZE_WEIGHT}


# --- fcos_style ---------------------------------------------------------------

def fcos_size_ranges(strides: Sequence[int]) -> list[tuple[float, float]]:
    """Max side-distance range handled by each pyramid level."""
    out = []
    for k, s in enumerate(strides):
        lo = 0.0 if k == 0 else 4.0 * strides[k - 1]
        hi = math.inf if k == len(strides) - 1 else 4.0 * s
        out.append((lo, hi))
    return out


def encode_fcos(annotations, num_classes: int, image_size, strides) -> dict[str, np.ndarray]:
    """Per-location targets for one image, concatenated over levels.

    Returns ``labels`` (-1 for background), ``reg`` (log distances / stride)
    and ``ctr`` (center-ness target).
    """
    h, w = image_size
    ranges = fcos_size_ranges(strides)
    labels, regs, ctrs = [], [], []
    boxes = np.array([b for _, b in annotations], dtype=np.float64).reshape(-1, 4)
    classes = np.array([c for c, _ in annotations], dtype=np.int64)
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    for s, (lo, hi) in zip(strides, ranges):
        fh, fw = h // s, w // s
        ys, xs = np.meshgrid(np.arange(fh) * s + s // 2, np.arange(fw) * s + s // 2, indexing="ij")
        xs, ys = xs.reshape(-1, 1).astype(np.float64), ys.reshape(-1, 1).astype(np.float64)
        lab = np.full(fh * fw, -1, np.int64)
        reg = np.zeros((fh * fw, 4))
        ctr = np.zeros(fh * fw)
        if len(boxes):
            l = xs - boxes[:, 0]
            t = ys - boxes[:, 1]
            r = boxes[:, 2] - xs
            b = boxes[:, 3] - ys
            dist = np.stack([l, t, r, b], -1)  # (N, G, 4)
            inside = dist.min(-1) > 0
            cx = (boxes[:, 0] + boxes[:, 2]) / 2
            cy = (boxes[:, 1] + boxes[:, 3]) / 2
            rad = CENTER_SAMPLING_RADIUS * s
            near = (np.abs(xs - cx) <= rad) & (np.abs(ys - cy) <= rad)
            m = dist.max(-1)
            ok = inside & near & (m > lo) & (m <= hi)
            cost = np.where(ok, areas[None, :], np.inf)
            best = cost.argmin(1)
            pos = np.isfinite(cost.min(1))
            lab[pos] = classes[best[pos]]
            d = dist[np.arange(len(best)), best]
            reg[pos] = np.log(d[pos] / s)
            lr_ = np.minimum(d[:, 0], d[:, 2]) / np.maximum(d[:, 0], d[:, 2])
            tb = np.minimum(d[:, 1], d[:, 3]) / np.maximum(d[:, 1], d[:, 3])
            ctr[pos] = np.sqrt(lr_[pos] * tb[pos])
        labels.append(lab)
        regs.append(reg)
        ctrs.append(ctr)
    return {"labels": np.concatenate(labels), "reg": np.concatenate(regs).astype(np.float32),
            "ctr": np.concatenate(ctrs).astype(np.float32)}


def _flatten_levels(maps: Sequence[torch.Tensor]) -> torch.Tensor:
    # list of (B, C, H, W) -> (B, sum HW, C)
    return torch.cat([m.flatten(2).transpose(1, 2) for m in maps], 1)


def sigmoid_focal_loss(logits, targets, alpha=FOCAL_ALPHA, gamma=FOCAL_GAMMA):
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    a_t = alpha * targets + (1 - alpha) * (1 - targets)
    return a_t * (1 - p_t) ** gamma * ce


def fcos_loss(outputs, targets: dict[str, torch.Tensor], trained_classes: Sequence[int]) -> torch.Tensor:
    cls = _flatten_levels(outputs["classification"])
    ctr = _flatten_levels(outputs["centerness"])[..., 0]
    reg = _flatten_levels(outputs["regression"])
    labels = targets["labels"]
    pos = labels >= 0
    n_pos = max(int(pos.sum()), 1)
    onehot = torch.zeros_like(cls)
    onehot[pos] = F.one_hot(labels[pos], cls.shape[-1]).to(cls.dtype)
    channels = torch.as_tensor(sorted(trained_classes))
    cls_loss = sigmoid_focal_loss(cls[..., channels], onehot[..., channels]).sum() / n_pos
    if not pos.any():
        return cls_loss + 0.0 * (ctr.sum() + reg.sum())
    ctr_loss = F.binary_cross_entropy_with_logits(ctr[pos], targets["ctr"][pos], reduction="mean")
    reg_loss = (reg[pos] - targets["reg"][pos]).abs().sum(-1).mean()
    return cls_loss + ctr_loss + reg_loss


def decode_fcos(detector: FCOSStyleDetector, outputs, image_ids, score_threshold=0.05,
                pre_nms_top=100, nms_iou=0.5, max_dets=50) -> list[DetectionRecord]:
    h, w = detector.config.input_resolution
    strides = detector.strides
    cls = _flatten_levels(outputs["classification"]).sigmoid()
    ctr = _flatten_levels(outputs["centerness"]).sigmoid()
    reg = _flatten_levels(outputs["regression"])
    pts, st = [], []
    for s, m in zip(strides, outputs["classification"]):
        fh, fw = m.shape[-2:]
        ys, xs = torch.meshgrid(torch.arange(fh) * s + s // 2, torch.arange(fw) * s + s // 2, indexing="ij")
        pts.append(torch.stack([xs.reshape(-1), ys.reshape(-1)], -1))
        st.append(torch.full((fh * fw,), float(s)))
    pts = torch.cat(pts).double()
    st = torch.cat(st).double()
    scores_all = torch.sqrt(cls * ctr).double()
    records = []
    for b, image_id in enumerate(image_ids):
        scores = scores_all[b]
        flat = scores.reshape(-1)
        keep = torch.nonzero(flat > score_threshold).reshape(-1)
        if keep.numel() > pre_nms_top:
            keep = keep[flat[keep].argsort(descending=True, stable=True)[:pre_nms_top]]
        n_cls = scores.shape[1]
        loc, c = keep // n_cls, keep % n_cls
        d = torch.exp(reg[b, loc].double().clamp(max=8.0)) * st[loc, None]
        x, y = pts[loc, 0], pts[loc, 1]
        boxes = torch.stack([(x - d[:, 0]).clamp(0, w), (y - d[:, 1]).clamp(0, h),
                             (x + d[:, 2]).clamp(0, w), (y + d[:, 3]).clamp(0, h)], -1)
        records += _nms_records(image_id, boxes.numpy(), flat[keep].numpy(), c.numpy(), nms_iou, max_dets)
    return records


# --- centernet_style ----------------------------------------------------------

def gaussian_radius(height: float, width: float, min_overlap: float = 0.7) -> float:
    """Largest centre shift keeping IoU >= ``min_overlap`` (the usual three-case bound)."""
    a1, b1 = 1, height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1 ** 2 - 4 * a1 * c1)) / 2
    a2, b2 = 4, 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 + math.sqrt(b2 ** 2 - 4 * a2 * c2)) / 2
    a3, b3 = 4 * min_overlap, -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + math.sqrt(b3 ** 2 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


def encode_centernet(annotations, num_classes: int, image_size, output_stride: int) -> dict[str, np.ndarray]:
    h, w = image_size[0] // output_stride, image_size[1] // output_stride
    heat = np.zeros((num_classes, h, w), np.float32)
    size = np.zeros((2, h, w), np.float32)
    offset = np.zeros((2, h, w), np.float32)
    mask = np.zeros((h, w), np.float32)
    ys, xs = np.mgrid[0:h, 0:w]
    for c, (x0, y0, x1, y1) in annotations:
        bw, bh = (x1 - x0) / output_stride, (y1 - y0) / output_stride
        cx, cy = (x0 + x1) / 2 / output_stride, (y0 + y1) / 2 / output_stride
        ix, iy = min(int(cx), w - 1), min(int(cy), h - 1)
        radius = max(0, int(gaussian_radius(math.ceil(bh), math.ceil(bw))))
        sigma = (2 * radius + 1) / 6
        g = np.exp(-((xs - ix) ** 2 + (ys - iy) ** 2) / (2 * sigma ** 2))
        g[(np.abs(xs - ix) > radius) | (np.abs(ys - iy) > radius)] = 0
        heat[c] = np.maximum(heat[c], g)
        size[:, iy, ix] = (bw, bh)
        offset[:, iy, ix] = (cx - ix, cy - iy)
        mask[iy, ix] = 1
    return {"heat": heat, "size": size, "offset": offset, "mask": mask}


def centernet_focal_loss(logits, heat, alpha=CENTERNET_ALPHA, beta=CENTERNET_BETA):
    # log-sigmoid form for numerical safety
    log_p = F.logsigmoid(logits)
    log_1mp = F.logsigmoid(-logits)
    p = log_p.exp()
    pos = heat.eq(1).to(logits.dtype)
    pos_loss = -((1 - p) ** alpha) * log_p * pos
    neg_loss = -((1 - heat) ** beta) * (p ** alpha) * log_1mp * (1 - pos)
    return pos_loss.sum(), neg_loss.sum(), pos.sum()


def centernet_loss(outputs, targets: dict[str, torch.Tensor], trained_classes: Sequence[int]) -> torch.Tensor:
    channels = torch.as_tensor(sorted(trained_classes))
    hm = outputs["heatmap"][0][:, channels]
    heat = targets["heat"][:, channels]
    pos_l, neg_l, n_pos = centernet_focal_loss(hm, heat)
    n_obj = targets["mask"].sum()
    hm_loss = (pos_l + neg_l) / torch.clamp(n_obj, min=1.0)
    mask = targets["mask"][:, None]
    denom = torch.clamp(mask.sum() * 2, min=1.0)
    size_loss = ((outputs["size"][0] - targets["size"]).abs() * mask).sum() / denom
    off_loss = ((outputs["offset"][0] - targets["offset"]).abs() * mask).sum() / denom
    return hm_loss + CENTERNET_SIZE_WEIGHT * size_loss + off_loss


def decode_centernet(detector: CenterNetStyleDetector, outputs, image_ids, score_threshold=0.05,
                     top_k=50) -> list[DetectionRecord]:
    s = detector.output_stride
    h, w = detector.config.input_resolution
    heat = outputs["heatmap"][0].sigmoid()
    peaks = F.max_pool2d(heat, 3, stride=1, padding=1)
    heat = heat * (peaks == heat)
    bsz, n_cls, fh, fw = heat.shape
    records = []
    for b, image_id in enumerate(image_ids):
        flat = heat[b].reshape(-1)
        k = min(top_k, flat.numel())
        scores, idx = torch.topk(flat, k)
        keep = scores > score_threshold
        scores, idx = scores[keep], idx[keep]
        c = idx // (fh * fw)
        rem = idx % (fh * fw)
        iy, ix = rem // fw, rem % fw
        off = outputs["offset"][0][b][:, iy, ix].double()
        wh = outputs["size"][0][b][:, iy, ix].double().clamp(min=0.0)
        cx = (ix.double() + off[0]) * s
        cy = (iy.double() + off[1]) * s
        bw, bh = wh[0] * s, wh[1] * s
        boxes = torch.stack([(cx - bw / 2).clamp(0, w), (cy - bh / 2).clamp(0, h),
                             (cx + bw / 2).clamp(0, w), (cy + bh / 2).clamp(0, h)], -1).numpy()
        for box, sc, cl in zip(boxes, scores.double().numpy(), c.numpy()):
            if box[0] < box[2] and box[1] < box[3]:
                records.append(DetectionRecord(image_id, int(cl), float(sc), tuple(float(v) for v in box)))
    return records


# --- shared ---------------------------------------------------------------------

def greedy_nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    """Indices kept by greedy non-maximum suppression, highest score first."""
    order = np.argsort(-scores, kind="stable")
    x0, y0, x1, y1 = boxes.T
    areas = (x1 - x0) * (y1 - y0)
    keep = []
    while order.size:
        i = order[0]
        keep.append(int(i))
        rest = order[1:]
        iw = np.clip(np.minimum(x1[i], x1[rest]) - np.maximum(x0[i], x0[rest]), 0, None)
        ih = np.clip(np.minimum(y1[i], y1[rest]) - np.maximum(y0[i], y0[rest]), 0, None)
        inter = iw * ih
        ious = inter / np.maximum(areas[i] + areas[rest] - inter, 1e-12)
        order = rest[ious <= iou_threshold]
    return keep


def _nms_records(image_id, boxes, scores, classes, nms_iou, max_dets):
    valid = (boxes[:, 0] < boxes[:, 2]) & (boxes[:, 1] < boxes[:, 3])
    boxes, scores, classes = boxes[valid], scores[valid], classes[valid]
    kept = []
    for c in np.unique(classes):
        sel = np.flatnonzero(classes == c)
        kept += [sel[k] for k in greedy_nms(boxes[sel], scores[sel], nms_iou)]
    kept.sort(key=lambda k: (-scores[k], k))
    return [DetectionRecord(image_id, int(classes[k]), float(scores[k]), tuple(float(v) for v in boxes[k]))
            for k in kept[:max_dets]]


def encode_targets(detector: Detector, annotations) -> dict[str, np.ndarray]:
    cfg = detector.config
    if isinstance(detector, FCOSStyleDetector):
        return encode_fcos(annotations, cfg.num_classes, cfg.input_resolution, detector.strides)
    return encode_centernet(annotations, cfg.num_classes, cfg.input_resolution, detector.output_stride)


def detection_loss(detector: Detector, outputs, targets, trained_classes) -> torch.Tensor:
    if isinstance(detector, FCOSStyleDetector):
        return fcos_loss(outputs, targets, trained_classes)
    return centernet_loss(outputs, targets, trained_classes)


def decode(detector: Detector, outputs, image_ids) -> list[DetectionRecord]:
    if isinstance(detector, FCOSStyleDetector):
        return decode_fcos(detector, outputs, image_ids)
    return decode_centernet(detector, outputs, image_ids)


@dataclass
class EncodedDataset:
    """Images and stacked per-image targets, ready for index batching."""
    image_ids: list[str]
    images: torch.Tensor
    targets: dict[str, torch.Tensor]

    def batch(self, idx):
        idx = torch.as_tensor(idx)
        return self.images[idx], {k: v[idx] for k, v in self.targets.items()}


def encode_dataset(detector: Detector, samples) -> EncodedDataset:
    from .model import images_to_tensor
    samples = list(samples)
    enc = [encode_targets(detector, s.annotations) for s in samples]
    targets = {k: torch.from_numpy(np.stack([e[k] for e in enc])) for k in enc[0]} if enc else {}
    images = images_to_tensor([s.image for s in samples]) if samples else torch.zeros(0)
    return EncodedDataset([s.image_id for s in samples], images, targets)
