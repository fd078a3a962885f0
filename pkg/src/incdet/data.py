"""Synthetic shapes dataset and VOC-style on-disk reading/writing."""
from __future__ import annotations

import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import AnnotationParseError, CatalogError, ConfigurationError

VOC_CLASSES = (
    "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat", "chair", "cow",
    "diningtable", "dog", "horse", "motorbike", "person", "pottedplant", "sheep", "sofa",
    "train", "tvmonitor",
)

COLORS = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.80, 0.20),
    "blue": (0.15, 0.30, 0.95),
    "yellow": (0.95, 0.90, 0.15),
    "magenta": (0.90, 0.20, 0.85),
    "cyan": (0.15, 0.90, 0.90),
    "orange": (1.00, 0.55, 0.05),
    "white": (0.97, 0.97, 0.97),
    "black": (0.03, 0.03, 0.03),
    "purple": (0.50, 0.15, 0.70),
}

SHAPES = ("circle", "square", "triangle", "diamond", "cross", "ring", "bar", "frame")

DEFAULT_CATALOG = (
    "blue_circle", "cyan_cross", "green_square", "magenta_ring", "red_triangle", "yellow_diamond",
)


def synthetic_catalog(num_classes: int) -> tuple[str, ...]:
    """First ``num_classes`` names: the default six, then unused color/shape pairs."""
    extra = [f"{c}_{s}" for s in SHAPES for c in COLORS if f"{c}_{s}" not in DEFAULT_CATALOG]
    names = list(DEFAULT_CATALOG) + extra
    if not 1 <= num_classes <= len(names):
        raise ConfigurationError(f"num_classes must be in [1, {len(names)}], got {num_classes}")
    return tuple(sorted(names[:num_classes]))


@dataclass(frozen=True)
class DetectionSample:
    image_id: str
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    annotations: tuple[tuple[int, tuple[float, float, float, float]], ...]

    def __post_init__(self):
        for c, (x0, y0, x1, y1) in self.annotations:
            if not (x0 < x1 and y0 < y1):
                raise AnnotationParseError(f"{self.image_id}: degenerate box {(x0, y0, x1, y1)}")


@dataclass(frozen=True)
class DetectionDataset:
    class_names: tuple[str, ...]
    samples: tuple[DetectionSample, ...]

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, k):
        return self.samples[k]

    def ground_truth(self, class_ids=None) -> dict[str, list]:
        """Image id -> [(class_id, box)], optionally restricted to ``class_ids``."""
        keep = None if class_ids is None else set(class_ids)
        return {
            s.image_id: [(c, b) for c, b in s.annotations if keep is None or c in keep]
            for s in self.samples
        }

    def instance_counts(self) -> dict[int, int]:
        counts = {k: 0 for k in range(len(self.class_names))}
        for s in self.samples:
            for c, _ in s.annotations:
                counts[c] += 1
        return counts


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    num_images: int = 400
    class_catalog: tuple[str, ...] = DEFAULT_CATALOG
    image_size: tuple[int, int] = (64, 64)
    objects_per_image: tuple[int, int] = (1, 3)
    min_box_side: int = 12
    max_box_side: int = 26
    id_prefix: str = "synth"

    def validate(self):
        names = list(self.class_catalog)
        if len(set(names)) != len(names):
            raise ConfigurationError("class names in the catalog must be unique")
        if not names:
            raise ConfigurationError("empty class catalog")
        for n in names:
            parse_class_name(n)
        if self.num_images < 1:
            raise ConfigurationError("num_images must be positive")
        lo, hi = self.objects_per_image
        if not (1 <= lo <= hi):
            raise ConfigurationError(f"bad objects_per_image range {self.objects_per_image}")
        h, w = self.image_size
        if self.min_box_side < 4 or self.max_box_side < self.min_box_side:
            raise ConfigurationError("need 4 <= min_box_side <= max_box_side")
        if self.min_box_side > min(h, w) - 2:
            raise ConfigurationError(
                f"image {self.image_size} too small for min_box_side={self.min_box_side}")


def parse_class_name(name: str) -> tuple[str, str]:
    color, _, shape = name.partition("_")
    if color not in COLORS or shape not in SHAPES:
        raise CatalogError(f"synthetic class '{name}' must be '<color>_<shape>' with color in "
                           f"{sorted(COLORS)} and shape in {list(SHAPES)}")
    return color, shape


def _shape_mask(shape: str, h: int, w: int) -> np.ndarray:
    # normalised coordinates in [-1, 1] at pixel centres
    y = (np.arange(h) + 0.5) / h * 2 - 1
    x = (np.arange(w) + 0.5) / w * 2 - 1
    yy, xx = np.meshgrid(y, x, indexing="ij")
    r2 = xx ** 2 + yy ** 2
    if shape == "circle":
        return r2 <= 1.0
    if shape == "square":
        return np.ones((h, w), bool)
    if shape == "triangle":
        return np.abs(xx) <= (yy + 1) / 2
    if shape == "diamond":
        return np.abs(xx) + np.abs(yy) <= 1.0
    if shape == "cross":
        return (np.abs(xx) <= 0.3) | (np.abs(yy) <= 0.3)
    if shape == "ring":
        return (r2 <= 1.0) & (r2 >= 0.35)
    if shape == "bar":
        return np.abs(yy) <= 0.45
    if shape == "frame":
        return (np.abs(xx) >= 0.55) | (np.abs(yy) >= 0.55)
    raise CatalogError(shape)


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def _to_unit(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float32) / np.float32(255)


def _box_iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def _render_image(rng: np.random.Generator, spec: SynthSpec, k: int, shapes):
    h, w = spec.image_size
    base = rng.uniform(0.35, 0.55)
    grad = rng.uniform(-0.08, 0.08, size=2)
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    img = base + grad[0] * yy + grad[1] * xx
    img = np.repeat(img[..., None], 3, axis=2) + rng.normal(0, 0.03, size=(h, w, 3))
    n_obj = int(rng.integers(spec.objects_per_image[0], spec.objects_per_image[1] + 1))
    boxes: list[tuple[int, tuple[float, float, float, float]]] = []
    for _ in range(n_obj):
        for _attempt in range(30):
            c = int(rng.integers(len(shapes)))
            bw = int(rng.integers(spec.min_box_side, min(spec.max_box_side, w - 2) + 1))
            bh = int(np.clip(round(bw * rng.uniform(0.8, 1.25)), spec.min_box_side, h - 2))
            x0 = int(rng.integers(0, w - bw + 1))
            y0 = int(rng.integers(0, h - bh + 1))
            box = (float(x0), float(y0), float(x0 + bw), float(y0 + bh))
            if all(_box_iou(box, b) < 0.15 for _, b in boxes):
                break
        else:
            continue
        color, shape = shapes[c]
        mask = _shape_mask(shape, bh, bw)
        rgb = np.clip(np.array(COLORS[color]) + rng.normal(0, 0.04, size=3), 0, 1)
        patch = img[y0:y0 + bh, x0:x0 + bw]
        patch[mask] = rgb
        boxes.append((c, box))
    # quantise to 8-bit levels so PNG storage is lossless
    return DetectionSample(f"{spec.id_prefix}_{k:05d}", _to_unit(_to_u8(img)), tuple(boxes))


def _meets_floor(samples, n_classes, num_images) -> bool:
    need = math.ceil(0.05 * num_images)
    present = np.zeros(n_classes, int)
    for s in samples:
        for c in {c for c, _ in s.annotations}:
            present[c] += 1
    return bool(np.all(present >= need))


def generate_synthetic(spec: SynthSpec, max_redraws: int = 50) -> DetectionDataset:
    """Render a deterministic shapes detection dataset.

    Class ids follow alphabetical order of ``class_catalog``. If some class
    appears in fewer than 5% of images the whole set is redrawn from the next
    seed in a fixed sequence, so the result is still a pure function of
    ``spec``.
    """
    spec.validate()
    names = tuple(sorted(spec.class_catalog))
    shapes = [parse_class_name(n) for n in names]
    seeds = np.random.SeedSequence(spec.seed).spawn(max_redraws)
    for ss in seeds:
        rng = np.random.default_rng(ss)
        samples = [_render_image(rng, spec, k, shapes) for k in range(spec.num_images)]
        samples = [s for s in samples if s.annotations]
        if len(samples) == spec.num_images and _meets_floor(samples, len(names), spec.num_images):
            return DetectionDataset(names, tuple(samples))
    raise ConfigurationError("could not satisfy the class-frequency floor; "
                             "increase num_images or objects_per_image")


# --- VOC layout -------------------------------------------------------------

def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def write_voc(dataset: DetectionDataset, root, split: str) -> Path:
    """Write ``dataset`` as JPEGImages/*.png, Annotations/*.xml and ImageSets/Main/<split>.txt."""
    root = Path(root)
    (root / "JPEGImages").mkdir(parents=True, exist_ok=True)
    (root / "Annotations").mkdir(parents=True, exist_ok=True)
    (root / "ImageSets" / "Main").mkdir(parents=True, exist_ok=True)
    (root / "classes.txt").write_text("".join(n + "\n" for n in dataset.class_names))
    for s in dataset.samples:
        fname = f"{s.image_id}.png"
        pixels = _to_u8(s.image)
        Image.fromarray(pixels).save(root / "JPEGImages" / fname, format="PNG", optimize=False)
        ann = ET.Element("annotation")
        ET.SubElement(ann, "filename").text = fname
        size = ET.SubElement(ann, "size")
        ET.SubElement(size, "width").text = str(s.image.shape[1])
        ET.SubElement(size, "height").text = str(s.image.shape[0])
        ET.SubElement(size, "depth").text = "3"
        for c, box in s.annotations:
            obj = ET.SubElement(ann, "object")
            ET.SubElement(obj, "name").text = dataset.class_names[c]
            ET.SubElement(obj, "difficult").text = "0"
            bb = ET.SubElement(obj, "bndbox")
            for tag, v in zip(("xmin", "ymin", "xmax", "ymax"), box):
                ET.SubElement(bb, tag).text = _fmt(v)
        ET.indent(ann)
        (root / "Annotations" / f"{s.image_id}.xml").write_bytes(ET.tostring(ann) + b"\n")
    (root / "ImageSets" / "Main" / f"{split}.txt").write_text(
        "".join(s.image_id + "\n" for s in dataset.samples))
    return root


def _read_catalog(root: Path, class_names):
    if class_names is not None:
        return tuple(sorted(class_names))
    f = root / "classes.txt"
    if f.exists():
        return tuple(sorted(n.strip() for n in f.read_text().splitlines() if n.strip()))
    return tuple(sorted(VOC_CLASSES))


def load_voc_annotations(root, split: str, class_names: Sequence[str] | None = None,
                         load_images: bool = True) -> DetectionDataset:
    """Read a VOC-layout directory.

    Class ids are assigned by alphabetical order of the catalog: ``class_names``
    if given, else ``classes.txt`` in ``root``, else the 20 VOC classes.
    With ``load_images=False`` each sample carries a zero-sized placeholder
    image (annotation-only use, e.g. evaluation ground truth).
    """
    root = Path(root)
    names = _read_catalog(root, class_names)
    index = {n: k for k, n in enumerate(names)}
    split_file = root / "ImageSets" / "Main" / f"{split}.txt"
    if not split_file.exists():
        raise FileNotFoundError(f"split list not found: {split_file}")
    ids = [line.strip().split()[0] for line in split_file.read_text().splitlines() if line.strip()]
    samples = []
    for image_id in ids:
        ann_path = root / "Annotations" / f"{image_id}.xml"
        if not ann_path.exists():
            raise FileNotFoundError(f"annotation file not found: {ann_path}")
        try:
            tree = ET.parse(ann_path).getroot()
        except ET.ParseError as exc:
            raise AnnotationParseError(f"{image_id}: unparseable annotation ({exc})") from None
        anns = []
        for obj in tree.findall("object"):
            name = (obj.findtext("name") or "").strip()
            if name not in index:
                raise CatalogError(f"{image_id}: unknown class name '{name}'")
            bb = obj.find("bndbox")
            try:
                box = tuple(float(bb.findtext(t)) for t in ("xmin", "ymin", "xmax", "ymax"))
            except (TypeError, ValueError, AttributeError):
                raise AnnotationParseError(f"{image_id}: missing or non-numeric bndbox") from None
            if not (box[0] < box[2] and box[1] < box[3]):
                raise AnnotationParseError(f"{image_id}: malformed box {box} (need min < max)")
            anns.append((index[name], box))
        if load_images:
            fname = tree.findtext("filename") or f"{image_id}.jpg"
            img_path = root / "JPEGImages" / fname
            if not img_path.exists():
                raise FileNotFoundError(f"image file not found: {img_path}")
            with Image.open(img_path) as im:
                image = _to_unit(np.asarray(im.convert("RGB")))
        else:
            image = np.zeros((0, 0, 3), np.float32)
        samples.append(DetectionSample(image_id, image, tuple(anns)))
    return DetectionDataset(names, tuple(samples))


@dataclass(frozen=True)
class SplitSpec:
    """Train/test pair of synthetic specs derived from one seed."""
    seed: int = 0
    train_images: int = 400
    test_images: int = 160
    class_catalog: tuple[str, ...] = DEFAULT_CATALOG
    image_size: tuple[int, int] = (64, 64)
    extra: dict = field(default_factory=dict)

    def build(self) -> tuple[DetectionDataset, DetectionDataset]:
        base = dict(class_catalog=self.class_catalog, image_size=self.image_size, **self.extra)
        train = generate_synthetic(SynthSpec(seed=self.seed, num_images=self.train_images,
                                             id_prefix="train", **base))
        test = generate_synthetic(SynthSpec(seed=self.seed + 10_000, num_images=self.test_images,
                                            id_prefix="test", **base))
        return train, test
