"""Corpus handling: on-disk layout, labeled/unlabeled split, resize cap, augmentation, synthetic crowds."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .density import DensityMap, HeadPointSet, load_annotation, make_density, save_annotation
from .errors import InvalidInput, InvalidParameter

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
CORPUS_FILE = "corpus.json"


@dataclass(frozen=True)
class Entry:
    id: str
    image: str
    annotation: str | None = None
    root: str = ""

    def image_path(self) -> Path:
        return Path(self.root) / self.image

    def annotation_path(self) -> Path | None:
        return Path(self.root) / self.annotation if self.annotation else None


@dataclass
class CorpusIndex:
    entries: list[Entry]
    labeled_ids: list[str]
    unlabeled_ids: list[str]
    split_seed: int

    def __post_init__(self):
        lab, unl = set(self.labeled_ids), set(self.unlabeled_ids)
        if lab & unl:
            raise InvalidInput("labeled and unlabeled ids overlap")
        by_id = self.by_id()
        for i in lab:
            if by_id[i].annotation is None:
                raise InvalidInput(f"labeled entry {i} has no annotation")

    def by_id(self) -> dict[str, Entry]:
        return {e.id: e for e in self.entries}

    def labeled(self) -> list[Entry]:
        d = self.by_id()
        return [d[i] for i in self.labeled_ids]

    def unlabeled(self) -> list[Entry]:
        d = self.by_id()
        return [d[i] for i in self.unlabeled_ids]

    def attach_unlabeled(self, extra: list[Entry]) -> "CorpusIndex":
        """Add an external pool as unlabeled data only (annotations, if any, are ignored)."""
        known = {e.id for e in self.entries}
        dup = known & {e.id for e in extra}
        if dup:
            raise InvalidInput(f"duplicate ids: {sorted(dup)[:5]}")
        return CorpusIndex(
            self.entries + list(extra),
            list(self.labeled_ids),
            list(self.unlabeled_ids) + [e.id for e in extra],
            self.split_seed,
        )

    def to_dict(self) -> dict:
        return {
            "entries": [vars(e) for e in self.entries],
            "labeled_ids": self.labeled_ids,
            "unlabeled_ids": self.unlabeled_ids,
            "split_seed": self.split_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusIndex":
        return cls([Entry(**e) for e in d["entries"]], d["labeled_ids"], d["unlabeled_ids"], d["split_seed"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "CorpusIndex":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Sample:
    id: str
    image: np.ndarray  # H x W x 3, float32
    points: HeadPointSet | None = None
    density: DensityMap | None = None
    meta: dict = field(default_factory=dict)

    @property
    def labeled(self) -> bool:
        return self.points is not None


def load_corpus(root: str | Path) -> list[Entry]:
    root = Path(root)
    doc = json.loads((root / CORPUS_FILE).read_text())
    return [Entry(e["id"], e["image"], e.get("annotation"), str(root)) for e in doc["entries"]]


def split(entries: list[Entry], labeled_ratio: float, seed: int) -> CorpusIndex:
    """Pick floor(ratio * n_annotated) labeled entries at random; everything else is unlabeled."""
    if not entries:
        raise InvalidInput("empty corpus")
    if not 0 < labeled_ratio <= 1:
        raise InvalidParameter(f"labeled ratio must lie in (0, 1], got {labeled_ratio}")
    annotated = [e.id for e in entries if e.annotation is not None]
    n_lab = int(math.floor(labeled_ratio * len(annotated) + 1e-9))
    rng = np.random.default_rng(seed)
    chosen = set(rng.permutation(len(annotated))[:n_lab].tolist())
    labeled = [annotated[i] for i in sorted(chosen)]
    lab_set = set(labeled)
    unlabeled = [e.id for e in entries if e.id not in lab_set]
    return CorpusIndex(list(entries), labeled, unlabeled, seed)


def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def load_sample(entry: Entry, labeled: bool = True, kernel: dict | None = None) -> Sample:
    image = read_image(entry.image_path())
    if not labeled or entry.annotation is None:
        return Sample(entry.id, image)
    _, pts = load_annotation(entry.annotation_path())
    h, w = image.shape[:2]
    if pts.image_size != (h, w):
        raise InvalidInput(f"{entry.id}: annotation size {pts.image_size} != image size {(h, w)}")
    return Sample(entry.id, image, pts, make_density(pts, **(kernel or {})))


def capped_size(hw: tuple[int, int], cap: int) -> tuple[int, int]:
    h, w = hw
    short = min(h, w)
    if short <= cap:
        return h, w
    s = cap / short
    return int(round(h * s)), int(round(w * s))


def resize_cap(image: np.ndarray, points: HeadPointSet | None, cap: int = 1920):
    """Shrink so the shorter side is at most ``cap``; points scale by the same factor."""
    if cap <= 0:
        raise InvalidParameter("cap must be positive")
    h, w = image.shape[:2]
    nh, nw = capped_size((h, w), cap)
    if (nh, nw) == (h, w):
        return image, points
    s = cap / min(h, w)
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(nh, nw), mode="bilinear", align_corners=False, antialias=True)
    out = out[0].permute(1, 2, 0).numpy()
    if points is None:
        return out, None
    p = points.points * s
    # guard against the last row/col rounding onto the new border
    p[:, 0] = np.minimum(p[:, 0], np.nextafter(nw, 0))
    p[:, 1] = np.minimum(p[:, 1], np.nextafter(nh, 0))
    return out, HeadPointSet(p, (nh, nw))


def hflip(sample: Sample, kernel: dict | None = None) -> Sample:
    image = sample.image[:, ::-1].copy()
    if sample.points is None:
        return Sample(sample.id, image, meta=dict(sample.meta))
    h, w = sample.points.image_size
    p = sample.points.points.copy()
    if len(p):
        # continuous coordinates reflect about the image width: x -> w - x
        p[:, 0] = np.where(w - p[:, 0] < w, w - p[:, 0], np.nextafter(w, 0))
    pts = HeadPointSet(p, (h, w))
    density = sample.density
    if density is not None:
        if kernel is None:
            density = DensityMap(density.grid[:, ::-1].copy(), density.cell_scale, dict(density.meta))
        else:
            density = make_density(pts, **kernel)
    return Sample(sample.id, image, pts, density, dict(sample.meta))


def random_crop(sample: Sample, size: int | tuple[int, int], rng: np.random.Generator,
                kernel: dict | None = None) -> Sample:
    ch, cw = (size, size) if isinstance(size, int) else size
    h, w = sample.image.shape[:2]
    if ch > h or cw > w:
        raise InvalidParameter(f"crop {ch}x{cw} larger than image {h}x{w}")
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return crop_sample(sample, top, left, ch, cw, kernel)


def crop_sample(sample: Sample, top: int, left: int, ch: int, cw: int, kernel: dict | None = None) -> Sample:
    image = sample.image[top : top + ch, left : left + cw].copy()
    meta = dict(sample.meta, crop=(top, left, ch, cw))
    if sample.points is None:
        return Sample(sample.id, image, meta=meta)
    p = sample.points.points
    keep = (p[:, 0] >= left) & (p[:, 0] < left + cw) & (p[:, 1] >= top) & (p[:, 1] < top + ch)
    pts = HeadPointSet(p[keep] - [left, top], (ch, cw))
    # density is rebuilt from surviving heads, so mass == surviving count
    return Sample(sample.id, image, pts, make_density(pts, **(kernel or {})), meta)


def normalize(image: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    return ((image - np.asarray(mean, np.float32)) / np.asarray(std, np.float32)).astype(np.float32)


def augment(sample: Sample, rng: np.random.Generator, crop_size=224, flip_p: float = 0.5,
            mean=IMAGENET_MEAN, std=IMAGENET_STD, kernel: dict | None = None) -> Sample:
    """Random horizontal flip, random crop and per-channel normalization."""
    if rng.random() < flip_p:
        sample = hflip(sample, kernel=None)
    out = random_crop(sample, crop_size, rng, kernel)
    out.image = normalize(out.image, mean, std)
    return out


def to_tensor(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))


# --- synthetic crowds -------------------------------------------------------

def _render_scene(rng: np.random.Generator, size: tuple[int, int], n: int):
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    img = np.zeros((h, w, 3), np.float32)
    # low-frequency clutter: a few broad faint color bumps
    for _ in range(int(rng.integers(2, 6))):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        s = rng.uniform(0.15, 0.5) * max(h, w)
        amp = rng.uniform(0.05, 0.25, size=3).astype(np.float32)
        img += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))[..., None] * amp
    img += rng.normal(0, 0.03, size=img.shape).astype(np.float32)

    n_clusters = int(rng.integers(1, 4))
    centers = rng.uniform([0.2 * w, 0.2 * h], [0.8 * w, 0.8 * h], size=(n_clusters, 2))
    pts = []
    while len(pts) < n:
        if rng.random() < 0.5:
            x, y = rng.uniform(0, w), rng.uniform(0, h)
        else:
            c = centers[int(rng.integers(n_clusters))]
            x, y = rng.normal(c, 0.12 * min(h, w))
        if 0 <= x < w and 0 <= y < h:
            pts.append((round(float(x), 2) % w, round(float(y), 2) % h))
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)

    blobs = []
    for x, y in pts:
        radius = rng.uniform(2.0, 5.0)
        color = rng.uniform(0.4, 0.9) * rng.uniform(0.7, 1.0, size=3)
        d = np.sqrt((xx - x) ** 2 + (yy - y) ** 2)
        img += np.clip(radius + 0.5 - d, 0.0, 1.0)[..., None] * color.astype(np.float32)
        blobs.append({"x": float(x), "y": float(y), "radius": float(radius)})
    return np.clip(img, 0.0, 1.0), pts, blobs


def synth_corpus(out_dir: str | Path, n_images: int, density_range=(5, 50), seed: int = 0,
                 image_size=(128, 128)) -> list[Entry]:
    """Write ``n_images`` PNG + JSON pairs of blob crowds and a ``corpus.json`` index."""
    if n_images < 1:
        raise InvalidParameter("n_images must be >= 1")
    lo, hi = int(density_range[0]), int(density_range[1])
    if lo < 0 or hi < lo:
        raise InvalidParameter(f"bad density range {density_range}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(seed).spawn(n_images)
    entries, records = [], []
    for i, ss in enumerate(children):
        rng = np.random.default_rng(ss)
        n = int(rng.integers(lo, hi + 1))
        img, pts, blobs = _render_scene(rng, tuple(image_size), n)
        name = f"img_{i:04d}"
        Image.fromarray((img * 255).round().astype(np.uint8)).save(out / "images" / f"{name}.png")
        save_annotation(out / "annotations" / f"{name}.json", f"images/{name}.png", HeadPointSet(pts, tuple(image_size)))
        entries.append(Entry(name, f"images/{name}.png", f"annotations/{name}.json", str(out)))
        records.append({"id": name, "image": f"images/{name}.png", "annotation": f"annotations/{name}.json",
                        "blobs": len(blobs)})
    doc = {"generator": {"n_images": n_images, "density_range": [lo, hi], "seed": seed,
                         "image_size": list(image_size)}, "entries": records}
    (out / CORPUS_FILE).write_text(json.dumps(doc, indent=1))
    return entries
