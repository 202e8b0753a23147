"""Nested crop geometry and rank-consistent pair enumeration.

For one feature map of shape (C, H, W) we pick a center near the middle of
the map, shrink the full map M times by a ratio ``r`` around that center and
collect every (smaller, larger) pair of the resulting M + 1 boxes.  Box 0 is
the smallest crop and box M is the whole map.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidParameter, InvalidRegion, LevelTooSmall

MIN_SIDE = 2


@dataclass(frozen=True)
class CropBox:
    """Axis-aligned box in the integer cell coordinates of one level."""

    top: int
    left: int
    height: int
    width: int

    def __post_init__(self):
        if self.height < 0 or self.width < 0:
            raise InvalidRegion(f"negative box size: {self}")

    @property
    def bottom(self) -> int:
        return self.top + self.height

    @property
    def right(self) -> int:
        return self.left + self.width

    @property
    def area(self) -> int:
        return self.height * self.width

    def contains(self, other: "CropBox") -> bool:
        return (
            self.top <= other.top
            and self.left <= other.left
            and other.bottom <= self.bottom
            and other.right <= self.right
        )

    def intersect(self, other: "CropBox") -> "CropBox":
        top, left = max(self.top, other.top), max(self.left, other.left)
        bottom, right = min(self.bottom, other.bottom), min(self.right, other.right)
        return CropBox(top, left, max(0, bottom - top), max(0, right - left))

    def union_hull(self, other: "CropBox") -> "CropBox":
        top, left = min(self.top, other.top), min(self.left, other.left)
        bottom, right = max(self.bottom, other.bottom), max(self.right, other.right)
        return CropBox(top, left, bottom - top, right - left)

    def within(self, height: int, width: int) -> bool:
        return self.top >= 0 and self.left >= 0 and self.bottom <= height and self.right <= width

    def to_dict(self) -> dict:
        return {"top": self.top, "left": self.left, "height": self.height, "width": self.width}

    @classmethod
    def full(cls, height: int, width: int) -> "CropBox":
        return cls(0, 0, height, width)


@dataclass(frozen=True)
class NestedPatchSet:
    boxes: tuple[CropBox, ...]
    level_shape: tuple[int, int, int]
    center: tuple[int, int]

    @property
    def M(self) -> int:
        return len(self.boxes) - 1

    def validate(self) -> None:
        _, h, w = self.level_shape
        if self.boxes[-1] != CropBox.full(h, w):
            raise InvalidRegion("largest box must cover the full feature map")
        for box in self.boxes:
            if box.height < 1 or box.width < 1 or not box.within(h, w):
                raise InvalidRegion(f"degenerate or out-of-bounds box {box}")
        for m, n in itertools.combinations(range(len(self.boxes)), 2):
            if not _in_rank_set(self.boxes[m], self.boxes[n]):
                raise InvalidRegion(f"box {m} not nested in box {n}")

    def to_dict(self) -> dict:
        return {
            "level_shape": list(self.level_shape),
            "center": list(self.center),
            "boxes": [b.to_dict() for b in self.boxes],
        }


@dataclass(frozen=True)
class RankPairSet:
    pairs: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.pairs)

    def index_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        small = np.array([p[0] for p in self.pairs], dtype=np.int64)
        large = np.array([p[1] for p in self.pairs], dtype=np.int64)
        return small, large


def _in_rank_set(small: CropBox, large: CropBox) -> bool:
    # membership test of a pair: small ∩ large == small and small ∪ large == large
    return small.intersect(large) == small and small.union_hull(large) == large


def round_half_up(x: float) -> int:
    # tolerance absorbs products like 0.7 * 5 landing a hair below .5
    return int(math.floor(x + 0.5 + 1e-9))


def _hw(level_shape: Sequence[int]) -> tuple[int, int]:
    if len(level_shape) == 2:
        return int(level_shape[0]), int(level_shape[1])
    return int(level_shape[-2]), int(level_shape[-1])


def center_region(level_shape: Sequence[int]) -> tuple[range, range]:
    """Integer rows/cols of the ceil(H/8) x ceil(W/8) region around (H/2, W/2)."""
    h, w = _hw(level_shape)
    if h < 8 or w < 8:
        raise LevelTooSmall(f"level {h}x{w} is smaller than 8x8")
    out = []
    for size in (h, w):
        half = math.ceil(size / 8) / 2
        lo, hi = math.ceil(size / 2 - half), math.floor(size / 2 + half)
        out.append(range(lo, hi + 1))
    return out[0], out[1]


def center_from_unit(level_shape: Sequence[int], unit: tuple[float, float]) -> tuple[int, int]:
    """Map a point of [0, 1)^2 onto the integer center region of a level.

    Using the same ``unit`` for every level keeps the sampled centers aligned
    across the pyramid.
    """
    rows, cols = center_region(level_shape)
    u, v = unit
    row = rows[min(int(u * len(rows)), len(rows) - 1)]
    col = cols[min(int(v * len(cols)), len(cols) - 1)]
    return row, col


def sample_unit(rng: np.random.Generator) -> tuple[float, float]:
    u, v = rng.random(2)
    return float(u), float(v)


def sample_center(level_shape: Sequence[int], rng: np.random.Generator) -> tuple[int, int]:
    return center_from_unit(level_shape, sample_unit(rng))


def generate_nested_boxes(
    level_shape: Sequence[int],
    center: tuple[int, int],
    M: int = 4,
    r: float = 0.75,
    min_side: int = MIN_SIDE,
) -> NestedPatchSet:
    if not 0 < r < 1:
        raise InvalidParameter(f"crop ratio must lie in (0, 1), got {r}")
    if M < 1:
        raise InvalidParameter(f"M must be >= 1, got {M}")
    h, w = _hw(level_shape)
    if h < min_side or w < min_side:
        raise InvalidParameter(f"level {h}x{w} smaller than minimum side {min_side}")
    cy, cx = center
    if not (0 <= cy <= h and 0 <= cx <= w):
        raise InvalidRegion(f"center {center} outside {h}x{w} map")

    boxes = [CropBox.full(h, w)]
    for _ in range(M):
        parent = boxes[-1]
        bh = max(min_side, round_half_up(r * parent.height))
        bw = max(min_side, round_half_up(r * parent.width))
        top = round_half_up(cy - bh / 2)
        left = round_half_up(cx - bw / 2)
        # clamping into the parent (which already lies in the map) keeps nesting intact
        top = min(max(top, parent.top), parent.bottom - bh)
        left = min(max(left, parent.left), parent.right - bw)
        boxes.append(CropBox(top, left, bh, bw))
    boxes.reverse()
    shape = (int(level_shape[0]), h, w) if len(level_shape) == 3 else (1, h, w)
    ps = NestedPatchSet(tuple(boxes), shape, (int(cy), int(cx)))
    ps.validate()
    return ps


def build_pair_set(patchset: NestedPatchSet) -> RankPairSet:
    pairs = []
    for m, n in itertools.combinations(range(patchset.M + 1), 2):
        if not _in_rank_set(patchset.boxes[m], patchset.boxes[n]):
            raise InvalidRegion(f"pair ({m}, {n}) violates containment")
        pairs.append((m, n))
    return RankPairSet(tuple(pairs))


def pair_count(M: int) -> int:
    return M * (M + 1) // 2


def crop(feature: torch.Tensor, box: CropBox) -> torch.Tensor:
    h, w = feature.shape[-2:]
    if not box.within(h, w):
        raise InvalidRegion(f"box {box} outside feature of size {h}x{w}")
    return feature[..., box.top : box.bottom, box.left : box.right]


def crop_and_resize(feature: torch.Tensor, box: CropBox) -> torch.Tensor:
    """Crop ``box`` from a (C, H, W) or (N, C, H, W) tensor and resize it back to (H, W).

    Bilinear, half-pixel centers (``align_corners=False``).
    """
    h, w = feature.shape[-2:]
    patch = crop(feature, box)
    if (box.height, box.width) == (h, w):
        return patch
    squeeze = patch.dim() == 3
    if squeeze:
        patch = patch.unsqueeze(0)
    out = F.interpolate(patch, size=(h, w), mode="bilinear", align_corners=False)
    return out.squeeze(0) if squeeze else out


def nested_patches(feature: torch.Tensor, patchset: NestedPatchSet) -> torch.Tensor:
    """Stack every box of ``patchset`` resized to the level size: (M + 1, C, H, W)."""
    if feature.dim() != 3:
        raise InvalidRegion("nested_patches expects a single (C, H, W) feature map")
    return torch.stack([crop_and_resize(feature, b) for b in patchset.boxes])


def receptive_field(layers: Sequence[tuple[int, int, int]]) -> tuple[int, int]:
    """Cumulative (stride, receptive-field size) of a chain of (kernel, stride, dilation) layers."""
    jump, size = 1, 1
    for kernel, stride, dilation in layers:
        size += (dilation * (kernel - 1)) * jump
        jump *= stride
    return jump, size


def box_to_input_region(
    box: CropBox, stride: int, rf_size: int, image_hw: tuple[int, int]
) -> CropBox:
    """Input-pixel region seen by the cells of ``box``: scale by stride, grow by the RF radius, clamp."""
    radius = rf_size // 2
    ih, iw = image_hw
    top = max(0, box.top * stride - radius)
    left = max(0, box.left * stride - radius)
    bottom = min(ih, box.bottom * stride + radius)
    right = min(iw, box.right * stride + radius)
    return CropBox(top, left, bottom - top, right - left)
