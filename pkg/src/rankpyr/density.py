"""Ground-truth density maps from head annotations.

Each head deposits one Gaussian truncated at 4 sigma.  The kernel is
renormalized over the part of its window that falls inside the image, so
every head contributes exactly unit mass even when it sits on a border.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidAnnotation, InvalidInput, InvalidParameter, InvalidRegion
from .pyramid import CropBox

TRUNCATE = 4.0
DEFAULT_SIGMA = 15.0
RASTER_MAGIC = b"DMAP"


@dataclass
class HeadPointSet:
    """Head coordinates (x, y) in pixels for a single image of ``image_size`` = (height, width)."""

    points: np.ndarray
    image_size: tuple[int, int]

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        h, w = self.image_size
        if h <= 0 or w <= 0:
            raise InvalidAnnotation(f"bad image size {self.image_size}")
        if len(pts):
            x, y = pts[:, 0], pts[:, 1]
            bad = (x < 0) | (x >= w) | (y < 0) | (y >= h) | ~np.isfinite(pts).all(axis=1)
            if bad.any():
                raise InvalidAnnotation(f"{int(bad.sum())} point(s) outside {w}x{h} image")
        self.points = pts
        self.image_size = (int(h), int(w))

    def __len__(self) -> int:
        return len(self.points)

    def to_json(self, image: str) -> dict:
        h, w = self.image_size
        return {"image": image, "width": w, "height": h, "points": self.points.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> "HeadPointSet":
        return cls(np.asarray(doc["points"], dtype=np.float64), (doc["height"], doc["width"]))


@dataclass
class DensityMap:
    grid: np.ndarray
    cell_scale: float = 1.0
    meta: dict = field(default_factory=dict)

    @property
    def mass(self) -> float:
        return float(self.grid.sum(dtype=np.float64))

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape


def _sorted_points(points: np.ndarray, sigmas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # fixed deposit order makes the float accumulation independent of input order
    if len(points) == 0:
        return points, sigmas
    order = np.lexsort((sigmas, points[:, 1], points[:, 0]))
    return points[order], sigmas[order]


def _axis_kernel(c: float, sigma: float, size: int) -> tuple[int, np.ndarray]:
    radius = TRUNCATE * sigma
    lo = max(0, int(np.floor(c - radius)))
    hi = min(size - 1, int(np.floor(c + radius)))
    centers = np.arange(lo, hi + 1) + 0.5
    return lo, np.exp(-0.5 * ((centers - c) / sigma) ** 2)


def render_density(points: np.ndarray, sigmas: np.ndarray, image_size: tuple[int, int]) -> np.ndarray:
    """Sum of unit-mass truncated Gaussians, one per (point, sigma). Returns float32 (H, W)."""
    h, w = image_size
    acc = np.zeros((h, w), dtype=np.float64)
    points, sigmas = _sorted_points(points, sigmas)
    for (x, y), s in zip(points, sigmas):
        left, kx = _axis_kernel(x, s, w)
        top, ky = _axis_kernel(y, s, h)
        k = np.outer(ky, kx)
        total = k.sum()
        if total <= 0.0:
            # sigma far below a pixel: the whole mass lands in the containing cell
            acc[int(y), int(x)] += 1.0
            continue
        acc[top : top + len(ky), left : left + len(kx)] += k / total
    return acc.astype(np.float32)


def fixed_kernel_density(points: HeadPointSet, sigma: float = DEFAULT_SIGMA) -> DensityMap:
    if not sigma > 0:
        raise InvalidParameter(f"sigma must be positive, got {sigma}")
    sig = np.full(len(points), float(sigma))
    grid = render_density(points.points, sig, points.image_size)
    return DensityMap(grid, 1.0, {"kernel": "fixed", "sigma": float(sigma)})


def adaptive_sigmas(
    pts: np.ndarray, beta: float = 0.3, k: int = 3, default_sigma: float = DEFAULT_SIGMA
) -> np.ndarray:
    """beta times the mean distance to the k nearest other heads; ``default_sigma`` with fewer than k + 1 heads."""
    if k < 1:
        raise InvalidParameter(f"k must be >= 1, got {k}")
    if not beta > 0:
        raise InvalidParameter(f"beta must be positive, got {beta}")
    n = len(pts)
    if n < k + 1:
        return np.full(n, float(default_sigma))
    dist, _ = cKDTree(pts).query(pts, k=k + 1)
    sig = beta * dist[:, 1:].mean(axis=1)
    # coincident heads give zero spread; fall back rather than emit a delta
    return np.where(sig > 0, sig, float(default_sigma))


def geometry_adaptive_density(
    points: HeadPointSet, beta: float = 0.3, k: int = 3, default_sigma: float = DEFAULT_SIGMA
) -> DensityMap:
    pts = points.points
    if len(pts):
        # sort first so neighbour ties resolve identically for any input order
        pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]
    sig = adaptive_sigmas(pts, beta, k, default_sigma)
    grid = render_density(pts, sig, points.image_size)
    return DensityMap(grid, 1.0, {"kernel": "adaptive", "beta": beta, "k": k})


def make_density(points: HeadPointSet, kernel: str = "fixed", sigma: float = DEFAULT_SIGMA,
                 beta: float = 0.3, k: int = 3) -> DensityMap:
    if kernel == "fixed":
        return fixed_kernel_density(points, sigma)
    if kernel == "adaptive":
        return geometry_adaptive_density(points, beta, k, default_sigma=sigma)
    raise InvalidParameter(f"unknown kernel {kernel!r}")


def integrate(dmap: DensityMap | np.ndarray, box: CropBox) -> float:
    grid = dmap.grid if isinstance(dmap, DensityMap) else np.asarray(dmap)
    h, w = grid.shape[-2:]
    if not box.within(h, w):
        raise InvalidRegion(f"box {box} outside {h}x{w} grid")
    # fsum is correctly rounded, so nested boxes of a non-negative map integrate monotonically
    return math.fsum(grid[..., box.top : box.bottom, box.left : box.right].ravel().tolist())


def load_annotation(path: str | Path) -> tuple[str, HeadPointSet]:
    with open(path) as fh:
        doc = json.load(fh)
    try:
        return doc["image"], HeadPointSet.from_json(doc)
    except KeyError as exc:
        raise InvalidAnnotation(f"{path}: missing key {exc}") from exc


def save_annotation(path: str | Path, image: str, points: HeadPointSet) -> None:
    with open(path, "w") as fh:
        json.dump(points.to_json(image), fh)


def write_raster(grid: np.ndarray, path: str | Path) -> None:
    """16-byte header (b"DMAP", u32 height, u32 width, u32 0) then row-major little-endian float32."""
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise InvalidInput(f"density raster must be 2-D, got shape {grid.shape}")
    h, w = grid.shape
    with open(path, "wb") as fh:
        fh.write(RASTER_MAGIC + struct.pack("<III", h, w, 0))
        fh.write(np.ascontiguousarray(grid, dtype="<f4").tobytes())


def read_raster(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != RASTER_MAGIC:
        raise InvalidInput(f"{path}: not a density raster")
    h, w, _ = struct.unpack("<III", data[4:16])
    body = np.frombuffer(data, dtype="<f4", offset=16)
    if body.size != h * w:
        raise InvalidInput(f"{path}: expected {h * w} cells, found {body.size}")
    return body.reshape(h, w).astype(np.float32)
