"""Count metrics, rank-violation audits and density/overlay export."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import Sample, normalize, to_tensor
from .density import DensityMap, integrate, read_raster, write_raster
from .errors import InvalidInput, InvalidParameter
from .losses import margin_rank_pair
from .pyramid import (
    CropBox,
    build_pair_set,
    center_from_unit,
    crop_and_resize,
    generate_nested_boxes,
    sample_unit,
)


def mae_rmse(pred_counts, true_counts) -> tuple[float, float]:
    pred = np.asarray(pred_counts, dtype=np.float64)
    true = np.asarray(true_counts, dtype=np.float64)
    if pred.shape != true.shape or pred.ndim != 1 or pred.size == 0:
        raise InvalidInput(f"need two equal, non-empty count vectors; got {pred.shape} and {true.shape}")
    err = pred - true
    return float(np.mean(np.abs(err))), float(np.sqrt(np.mean(err * err)))


@dataclass
class EvalReport:
    per_image: list[dict]
    mae: float
    rmse: float
    violation_rate: float | None = None
    mean_hinge: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, json_path: str | Path, csv_path: str | Path | None = None) -> None:
        Path(json_path).write_text(json.dumps(self.to_dict(), indent=1))
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=["id", "predicted", "true", "abs_error"])
                w.writeheader()
                w.writerows(self.per_image)


def build_report(ids, pred, true) -> EvalReport:
    mae, rmse = mae_rmse(pred, true)
    rows = [{"id": i, "predicted": float(p), "true": float(t), "abs_error": abs(float(p) - float(t))}
            for i, p, t in zip(ids, pred, true)]
    return EvalReport(rows, mae, rmse)


def evaluate(model, samples: list[Sample], mean=None, std=None) -> EvalReport:
    """Predicted count = mass of the full-image density; images are normalized here if mean/std given."""
    model.eval()
    pred = []
    with torch.no_grad():
        for s in samples:
            img = normalize(s.image, mean, std) if mean is not None else s.image
            pred.append(float(model(to_tensor(img)[None]).sum()))
    return build_report([s.id for s in samples], pred, [float(len(s.points)) for s in samples])


def evaluate_oracle(samples: list[Sample]) -> EvalReport:
    """Use each sample's ground-truth density as the prediction."""
    return build_report([s.id for s in samples], [s.density.mass for s in samples],
                        [float(len(s.points)) for s in samples])


class ModelCounter:
    """Counts nested patches of a model's pyramid features (resize then estimate)."""

    def __init__(self, model):
        self.model = model

    def levels(self, image: torch.Tensor) -> list[torch.Tensor]:
        return [lv[0] for lv in self.model.extract(image[None]).levels]

    def counts(self, k: int, feature: torch.Tensor, boxes) -> list[float]:
        patches = torch.stack([crop_and_resize(feature, b) for b in boxes])
        return self.model.count_from_patch(patches, k).tolist()


class DensityCounter:
    """Oracle: pyramid levels are the ground-truth density sum-pooled by each stride; counts are box integrals."""

    def __init__(self, strides=(2, 4, 8)):
        self.strides = tuple(strides)

    def levels(self, density: torch.Tensor) -> list[torch.Tensor]:
        d = density if density.dim() == 3 else density[None]
        out = []
        for s in self.strides:
            h, w = d.shape[-2] // s * s, d.shape[-1] // s * s
            out.append(torch.nn.functional.avg_pool2d(d[None, :, :h, :w], s)[0] * s * s)
        return out

    def counts(self, k: int, feature: torch.Tensor, boxes) -> list[float]:
        return [integrate(feature.numpy(), b) for b in boxes]


@dataclass
class AuditResult:
    violation_rate: float
    mean_hinge: float
    n_pairs: int
    per_level: dict = field(default_factory=dict)


def rank_audit(counter, inputs, M: int = 4, K: int | None = None, r: float = 0.75,
               n_centers: int = 4, seed: int = 0, epsilon: float = 0.0) -> AuditResult:
    """Fraction of nested pairs whose hinge is positive, over ``n_centers`` sampled centers per input.

    ``counter`` is a ModelCounter or DensityCounter (anything with ``levels`` and ``counts``).
    ``inputs`` are (C, H, W) tensors: normalized images for a model, density maps for the oracle.
    """
    if n_centers < 1:
        raise InvalidParameter("n_centers must be >= 1")
    rng = np.random.default_rng(seed)
    hinges, per_level = [], {}
    with torch.no_grad():
        for x in inputs:
            levels = counter.levels(x)
            use = range(len(levels)) if K is None else range(min(K, len(levels)))
            for _ in range(n_centers):
                unit = sample_unit(rng)
                for k in use:
                    fmap = levels[k]
                    ps = generate_nested_boxes(fmap.shape, center_from_unit(fmap.shape, unit), M, r)
                    c = counter.counts(k, fmap, ps.boxes)
                    for m, n in build_pair_set(ps).pairs:
                        h = margin_rank_pair(c[m], c[n], epsilon)
                        hinges.append(h)
                        per_level.setdefault(k, []).append(h)
    arr = np.asarray(hinges)
    return AuditResult(
        float((arr > 0).mean()),
        float(arr.mean()),
        int(arr.size),
        {int(k): float((np.asarray(v) > 0).mean()) for k, v in per_level.items()},
    )


def export_density(dmap: DensityMap | np.ndarray, path: str | Path) -> None:
    write_raster(dmap.grid if isinstance(dmap, DensityMap) else dmap, path)


def import_density(path: str | Path) -> DensityMap:
    return DensityMap(read_raster(path))


def heat_layer(grid: np.ndarray, cmap: str = "jet", max_alpha: float = 0.7) -> np.ndarray:
    """RGBA heat layer; alpha scales with density so empty cells are fully transparent."""
    import matplotlib

    g = np.asarray(grid, dtype=np.float64)
    peak = g.max() if g.size else 0.0
    norm = g / peak if peak > 0 else np.zeros_like(g)
    rgba = matplotlib.colormaps[cmap](norm)
    rgba[..., 3] = norm * max_alpha
    return rgba


def overlay_label(grid: np.ndarray) -> str:
    return f"count = {integrate(grid, CropBox.full(*grid.shape)):.2f}"


def export_overlay(image: np.ndarray, dmap: DensityMap | np.ndarray, path: str | Path) -> str:
    """Write a PNG of ``image`` with the density heat layer alpha-blended on top. Returns the printed label."""
    from .plotting import overlay_figure

    grid = dmap.grid if isinstance(dmap, DensityMap) else np.asarray(dmap)
    label = overlay_label(grid)
    overlay_figure(image, heat_layer(grid), label, path)
    return label
