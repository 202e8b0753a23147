"""Mixed semi-supervised training loop.

Labeled crops go through the extractor and the high-level estimator and are
scored with the L2 loss.  Ranking images (unlabeled by default) go through
the same extractor; at each selected pyramid level a nested set of crops is
resized back to the level size, counted by the shared estimator and scored
with the pairwise hinge.
"""

from __future__ import annotations

import copy
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .data import (
    IMAGENET_MEAN,
    IMAGENET_STD,
    CorpusIndex,
    Sample,
    augment,
    load_sample,
    normalize,
    to_tensor,
)
from .errors import InvalidInput, InvalidParameter, TrainingDiverged
from .losses import LossBreakdown, pyramid_rank_loss, supervised_l2
from .model import LEVEL_NAMES, DreamNet, ModelConfig, save_checkpoint, state_digest
from .pyramid import (
    center_from_unit,
    crop_and_resize,
    generate_nested_boxes,
    nested_patches,
    pair_count,
    sample_unit,
)

log = logging.getLogger(__name__)

RANKING_TARGETS = ("unlabeled-only", "labeled-only", "both")
BASELINE_MODES = ("none", "image-level-ranking")


def deterministic_env() -> bool:
    return os.environ.get("RANKPYR_DETERMINISTIC", "") == "1"


@dataclass
class TrainConfig:
    lam: float = 1.0
    epsilon: float = 0.0
    M: int = 4
    K: int = 3
    r: float = 0.75
    lr: float = 1e-5
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    batch_labeled: int = 4
    batch_unlabeled: int = 4
    steps: int = 2000
    seed: int = 0
    ranking_target: str = "unlabeled-only"
    level_mask: tuple[str, ...] = ("low", "mid", "high")
    baseline_mode: str = "none"
    labeled_ratio: float = 0.1
    val_fraction: float = 0.1
    crop_size: int = 224
    flip_p: float = 0.5
    norm_mean: tuple[float, ...] = IMAGENET_MEAN
    norm_std: tuple[float, ...] = IMAGENET_STD
    kernel: str = "fixed"
    sigma: float = 15.0
    beta: float = 0.3
    knn: int = 3
    min_side: int = 2
    shared_center: bool = True
    eval_every: int = 250
    checkpoint_every: int = 500
    deterministic: bool = True
    model: dict = field(default_factory=dict)

    _aliases = {"lambda": "lam"}

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.level_mask = tuple(self.level_mask)
        self.norm_mean = tuple(self.norm_mean)
        self.norm_std = tuple(self.norm_std)
        if self.lam < 0 or self.epsilon < 0:
            raise InvalidParameter("lambda and epsilon must be non-negative")
        if self.M < 1 or self.K < 1:
            raise InvalidParameter("M and K must be >= 1")
        if not 0 < self.r < 1:
            raise InvalidParameter("r must lie in (0, 1)")
        if self.lr <= 0 or self.weight_decay < 0:
            raise InvalidParameter("lr must be positive, weight_decay non-negative")
        if self.batch_labeled < 1 or self.batch_unlabeled < 0 or self.steps < 0:
            raise InvalidParameter("bad batch sizes or step count")
        if self.ranking_target not in RANKING_TARGETS:
            raise InvalidParameter(f"ranking_target must be one of {RANKING_TARGETS}")
        if self.baseline_mode not in BASELINE_MODES:
            raise InvalidParameter(f"baseline_mode must be one of {BASELINE_MODES}")
        unknown = set(self.level_mask) - set(LEVEL_NAMES[: self.K])
        if unknown:
            raise InvalidParameter(f"unknown levels {sorted(unknown)}")
        if self.lam > 0 and not self.level_mask:
            raise InvalidParameter("level_mask must be non-empty when ranking is enabled")
        if not 0 < self.labeled_ratio <= 1 or not 0 <= self.val_fraction < 1:
            raise InvalidParameter("labeled_ratio must be in (0, 1], val_fraction in [0, 1)")

    @property
    def kernel_params(self) -> dict:
        return {"kernel": self.kernel, "sigma": self.sigma, "beta": self.beta, "k": self.knn}

    def level_indices(self) -> list[int]:
        return [LEVEL_NAMES.index(n) for n in LEVEL_NAMES[: self.K] if n in self.level_mask]

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.model)

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            d[{"lam": "lambda"}.get(f.name, f.name)] = list(v) if isinstance(v, tuple) else v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        kw = {}
        for k, v in d.items():
            key = cls._aliases.get(k, k)
            if key not in names or key.startswith("_"):
                raise InvalidParameter(f"unknown config key {k!r}")
            kw[key] = v
        return cls(**kw)

    def replace(self, **kw) -> "TrainConfig":
        d = self.to_dict()
        for k, v in kw.items():
            d[{"lam": "lambda"}.get(k, k)] = v
        return TrainConfig.from_dict(d)


@dataclass
class Batch:
    images: torch.Tensor
    density: torch.Tensor | None
    ids: list[str]

    def __len__(self) -> int:
        return len(self.ids)


def collate(samples: list[Sample]) -> Batch:
    images = torch.stack([to_tensor(s.image) for s in samples])
    density = None
    if all(s.density is not None for s in samples):
        density = torch.stack([torch.from_numpy(s.density.grid)[None] for s in samples])
    return Batch(images, density, [s.id for s in samples])


def pairs_per_image(config: TrainConfig) -> int:
    """Ranking pairs one image contributes per step."""
    if config.baseline_mode == "image-level-ranking":
        return pair_count(config.M)
    return len(config.level_indices()) * pair_count(config.M)


def pyramid_counts(model: DreamNet, images: torch.Tensor, config: TrainConfig,
                   rng: np.random.Generator) -> tuple[torch.Tensor, list]:
    """Counts of every nested patch, shape (N, K_active, M + 1), plus the patch sets used."""
    feats = model.extract(images)
    levels = config.level_indices()
    n = images.shape[0]
    units = [sample_unit(rng) for _ in range(n)]
    per_level, patchsets = [], []
    for k in levels:
        fmap = feats.levels[k]
        stacks, sets_k = [], []
        for i in range(n):
            unit = units[i] if config.shared_center else sample_unit(rng)
            center = center_from_unit(fmap.shape[1:], unit)
            ps = generate_nested_boxes(fmap.shape[1:], center, config.M, config.r, config.min_side)
            stacks.append(nested_patches(fmap[i], ps))
            sets_k.append(ps)
        counts = model.count_from_patch(torch.cat(stacks), k).view(n, config.M + 1)
        per_level.append(counts)
        patchsets.append(sets_k)
    return torch.stack(per_level, dim=1), patchsets


def image_level_counts(model: DreamNet, images: torch.Tensor, config: TrainConfig,
                       rng: np.random.Generator) -> tuple[torch.Tensor, list]:
    """Nested crops of the input image itself, each resized to full size and counted: (N, 1, M + 1)."""
    n = images.shape[0]
    crops, sets = [], []
    for i in range(n):
        center = center_from_unit(images.shape[1:], sample_unit(rng))
        ps = generate_nested_boxes(images.shape[1:], center, config.M, config.r, config.min_side)
        crops.append(torch.stack([crop_and_resize(images[i], b) for b in ps.boxes]))
        sets.append(ps)
    counts = model(torch.cat(crops)).sum(dim=(1, 2, 3)).view(n, 1, config.M + 1)
    return counts, [sets]


def ranking_images(labeled: Batch, unlabeled: Batch | None, config: TrainConfig) -> torch.Tensor | None:
    parts = []
    if config.ranking_target in ("labeled-only", "both"):
        parts.append(labeled.images)
    if config.ranking_target in ("unlabeled-only", "both") and unlabeled is not None and len(unlabeled):
        parts.append(unlabeled.images)
    return torch.cat(parts) if parts else None


def compute_losses(model: DreamNet, labeled: Batch, unlabeled: Batch | None, config: TrainConfig,
                   rng: np.random.Generator):
    """Forward both streams. Returns (L_s, L_u, hinges, counts) as tensors (L_u may be None)."""
    if labeled.density is None:
        raise InvalidInput("labeled batch carries no density maps")
    ls = supervised_l2(model(labeled.images), labeled.density)
    if config.lam == 0:
        return ls, None, None, None
    imgs = ranking_images(labeled, unlabeled, config)
    if imgs is None:
        raise InvalidInput("ranking enabled but the ranking batch is empty")
    if config.baseline_mode == "image-level-ranking":
        counts, _ = image_level_counts(model, imgs, config, rng)
    else:
        counts, _ = pyramid_counts(model, imgs, config, rng)
    lu, hinges = pyramid_rank_loss(counts, config.epsilon)
    return ls, lu, hinges, counts


def train_step(model: DreamNet, optimizer: torch.optim.Optimizer, labeled: Batch, unlabeled: Batch | None,
               config: TrainConfig, rng: np.random.Generator) -> LossBreakdown:
    """One Adam update on the mixed objective. Raises TrainingDiverged on a non-finite loss."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    ls, lu, hinges, counts = compute_losses(model, labeled, unlabeled, config, rng)
    total = ls if lu is None else ls + config.lam * lu
    if not torch.isfinite(total):
        raise TrainingDiverged(
            "non-finite loss",
            {
                "labeled_ids": labeled.ids,
                "unlabeled_ids": unlabeled.ids if unlabeled is not None else [],
                "supervised": float(ls.detach()),
                "ranking": None if lu is None else float(lu.detach()),
                "counts": None if counts is None else counts.detach().tolist(),
                "pair_terms": None if hinges is None else hinges.detach().tolist(),
            },
        )
    total.backward()
    optimizer.step()
    return LossBreakdown(
        supervised=float(ls.detach()),
        ranking=0.0 if lu is None else float(lu.detach()),
        total=float(total.detach()),
        lam=config.lam,
        epsilon=config.epsilon,
        pair_terms=[] if hinges is None else hinges.detach().flatten().tolist(),
        n_pairs=0 if hinges is None else hinges.numel(),
    )


def image_level_ranking_step(model, optimizer, labeled, unlabeled, config, rng) -> LossBreakdown:
    """The comparison arm: ranking over nested crops of the input image rather than latent features."""
    if config.baseline_mode != "image-level-ranking":
        raise InvalidParameter("image_level_ranking_step needs baseline_mode='image-level-ranking'")
    return train_step(model, optimizer, labeled, unlabeled, config, rng)


def make_optimizer(model: DreamNet, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=config.lr, betas=config.betas,
                            weight_decay=config.weight_decay)


def seed_everything(seed: int, deterministic: bool) -> None:
    torch.manual_seed(seed)
    if deterministic or deterministic_env():
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def predict_count(model: DreamNet, image: np.ndarray) -> float:
    """Mass of the full-image density for an already normalized H x W x 3 image."""
    with torch.no_grad():
        return float(model(to_tensor(image)[None]).sum())


def evaluate_counts(model: DreamNet, samples: list[Sample], config: TrainConfig) -> tuple[list, list]:
    model.eval()
    pred = [predict_count(model, normalize(s.image, config.norm_mean, config.norm_std)) for s in samples]
    true = [float(len(s.points)) for s in samples]
    return pred, true


@dataclass
class FitResult:
    model: DreamNet
    history: list[dict]
    best_val_mae: float | None
    best_step: int | None
    best_state: dict | None
    out_dir: Path | None
    digest: str


def _holdout(index: CorpusIndex, config: TrainConfig) -> tuple[list, list]:
    lab = index.labeled()
    n_val = int(np.floor(config.val_fraction * len(lab) + 1e-9))
    if n_val and len(lab) - n_val < 1:
        n_val = 0
    rng = np.random.default_rng(config.seed + 7919)
    order = rng.permutation(len(lab))
    val = [lab[i] for i in sorted(order[:n_val])]
    train = [lab[i] for i in sorted(order[n_val:])]
    return train, val


def fit(model: DreamNet, index: CorpusIndex, config: TrainConfig, out_dir: str | Path | None = None,
        manifest_extra: dict | None = None) -> FitResult:
    """Run ``config.steps`` mixed updates, logging every step as a JSON line.

    Checkpoints land every ``checkpoint_every`` steps; the state with the
    lowest validation MAE (held-out labeled images) is kept as ``best``.
    """
    from .evaluation import mae_rmse

    if not index.labeled_ids:
        raise InvalidInput("corpus split has no labeled entries")
    seed_everything(config.seed, config.deterministic)
    rng = np.random.default_rng(config.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    kp = config.kernel_params
    train_entries, val_entries = _holdout(index, config)
    labeled = [load_sample(e, True, kp) for e in train_entries]
    val = [load_sample(e, True, kp) for e in val_entries]
    need_unlabeled = config.lam > 0 and config.ranking_target != "labeled-only"
    unlabeled = [load_sample(e, False) for e in index.unlabeled()] if need_unlabeled else []
    if need_unlabeled and not unlabeled:
        raise InvalidInput("ranking on unlabeled data requested but the corpus has no unlabeled images")

    optimizer = make_optimizer(model, config)
    ckpt_extra = {"train_config": config.to_dict(), "optimizer": _optimizer_record(optimizer, config),
                  "version": __version__, **(manifest_extra or {})}

    def draw(pool: list[Sample], n: int) -> list[Sample]:
        idx = rng.choice(len(pool), size=n, replace=len(pool) < n)
        return [augment(pool[i], rng, config.crop_size, config.flip_p, config.norm_mean, config.norm_std, kp)
                for i in idx]

    history, best = [], (None, None, None)
    logf = open(out / "train_log.jsonl", "w") if out is not None else None
    try:
        for step in range(1, config.steps + 1):
            lab_batch = collate(draw(labeled, config.batch_labeled))
            unl_batch = collate(draw(unlabeled, config.batch_unlabeled)) if need_unlabeled else None
            try:
                br = train_step(model, optimizer, lab_batch, unl_batch, config, rng)
            except TrainingDiverged as exc:
                exc.diagnostics["step"] = step
                if out is not None:
                    (out / "diverged.json").write_text(json.dumps(exc.to_record(), indent=1))
                raise
            rec = {"step": step, **br.to_dict()}
            if val and (step % config.eval_every == 0 or step == config.steps):
                pred, true = evaluate_counts(model, val, config)
                mae, rmse = mae_rmse(pred, true)
                rec.update(val_mae=mae, val_rmse=rmse)
                if best[0] is None or mae < best[0]:
                    best = (mae, step, copy.deepcopy(model.state_dict()))
            history.append(rec)
            if logf is not None:
                logf.write(json.dumps(rec) + "\n")
            if out is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
                save_checkpoint(model, out / f"ckpt_{step:06d}.npz", {**ckpt_extra, "step": step})
    finally:
        if logf is not None:
            logf.close()

    if out is not None:
        save_checkpoint(model, out / "final.npz", {**ckpt_extra, "step": config.steps})
        if best[2] is not None:
            best_model = DreamNet(model.config)
            best_model.load_state_dict(best[2])
            save_checkpoint(best_model, out / "best.npz",
                            {**ckpt_extra, "step": best[1], "val_mae": best[0]})
    return FitResult(model, history, best[0], best[1], best[2], out, state_digest(model))


def _optimizer_record(optimizer: torch.optim.Optimizer, config: TrainConfig) -> dict:
    g = optimizer.param_groups[0]
    return {"name": "adam", "lr": g["lr"], "weight_decay": g["weight_decay"], "betas": list(g["betas"]),
            "eps": g["eps"]}
