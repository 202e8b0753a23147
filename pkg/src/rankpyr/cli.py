"""Command line entry point: ``rankpyr <command> [options]``.

Commands: synth-gen, train, eval, rank-audit, export-density, ablate.
Every command that writes artifacts also writes ``manifest.json`` next to
them; passing that manifest back through ``--config`` reruns the command.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .data import load_corpus, load_sample, normalize, split, synth_corpus, to_tensor, Entry
from .density import HeadPointSet, load_annotation, make_density
from .errors import InvalidInput, InvalidParameter, RankPyrError
from .evaluation import (
    DensityCounter,
    ModelCounter,
    evaluate,
    evaluate_oracle,
    export_density,
    export_overlay,
    rank_audit,
)
from .model import DreamNet, load_checkpoint
from .plotting import ablation_figure, audit_figure, loss_curves
from .trainer import TrainConfig, fit, seed_everything

log = logging.getLogger("rankpyr")

ABLATION_GRIDS = {
    "lambda": ("lambda", [0.1, 0.5, 1, 5, 10]),
    "levels": ("levels", ["low", "mid", "high", "mid+high", "low+mid+high"]),
    "ratio": ("labeled_ratio", [0.05, 0.25, 0.30, 0.50, 1.0]),
    "target": ("ranking_target", ["none", "labeled-only", "both", "unlabeled-only"]),
}


# --- helpers -----------------------------------------------------------------

def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise InvalidInput(f"no such file: {path}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidInput(f"{path}: invalid JSON ({exc})") from exc


def _is_manifest(doc: dict) -> bool:
    return "command" in doc and "config" in doc and "args" in doc


def resolve_args(args: argparse.Namespace, parser_defaults: dict) -> argparse.Namespace:
    """Fill options the user left at their defaults from a manifest passed as ``--config``."""
    if not getattr(args, "config", None):
        args.manifest_config = None
        return args
    doc = _load_json(args.config)
    if not _is_manifest(doc):
        args.manifest_config = None
        return args
    if doc["command"] != args.command:
        raise InvalidParameter(f"manifest is for {doc['command']!r}, not {args.command!r}")
    for k, v in doc["args"].items():
        if k in parser_defaults and getattr(args, k, None) == parser_defaults[k]:
            setattr(args, k, v)
    args.manifest_config = doc["config"]
    return args


def build_config(args: argparse.Namespace) -> TrainConfig:
    if getattr(args, "manifest_config", None) is not None:
        base = dict(args.manifest_config)
    elif getattr(args, "config", None):
        base = _load_json(args.config)
    else:
        base = {}
    cfg = TrainConfig.from_dict(base)
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "labeled_ratio", None) is not None:
        over["labeled_ratio"] = args.labeled_ratio
    if getattr(args, "lam", None) is not None:
        over["lambda"] = args.lam
    if getattr(args, "levels", None):
        over["level_mask"] = parse_levels(args.levels)
    if getattr(args, "baseline", None):
        over["baseline_mode"] = args.baseline
    if getattr(args, "steps", None) is not None:
        over["steps"] = args.steps
    return cfg.replace(**over) if over else cfg


def parse_levels(text: str) -> list[str]:
    return [t for t in text.replace("+", ",").split(",") if t]


def run_dir(args: argparse.Namespace, seed: int) -> Path:
    if getattr(args, "run_dir", None):
        d = Path(args.run_dir)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        d = Path(args.out) / f"{stamp}-s{seed}"
        i = 1
        while d.exists():
            d = Path(args.out) / f"{stamp}-s{seed}-{i}"
            i += 1
    d.mkdir(parents=True, exist_ok=True)
    return d


def write_manifest(out: Path, command: str, args: argparse.Namespace, config: dict | None, seed,
                   outputs: list[str]) -> dict:
    skip = {"func", "manifest_config", "command", "config", "run_dir", "out", "verbose"}
    a = {k: v for k, v in vars(args).items() if k not in skip}
    manifest = {
        "command": command,
        "args": a,
        "config": config or {},
        "seed": seed,
        "version": __version__,
        "torch": torch.__version__,
        "outputs": sorted(outputs),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def _samples(corpus: str, kernel: dict) -> list:
    entries = [e for e in load_corpus(corpus) if e.annotation is not None]
    if not entries:
        raise InvalidInput(f"{corpus}: no annotated images")
    return [load_sample(e, True, kernel) for e in entries]


def _model_and_config(args) -> tuple[DreamNet | None, TrainConfig]:
    if getattr(args, "oracle", False):
        return None, build_config(args)
    if not args.checkpoint:
        raise InvalidParameter("give --checkpoint or --oracle")
    model, manifest = load_checkpoint(args.checkpoint)
    model.eval()
    cfg = TrainConfig.from_dict(manifest.get("train_config", {}))
    return model, cfg


# --- commands ----------------------------------------------------------------

def cmd_synth_gen(args) -> int:
    out = Path(args.out)
    synth_corpus(out, args.n, (args.min_count, args.max_count), args.seed, (args.size, args.size))
    write_manifest(out, "synth-gen", args, None, args.seed, ["corpus.json"])
    print(json.dumps({"corpus": str(out), "images": args.n}))
    return 0


def train_run(cfg: TrainConfig, corpus: str, out: Path, unlabeled_corpus: str | None = None,
              test_corpus: str | None = None, backbone_weights: str | None = None) -> dict:
    entries = load_corpus(corpus)
    index = split(entries, cfg.labeled_ratio, cfg.seed)
    if unlabeled_corpus:
        extra = [Entry(f"u:{e.id}", e.image, None, e.root) for e in load_corpus(unlabeled_corpus)]
        index = index.attach_unlabeled(extra)
    index.save(out / "corpus_index.json")
    seed_everything(cfg.seed, cfg.deterministic)
    model = DreamNet(cfg.model_config())
    if backbone_weights:
        with np.load(backbone_weights) as arrays:
            loaded = model.load_backbone_arrays({k: arrays[k] for k in arrays.files})
        log.info("loaded %d backbone arrays from %s", len(loaded), backbone_weights)
    result = fit(model, index, cfg, out)
    summary = {"steps": cfg.steps, "digest": result.digest, "best_val_mae": result.best_val_mae,
               "best_step": result.best_step}
    if result.history:
        loss_curves(result.history, out / "loss_curves.png")
    if test_corpus:
        rep = evaluate(model, _samples(test_corpus, cfg.kernel_params), cfg.norm_mean, cfg.norm_std)
        rep.save(out / "test_report.json", out / "test_report.csv")
        summary.update(test_mae=rep.mae, test_rmse=rep.rmse)
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary


def cmd_train(args) -> int:
    cfg = build_config(args)
    out = run_dir(args, cfg.seed)
    write_manifest(out, "train", args, cfg.to_dict(), cfg.seed,
                   ["corpus_index.json", "train_log.jsonl", "final.npz", "summary.json"])
    summary = train_run(cfg, args.corpus, out, args.unlabeled_corpus, args.test_corpus, args.backbone_weights)
    print(json.dumps({"run_dir": str(out), **summary}))
    return 0


def cmd_eval(args) -> int:
    model, cfg = _model_and_config(args)
    samples = _samples(args.corpus, cfg.kernel_params)
    out = run_dir(args, cfg.seed)
    if model is None:
        report = evaluate_oracle(samples)
    else:
        report = evaluate(model, samples, cfg.norm_mean, cfg.norm_std)
    report.save(out / "eval_report.json", out / "eval_report.csv")
    outputs = ["eval_report.json", "eval_report.csv"]
    for s in samples[: args.overlays]:
        if model is None:
            grid = s.density.grid
        else:
            with torch.no_grad():
                x = to_tensor(normalize(s.image, cfg.norm_mean, cfg.norm_std))[None]
                grid = model(x)[0, 0].numpy()
        export_overlay(s.image, grid, out / "overlays" / f"{s.id}.png")
        outputs.append(f"overlays/{s.id}.png")
    write_manifest(out, "eval", args, cfg.to_dict(), cfg.seed, outputs)
    print(json.dumps({"run_dir": str(out), "mae": report.mae, "rmse": report.rmse, "n": len(samples)}))
    return 0


def cmd_rank_audit(args) -> int:
    model, cfg = _model_and_config(args)
    samples = _samples(args.corpus, cfg.kernel_params)
    out = run_dir(args, args.seed if args.seed is not None else cfg.seed)
    seed = args.seed if args.seed is not None else cfg.seed
    if model is None:
        counter = DensityCounter()
        inputs = [torch.from_numpy(s.density.grid)[None] for s in samples]
    else:
        counter = ModelCounter(model)
        inputs = [to_tensor(normalize(s.image, cfg.norm_mean, cfg.norm_std)) for s in samples]
    res = rank_audit(counter, inputs, cfg.M, None, cfg.r, args.n_centers, seed, cfg.epsilon)
    doc = {"violation_rate": res.violation_rate, "mean_hinge": res.mean_hinge, "n_pairs": res.n_pairs,
           "per_level": res.per_level}
    (out / "audit.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    audit_figure({}, res.per_level, out / "audit.png")
    write_manifest(out, "rank-audit", args, cfg.to_dict(), seed, ["audit.json", "audit.png"])
    print(json.dumps({"run_dir": str(out), **doc}))
    return 0


def cmd_export_density(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if args.annotation:
        image_rel, pts = load_annotation(args.annotation)
        dmap = make_density(pts, kernel=args.kernel, sigma=args.sigma)
        stem = Path(args.annotation).stem
        export_density(dmap, out / f"{stem}.dmap")
        written.append(f"{stem}.dmap")
        img_path = Path(args.annotation).parent / image_rel
        if not img_path.exists():
            img_path = Path(args.annotation).parent.parent / image_rel
        if img_path.exists():
            from .data import read_image

            export_overlay(read_image(img_path), dmap, out / f"{stem}_overlay.png")
            written.append(f"{stem}_overlay.png")
    elif args.checkpoint and args.image:
        from .data import read_image

        model, manifest = load_checkpoint(args.checkpoint)
        cfg = TrainConfig.from_dict(manifest.get("train_config", {}))
        img = read_image(args.image)
        with torch.no_grad():
            grid = model(to_tensor(normalize(img, cfg.norm_mean, cfg.norm_std))[None])[0, 0].numpy()
        stem = Path(args.image).stem
        export_density(grid, out / f"{stem}.dmap")
        export_overlay(img, grid, out / f"{stem}_overlay.png")
        written += [f"{stem}.dmap", f"{stem}_overlay.png"]
    else:
        raise InvalidParameter("give --annotation, or --checkpoint with --image")
    write_manifest(out, "export-density", args, None, None, written)
    print(json.dumps({"out": str(out), "files": written}))
    return 0


def ablation_configs(axis: str, base: TrainConfig) -> list[tuple[object, TrainConfig]]:
    if axis not in ABLATION_GRIDS:
        raise InvalidParameter(f"unknown axis {axis!r}; choose from {sorted(ABLATION_GRIDS)}")
    _, grid = ABLATION_GRIDS[axis]
    rows = []
    for v in grid:
        if axis == "lambda":
            cfg = base.replace(lam=v)
        elif axis == "levels":
            cfg = base.replace(level_mask=parse_levels(v))
        elif axis == "ratio":
            cfg = base.replace(labeled_ratio=v)
        elif v == "none":
            cfg = base.replace(lam=0.0)
        else:
            cfg = base.replace(ranking_target=v)
        rows.append((v, cfg))
    return rows


def cmd_ablate(args) -> int:
    base = build_config(args)
    out = run_dir(args, base.seed)
    col, _ = ABLATION_GRIDS.get(args.axis, (args.axis, None))
    rows = []
    for value, cfg in ablation_configs(args.axis, base):
        sub = out / f"{args.axis}_{str(value).replace('+', '-')}"
        sub.mkdir(parents=True, exist_ok=True)
        row = {args.axis: value}
        try:
            s = train_run(cfg, args.corpus, sub, args.unlabeled_corpus, args.test_corpus or args.corpus)
            row.update(mae=s["test_mae"], rmse=s["test_rmse"])
        except RankPyrError as exc:
            row.update(mae=float("nan"), rmse=float("nan"), error=exc.to_record())
        rows.append(row)
        log.info("ablate %s=%s -> %s", args.axis, value, row)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([args.axis, "mae", "rmse"])
        for r in rows:
            w.writerow([r[args.axis], f"{r['mae']:.4f}", f"{r['rmse']:.4f}"])
    (out / "ablation.json").write_text(json.dumps({"axis": args.axis, "column": col, "rows": rows}, indent=1))
    ablation_figure(rows, args.axis, out / "ablation.png")
    write_manifest(out, "ablate", args, base.to_dict(), base.seed, ["ablation.csv", "ablation.json", "ablation.png"])
    print(json.dumps({"run_dir": str(out), "rows": rows}))
    return 0


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rankpyr", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default="runs"):
        sp.add_argument("--config", help="JSON config or a manifest.json from an earlier run")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", default=out_default)
        sp.add_argument("--run-dir", help="exact output directory (default: <out>/<timestamp>-s<seed>)")

    def overrides(sp):
        sp.add_argument("--labeled-ratio", type=float)
        sp.add_argument("--lambda", dest="lam", type=float)
        sp.add_argument("--levels", help="comma or + separated subset of low,mid,high")
        sp.add_argument("--baseline", choices=["none", "image-level-ranking"])
        sp.add_argument("--steps", type=int)

    sp = sub.add_parser("synth-gen", help="write a synthetic blob-crowd corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, default=200)
    sp.add_argument("--min-count", type=int, default=5)
    sp.add_argument("--max-count", type=int, default=80)
    sp.add_argument("--size", type=int, default=128)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth_gen)

    sp = sub.add_parser("train", help="fit a model on a corpus")
    common(sp)
    overrides(sp)
    sp.add_argument("--corpus", required=False)
    sp.add_argument("--unlabeled-corpus")
    sp.add_argument("--test-corpus")
    sp.add_argument("--backbone-weights", help=".npz of named backbone arrays, e.g. features.0.weight")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="MAE/RMSE of a checkpoint (or the ground-truth oracle) on a corpus")
    common(sp)
    sp.add_argument("--corpus")
    sp.add_argument("--checkpoint")
    sp.add_argument("--oracle", action="store_true", help="predict the ground-truth density")
    sp.add_argument("--overlays", type=int, default=4, help="overlay figures for the first N images")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("rank-audit", help="fraction of violated nested pairs")
    common(sp)
    sp.add_argument("--corpus")
    sp.add_argument("--checkpoint")
    sp.add_argument("--oracle", action="store_true")
    sp.add_argument("--n-centers", type=int, default=4)
    sp.set_defaults(func=cmd_rank_audit)

    sp = sub.add_parser("export-density", help="write density rasters and overlay figures")
    sp.add_argument("--out", required=True)
    sp.add_argument("--annotation")
    sp.add_argument("--kernel", choices=["fixed", "adaptive"], default="fixed")
    sp.add_argument("--sigma", type=float, default=15.0)
    sp.add_argument("--checkpoint")
    sp.add_argument("--image")
    sp.set_defaults(func=cmd_export_density)

    sp = sub.add_parser("ablate", help="sweep one axis and tabulate test MAE/RMSE")
    common(sp)
    overrides(sp)
    sp.add_argument("--axis", required=True, choices=sorted(ABLATION_GRIDS))
    sp.add_argument("--corpus")
    sp.add_argument("--unlabeled-corpus")
    sp.add_argument("--test-corpus")
    sp.set_defaults(func=cmd_ablate)
    return p


def _required(args, *names):
    for n in names:
        if not getattr(args, n, None):
            raise InvalidParameter(f"--{n.replace('_', '-')} is required")


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    sub_defaults = {}
    for action in parser._subparsers._group_actions[0].choices[args.command]._actions:
        if action.dest != "help":
            sub_defaults[action.dest] = action.default
    try:
        args = resolve_args(args, sub_defaults)
        if args.command in ("train", "ablate", "eval", "rank-audit"):
            _required(args, "corpus")
        return args.func(args)
    except RankPyrError as exc:
        print(json.dumps(exc.to_record()), file=sys.stderr)
        return 2
    except OSError as exc:
        print(json.dumps({"error": "io-error", "message": str(exc)}), file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
