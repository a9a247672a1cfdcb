"""Command-line entry points: generate, train, segment, evaluate, profile, run.

Every artifact lives under one run directory::

    run/config.json                 exact configuration used
    run/folds.json                  cross-validation split
    run/data/<wsi>/                 pyramid PNGs, annotation.png, foreground.png, manifest.json
    run/models/fold_<k>/<model>/    best.pt, final.pt, metrics.csv, config.json, seeds.json
    run/predictions/<pipeline>/     <wsi>.png label maps and <wsi>.json sidecars
    run/reports/<pipeline>/         report.json and CSV tables, overlays/
    run/reports/comparison.csv      one row per pipeline
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import shutil
import sys
import time
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import RunConfig, apply_overrides, model_key, profile
from .evaluation import EvalReport, evaluate_slide, overlay, scaled_area_bounds
from .networks import SW_CNN, UNET_D, UNET_S, build, load_checkpoint, save_checkpoint, sw_cnn_spec, unet_spec
from .pipelines import PIPELINES, LabelMap, run_pipeline, stage_times
from .pyramid import Slide, load_mask, mask_to_level, save_mask, save_pyramid
from .sampling import build_training_set
from .synthetic import generate_synthetic_wsi
from .training import FoldSplit, make_folds, train

log = logging.getLogger("cascadeseg")

CONFIG = "config.json"
FOLDS = "folds.json"


class LeakageError(RuntimeError):
    """A slide was requested from a model that saw it during training or validation."""


def _dirs(run):
    run = Path(run)
    return {k: run / k for k in ("data", "models", "predictions", "reports")}


def load_run(run) -> tuple[RunConfig, FoldSplit]:
    run = Path(run)
    if not (run / CONFIG).exists():
        raise FileNotFoundError(f"{run} has no {CONFIG}; run `generate` first")
    cfg = RunConfig.load(run / CONFIG)
    folds = FoldSplit.from_dict(json.loads((run / FOLDS).read_text()))
    return cfg, folds


def load_slides(run, ids) -> dict[str, Slide]:
    data = _dirs(run)["data"]
    out = {}
    for wsi in ids:
        d = data / wsi
        if not d.exists():
            raise FileNotFoundError(f"slide {wsi} missing under {data}")
        slide = Slide.load(d, wsi)
        slide.foreground = load_mask(d / "foreground.png")
        out[wsi] = slide
    return out


# -- generate -----------------------------------------------------------------


def cmd_generate(cfg: RunConfig, run, force: bool = False) -> Path:
    """Write the synthetic corpus, the config snapshot and the fold split."""
    run = Path(run)
    data = _dirs(run)["data"]
    if run.exists() and any(run.iterdir()):
        if not force:
            raise FileExistsError(f"{run} is not empty; pass --force to regenerate")
        shutil.rmtree(run)
    data.mkdir(parents=True)
    cfg.save(run / CONFIG)
    index = {}
    for i, wsi in enumerate(cfg.wsi_ids()):
        spec = cfg.wsi_spec(i)
        img, mask = generate_synthetic_wsi(spec)
        slide = Slide(wsi, img, mask)
        save_pyramid(img, data / wsi, mask)
        save_mask(slide.foreground, data / wsi / "foreground.png")
        index[wsi] = {"seed": spec.seed, "objects": int(img.meta.get("object_count", 0))}
        log.info("generated %s (%d objects)", wsi, index[wsi]["objects"])
    (data / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))
    folds = make_folds(cfg.wsi_ids(), cfg.n_folds, cfg.seed)
    (run / FOLDS).write_text(json.dumps(folds.to_dict(), indent=2))
    return run


# -- train --------------------------------------------------------------------


def network_spec(cfg: RunConfig, network: str):
    s = cfg.models[network]
    if network == UNET_D:
        return unet_spec(UNET_D, 4, s.train_tile, s.base_width)
    if network == UNET_S:
        return unet_spec(UNET_S, 2, s.train_tile, s.base_width)
    if network == SW_CNN:
        return sw_cnn_spec(s.base_width, s.fc_units, cfg.foveation.output_size)
    raise ValueError(f"unknown network {network!r}")


def model_dir(run, fold: int, network: str, strategy: str) -> Path:
    return _dirs(run)["models"] / f"fold_{fold}" / model_key(network, strategy)


def train_model(cfg: RunConfig, folds: FoldSplit, slides, run, fold: int, network: str, strategy: str) -> Path:
    out = model_dir(run, fold, network, strategy)
    s = cfg.models[network]
    record = {"network": network, "strategy": strategy, "fold": fold, "settings": s.to_dict()}
    if (out / "best.pt").exists() and (out / "config.json").exists():
        if json.loads((out / "config.json").read_text()) == record:
            log.info("fold %d %s already trained, skipping", fold, out.name)
            return out
    f = folds[fold]
    seed = cfg.seed * 1000 + fold
    spec = network_spec(cfg, network)
    train_slides = [slides[w] for w in f.train]
    val_slides = [slides[w] for w in f.val]
    ds = build_training_set(train_slides, strategy, spec, s.n_raw, s.ratio, cfg.augment, seed)
    val = build_training_set(val_slides, strategy, spec, s.n_val, 1, cfg.augment, seed + 500, augment=False)
    for sample in ds.samples:
        if sample.wsi_id not in f.train:
            raise LeakageError(f"training sample from {sample.wsi_id} is outside fold {fold}'s training split")
    tcfg = dataclasses.replace(s.training, seed=seed)
    log.info("fold %d: training %s on %d samples", fold, out.name, len(ds))
    t0 = time.perf_counter()
    model, history = train(build(spec, seed), ds, val, tcfg)
    out.mkdir(parents=True, exist_ok=True)
    final = build(spec, seed)
    final.load_state_dict(history.final_state)
    save_checkpoint_pair(model, final, out, {"fold": fold, "strategy": strategy, "best_epoch": history.best_epoch})
    history.write_csv(out / "metrics.csv")
    (out / "seeds.json").write_text(json.dumps({"data_seed": seed, "model_seed": seed, "torch_seed": tcfg.seed}))
    (out / "config.json").write_text(json.dumps(record, indent=2, sort_keys=True))
    log.info("fold %d: %s done in %.0fs (best epoch %d)", fold, out.name, time.perf_counter() - t0, history.best_epoch)
    return out


def save_checkpoint_pair(best, final, out: Path, extra: dict) -> None:
    save_checkpoint(final, out / "final.pt", extra)
    save_checkpoint(best, out / "best.pt", extra)  # written last: its presence marks completion


def cmd_train(run, pipelines=None, folds_to_run=None) -> list[Path]:
    cfg, folds = load_run(run)
    if pipelines:
        cfg.pipelines = list(pipelines)
    slides = load_slides(run, cfg.wsi_ids())
    out = []
    for k in folds_to_run if folds_to_run is not None else range(len(folds)):
        for network, strategy in cfg.required_models():
            out.append(train_model(cfg, folds, slides, run, k, network, strategy))
    return out


# -- segment ------------------------------------------------------------------


def _fold_for(folds: FoldSplit, wsi: str) -> int:
    try:
        return folds.fold_of_test(wsi)
    except KeyError:
        raise LeakageError(f"{wsi} is not test data in any fold; refusing to segment it") from None


def load_models(cfg: RunConfig, run, fold: int, pipeline: str) -> tuple[dict, dict]:
    pk = PIPELINES[pipeline]
    models, paths = {}, {}
    for network, strategy in pk.models():
        path = model_dir(run, fold, network, strategy) / "best.pt"
        if not path.exists():
            raise FileNotFoundError(f"missing checkpoint {path}; run `train` first")
        role = "segmenter" if network == UNET_D else "detector"
        models[role] = load_checkpoint(path)
        paths[role] = str(path.relative_to(run))
    return models, paths


def segment_kwargs(cfg: RunConfig, pipeline: str) -> dict:
    kw = {"tile_size": cfg.models[UNET_D].infer_tile}
    if PIPELINES[pipeline].is_cascade:
        kw.update(dilation=cfg.candidate_dilation, step=cfg.sw_step, foveation=cfg.foveation)
        if UNET_S in cfg.models:
            kw["detector_tile_size"] = cfg.models[UNET_S].infer_tile
    return kw


def cmd_segment(run, wsi: str, pipeline: str, slide: Slide | None = None, cfg=None, folds=None) -> LabelMap:
    if cfg is None:
        cfg, folds = load_run(run)
    run = Path(run)
    fold = _fold_for(folds, wsi)
    if wsi in folds[fold].train or wsi in folds[fold].val:
        raise LeakageError(f"{wsi} was used for training fold {fold}")
    slide = slide or load_slides(run, [wsi])[wsi]
    models, paths = load_models(cfg, run, fold, pipeline)
    t0 = time.perf_counter()
    lm = run_pipeline(pipeline, slide.image, models, slide.foreground, **segment_kwargs(cfg, pipeline))
    total = time.perf_counter() - t0
    out = _dirs(run)["predictions"] / pipeline
    out.mkdir(parents=True, exist_ok=True)
    save_mask(lm.labels, out / f"{wsi}.png")
    sidecar = {
        "pipeline": pipeline,
        "wsi": wsi,
        "fold": fold,
        "checkpoints": paths,
        "tiles_evaluated": lm.tiles_evaluated,
        "tiles_total": lm.tiles_total,
        "candidates": lm.stage_seconds.get("_candidates"),
        "stage_seconds": stage_times(lm),
        "total_seconds": total,
    }
    (out / f"{wsi}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    log.info("%s %s: %d/%d tiles, %.1fs", pipeline, wsi, lm.tiles_evaluated, lm.tiles_total, total)
    return lm


def cmd_segment_all(run, pipelines=None) -> None:
    cfg, folds = load_run(run)
    slides = load_slides(run, cfg.wsi_ids())
    for pipeline in pipelines or cfg.pipelines:
        for wsi in cfg.wsi_ids():
            cmd_segment(run, wsi, pipeline, slides[wsi], cfg, folds)


# -- evaluate -----------------------------------------------------------------


def area_bounds(cfg: RunConfig) -> tuple[int, int]:
    return scaled_area_bounds(cfg.synthetic.diameter_mean, cfg.min_area, cfg.max_area)


def evaluate_pipeline(run, pipeline: str, cfg: RunConfig, folds: FoldSplit, overlays: bool = True) -> EvalReport:
    run = Path(run)
    bounds = area_bounds(cfg)
    report = EvalReport(pipeline, area_bounds=bounds)
    pred_dir = _dirs(run)["predictions"] / pipeline
    out = _dirs(run)["reports"] / pipeline
    for wsi in cfg.wsi_ids():
        png, side = pred_dir / f"{wsi}.png", pred_dir / f"{wsi}.json"
        if not png.exists() or not side.exists():
            report.missing.append(wsi)
            continue
        meta = json.loads(side.read_text())
        fold = meta["fold"]
        if wsi not in folds[fold].test:
            raise LeakageError(f"{pipeline}/{wsi} was segmented by fold {fold}, where it is not test data")
        pred = load_mask(png)
        slide_dir = _dirs(run)["data"] / wsi
        gt = load_mask(slide_dir / "annotation.png")
        report.per_wsi[wsi] = evaluate_slide(pred, gt, *bounds)
        report.runtimes[wsi] = meta["stage_seconds"]
        report.provenance[wsi] = {"fold": fold, "test_split": list(folds[fold].test),
                                  "checkpoints": meta["checkpoints"], "tiles_evaluated": meta["tiles_evaluated"]}
        if overlays:
            (out / "overlays").mkdir(parents=True, exist_ok=True)
            low = np.asarray(Image.open(slide_dir / "level_1.png").convert("RGB"))
            ov = overlay(mask_to_level(pred, 4), mask_to_level(gt, 4), low)
            Image.fromarray(ov).save(out / "overlays" / f"{wsi}.png", compress_level=1)
    report.write(out)
    return report


def fold_scores(report: EvalReport, folds: FoldSplit, stage: str = "post", metric: str = "dsc") -> list[float | None]:
    """Mean metric over each fold's test slides."""
    out = []
    for f in folds:
        vals = [report.per_wsi[w][stage][metric] for w in f.test if w in report.per_wsi]
        out.append(float(np.mean(vals)) if vals else None)
    return out


def cmd_evaluate(run, pipelines=None, overlays: bool = True) -> dict[str, EvalReport]:
    cfg, folds = load_run(run)
    reports = {p: evaluate_pipeline(run, p, cfg, folds, overlays) for p in pipelines or cfg.pipelines}
    rows = []
    for p, r in reports.items():
        s = r.summary()
        rows.append({
            "pipeline": p,
            **{k: s[k] for k in ("raw_dsc_mean", "raw_dsc_std", "post_dsc_mean", "post_dsc_std",
                                 "post_precision_mean", "post_recall_mean",
                                 "detection_precision", "detection_recall", "detection_f1", "runtime_mean_s")},
            "missing": len(r.missing),
            **{f"fold{k}_post_dsc": v for k, v in enumerate(fold_scores(r, folds))},
        })
    out = _dirs(run)["reports"]
    out.mkdir(parents=True, exist_ok=True)
    if rows:
        with open(out / "comparison.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    (out / "comparison.json").write_text(json.dumps(rows, indent=2))
    return reports


# -- profile ------------------------------------------------------------------


def cmd_profile(run, pipelines=None, wsis=None, repeats: int = 1) -> list[dict]:
    """Time each pipeline stage on test slides (label maps are not written)."""
    cfg, folds = load_run(run)
    wsis = wsis or cfg.wsi_ids()
    slides = load_slides(run, wsis)
    rows = []
    for pipeline in pipelines or cfg.pipelines:
        for wsi in wsis:
            fold = _fold_for(folds, wsi)
            models, _ = load_models(cfg, run, fold, pipeline)
            for rep in range(repeats):
                t0 = time.perf_counter()
                lm = run_pipeline(pipeline, slides[wsi].image, models, slides[wsi].foreground,
                                  **segment_kwargs(cfg, pipeline))
                rows.append({"pipeline": pipeline, "wsi": wsi, "repeat": rep, "total_s": time.perf_counter() - t0,
                             "tiles_evaluated": lm.tiles_evaluated, "tiles_total": lm.tiles_total,
                             **{f"{k}_s": v for k, v in stage_times(lm).items()}})
    out = _dirs(run)["reports"]
    out.mkdir(parents=True, exist_ok=True)
    keys = sorted({k for r in rows for k in r}, key=lambda k: (k not in ("pipeline", "wsi", "repeat"), k))
    with open(out / "profile.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
    return rows


def run_experiment(cfg: RunConfig, run, force: bool = False, overlays: bool = True) -> dict[str, EvalReport]:
    """generate -> train -> segment -> evaluate."""
    if not (Path(run) / CONFIG).exists() or force:
        cmd_generate(cfg, run, force)
    cmd_train(run)
    cmd_segment_all(run)
    return cmd_evaluate(run, overlays=overlays)


# -- argument parsing ---------------------------------------------------------


def _config_from_args(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else profile(args.profile)
    return apply_overrides(cfg, args.set)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cascadeseg", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def run_arg(sp):
        sp.add_argument("--run", required=True, type=Path, help="run directory")

    g = sub.add_parser("generate", help="write the synthetic corpus and fold split")
    run_arg(g)
    g.add_argument("--profile", default="desk", choices=("desk", "paper"))
    g.add_argument("--config", type=Path, help="JSON config (overrides --profile)")
    g.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    g.add_argument("--force", action="store_true")

    t = sub.add_parser("train", help="train every model the configured pipelines need")
    run_arg(t)
    t.add_argument("--pipelines", nargs="+", choices=sorted(PIPELINES))
    t.add_argument("--folds", nargs="+", type=int)

    s = sub.add_parser("segment", help="segment one test slide (or all with --all)")
    run_arg(s)
    s.add_argument("--pipeline", choices=sorted(PIPELINES))
    s.add_argument("--wsi")
    s.add_argument("--all", action="store_true")

    e = sub.add_parser("evaluate", help="score predictions and write reports")
    run_arg(e)
    e.add_argument("--pipelines", nargs="+", choices=sorted(PIPELINES))
    e.add_argument("--no-overlays", action="store_true")

    pr = sub.add_parser("profile", help="time pipeline stages")
    run_arg(pr)
    pr.add_argument("--pipelines", nargs="+", choices=sorted(PIPELINES))
    pr.add_argument("--wsi", nargs="+")
    pr.add_argument("--repeats", type=int, default=1)

    r = sub.add_parser("run", help="generate, train, segment and evaluate in one go")
    run_arg(r)
    r.add_argument("--profile", default="desk", choices=("desk", "paper"))
    r.add_argument("--config", type=Path)
    r.add_argument("--set", action="append", metavar="KEY=VALUE")
    r.add_argument("--force", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    torch.set_num_threads(max(1, torch.get_num_threads()))
    try:
        if args.command == "generate":
            cmd_generate(_config_from_args(args), args.run, args.force)
        elif args.command == "train":
            cmd_train(args.run, args.pipelines, args.folds)
        elif args.command == "segment":
            if args.all:
                cmd_segment_all(args.run, [args.pipeline] if args.pipeline else None)
            elif args.wsi and args.pipeline:
                cmd_segment(args.run, args.wsi, args.pipeline)
            else:
                raise ValueError("segment needs --wsi and --pipeline, or --all")
        elif args.command == "evaluate":
            reports = cmd_evaluate(args.run, args.pipelines, not args.no_overlays)
            for p, r in reports.items():
                s = r.summary()
                print(f"{p}: post DSC {s['post_dsc_mean']}, precision {s['post_precision_mean']}, "
                      f"missing {len(r.missing)}")
            if any(r.missing for r in reports.values()):
                return 1
        elif args.command == "profile":
            for row in cmd_profile(args.run, args.pipelines, args.wsi, args.repeats):
                print(json.dumps(row))
        elif args.command == "run":
            run_experiment(_config_from_args(args), args.run, args.force)
    except (LeakageError, FileExistsError, FileNotFoundError, ValueError, KeyError) as exc:
        log.error("%s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
