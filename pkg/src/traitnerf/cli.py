"""Command-line entry points: gen-scene, train, render, eval, grad-check."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import metrics, plotting, synth
from .config import RunConfig, parse_override
from .dataset import Dataset, read_png, write_dataset, write_png_depth_mm, write_png_rgb
from .errors import ConfigError, TraitNeRFError
from .render import render_image
from .train import Trainer, load_model, pearson, pipeline_grad_check

log = logging.getLogger("traitnerf")

REPORT_VERSION = 1
TAR_TARGETS = (0.1, 0.01, 0.001)
RANKS = (1, 5, 10)


def _finite(x: float):
    """JSON-safe scalar: infinities become the ``"inf"`` sentinel."""
    x = float(x)
    if math.isinf(x):
        return metrics.INF_SENTINEL if x > 0 else "-" + metrics.INF_SENTINEL
    return x


def _overrides(pairs: list[str]) -> dict:
    return dict(parse_override(p) for p in pairs or [])


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    over = _overrides(args.set)
    if getattr(args, "dataset", None):
        over["datasets"] = [str(p) for p in args.dataset]
    if getattr(args, "out_dir", None):
        over["out_dir"] = str(args.out_dir)
    return cfg.with_overrides(over) if over else cfg


def _writable_dir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {path}: {exc.strerror or exc}") from exc
    if not path.is_dir():
        raise OSError(f"output path {path} is not a directory")
    return path


# -- subcommands -----------------------------------------------------------

def cmd_gen_scene(args) -> dict:
    d = synth.SceneConfig().to_dict()
    for key, value in _overrides(args.set).items():
        if key not in d:
            raise ConfigError(f"unknown scene key {key!r}")
        d[key] = value
    scene_cfg = synth.SceneConfig.from_dict(d)
    out = _writable_dir(args.out)
    scene = synth.make_scene(scene_cfg, seed=args.seed)
    manifest = write_dataset(scene, out)
    return {"manifest": str(manifest), "n_views": len(scene.cameras), "input_views": scene.input_views,
            "supervision_views": scene.supervision_views, "heldout_views": scene.heldout_views}


def cmd_train(args) -> dict:
    cfg = _run_config(args)
    out = _writable_dir(cfg.out_dir)
    ckpt = out / "checkpoint.npz"
    if args.resume:
        trainer = Trainer.from_checkpoint(args.resume, cfg=cfg)
    else:
        trainer = Trainer(cfg)
    cfg.save(out / "config.json")
    csv_path = out / "losses.csv"
    trainer.run(csv_path=csv_path, checkpoint_path=ckpt)
    with open(csv_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows:
        plotting.plot_losses(rows, out / "losses.png")
    last = trainer.state.history[-1] if trainer.state.history else {}
    return {"checkpoint": str(ckpt), "losses_csv": str(csv_path), "steps": trainer.state.step,
            "final": {k: v for k, v in last.items() if k != "step"}}


def _select_views(ds: Dataset, ids: list[int] | None, n: int, seed: int) -> list[int]:
    if ids:
        unknown = [i for i in ids if i not in ds.views]
        if unknown:
            raise ConfigError(f"unknown view ids {unknown}; the dataset has ids 0..{max(ds.views)}")
        return list(ids)
    pool = ds.heldout_views or [i for i in ds.views if i not in ds.input_views]
    if n > len(pool):
        raise ConfigError(f"asked for {n} views but only {len(pool)} unseen views exist")
    rng = np.random.default_rng(seed)
    return sorted(int(i) for i in rng.choice(pool, size=n, replace=False))


def cmd_render(args) -> dict:
    model, cfg = load_model(args.checkpoint)
    ds = Dataset.load(args.dataset or cfg.datasets[0])
    n = args.n_views if args.n_views is not None else cfg.n_render_views
    views = _select_views(ds, args.views, n, cfg.seed)
    out = _writable_dir(args.out)
    inputs = ds.scene_inputs(cfg.n_depth, cfg.n_views_in)
    rows, cols = ds.image_size
    written = []
    for vid in views:
        res = render_image(model, inputs, ds.views[vid].camera, cfg.n_depth, cfg.render_chunk)
        color = res.color.numpy().reshape(rows, cols, 3)
        depth = res.depth.numpy().reshape(rows, cols)
        name = f"view_{vid:03d}"
        write_png_rgb(out / f"{name}_color.png", color)
        write_png_depth_mm(out / f"{name}_depth.png", depth)
        np.save(out / f"{name}_depth.npy", depth.astype(np.float32))
        written.append(vid)
    (out / "renders.json").write_text(json.dumps({"checkpoint": str(args.checkpoint), "dataset": str(ds.root),
                                                  "views": written}, indent=2) + "\n")
    return {"out": str(out), "views": written}


def _load_images(path: Path) -> tuple[dict[int, np.ndarray], dict[int, np.ndarray]]:
    """Colors and depths keyed by view id from a render directory or a dataset."""
    if (path / "manifest.json").exists():
        ds = Dataset.load(path)
        return ({i: v.image for i, v in ds.views.items()},
                {i: v.depth for i, v in ds.views.items() if v.depth is not None})
    if not path.is_dir():
        raise FileNotFoundError(f"no such directory {path}")
    colors, depths = {}, {}
    for f in sorted(path.glob("view_*_color.png")):
        vid = int(f.name.split("_")[1])
        colors[vid] = read_png(f)[..., :3]
        npy = path / f"view_{vid:03d}_depth.npy"
        if npy.exists():
            depths[vid] = np.load(npy).astype(np.float64)
    if not colors:
        raise FileNotFoundError(f"no rendered views (view_XXX_color.png) in {path}")
    return colors, depths


def _image_report(rendered: Path, gt: Path) -> dict:
    colors, depths = _load_images(rendered)
    gt_colors, gt_depths = _load_images(gt)
    missing = sorted(set(colors) - set(gt_colors))
    if missing:
        raise ConfigError(f"rendered views {missing} have no ground truth in {gt}")
    per_view = []
    for vid in sorted(colors):
        a, b = colors[vid], gt_colors[vid]
        if a.shape != b.shape:
            raise ConfigError(f"view {vid}: rendered shape {a.shape} differs from ground truth {b.shape}")
        entry = {"view": vid, "psnr": metrics.psnr(a, b), "ssim": metrics.ssim(a, b), "depth_corr": None}
        if vid in depths and vid in gt_depths:
            fg = gt_depths[vid] > 0
            if fg.sum() >= 2:
                entry["depth_corr"] = pearson(depths[vid][fg], gt_depths[vid][fg])
        per_view.append(entry)
    corr = [e["depth_corr"] for e in per_view if e["depth_corr"] is not None]
    summary = {
        "n_views": len(per_view),
        "psnr_mean": float(np.mean([e["psnr"] for e in per_view])),
        "ssim_mean": float(np.mean([e["ssim"] for e in per_view])),
        "depth_corr_mean": float(np.mean(corr)) if corr else None,
    }
    safe = [{k: (_finite(v) if isinstance(v, float) else v) for k, v in e.items()} for e in per_view]
    return {"summary": {k: (_finite(v) if isinstance(v, float) else v) for k, v in summary.items()},
            "views": safe}


def _write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _score_report(scores_csv: Path, out: Path) -> dict:
    scores, trial = metrics.read_score_csv(scores_csv)
    points = metrics.det_points(scores)
    e = metrics.eer(scores)
    _write_rows(out / "det.csv", ["threshold", "far", "frr"], points.tolist())
    plotting.plot_det(points, out / "det.png", e)
    report = {
        "n_genuine": len(scores.genuine),
        "n_impostor": len(scores.impostor),
        "eer": e,
        "tar_at_far": {f"{t:g}": metrics.tar_at_far(scores, t) for t in TAR_TARGETS},
        "identification": None,
    }
    if trial is not None:
        curve = metrics.cmc(trial)
        _write_rows(out / "cmc.csv", ["rank", "rate"], [[k + 1, float(r)] for k, r in enumerate(curve)])
        plotting.plot_cmc(curve, out / "cmc.png")
        report["identification"] = {
            "n_probes": int(trial.similarity.shape[0]),
            "n_gallery": int(trial.similarity.shape[1]),
            "rank": {str(k): metrics.rank_k(trial, k) for k in RANKS},
            "map": metrics.mean_average_precision(trial),
        }
    return report


def cmd_eval(args) -> dict:
    if not (args.rendered or args.scores):
        raise ConfigError("eval needs --rendered/--gt or --scores")
    if args.rendered and not args.gt:
        raise ConfigError("--rendered requires --gt")
    out = _writable_dir(args.out)
    report = {"version": REPORT_VERSION, "images": None, "scores": None}
    if args.rendered:
        report["images"] = _image_report(Path(args.rendered), Path(args.gt))
    if args.scores:
        report["scores"] = _score_report(Path(args.scores), out)
    path = out / "report.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report | {"report": str(path)}


def cmd_grad_check(args) -> dict:
    cfg = _run_config(args)
    if args.scene:
        return pipeline_grad_check(Dataset.load(args.scene), cfg, args.max_coords)
    size = tuple(cfg.image_size)
    with tempfile.TemporaryDirectory() as tmp:
        write_dataset(synth.make_scene(synth.SceneConfig(image_size=size), seed=cfg.seed), tmp)
        return pipeline_grad_check(Dataset.load(tmp), cfg, args.max_coords)


# -- parser ----------------------------------------------------------------

GRAD_CHECK_DEFAULTS = ["image_size=[16,10]", "n_views_in=2", "window=8", "n_depth=8", "n_c1=2", "n_c2=2",
                       "feature_hidden=2", "unet_mid=4", "mlp_width=8", "mlp_layers=2", "pe_freqs=1"]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="traitnerf", description=__doc__)
    p.add_argument("--json", action="store_true", help="print a machine-readable JSON result")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def config_args(sp, defaults=None):
        sp.add_argument("--config", type=Path, help="JSON run configuration")
        sp.add_argument("--set", action="append", default=list(defaults or []), metavar="KEY=VALUE",
                        help="override a configuration field (repeatable)")

    g = sub.add_parser("gen-scene", help="write a synthetic multi-view scene")
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="scene parameter override")
    g.set_defaults(func=cmd_gen_scene)

    t = sub.add_parser("train", help="train on one or more scenes")
    config_args(t)
    t.add_argument("--dataset", action="append", type=Path, help="scene directory (repeatable)")
    t.add_argument("--out-dir", type=Path)
    t.add_argument("--resume", type=Path, help="continue from a checkpoint")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render color and depth for unseen views")
    r.add_argument("--checkpoint", required=True, type=Path)
    r.add_argument("--dataset", type=Path)
    r.add_argument("--views", type=int, nargs="+", help="explicit view ids")
    r.add_argument("--n-views", type=int, help="number of random unseen views (default from config, 20)")
    r.add_argument("--out", required=True, type=Path)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="image-quality and biometric metric report")
    e.add_argument("--rendered", type=Path, help="render directory or dataset")
    e.add_argument("--gt", type=Path, help="ground-truth dataset or directory")
    e.add_argument("--scores", type=Path, help="score CSV (label_a, label_b, score)")
    e.add_argument("--out", required=True, type=Path)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("grad-check", help="finite-difference check of the full training objective")
    config_args(c, GRAD_CHECK_DEFAULTS)
    c.add_argument("--scene", type=Path, help="scene directory (default: a generated tiny scene)")
    c.add_argument("--max-coords", type=int, help="coordinates checked per parameter tensor")
    c.set_defaults(func=cmd_grad_check)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        result = args.func(args)
    except (TraitNeRFError, OSError, ValueError, KeyError) as exc:
        msg = str(exc) if not isinstance(exc, KeyError) else f"missing key {exc}"
        if args.json:
            print(json.dumps({"ok": False, "error": type(exc).__name__, "message": msg}))
        else:
            print(f"error: {msg}", file=sys.stderr)
        return 1
    if args.json:
        print(json.dumps({"ok": True, **result}, default=_json_default, sort_keys=True))
    elif args.command == "grad-check":
        print(f"max relative error {result['max_rel_error']:.3e}")
    else:
        for key, value in result.items():
            print(f"{key}: {value}")
    return 0


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    return str(obj)


if __name__ == "__main__":
    sys.exit(main())
