import json
from pathlib import Path

import numpy as np
import pytest

from traitnerf import cli, metrics

GOLDEN = Path(__file__).parent / "golden" / "eval_report_schema.json"


def run(capsys, *argv):
    code = cli.main(["--json", *argv])
    out = capsys.readouterr().out.strip().splitlines()
    return code, json.loads(out[-1])


def schema(obj):
    """Type skeleton of a JSON document; list items are represented by their first element."""
    if isinstance(obj, dict):
        return {k: schema(v) for k, v in sorted(obj.items())}
    if isinstance(obj, list):
        return [schema(obj[0])] if obj else []
    if isinstance(obj, bool):
        return "bool"
    if isinstance(obj, (int, float)):
        return "number"
    if obj is None:
        return "null"
    return "string"


@pytest.fixture(scope="module")
def scores_csv(tmp_path_factory):
    rng = np.random.default_rng(0)
    path = tmp_path_factory.mktemp("scores") / "scores.csv"
    lines = ["label_a,label_b,score,probe_id,gallery_id"]
    for p in range(6):
        for g in range(6):
            la, lb = p % 3, g % 3
            s = rng.normal(0.7 if la == lb else 0.3, 0.15)
            lines.append(f"s{la},s{lb},{s:.6f},p{p},g{g}")
    path.write_text("\n".join(lines) + "\n")
    return path


def test_gen_scene_invalid_out_dir(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code, res = run(capsys, "gen-scene", "--out", str(blocker / "sub"), "--set", "image_size=[32,20]")
    assert code != 0 and not res["ok"] and str(blocker) in res["message"]


def test_gen_scene_default_splits(tmp_path, capsys):
    code, res = run(capsys, "gen-scene", "--out", str(tmp_path), "--set", "image_size=[32,20]", "--seed", "2")
    assert code == 0 and len(res["input_views"]) == 3 and len(res["heldout_views"]) == 20


def test_unknown_scene_key(tmp_path, capsys):
    code, res = run(capsys, "gen-scene", "--out", str(tmp_path), "--set", "colour=red")
    assert code != 0 and "colour" in res["message"]


def test_eval_gt_against_itself(micro_scene_dir, tmp_path, capsys):
    code, res = run(capsys, "eval", "--rendered", str(micro_scene_dir), "--gt", str(micro_scene_dir),
                    "--out", str(tmp_path))
    assert code == 0
    summary = res["images"]["summary"]
    assert summary["psnr_mean"] == metrics.INF_SENTINEL
    assert abs(summary["ssim_mean"] - 1.0) <= 1e-12
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["images"]["views"][0]["psnr"] == metrics.INF_SENTINEL


def test_eval_separable_scores(tmp_path, capsys):
    path = tmp_path / "s.csv"
    path.write_text("label_a,label_b,score\na,a,0.9\nb,b,0.8\na,b,0.1\nb,a,0.2\n")
    code, res = run(capsys, "eval", "--scores", str(path), "--out", str(tmp_path / "o"))
    assert code == 0 and res["scores"]["eer"] == 0.0
    assert (tmp_path / "o" / "det.csv").exists() and (tmp_path / "o" / "det.png").exists()


def test_eval_requires_input(tmp_path, capsys):
    code, _ = run(capsys, "eval", "--out", str(tmp_path))
    assert code != 0


def test_eval_mismatched_sets(micro_scene_dir, tmp_path, capsys):
    rendered = tmp_path / "r"
    rendered.mkdir()
    from traitnerf.dataset import write_png_rgb

    write_png_rgb(rendered / "view_099_color.png", np.zeros((32, 20, 3)))
    code, res = run(capsys, "eval", "--rendered", str(rendered), "--gt", str(micro_scene_dir), "--out", str(tmp_path))
    assert code != 0 and "99" in res["message"]


def test_report_schema_matches_golden(micro_scene_dir, scores_csv, tmp_path, capsys):
    code, _ = run(capsys, "eval", "--rendered", str(micro_scene_dir), "--gt", str(micro_scene_dir),
                  "--scores", str(scores_csv), "--out", str(tmp_path))
    assert code == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert schema(report) == json.loads(GOLDEN.read_text())
    assert (tmp_path / "cmc.csv").exists() and (tmp_path / "cmc.png").exists()


def test_train_render_eval_round(micro_scene_dir, tmp_path, capsys):
    out = tmp_path / "run"
    settings = ["image_size=[32,20]", "n_depth=8", "n_c1=2", "n_c2=2", "feature_hidden=2", "unet_mid=4",
                "mlp_width=8", "mlp_layers=2", "pe_freqs=1", "window=6", "steps=3", "precision=float32"]
    argv = ["train", "--dataset", str(micro_scene_dir), "--out-dir", str(out)]
    for s in settings:
        argv += ["--set", s]
    code, res = run(capsys, *argv)
    assert code == 0 and res["steps"] == 3
    assert (out / "losses.png").exists() and (out / "config.json").exists()

    code, res = run(capsys, "render", "--checkpoint", str(out / "checkpoint.npz"), "--out", str(tmp_path / "r"),
                    "--n-views", "2")
    assert code == 0 and len(res["views"]) == 2
    first = res["views"][0]
    assert (tmp_path / "r" / f"view_{first:03d}_depth.png").exists()
    again_code, again = run(capsys, "render", "--checkpoint", str(out / "checkpoint.npz"),
                            "--out", str(tmp_path / "r2"), "--n-views", "2")
    assert again["views"] == res["views"]
    a = (tmp_path / "r" / f"view_{first:03d}_color.png").read_bytes()
    assert a == (tmp_path / "r2" / f"view_{first:03d}_color.png").read_bytes()

    code, res = run(capsys, "render", "--checkpoint", str(out / "checkpoint.npz"), "--out", str(tmp_path / "r3"),
                    "--views", "500")
    assert code != 0 and "500" in res["message"]

    code, res = run(capsys, "eval", "--rendered", str(tmp_path / "r"), "--gt", str(micro_scene_dir),
                    "--out", str(tmp_path / "e"))
    assert code == 0 and res["images"]["summary"]["n_views"] == 2


def test_default_render_count_is_twenty():
    args = cli.build_parser().parse_args(["render", "--checkpoint", "c", "--out", "o"])
    assert args.n_views is None
    from traitnerf.config import RunConfig

    assert RunConfig().n_render_views == 20


def test_grad_check_command(capsys):
    code, res = run(capsys, "grad-check", "--max-coords", "2")
    assert code == 0 and res["max_rel_error"] < 1e-4
