import csv
import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from crowdslam.cli import main, render_svg
from crowdslam.config import RunConfig
from crowdslam.dataset import DatasetManifest, ManifestEntry, load_manifest, read_episode, write_episode, write_manifest
from crowdslam.slam import load_result, read_rollout_stream

from oracles import constant_velocity_episode

SVG = "{http://www.w3.org/2000/svg}"

SMALL = """
[sim]
episode_length = 40
ped_count_range = [2, 4]

[dataset]
n_train = 3
n_test = 2

[train]
epochs = 2
latent = 8
hist_hidden = [8]
head_hidden = [8]
batch_size = 16

[slam]
window = 8
horizon = 5

[prior]
n_samples = 4
"""


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.toml"
    cfg.write_text(SMALL)
    assert main(["gen-data", "--config", str(cfg), "--out", str(root / "data")]) == 0
    for kind in ("mlp", "gat"):
        assert main(["train", "--config", str(cfg), "--kind", kind, "--manifest", str(root / "data/manifest.json"),
                     "--out", str(root / f"w/{kind}.json")]) == 0
    return root, cfg


def run(work, prior, weights=None):
    root, cfg = work
    argv = ["run", "--config", str(cfg), "--manifest", str(root / "data/manifest.json"), "--prior", prior,
            "--out", str(root / "results")]
    if weights:
        argv += ["--weights", str(root / "w" / weights)]
    return main(argv)


def test_gen_data_manifest(work):
    root, _ = work
    m = load_manifest(root / "data/manifest.json")
    assert m.counts == {"train": 3, "test": 2}
    assert m.config.episode_length == 40


def test_invalid_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[sim]\nped_count_range = [0, 3]\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")]) == 2
    assert "sim.ped_count_range" in capsys.readouterr().err
    assert not (tmp_path / "d").exists()


def test_usage_errors_exit_2(tmp_path, work):
    root, _ = work
    assert main([]) == 2
    assert main(["run", "--manifest", str(tmp_path / "nope.json"), "--prior", "cvm", "--out", str(tmp_path)]) == 2
    assert main(["run", "--manifest", str(root / "data/manifest.json"), "--prior", "mlp", "--out", str(tmp_path)]) == 2
    assert main(["run", "--manifest", str(root / "data/manifest.json"), "--prior", "gat-det",
                 "--weights", str(root / "w/mlp.json"), "--out", str(tmp_path)]) == 2
    assert main(["run", "--manifest", str(root / "data/manifest.json"), "--prior", "bogus", "--out", str(tmp_path)]) == 2


def test_print_default_config(capsys):
    assert main(["print-default-config"]) == 0
    text = capsys.readouterr().out
    assert RunConfig.from_toml(text).to_toml() == text
    assert main(["--print-default-config"]) == 0


def test_train_outputs_and_determinism(work, tmp_path):
    root, cfg = work
    assert (root / "w/mlp.loss.csv").exists()
    out = tmp_path / "again.json"
    assert main(["train", "--config", str(cfg), "--kind", "mlp", "--manifest", str(root / "data/manifest.json"),
                 "--out", str(out)]) == 0
    assert out.read_bytes() == (root / "w/mlp.json").read_bytes()


def test_train_history_mismatch(work, tmp_path):
    root, _ = work
    cfg = tmp_path / "h6.toml"
    cfg.write_text(SMALL.replace("[train]\n", "[train]\nhistory_len = 6\n")
                   .replace("[prior]\n", "[prior]\nhistory_len = 6\n"))
    rc = main(["train", "--config", str(cfg), "--kind", "gat", "--manifest", str(root / "data/manifest.json"),
               "--weights", str(root / "w/gat.json"), "--out", str(tmp_path / "g.json")])
    assert rc == 2
    assert not (tmp_path / "g.json").exists()


def test_train_divergence_removes_outputs(work, tmp_path):
    root, _ = work
    cfg = tmp_path / "hot.toml"
    cfg.write_text(SMALL.replace("[train]\n", "[train]\nlr = 1e200\n"))
    out = tmp_path / "m.json"
    rc = main(["train", "--config", str(cfg), "--kind", "mlp", "--manifest", str(root / "data/manifest.json"),
               "--out", str(out)])
    assert rc == 1
    assert not out.exists() and not out.with_suffix(".loss.csv").exists()


def test_train_on_constant_velocity_data(tmp_path):
    root = tmp_path / "cv"
    (root / "episodes").mkdir(parents=True)
    entries = []
    for k in range(4):
        rec = constant_velocity_episode(n_steps=40, n_peds=4, seed=k)
        write_episode(rec, root / f"episodes/ep_{k}.jsonl")
        entries.append(ManifestEntry(f"episodes/ep_{k}.jsonl", "train" if k < 3 else "test", k))
    write_manifest(DatasetManifest(root, 0, rec.config, entries))
    cfg = tmp_path / "cv.toml"
    cfg.write_text("[train]\nepochs = 60\nlr = 0.003\nbatch_size = 32\nhistory_noise = 0.0\n")
    out = tmp_path / "cv.json"
    assert main(["train", "--config", str(cfg), "--kind", "mlp", "--manifest", str(root / "manifest.json"),
                 "--out", str(out)]) == 0
    with out.with_suffix(".loss.csv").open() as fh:
        losses = [float(r["loss"]) for r in csv.DictReader(fh)]
    assert losses[-1] < 1e-4


@pytest.fixture(scope="module")
def results(work):
    assert run(work, "none") == 0
    assert run(work, "cvm") == 0
    assert run(work, "gat-stoch", "gat.json") == 0
    return work[0] / "results"


def test_run_outputs(results):
    none = sorted((results / "none").glob("*.json"))
    assert len(none) == 2
    res = load_result(none[0])
    assert not res.predictions_available
    assert np.all(np.isnan(res.pred_positions))
    streams = sorted((results / "gat-stoch").glob("*.rollouts.jsonl"))
    assert len(streams) == 2
    rows = read_rollout_stream(streams[0])
    assert rows and rows[0]["mu"].shape == (5, 2) and rows[0]["sigma"].shape == (5, 2, 2)


def test_run_deterministic(work, results, tmp_path):
    root, cfg = work
    argv = ["run", "--config", str(cfg), "--manifest", str(root / "data/manifest.json"), "--prior", "gat-stoch",
            "--weights", str(root / "w/gat.json"), "--out", str(tmp_path)]
    assert main(argv) == 0
    for p in (results / "gat-stoch").iterdir():
        assert (tmp_path / "gat-stoch" / p.name).read_bytes() == p.read_bytes()


def test_eval_table(work, results, capsys):
    root, _ = work
    out = root / "table.csv"
    assert main(["eval", "--results", str(results), "--manifest", str(root / "data/manifest.json"),
                 "--out", str(out)]) == 0
    with out.open() as fh:
        rows = list(csv.DictReader(fh))
    assert [r["Method"] for r in rows] == ["none", "cvm", "gat-stoch"]
    assert list(rows[0])[:7] == ["Method", "Robot RMSE", "LM RMSE", "ATE", "RPE", "SDE", "Pred. RMSE"]
    assert all(r["Episodes"] == "2" for r in rows)
    assert (root / "table_episodes.csv").exists()


def test_eval_perfect_results_give_zero_row(tmp_path):
    """Ground truth written as a result scores zero everywhere."""
    from crowdslam.priors import PriorConfig, PriorKind
    from crowdslam.slam import SlamSettings, run_sequence, save_result

    root = tmp_path / "cv"
    (root / "episodes").mkdir(parents=True)
    rec = constant_velocity_episode(n_steps=30, n_peds=2)
    write_episode(rec, root / "episodes/ep_0.jsonl")
    write_manifest(DatasetManifest(root, 0, rec.config, [ManifestEntry("episodes/ep_0.jsonl", "test", rec.seed)]))
    res = run_sequence(rec, PriorConfig(PriorKind.CVM), SlamSettings(window=10, horizon=5))
    res.robot = rec.robot_poses.copy()
    res.landmarks = rec.ped_positions.copy()
    steps = res.pred_step[:, None] + np.arange(1, 6)
    inside = steps < rec.n_steps
    gt = rec.ped_positions[np.minimum(steps, rec.n_steps - 1), res.pred_ped[:, None]]
    res.pred_positions = np.where(inside[..., None], gt, res.pred_positions)
    (tmp_path / "res/perfect").mkdir(parents=True)
    save_result(res, tmp_path / "res/perfect/ep_0.json")
    out = tmp_path / "t.csv"
    assert main(["eval", "--results", str(tmp_path / "res"), "--manifest", str(root / "manifest.json"),
                 "--out", str(out)]) == 0
    with out.open() as fh:
        row = next(csv.DictReader(fh))
    assert all(float(row[c]) == 0.0 for c in ["Robot RMSE", "LM RMSE", "ATE", "RPE", "SDE", "Pred. RMSE"])


def parse_svg(path):
    root = ET.parse(path).getroot()
    assert root.tag == SVG + "svg"
    return root


def test_plot_stochastic_ellipses(work, results, tmp_path):
    root, _ = work
    res_path = sorted((results / "gat-stoch").glob("ep_*.json"))[0]
    res = load_result(res_path)
    step = int(res.pred_step[0])
    out = tmp_path / "p.svg"
    assert main(["plot", "--result", str(res_path), "--manifest", str(root / "data/manifest.json"),
                 "--step", str(step), "--out", str(out)]) == 0
    svg = parse_svg(out)
    assert svg.findall(f"{SVG}path")
    n_peds = int(np.sum(res.pred_step == step))
    assert len(svg.findall(f"{SVG}ellipse")) == n_peds * res.horizon


def test_plot_cvm_prediction_is_straight(work, results, tmp_path):
    root, _ = work
    res_path = sorted((results / "cvm").glob("ep_*.json"))[0]
    out = tmp_path / "c.svg"
    assert main(["plot", "--result", str(res_path), "--manifest", str(root / "data/manifest.json"),
                 "--out", str(out)]) == 0
    svg = parse_svg(out)
    preds = [p for p in svg.findall(f"{SVG}path") if p.get("class") == "pred"]
    assert preds and not svg.findall(f"{SVG}ellipse")
    for p in preds:
        pts = np.array([[float(v) for v in seg.strip().split()] for seg in p.get("d")[1:].split("L")])
        d = pts[1:] - pts[0]
        cross = d[:, 0] * d[-1, 1] - d[:, 1] * d[-1, 0]
        assert np.abs(cross).max() <= 1e-9 * max(1.0, np.abs(d).max() ** 2)


def test_plot_unknown_episode(work, results, tmp_path):
    root, _ = work
    res_path = sorted((results / "cvm").glob("ep_*.json"))[0]
    assert main(["plot", "--result", str(res_path), "--manifest", str(root / "data/manifest.json"),
                 "--episode", "ep_99999", "--out", str(tmp_path / "x.svg")]) == 2


def test_render_svg_without_predictions(work, results):
    root, _ = work
    res_path = sorted((results / "none").glob("ep_*.json"))[0]
    res = load_result(res_path)
    m = load_manifest(root / "data/manifest.json")
    entry = next(e for e in m.entries if e.seed == res.episode_seed)
    text = render_svg(res, read_episode(m.episode_path(entry)))
    ET.fromstring(text)
