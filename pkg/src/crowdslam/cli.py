"""Command-line entry point.

Exit codes: 0 on success, 1 on a runtime failure, 2 when the configuration
or inputs fail validation.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from crowdslam.config import ConfigError, RunConfig, default_config_text, load_config
from crowdslam.dataset import EpisodeFormatError, extract_scenes, generate_dataset, load_manifest, read_episode
from crowdslam.metrics import MetricsError, evaluate_episode, aggregate, write_episode_table, write_table
from crowdslam.neuralnet import (
    TrainingDivergedError,
    WeightsFormatError,
    load_weights,
    save_weights,
    train_predictor,
)
from crowdslam.priors import PriorKind
from crowdslam.slam import SlamError, run_sequence
from crowdslam.slam.io import ResultFormatError, load_result, save_result, write_rollout_stream

log = logging.getLogger("crowdslam")

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2

PRIOR_CHOICES = [k.value for k in PriorKind]
WEIGHT_KIND = {PriorKind.MLP: "mlp", PriorKind.GAT_DET: "gat", PriorKind.GAT_STOCH: "gat"}


class UsageError(Exception):
    """Bad inputs detected before any work starts (exit code 2)."""


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "jobs", None):
        cfg.jobs = args.jobs
    return cfg


def _manifest(path):
    try:
        return load_manifest(path)
    except (OSError, EpisodeFormatError) as exc:
        raise UsageError(f"cannot load manifest: {exc}") from exc


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg.dataset.master_seed = args.seed
    if args.n_train is not None:
        cfg.dataset.n_train = args.n_train
    if args.n_test is not None:
        cfg.dataset.n_test = args.n_test
    cfg.check()
    d = cfg.dataset
    manifest = generate_dataset(cfg.sim, d.n_train, d.n_test, d.master_seed, args.out, jobs=cfg.jobs)
    c = manifest.counts
    print(f"wrote {c['train'] + c['test']} episodes ({c['train']} train, {c['test']} test) to {manifest.root}")
    print(f"manifest: {manifest.root / 'manifest.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _config(args)
    cfg.check()
    hyper = cfg.train.hyper
    seed = cfg.train.seed if args.seed is None else args.seed
    manifest = _manifest(args.manifest)
    init = None
    if args.weights:
        try:
            init = load_weights(args.weights, expected_kind=args.kind, history_len=hyper.history_len)
        except (OSError, WeightsFormatError) as exc:
            raise UsageError(str(exc)) from exc
    scenes = []
    for _, rec in manifest.load("train"):
        scenes.extend(extract_scenes(rec, hyper.history_len))
    if not scenes:
        raise UsageError("training split yields no samples")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    loss_path = out.with_suffix(".loss.csv")
    try:
        model, losses = train_predictor(args.kind, scenes, hyper, seed, init=init)
    except TrainingDivergedError:
        for p in (out, loss_path):
            p.unlink(missing_ok=True)
        raise
    save_weights(model, out)
    with loss_path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for k, v in enumerate(losses, 1):
            w.writerow([k, repr(float(v))])
    print(f"trained {args.kind} on {len(scenes)} scenes, final loss {losses[-1]:.6g}")
    print(f"weights: {out}\nloss curve: {loss_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def _run_one(task):
    episode_path, out_path, prior, settings = task
    try:
        rec = read_episode(episode_path)
        res = run_sequence(rec, prior, settings)
    except (SlamError, EpisodeFormatError, OSError, ValueError) as exc:
        return str(out_path), f"{type(exc).__name__}: {exc}"
    save_result(res, out_path)
    if res.pred_mu is not None:
        write_rollout_stream(res, out_path.with_suffix(".rollouts.jsonl"))
    return str(out_path), None


def cmd_run(args) -> int:
    cfg = _config(args)
    cfg.check()
    kind = PriorKind(args.prior or cfg.prior.kind)
    weights = None
    if kind.is_neural:
        if not args.weights:
            raise UsageError(f"--weights is required for prior {kind.value}")
        try:
            weights = load_weights(args.weights, expected_kind=WEIGHT_KIND[kind], history_len=cfg.prior.history_len)
        except (OSError, WeightsFormatError) as exc:
            raise UsageError(str(exc)) from exc
    elif args.weights:
        raise UsageError(f"prior {kind.value} takes no weights")
    prior = cfg.prior.prior_config(kind=kind.value, weights=weights)
    errs = prior.validate()
    if errs:
        raise ConfigError([f"prior.{e}" for e in errs])
    manifest = _manifest(args.manifest)
    entries = manifest.split("test")
    if args.limit is not None:
        entries = entries[: args.limit]
    out = Path(args.out) / kind.value
    out.mkdir(parents=True, exist_ok=True)
    settings = cfg.slam.settings()
    tasks = [
        (manifest.episode_path(e), out / (Path(e.path).stem + ".json"), prior, settings) for e in entries
    ]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            outcomes = list(pool.map(_run_one, tasks))
    else:
        outcomes = [_run_one(t) for t in tasks]
    failed = [(p, err) for p, err in outcomes if err is not None]
    for p, err in failed:
        log.error("episode %s failed: %s", p, err)
    print(f"{kind.value}: {len(outcomes) - len(failed)}/{len(outcomes)} episodes written to {out}")
    return EXIT_RUNTIME if failed else EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    manifest = _manifest(args.manifest)
    tests = {Path(e.path).stem: e for e in manifest.split("test")}
    root = Path(args.results)
    methods = sorted(p for p in root.iterdir() if p.is_dir()) if root.is_dir() else []
    if not methods:
        raise UsageError(f"no result directories under {root}")
    order = {k.value: i for i, k in enumerate(PriorKind)}
    methods.sort(key=lambda p: (order.get(p.name, len(order)), p.name))
    records = {}
    reports, missing = [], []
    for mdir in methods:
        eps, horizon = [], 0
        for stem, entry in tests.items():
            path = mdir / f"{stem}.json"
            if not path.exists():
                missing.append(f"{mdir.name}/{stem}")
                continue
            if stem not in records:
                records[stem] = read_episode(manifest.episode_path(entry))
            res = load_result(path)
            horizon = res.horizon
            eps.append(evaluate_episode(res, records[stem]))
        if eps:
            reports.append(aggregate(mdir.name, horizon, eps))
    if not reports:
        raise UsageError("no results matched the manifest's test episodes")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_table(reports, out)
    write_episode_table(reports, out.with_name(out.stem + "_episodes.csv"))
    with out.open(encoding="utf-8") as fh:
        sys.stdout.write(fh.read())
    if missing:
        log.warning("missing %d results: %s", len(missing), ", ".join(missing))
    return EXIT_OK


# ---------------------------------------------------------------------------
# plot
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return repr(float(v))


class _Canvas:
    def __init__(self, points: np.ndarray, size: float = 800.0, pad: float = 20.0):
        pts = points[np.all(np.isfinite(points), axis=1)]
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        span = float(max(hi[0] - lo[0], hi[1] - lo[1], 1e-9))
        self.scale = (size - 2 * pad) / span
        self.lo, self.hi, self.pad, self.size = lo, hi, pad, size
        self.items: list[str] = []

    def xy(self, p) -> tuple[float, float]:
        x = self.pad + (p[0] - self.lo[0]) * self.scale
        y = self.size - self.pad - (p[1] - self.lo[1]) * self.scale
        return x, y

    def path(self, pts: np.ndarray, cls: str, color: str, width: float = 1.5, dash: str | None = None):
        pts = pts[np.all(np.isfinite(pts), axis=1)]
        if pts.shape[0] < 2:
            return
        xy = [self.xy(p) for p in pts]
        d = "M " + " L ".join(f"{_fmt(x)} {_fmt(y)}" for x, y in xy)
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        self.items.append(
            f'<path class="{cls}" d="{d}" fill="none" stroke="{color}" stroke-width="{width}"{extra}/>'
        )

    def ellipse(self, center, cov, color: str):
        w, V = np.linalg.eigh(0.5 * (cov + cov.T))
        rx, ry = (np.sqrt(np.maximum(w, 0.0)) * self.scale)[::-1]
        ang = -math.degrees(math.atan2(V[1, 1], V[0, 1]))
        cx, cy = self.xy(center)
        self.items.append(
            f'<ellipse class="cov" cx="{_fmt(cx)}" cy="{_fmt(cy)}" rx="{_fmt(rx)}" ry="{_fmt(ry)}" '
            f'transform="rotate({_fmt(ang)} {_fmt(cx)} {_fmt(cy)})" fill="none" stroke="{color}" stroke-width="0.8"/>'
        )

    def render(self, title: str) -> str:
        head = (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.size:g}" height="{self.size:g}" '
            f'viewBox="0 0 {self.size:g} {self.size:g}">'
        )
        body = "\n".join(self.items)
        return f'{head}\n<title>{escape(title)}</title>\n<rect width="100%" height="100%" fill="white"/>\n{body}\n</svg>\n'


def render_svg(res, rec, step: int | None = None) -> str:
    """Ground truth, MAP estimates and the horizon forecast emitted at ``step``."""
    if res.pred_step.size and step is None:
        steps, counts = np.unique(res.pred_step, return_counts=True)
        step = int(steps[np.argmax(counts)])
    rows = np.flatnonzero(res.pred_step == step) if step is not None else np.zeros(0, dtype=int)
    if res.predictions_available:
        preds = res.pred_positions[rows]
    else:
        preds = np.broadcast_to(res.pred_origin[rows, None, :], (rows.size, res.horizon, 2))
    pts = [rec.robot_poses[:, :2], rec.ped_positions.reshape(-1, 2), res.robot[:, :2]]
    pts.append(preds.reshape(-1, 2))
    canvas = _Canvas(np.concatenate(pts, axis=0))
    canvas.path(rec.robot_poses[:, :2], "gt-robot", "#000000", 2.0)
    canvas.path(res.robot[:, :2], "map-robot", "#1f77b4", 1.5, "4 2")
    for k in range(rec.n_peds):
        canvas.path(rec.ped_positions[:, k], "gt-ped", "#7f7f7f", 1.0)
        canvas.path(res.landmarks[:, k], "map-ped", "#2ca02c", 1.0, "3 2")
    for j, r in enumerate(rows):
        line = np.concatenate([res.pred_origin[r][None], preds[j]], axis=0)
        canvas.path(line, "pred", "#800080", 1.5)
        if res.pred_cov is not None:
            for t in range(res.horizon):
                canvas.ellipse(preds[j, t], res.pred_cov[r, t], "#800080")
    return canvas.render(f"{res.method} episode {res.episode_seed} forecast at step {step}")


def cmd_plot(args) -> int:
    try:
        res = load_result(args.result)
    except (OSError, ResultFormatError) as exc:
        raise UsageError(str(exc)) from exc
    manifest = _manifest(args.manifest)
    entry = None
    for e in manifest.entries:
        if (args.episode is not None and Path(e.path).stem == args.episode) or (
            args.episode is None and e.seed == res.episode_seed
        ):
            entry = e
            break
    if entry is None:
        raise UsageError(f"unknown episode {args.episode if args.episode is not None else res.episode_seed}")
    rec = read_episode(manifest.episode_path(entry))
    if rec.seed != res.episode_seed:
        raise UsageError(f"episode {Path(entry.path).stem} does not belong to this result")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(render_svg(res, rec, args.step), encoding="utf-8")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_print_default_config(args) -> int:
    sys.stdout.write(default_config_text())
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crowdslam", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--print-default-config", action="store_true", help="print the default config and exit")
    sub = p.add_subparsers(dest="command")

    def common(sp, jobs=True):
        sp.add_argument("--config", help="TOML run configuration")
        if jobs:
            sp.add_argument("--jobs", type=int, help="worker processes")

    g = sub.add_parser("gen-data", help="simulate a dataset")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, help="master seed")
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-test", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a velocity predictor")
    common(t, jobs=False)
    t.add_argument("--kind", choices=["mlp", "gat"], required=True)
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True, help="weights file")
    t.add_argument("--weights", help="warm-start weights")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("run", help="run SLAM over the test split")
    common(r)
    r.add_argument("--manifest", required=True)
    r.add_argument("--prior", choices=PRIOR_CHOICES)
    r.add_argument("--weights")
    r.add_argument("--out", required=True)
    r.add_argument("--limit", type=int, help="only the first N test episodes")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="tabulate metrics")
    e.add_argument("--results", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", required=True, help="benchmark CSV")
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plot", help="SVG of one result")
    pl.add_argument("--result", required=True)
    pl.add_argument("--manifest", required=True)
    pl.add_argument("--episode", help="episode file stem (default: matched by seed)")
    pl.add_argument("--step", type=int, help="emission step to draw")
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)

    d = sub.add_parser("print-default-config", help="print the default config")
    d.set_defaults(func=cmd_print_default_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.print_default_config:
        return cmd_print_default_config(args)
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (MetricsError, ResultFormatError, EpisodeFormatError, WeightsFormatError, SlamError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
