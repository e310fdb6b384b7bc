"""Teacher-forced training of the velocity predictors."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from crowdslam.dataset import SceneSample
from crowdslam.neuralnet.autograd import Tensor, concat, grad
from crowdslam.neuralnet.models import (
    GatWeights,
    MlpWeights,
    SceneGraph,
    SingleAgentPredictor,
    _mlp,
    gat_layers,
    history_features,
)
from crowdslam.neuralnet.optim import AdamState, adam_step

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainHyper:
    lr: float = 1e-3
    lr_final_fraction: float = 0.05
    batch_size: int = 128
    epochs: int = 30
    history_len: int = 8
    dt: float = 0.1
    radius: float = 4.0
    latent: int = 32
    mlp_hidden: tuple[int, ...] = (64, 64)
    hist_hidden: tuple[int, ...] = (64,)
    head_hidden: tuple[int, ...] = (64, 32)
    scene_stride: int = 1
    history_noise: float = 0.1  # std (m) of Gaussian noise added to input histories per batch

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


@dataclass
class SceneBatchData:
    """All scenes stacked agent-wise, plus a global neighbourhood graph."""

    feats: np.ndarray
    targets: np.ndarray
    histories: np.ndarray
    scene_bounds: np.ndarray
    graph: SceneGraph | None = None


def stack_scenes(scenes: list[SceneSample], dt: float, radius: float | None = None) -> SceneBatchData:
    if not scenes:
        raise ValueError("no training scenes")
    sizes = np.array([len(s.ped_ids) for s in scenes])
    bounds = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    hist = np.concatenate([s.histories for s in scenes], axis=0)
    targets = np.concatenate([s.targets for s in scenes], axis=0)
    data = SceneBatchData(history_features(hist, dt), targets, hist, bounds)
    if radius is not None:
        data.graph = SceneGraph.build(hist[:, -1], bounds, radius)
    return data


def _batch_graph(data: SceneBatchData, scene_idx: np.ndarray):
    """Agent indices and a re-indexed graph for a subset of scenes."""
    b = data.scene_bounds
    g = data.graph
    lo, hi = b[scene_idx], b[scene_idx + 1]
    agents = np.concatenate([np.arange(a, z) for a, z in zip(lo, hi)])
    sizes = hi - lo
    new_bounds = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    starts = np.append(g.starts, g.src.shape[0])
    e_lo, e_hi = starts[lo], starts[hi]
    eidx = np.concatenate([np.arange(a, z) for a, z in zip(e_lo, e_hi)])
    shift = np.repeat(new_bounds[:-1] - lo, e_hi - e_lo)
    return agents, SceneGraph(new_bounds, g.src[eidx] + shift, g.dst[eidx] + shift)


def mse(pred, target) -> Tensor:
    diff = pred - target
    return (diff * diff).mean()


def gat_loss(params: dict, feats, targets, graph: SceneGraph, latent: int) -> Tensor:
    v, *_ = gat_layers(params, feats, graph, latent)
    return mse(v, targets)


def mlp_loss(params: dict, feats, targets) -> Tensor:
    return mse(_mlp(params, "mlp.", Tensor(feats)), targets)


def gat_rollout_positions(params: dict, histories: Tensor, scene_bounds, w: GatWeights, steps: int) -> list[Tensor]:
    """Differentiable autoregressive Euler rollout.

    Neighbourhoods are rebuilt from the (data of the) current positions at
    every step; gradients flow through features, attention and integration.
    """
    H = w.history_len
    out = []
    for _ in range(steps):
        last = histories[:, H - 1, :]
        graph = SceneGraph.build(last.data, scene_bounds, w.radius)
        disp = (histories[:, 1:, :] - histories[:, : H - 1, :]) * (1.0 / w.dt)
        feats = disp.reshape(histories.shape[0], 2 * (H - 1))
        v, *_ = gat_layers(params, feats, graph, w.latent_dim)
        nxt = last + v * w.dt
        out.append(nxt)
        histories = concat([histories[:, 1:, :], nxt.reshape(-1, 1, 2)], axis=1)
    return out


def gat_rollout_loss(params: dict, histories, future, scene_bounds, w: GatWeights) -> Tensor:
    """Mean squared position error of a ``future.shape[1]``-step rollout."""
    preds = gat_rollout_positions(params, Tensor(histories), scene_bounds, w, future.shape[1])
    total = None
    for t, p in enumerate(preds):
        term = mse(p, future[:, t, :])
        total = term if total is None else total + term
    return total * (1.0 / len(preds))


def _features(data: SceneBatchData, idx: np.ndarray, hyper: TrainHyper, rng) -> np.ndarray:
    """Input features of rows ``idx``; with ``history_noise`` the histories are perturbed first."""
    if hyper.history_noise <= 0.0:
        return data.feats[idx]
    hist = data.histories[idx]
    return history_features(hist + rng.normal(0.0, hyper.history_noise, hist.shape), hyper.dt)


def _lr_at(hyper: TrainHyper, step: int, total: int) -> float:
    frac = step / max(total - 1, 1)
    lo = hyper.lr * hyper.lr_final_fraction
    return lo + 0.5 * (hyper.lr - lo) * (1.0 + math.cos(math.pi * frac))


def train_predictor(kind: str, scenes: list[SceneSample], hyper: TrainHyper, seed: int, init=None):
    """Fit an ``"mlp"`` or ``"gat"`` predictor by minibatch Adam on velocity MSE.

    ``init`` optionally warm-starts from an existing model of the same kind.
    Returns ``(model, per_epoch_loss)``.  Deterministic given ``seed``.
    """
    if kind not in ("mlp", "gat"):
        raise ValueError(f"unknown predictor kind {kind!r}")
    scenes = scenes[:: max(hyper.scene_stride, 1)]
    if not scenes:
        raise ValueError("no training samples")
    rng = np.random.default_rng(seed)
    H = hyper.history_len
    if any(s.histories.shape[1] != H for s in scenes):
        raise ValueError(f"scene histories do not have length {H}")

    if init is not None and (init.kind != kind or init.history_len != H):
        raise ValueError(f"initial weights ({init.kind}, H={init.history_len}) do not match ({kind}, H={H})")
    if kind == "mlp":
        net = init.net if init is not None else MlpWeights.init([2 * (H - 1), *hyper.mlp_hidden, 2], rng)
        params = net.params("mlp.")
        data = stack_scenes(scenes, hyper.dt)
        n_items = data.feats.shape[0]
    else:
        model = init or GatWeights.init(
            H, hyper.dt, hyper.radius, rng, hyper.latent, hyper.hist_hidden, hyper.head_hidden
        )
        params = model.params()
        data = stack_scenes(scenes, hyper.dt, hyper.radius)
        n_items = len(scenes)
        mean_size = data.feats.shape[0] / n_items
        scenes_per_batch = max(1, int(round(hyper.batch_size / mean_size)))

    state = AdamState.zeros_like(params, lr=hyper.lr)
    per_batch = hyper.batch_size if kind == "mlp" else scenes_per_batch
    n_batches = math.ceil(n_items / per_batch)
    total_steps = n_batches * hyper.epochs
    losses = []
    step = 0
    for epoch in range(hyper.epochs):
        order = rng.permutation(n_items)
        acc, count = 0.0, 0
        for b in range(n_batches):
            idx = order[b * per_batch : (b + 1) * per_batch]
            if kind == "mlp":
                feats, targets = _features(data, idx, hyper, rng), data.targets[idx]
                loss, grads = grad(lambda p: mlp_loss(p, feats, targets), params)
                weight = len(idx)
            else:
                idx = np.sort(idx)
                agents, graph = _batch_graph(data, idx)
                feats, targets = _features(data, agents, hyper, rng), data.targets[agents]
                loss, grads = grad(lambda p: gat_loss(p, feats, targets, graph, hyper.latent), params)
                weight = len(agents)
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"loss became {loss} at epoch {epoch}, batch {b}")
            state, params = adam_step(state, params, grads, lr=_lr_at(hyper, step, total_steps))
            step += 1
            acc += loss * weight
            count += weight
        losses.append(acc / count)
        log.info("%s epoch %d/%d loss %.6g", kind, epoch + 1, hyper.epochs, losses[-1])
        if not math.isfinite(losses[-1]):
            raise TrainingDivergedError(f"epoch {epoch} loss is {losses[-1]}")

    if kind == "mlp":
        return SingleAgentPredictor(MlpWeights.from_params(params, "mlp."), H, hyper.dt), losses
    return model.with_params(params), losses
