"""MLP and graph-attention velocity predictors.

Both networks consume a pedestrian's position history ``(H, 2)`` through its
``H - 1`` successive displacements divided by ``dt`` (i.e. finite-difference
velocities), which makes every prediction invariant to a common translation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from crowdslam import kernels
from crowdslam.neuralnet.autograd import Tensor, as_tensor, concat, gather_rows, leaky_relu, segment_softmax, segment_sum

LEAKY_SLOPE = 0.2


@dataclass
class MlpWeights:
    """Affine layers ``(W (out, in), b (out,))``; LeakyReLU between layers, linear output."""

    layers: list[tuple[np.ndarray, np.ndarray]]

    def __post_init__(self):
        for (W0, _), (W1, _) in zip(self.layers, self.layers[1:]):
            if W1.shape[1] != W0.shape[0]:
                raise ValueError(f"layer dims do not chain: {W0.shape} -> {W1.shape}")
        for W, b in self.layers:
            if b.shape != (W.shape[0],):
                raise ValueError(f"bias shape {b.shape} does not match weight {W.shape}")

    @property
    def dims(self) -> list[int]:
        return [self.layers[0][0].shape[1]] + [W.shape[0] for W, _ in self.layers]

    @classmethod
    def init(cls, dims: list[int], rng: np.random.Generator) -> "MlpWeights":
        layers = []
        for i, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
            bound = np.sqrt(6.0 / (n_in + n_out))
            if i == len(dims) - 2:
                bound *= 0.1
            layers.append((rng.uniform(-bound, bound, size=(n_out, n_in)), np.zeros(n_out)))
        return cls(layers)

    def params(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for i, (W, b) in enumerate(self.layers):
            out[f"{prefix}L{i}.W"] = W
            out[f"{prefix}L{i}.b"] = b
        return out

    @classmethod
    def from_params(cls, params: dict, prefix: str = "") -> "MlpWeights":
        layers, i = [], 0
        while f"{prefix}L{i}.W" in params:
            layers.append((np.asarray(params[f"{prefix}L{i}.W"]), np.asarray(params[f"{prefix}L{i}.b"])))
            i += 1
        return cls(layers)


def _mlp(params: dict, prefix: str, x: Tensor) -> Tensor:
    i = 0
    while f"{prefix}L{i + 1}.W" in params:
        x = leaky_relu(x @ params[f"{prefix}L{i}.W"].T + params[f"{prefix}L{i}.b"], LEAKY_SLOPE)
        i += 1
    return x @ params[f"{prefix}L{i}.W"].T + params[f"{prefix}L{i}.b"]


def mlp_forward(w: MlpWeights, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != w.dims[0]:
        raise ValueError(f"input dim {x.shape[-1]} does not match network input {w.dims[0]}")
    single = x.ndim == 1
    out = _mlp(w.params(), "", Tensor(np.atleast_2d(x))).data
    return out[0] if single else out


def history_features(histories: np.ndarray, dt: float) -> np.ndarray:
    """``(..., H, 2)`` positions -> ``(..., 2 (H - 1))`` finite-difference velocities."""
    d = np.diff(histories, axis=-2) / dt
    return d.reshape(*d.shape[:-2], -1)


@dataclass
class SingleAgentPredictor:
    net: MlpWeights
    history_len: int
    dt: float

    kind = "mlp"

    def predict(self, histories: np.ndarray) -> np.ndarray:
        """Velocities for a stack of histories ``(n, H, 2)`` -> ``(n, 2)``."""
        histories = np.asarray(histories, dtype=float)
        if histories.shape[-2] != self.history_len:
            raise ValueError(f"history length {histories.shape[-2]} != {self.history_len}")
        return mlp_forward(self.net, history_features(histories, self.dt))

    def params(self) -> dict[str, np.ndarray]:
        return self.net.params("mlp.")


@dataclass
class GatWeights:
    f_hist: MlpWeights
    W: np.ndarray  # (d, d)
    a: np.ndarray  # (2d,)
    head: MlpWeights
    history_len: int = 8
    dt: float = 0.1
    radius: float = 4.0

    kind = "gat"

    def __post_init__(self):
        d = self.f_hist.dims[-1]
        if self.f_hist.dims[0] != 2 * (self.history_len - 1):
            raise ValueError("f_hist input must be 2 (H - 1)")
        if self.W.shape != (d, d):
            raise ValueError(f"W must be ({d}, {d}), got {self.W.shape}")
        if self.a.shape != (2 * d,):
            raise ValueError(f"a must be ({2 * d},), got {self.a.shape}")
        if self.head.dims[0] != 2 * d or self.head.dims[-1] != 2:
            raise ValueError(f"head must map {2 * d} -> 2, got {self.head.dims}")

    @property
    def latent_dim(self) -> int:
        return self.f_hist.dims[-1]

    @classmethod
    def init(cls, history_len, dt, radius, rng, latent=32, hist_hidden=(64,), head_hidden=(64, 32)):
        f_hist = MlpWeights.init([2 * (history_len - 1), *hist_hidden, latent], rng)
        bound = np.sqrt(3.0 / latent)
        W = rng.uniform(-bound, bound, size=(latent, latent))
        a = rng.uniform(-bound, bound, size=2 * latent)
        head = MlpWeights.init([2 * latent, *head_hidden, 2], rng)
        return cls(f_hist, W, a, head, history_len, dt, radius)

    def params(self) -> dict[str, np.ndarray]:
        out = self.f_hist.params("hist.")
        out["W"] = self.W
        out["a"] = self.a
        out.update(self.head.params("head."))
        return out

    def with_params(self, params: dict) -> "GatWeights":
        return GatWeights(
            MlpWeights.from_params(params, "hist."),
            np.asarray(params["W"]),
            np.asarray(params["a"]),
            MlpWeights.from_params(params, "head."),
            self.history_len,
            self.dt,
            self.radius,
        )


@dataclass
class SceneGraph:
    """Flattened batch of scenes with their radius-neighbourhood edges."""

    scene_bounds: np.ndarray  # (S + 1,)
    src: np.ndarray
    dst: np.ndarray
    starts: np.ndarray = field(init=False)

    def __post_init__(self):
        n_agents = int(self.scene_bounds[-1])
        self.starts = np.searchsorted(self.src, np.arange(n_agents))

    @classmethod
    def build(cls, positions: np.ndarray, scene_bounds: np.ndarray, radius: float) -> "SceneGraph":
        bounds = np.ascontiguousarray(scene_bounds, dtype=np.int64)
        src, dst = kernels.radius_edges(np.ascontiguousarray(positions, dtype=float), bounds, float(radius))
        return cls(bounds, src, dst)


def gat_layers(params: dict, feats, graph: SceneGraph, d: int):
    """Differentiable GAT forward.  Returns ``(v_hat, z, alpha, h)`` tensors."""
    h = _mlp(params, "hist.", as_tensor(feats))
    Wh = h @ params["W"].T
    a = params["a"].reshape(2 * d, 1)
    s_self = (Wh @ a[:d]).reshape(-1)
    s_nb = (Wh @ a[d:]).reshape(-1)
    logits = leaky_relu(gather_rows(s_self, graph.src) + gather_rows(s_nb, graph.dst), LEAKY_SLOPE)
    alpha = segment_softmax(logits, graph.starts)
    msgs = alpha.reshape(-1, 1) * gather_rows(Wh, graph.dst)
    c = segment_sum(msgs, graph.starts, feats.shape[0])
    z = concat([h, c], axis=1)
    v = _mlp(params, "head.", z)
    return v, z, alpha, h


def _as_tensors(params: dict) -> dict:
    return {k: as_tensor(v) for k, v in params.items()}


def gat_encode(histories, w: GatWeights, positions=None, scene_bounds=None):
    """Social encoding ``z_k = [h_k || c_k]`` for every agent.

    ``histories`` is ``(M, H, 2)``; ``positions`` defaults to the newest
    history point.  ``scene_bounds`` splits the agents into independent scenes
    (default: one scene).  Returns ``(z, alpha, graph)``.
    """
    histories = np.asarray(histories, dtype=float)
    if histories.ndim != 3 or histories.shape[0] == 0:
        raise ValueError("gat_encode needs at least one agent history")
    if histories.shape[1] != w.history_len:
        raise ValueError(f"history length {histories.shape[1]} != {w.history_len}")
    if positions is None:
        positions = histories[:, -1]
    if scene_bounds is None:
        scene_bounds = np.array([0, histories.shape[0]])
    graph = SceneGraph.build(positions, scene_bounds, w.radius)
    feats = history_features(histories, w.dt)
    _, z, alpha, _ = gat_layers(_as_tensors(w.params()), feats, graph, w.latent_dim)
    return z.data, alpha.data, graph


def gat_predict(histories, w: GatWeights, scene_bounds=None, positions=None) -> np.ndarray:
    """Next-step velocity for every agent, ``(M, 2)``."""
    histories = np.asarray(histories, dtype=float)
    if positions is None:
        positions = histories[:, -1]
    if scene_bounds is None:
        scene_bounds = np.array([0, histories.shape[0]])
    graph = SceneGraph.build(positions, scene_bounds, w.radius)
    feats = history_features(histories, w.dt)
    v, *_ = gat_layers(_as_tensors(w.params()), feats, graph, w.latent_dim)
    return v.data


def velocity_jacobian(w, histories, scene_bounds=None):
    """Predicted velocities and their derivatives w.r.t. each agent's own history.

    Returns ``(v (M, 2), J (M, H, 2, 2))`` with ``J[k, t] = d v_k / d p_{k,t}``.
    For the MLP this is exact.  For the GAT the social context ``c_k`` is held
    at its current value, so ``J`` follows the own-history path only.
    """
    from crowdslam.neuralnet.autograd import grad

    histories = np.asarray(histories, dtype=float)
    M, H = histories.shape[0], histories.shape[1]
    feats = history_features(histories, w.dt)
    P = _as_tensors(w.params())
    if w.kind == "mlp":
        def net(x):
            return _mlp(P, "mlp.", x)
    else:
        if scene_bounds is None:
            scene_bounds = np.array([0, M])
        graph = SceneGraph.build(histories[:, -1], scene_bounds, w.radius)
        _, z, _, _ = gat_layers(P, feats, graph, w.latent_dim)
        context = Tensor(z.data[:, w.latent_dim :])

        def net(x):
            return _mlp(P, "head.", concat([_mlp(P, "hist.", x), context], axis=1))

    v = net(Tensor(feats)).data
    Jf = np.empty((M, 2, feats.shape[1]))
    for k in range(2):
        _, g = grad(lambda t: net(t["x"])[:, k].sum(), {"x": feats})
        Jf[:, k] = g["x"]
    # features are (p_{t+1} - p_t) / dt
    Jf = Jf.reshape(M, 2, H - 1, 2).transpose(0, 2, 1, 3) / w.dt
    J = np.zeros((M, H, 2, 2))
    J[:, 1:] += Jf
    J[:, :-1] -= Jf
    return v, J
