"""Kinematic priors on pedestrian landmark trajectories.

Five kinds are supported: no prior, constant velocity (CVM), a single-agent
MLP, a deterministic GAT and a stochastic GAT.  Every kind can produce
factor specifications for the SLAM window and (except ``none``) future
rollouts with, for the stochastic GAT, per-step velocity covariance.

Network predictions are computed from the current MAP estimates and then held
fixed while the window is optimised.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from crowdslam.neuralnet.models import GatWeights, SingleAgentPredictor, gat_predict, velocity_jacobian

FACTOR_CVM_POSITION = "cvm_position"
FACTOR_CVM_VELOCITY = "cvm_velocity"
FACTOR_DISPLACEMENT = "displacement"
FACTOR_MAHALANOBIS = "mahalanobis"


class PriorKind(str, enum.Enum):
    NONE = "none"
    CVM = "cvm"
    MLP = "mlp"
    GAT_DET = "gat-det"
    GAT_STOCH = "gat-stoch"

    @property
    def is_neural(self) -> bool:
        return self in (PriorKind.MLP, PriorKind.GAT_DET, PriorKind.GAT_STOCH)


@dataclass
class PriorConfig:
    """Prior selection plus every tunable the prior engine uses.

    ``scale`` multiplies every kinematic information matrix (0 removes the
    factors entirely).  ``cvm_form`` picks the position-only second-difference
    factor or the explicit velocity-node form.  ``mahalanobis_space`` chooses
    whether the stochastic velocity covariance is mapped to displacement
    space (``Sigma * dt**2``, default) or used as-is.
    """

    kind: PriorKind = PriorKind.NONE
    weights: SingleAgentPredictor | GatWeights | None = None
    history_len: int = 8
    n_samples: int = 32
    sigma_sto: float = 0.05
    seed: int = 0
    sigma_nn: float = 0.1
    eps_reg: float = 1e-4
    cvm_form: str = "position"
    sigma_accel: float = 3.0
    sigma_cvm_pos: float = 0.01
    sigma_cvm_vel: float = 0.1
    mahalanobis_space: str = "displacement"
    scale: float = 1.0
    linearize: bool = True

    def __post_init__(self):
        self.kind = PriorKind(self.kind)

    def validate(self) -> list[str]:
        errs = []
        if self.kind.is_neural and self.weights is None:
            errs.append(f"weights: required for prior kind {self.kind.value}")
        if not self.kind.is_neural and self.weights is not None:
            errs.append(f"weights: not used by prior kind {self.kind.value}")
        if self.kind == PriorKind.MLP and self.weights is not None and self.weights.kind != "mlp":
            errs.append("weights: mlp prior needs single-agent MLP weights")
        if self.kind in (PriorKind.GAT_DET, PriorKind.GAT_STOCH) and self.weights is not None:
            if self.weights.kind != "gat":
                errs.append("weights: GAT prior needs GAT weights")
        if self.weights is not None and self.weights.history_len != self.history_len:
            errs.append(f"history_len: {self.history_len} does not match weights ({self.weights.history_len})")
        if self.history_len < 2:
            errs.append("history_len: must be >= 2")
        if self.n_samples < 2:
            errs.append("n_samples: must be >= 2")
        if self.sigma_sto < 0:
            errs.append("sigma_sto: must be >= 0")
        for name in ("sigma_nn", "sigma_accel", "sigma_cvm_pos", "sigma_cvm_vel", "eps_reg"):
            if not getattr(self, name) > 0:
                errs.append(f"{name}: must be > 0")
        if self.cvm_form not in ("position", "velocity"):
            errs.append("cvm_form: must be 'position' or 'velocity'")
        if self.mahalanobis_space not in ("displacement", "velocity"):
            errs.append("mahalanobis_space: must be 'displacement' or 'velocity'")
        if not self.scale >= 0:
            errs.append("scale: must be >= 0")
        return errs

    def check(self):
        errs = self.validate()
        if errs:
            raise ValueError("invalid prior config: " + "; ".join(errs))

    @property
    def uses_velocity_nodes(self) -> bool:
        return self.kind == PriorKind.CVM and self.cvm_form == "velocity"


# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------


@dataclass
class HistoryBuffer:
    """The last ``H`` position estimates of one pedestrian, oldest first."""

    ped_id: int
    end_step: int
    positions: np.ndarray  # (H, 2)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        if self.positions.ndim != 2 or self.positions.shape[1] != 2:
            raise ValueError("history positions must be (H, 2)")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError(f"history of ped {self.ped_id} is incomplete")

    @property
    def length(self) -> int:
        return self.positions.shape[0]

    @property
    def steps(self) -> np.ndarray:
        return np.arange(self.end_step - self.length + 1, self.end_step + 1)

    @classmethod
    def from_track(cls, ped_id: int, steps, positions, H: int) -> "HistoryBuffer":
        """Newest ``H`` entries of a track; steps must be strictly consecutive."""
        steps = np.asarray(steps)
        if steps.shape[0] < H:
            raise ValueError(f"ped {ped_id}: {steps.shape[0]} estimates, history needs {H}")
        tail = steps[-H:]
        if np.any(np.diff(tail) != 1):
            raise ValueError(f"ped {ped_id}: history steps are not consecutive")
        return cls(int(ped_id), int(tail[-1]), np.asarray(positions)[-H:])


def _stack(scene) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(scene, np.ndarray):
        hist = np.asarray(scene, dtype=float)
        return hist, np.arange(hist.shape[0])
    if len(scene) == 0:
        raise ValueError("empty scene")
    ends = {h.end_step for h in scene}
    if len(ends) > 1:
        raise ValueError("scene histories are not co-temporal")
    return np.stack([h.positions for h in scene]), np.array([h.ped_id for h in scene])


@dataclass
class RolloutSet:
    """``N`` sampled futures of one pedestrian over ``T`` steps."""

    ped_id: int
    start: np.ndarray  # (2,) last history position
    positions: np.ndarray  # (N, T, 2)
    velocities: np.ndarray  # (N, T, 2)
    dt: float

    def __post_init__(self):
        if self.positions.shape != self.velocities.shape or self.positions.ndim != 3:
            raise ValueError("positions and velocities must both be (N, T, 2)")

    @property
    def n_samples(self) -> int:
        return self.positions.shape[0]

    @property
    def horizon(self) -> int:
        return self.positions.shape[1]

    def euler_residual(self) -> float:
        """Largest violation of ``m_t = m_{t-1} + v_t dt`` over all samples."""
        if self.horizon == 0:
            return 0.0
        prev = np.concatenate([np.broadcast_to(self.start, (self.n_samples, 1, 2)), self.positions[:, :-1]], axis=1)
        return float(np.max(np.abs(self.positions - (prev + self.velocities * self.dt))))


@dataclass
class RolloutStats:
    """Per-step empirical velocity mean ``mu (T, 2)`` and covariance ``sigma (T, 2, 2)``."""

    ped_id: int
    mu: np.ndarray
    sigma: np.ndarray

    @property
    def horizon(self) -> int:
        return self.mu.shape[0]

    def mean_positions(self, start, dt: float) -> np.ndarray:
        return np.asarray(start, dtype=float) + np.cumsum(self.mu * dt, axis=0)

    def position_covariances(self, dt: float) -> np.ndarray:
        """``P_t = P_{t-1} + Sigma_t dt^2`` with ``P_0 = 0``."""
        return np.cumsum(self.sigma * dt * dt, axis=0)


@dataclass
class PriorFactorSpec:
    """One kinematic factor for the SLAM window.

    ``step`` is the newest step the factor touches.  For displacement kinds the
    residual is ``(m_step - m_{step-1}) - mean``; for ``cvm_position`` it is
    the second difference over ``step-2 .. step`` divided by ``dt**2`` (mean
    zero); for ``cvm_velocity`` it couples positions and velocities at
    ``step-1`` and ``step`` with a 4x4 block-diagonal information.
    """

    ped_id: int
    step: int
    kind: str
    mean: np.ndarray
    information: np.ndarray


@dataclass
class PriorFactorArrays:
    """Column form of a list of :class:`PriorFactorSpec` sharing one kind."""

    kind: str
    ped_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    steps: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    means: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    information: np.ndarray = field(default_factory=lambda: np.zeros((0, 2, 2)))
    jacobians: np.ndarray | None = None  # (n, H, 2, 2) d v_hat / d history position
    history: np.ndarray | None = None  # (n, H, 2) positions the network was evaluated at

    def __len__(self):
        return self.ped_ids.shape[0]

    def specs(self) -> list[PriorFactorSpec]:
        return [
            PriorFactorSpec(int(p), int(s), self.kind, m, info)
            for p, s, m, info in zip(self.ped_ids, self.steps, self.means, self.information)
        ]


# ---------------------------------------------------------------------------
# residuals
# ---------------------------------------------------------------------------


def cvm_residual_position(m_prev, m_cur, m_next, dt: float) -> np.ndarray:
    if not dt > 0:
        raise ValueError("dt must be positive")
    return (np.asarray(m_next, float) - 2.0 * np.asarray(m_cur, float) + np.asarray(m_prev, float)) / (dt * dt)


def cvm_residuals_velocity(m_prev, m_cur, v_prev, v_cur, dt: float):
    if not dt > 0:
        raise ValueError("dt must be positive")
    m_prev, m_cur = np.asarray(m_prev, float), np.asarray(m_cur, float)
    v_prev, v_cur = np.asarray(v_prev, float), np.asarray(v_cur, float)
    return m_cur - m_prev - v_prev * dt, v_cur - v_prev


# ---------------------------------------------------------------------------
# predictors and rollouts
# ---------------------------------------------------------------------------


def mlp_predict(history, w: SingleAgentPredictor) -> np.ndarray:
    """Next-step velocity of one history (``HistoryBuffer`` or ``(H, 2)``) or a stack ``(n, H, 2)``."""
    pos = history.positions if isinstance(history, HistoryBuffer) else np.asarray(history, dtype=float)
    if not np.all(np.isfinite(pos)):
        raise ValueError("incomplete history")
    if pos.ndim == 2:
        return w.predict(pos[None])[0]
    return w.predict(pos)


def _predict(w, hist: np.ndarray, scene_bounds=None) -> np.ndarray:
    if w.kind == "mlp":
        return w.predict(hist)
    return gat_predict(hist, w, scene_bounds=scene_bounds)


def _rollout(w, hist: np.ndarray, T: int, dt: float):
    n, H = hist.shape[0], hist.shape[1]
    pos = np.zeros((n, T, 2))
    vel = np.zeros((n, T, 2))
    buf = hist.copy()
    for t in range(T):
        v = _predict(w, buf)
        nxt = buf[:, -1] + v * dt
        vel[:, t] = v
        pos[:, t] = nxt
        buf = np.concatenate([buf[:, 1:], nxt[:, None]], axis=1)
    return pos, vel


def mlp_rollout(histories, w: SingleAgentPredictor, T: int, dt: float | None = None):
    """Independent autoregressive rollouts; returns ``(positions, velocities)`` each ``(n, T, 2)``."""
    hist, _ = _stack(histories)
    return _rollout(w, hist, T, w.dt if dt is None else dt)


def gat_rollout_deterministic(scene, w: GatWeights, T: int, dt: float | None = None):
    """Joint Euler rollout of a scene; attention is recomputed at every step.

    ``scene`` is a list of co-temporal :class:`HistoryBuffer` or an array
    ``(n, H, 2)``.  Returns ``(positions, velocities)``, each ``(n, T, 2)``.
    """
    hist, _ = _stack(scene)
    if hist.shape[0] == 0:
        raise ValueError("empty scene")
    return _rollout(w, hist, T, w.dt if dt is None else dt)


def rollout_noise(seed: int, step: int, ped_ids, T: int, N: int) -> np.ndarray:
    """Standard normal draws ``(n, T, N, 2)``; pedestrian ``p`` uses its own stream.

    The stream of ``p`` is seeded by ``(seed, step, p)`` and the draws are laid
    out time-major, so a shorter horizon is a prefix of a longer one.
    """
    out = np.empty((len(ped_ids), T, N, 2))
    for k, pid in enumerate(ped_ids):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(step), int(pid)]))
        out[k] = rng.standard_normal((T, N, 2))
    return out


def gat_rollout_stochastic(
    scene, w, T: int, N: int, sigma_sto: float, seed: int, step: int = 0, ped_ids=None, dt=None
) -> list[RolloutSet]:
    """``N`` noisy joint rollouts, one :class:`RolloutSet` per pedestrian.

    In sample ``s`` every agent's predicted velocity gets independent
    ``N(0, sigma_sto^2 I)`` noise at every step and the perturbed positions
    feed back into that sample's histories and neighbourhoods.  ``w`` may also
    be single-agent MLP weights (no interaction).
    """
    if N < 2:
        raise ValueError("stochastic rollouts need N >= 2")
    if sigma_sto < 0:
        raise ValueError("sigma_sto must be >= 0")
    hist, default_ids = _stack(scene)
    if hist.shape[0] == 0:
        raise ValueError("empty scene")
    ids = default_ids if ped_ids is None else np.asarray(ped_ids)
    dt = w.dt if dt is None else dt
    n = hist.shape[0]
    start = hist[:, -1].copy()

    if sigma_sto == 0.0:
        pos, vel = _rollout(w, hist, T, dt)
        pos_s = np.broadcast_to(pos[:, None], (n, N, T, 2))
        vel_s = np.broadcast_to(vel[:, None], (n, N, T, 2))
    else:
        noise = rollout_noise(seed, step, ids, T, N) * sigma_sto  # (n, T, N, 2)
        buf = np.broadcast_to(hist, (N, n) + hist.shape[1:]).reshape(N * n, *hist.shape[1:]).copy()
        bounds = np.arange(N + 1) * n
        pos_s = np.zeros((N, n, T, 2))
        vel_s = np.zeros((N, n, T, 2))
        for t in range(T):
            if t == 0:
                # every sample shares the same history: one evaluation suffices
                v = np.broadcast_to(_predict(w, hist), (N, n, 2))
            else:
                v = _predict(w, buf, bounds).reshape(N, n, 2)
            v = v + noise[:, t].transpose(1, 0, 2)
            nxt = buf[:, -1].reshape(N, n, 2) + v * dt
            vel_s[:, :, t] = v
            pos_s[:, :, t] = nxt
            buf = np.concatenate([buf[:, 1:], nxt.reshape(N * n, 1, 2)], axis=1)
        pos_s = pos_s.transpose(1, 0, 2, 3)
        vel_s = vel_s.transpose(1, 0, 2, 3)
    return [RolloutSet(int(ids[k]), start[k], np.array(pos_s[k]), np.array(vel_s[k]), dt) for k in range(n)]


def _velocity_stats(vel: np.ndarray, eps_reg: float):
    """Mean and unbiased covariance over axis 0 of ``vel (N, ..., 2)``.

    Centering on the first sample keeps the result exact when all samples
    coincide.
    """
    N = vel.shape[0]
    if N < 2:
        raise ValueError("empirical statistics need at least two samples")
    ref = vel[0]
    dev = vel - ref
    mu = ref + dev.mean(axis=0)
    c = vel - mu
    sigma = np.einsum("n...i,n...j->...ij", c, c) / (N - 1)
    sigma = 0.5 * (sigma + np.swapaxes(sigma, -1, -2)) + eps_reg * np.eye(2)
    return mu, sigma


def empirical_stats(rollouts: RolloutSet, eps_reg: float = 1e-4) -> RolloutStats:
    mu, sigma = _velocity_stats(rollouts.velocities, eps_reg)
    return RolloutStats(rollouts.ped_id, mu, sigma)


# ---------------------------------------------------------------------------
# factor construction
# ---------------------------------------------------------------------------


@dataclass
class PriorWindow:
    """Landmark estimates the prior engine may read.

    ``positions[p, c]`` is the estimate of pedestrian ``ped_ids[p]`` at step
    ``base_step + c`` (NaN where the pedestrian has no state).  Factors are
    only emitted for steps inside ``[i_min, i_now]``; older columns serve as
    fixed history.
    """

    ped_ids: np.ndarray
    positions: np.ndarray  # (P, S, 2)
    base_step: int
    i_min: int
    i_now: int

    def column(self, step: int) -> int:
        return step - self.base_step

    def has(self, step: int) -> np.ndarray:
        c = self.column(step)
        if c < 0 or c >= self.positions.shape[1]:
            return np.zeros(len(self.ped_ids), dtype=bool)
        return np.isfinite(self.positions[:, c, 0])

    def histories_ending(self, step: int, H: int) -> tuple[np.ndarray, np.ndarray]:
        """Row indices with ``H`` consecutive estimates ending at ``step`` and those histories."""
        c = self.column(step)
        if c - H + 1 < 0 or c >= self.positions.shape[1]:
            return np.zeros(0, dtype=np.int64), np.zeros((0, H, 2))
        block = self.positions[:, c - H + 1 : c + 1]
        ok = np.all(np.isfinite(block[..., 0]), axis=1)
        rows = np.flatnonzero(ok)
        return rows, block[rows]


def _cvm_factors(config: PriorConfig, win: PriorWindow, dt: float) -> PriorFactorArrays:
    peds, steps = [], []
    for i in range(win.i_min + 2, win.i_now + 1):
        ok = win.has(i) & win.has(i - 1) & win.has(i - 2)
        rows = np.flatnonzero(ok)
        peds.append(win.ped_ids[rows])
        steps.append(np.full(rows.shape[0], i))
    peds = np.concatenate(peds) if peds else np.zeros(0, dtype=np.int64)
    steps = np.concatenate(steps) if steps else np.zeros(0, dtype=np.int64)
    n = peds.shape[0]
    if config.cvm_form == "position":
        info = np.broadcast_to(np.eye(2) * (config.scale / config.sigma_accel**2), (n, 2, 2)).copy()
        return PriorFactorArrays(FACTOR_CVM_POSITION, peds, steps, np.zeros((n, 2)), info)
    # velocity form: one factor per consecutive pair
    peds, steps = [], []
    for i in range(win.i_min + 1, win.i_now + 1):
        rows = np.flatnonzero(win.has(i) & win.has(i - 1))
        peds.append(win.ped_ids[rows])
        steps.append(np.full(rows.shape[0], i))
    peds = np.concatenate(peds) if peds else np.zeros(0, dtype=np.int64)
    steps = np.concatenate(steps) if steps else np.zeros(0, dtype=np.int64)
    n = peds.shape[0]
    block = np.diag(
        [1 / config.sigma_cvm_pos**2] * 2 + [1 / config.sigma_cvm_vel**2] * 2
    ) * config.scale
    info = np.broadcast_to(block, (n, 4, 4)).copy()
    return PriorFactorArrays(FACTOR_CVM_VELOCITY, peds, steps, np.zeros((n, 4)), info)


def neural_step_predictions(config: PriorConfig, win: PriorWindow, cache: dict | None = None):
    """Predicted velocity for every in-window transition that has a full history.

    Returns ``(ped_ids, steps, v_hat, jac, hist)`` where ``steps`` is the
    transition's newer step.  With ``config.linearize`` the network is also
    differentiated: ``jac[n, t] = d v_hat_n / d p_t`` over the history
    ``hist[n]`` it was evaluated at (both ``None`` otherwise).  All transitions
    are evaluated in one batched network call, each emission step forming its
    own scene.

    With ``cache`` (a dict keyed by ``(ped_id, step)``), a transition is
    evaluated only the first time it is seen and the stored result is reused
    afterwards.
    """
    H = config.history_len
    w = config.weights
    lin = config.linearize
    rows_all, hists, bounds, targets = [], [], [0], []
    out = []  # (ped_id, step, v, J, hist)
    for i in range(win.i_min + 1, win.i_now + 1):
        rows, hist = win.histories_ending(i - 1, H)
        if rows.shape[0] == 0:
            continue
        emit = win.has(i)[rows] & win.has(i - 1)[rows]
        if not np.any(emit):
            continue
        keys = [(int(win.ped_ids[r]), i) for r in rows[emit]]
        if cache is not None and all(k in cache for k in keys):
            out.extend((*k, *cache[k]) for k in keys)
            continue
        rows_all.append(rows)
        hists.append(hist)
        targets.append((emit, i))
        bounds.append(bounds[-1] + rows.shape[0])
    if hists:
        stacked = np.concatenate(hists)
        if lin:
            v, J = velocity_jacobian(w, stacked, np.array(bounds))
        else:
            v, J = _predict(w, stacked, np.array(bounds)), None
        for (emit, i), rows, lo in zip(targets, rows_all, bounds):
            for k in lo + np.flatnonzero(emit):
                key = (int(win.ped_ids[rows[k - lo]]), i)
                entry = (v[k], None if J is None else J[k], stacked[k] if lin else None)
                if cache is not None:
                    entry = cache.setdefault(key, entry)
                out.append((*key, *entry))
    if not out:
        empty = (np.zeros((0, H, 2, 2)), np.zeros((0, H, 2))) if lin else (None, None)
        return (np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros((0, 2)), *empty)
    out.sort(key=lambda e: (e[1], e[0]))
    peds = np.array([e[0] for e in out], dtype=np.int64)
    steps = np.array([e[1] for e in out], dtype=np.int64)
    v = np.array([e[2] for e in out]).reshape(-1, 2)
    if not lin:
        return peds, steps, v, None, None
    return peds, steps, v, np.array([e[3] for e in out]), np.array([e[4] for e in out])


def one_step_stats(config: PriorConfig, ped_ids, steps, v_hat):
    """Velocity mean and covariance of the first step of each stochastic rollout.

    The first rollout step of every sample shares the same history, so its
    samples are ``v_hat + eps`` with ``eps`` drawn from the same per-pedestrian
    stream (seeded by emission step ``step - 1``) the horizon rollouts use.
    """
    n = len(ped_ids)
    N = config.n_samples
    eps = np.empty((n, N, 2))
    for k, (p, s) in enumerate(zip(ped_ids, steps)):
        eps[k] = rollout_noise(config.seed, int(s) - 1, [p], 1, N)[0, 0]
    samples = v_hat[None] + config.sigma_sto * eps.transpose(1, 0, 2)  # (N, n, 2)
    return _velocity_stats(samples, config.eps_reg)


def prior_factor_arrays(
    config: PriorConfig, win: PriorWindow, dt: float, cache: dict | None = None
) -> PriorFactorArrays | None:
    """Kinematic factors for the window in column form (``None`` for no prior).

    ``cache`` is passed to :func:`neural_step_predictions`.
    """
    kind = config.kind
    if kind == PriorKind.NONE or config.scale == 0.0:
        return None
    if kind.is_neural and config.weights is None:
        raise ValueError(f"prior kind {kind.value} needs network weights")
    if kind == PriorKind.CVM:
        return _cvm_factors(config, win, dt)
    peds, steps, v_hat, jac, hist = neural_step_predictions(config, win, cache)
    n = peds.shape[0]
    if kind in (PriorKind.MLP, PriorKind.GAT_DET):
        info = np.broadcast_to(np.eye(2) * (config.scale / config.sigma_nn**2), (n, 2, 2)).copy()
        return PriorFactorArrays(FACTOR_DISPLACEMENT, peds, steps, v_hat * dt, info, jac, hist)
    mu, sigma = one_step_stats(config, peds, steps, v_hat)
    cov = sigma * (dt * dt) if config.mahalanobis_space == "displacement" else sigma
    info = np.linalg.inv(cov) * config.scale
    info = 0.5 * (info + np.swapaxes(info, 1, 2))
    return PriorFactorArrays(FACTOR_MAHALANOBIS, peds, steps, mu * dt, info, jac, hist)


def make_prior_factors(config: PriorConfig, win: PriorWindow, dt: float) -> list[PriorFactorSpec]:
    arrays = prior_factor_arrays(config, win, dt)
    return [] if arrays is None else arrays.specs()
