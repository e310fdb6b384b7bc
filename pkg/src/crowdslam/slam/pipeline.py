"""Sliding-window dynamic SLAM over one episode."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from crowdslam.geometry import inverse_observation_batch, motion_model_batch
from crowdslam.priors import (
    FACTOR_CVM_POSITION,
    FACTOR_CVM_VELOCITY,
    PriorConfig,
    PriorKind,
    PriorWindow,
    empirical_stats,
    gat_rollout_stochastic,
    mlp_rollout,
    prior_factor_arrays,
    gat_rollout_deterministic,
)
from crowdslam.simulator import EpisodeRecord, SimConfig
from crowdslam.slam.graph import (
    AnchorBlock,
    FactorGraph,
    LinearBlock,
    ObservationBlock,
    OdometryBlock,
    VariableId,
    VarKind,
)
from crowdslam.slam.solver import SolverSettings, marginal_covariances, solve

log = logging.getLogger(__name__)


@dataclass
class NoiseModel:
    """Factor noise levels; every sigma is floored so zero-noise data stays well posed."""

    sigma_range: float = 0.1
    sigma_bearing: float = 0.05
    sigma_v: float = 0.05
    sigma_omega: float = 0.05
    floor: float = 1e-6

    @classmethod
    def from_sim(cls, config: SimConfig, floor: float = 1e-6) -> "NoiseModel":
        return cls(config.sigma_range, config.sigma_bearing, config.sigma_v, config.sigma_omega, floor)

    def odometry_information(self, dt: float) -> np.ndarray:
        # translation noise is taken isotropic: sigma_v * dt along and across the heading
        st = max(self.sigma_v * dt, self.floor)
        sth = max(self.sigma_omega * dt, self.floor)
        return np.diag([1 / st**2, 1 / st**2, 1 / sth**2])

    def observation_information(self) -> np.ndarray:
        sr = max(self.sigma_range, self.floor)
        sb = max(self.sigma_bearing, self.floor)
        return np.diag([1 / sr**2, 1 / sb**2])


@dataclass
class SlamSettings:
    window: int = 20
    horizon: int = 20
    anchor_sigma: float = 1e-3
    noise: NoiseModel | None = None
    solver: SolverSettings = field(default_factory=SolverSettings)
    predict: bool = True
    check_rank: bool = True
    landmark_anchors: bool = False
    min_range: float = 0.3  # shorter returns are dropped: the bearing is meaningless there

    def validate(self) -> list[str]:
        errs = []
        if not self.min_range >= 0:
            errs.append("min_range: must be >= 0")
        if self.window < 2:
            errs.append("window: must be >= 2")
        if self.horizon < 1:
            errs.append("horizon: must be >= 1")
        if not self.anchor_sigma > 0:
            errs.append("anchor_sigma: must be > 0")
        return errs


@dataclass
class WindowInputs:
    """Everything needed to build the factor graph of one window.

    ``landmarks`` / ``velocities`` hold estimates for steps ``base_step ..
    i_now`` (NaN where a pedestrian has no state); columns before ``i_min``
    are fixed history for the priors.  Anchors map pedestrian id to
    ``(value, information)`` for its state at ``i_min``.
    """

    i_min: int
    i_now: int
    dt: float
    poses: np.ndarray  # (w, 3)
    odometry: np.ndarray  # (w, 2); row k is the control into step i_min + k
    observations: np.ndarray  # (m, 4): step, ped_id, range, bearing
    ped_ids: np.ndarray
    landmarks: np.ndarray  # (P, S, 2)
    base_step: int
    pose_anchor: tuple
    velocities: np.ndarray | None = None
    lm_anchors: dict = field(default_factory=dict)
    vel_anchors: dict = field(default_factory=dict)
    prior_cache: dict | None = None  # neural predictions reused across window updates

    @property
    def width(self) -> int:
        return self.i_now - self.i_min + 1

    def prior_window(self) -> PriorWindow:
        return PriorWindow(self.ped_ids, self.landmarks, self.base_step, self.i_min, self.i_now)


@dataclass
class WindowLayout:
    pose_offsets: np.ndarray  # (w,)
    lm_offsets: np.ndarray  # (P, w), -1 where absent
    vel_offsets: np.ndarray | None


def build_window_graph(inp: WindowInputs, prior: PriorConfig, noise: NoiseModel):
    """Assemble the window's factor graph; returns ``(graph, layout)``."""
    w = inp.width
    P = len(inp.ped_ids)
    g = FactorGraph(inp.i_min, inp.i_now)
    steps = np.arange(inp.i_min, inp.i_now + 1)
    pose_off = g.add_variables(VarKind.POSE, steps, -1, inp.poses)

    c0 = inp.i_min - inp.base_step
    lm_win = inp.landmarks[:, c0 : c0 + w]
    present = np.isfinite(lm_win[..., 0])
    lm_off = np.full((P, w), -1, dtype=np.int64)
    pp, cc = np.nonzero(present)
    if pp.size:
        lm_off[pp, cc] = g.add_variables(VarKind.LM_POS, steps[cc], inp.ped_ids[pp], lm_win[pp, cc])
    vel_off = None
    if prior.uses_velocity_nodes:
        vel_off = np.full((P, w), -1, dtype=np.int64)
        if pp.size:
            vals = inp.velocities[:, c0 : c0 + w][pp, cc]
            vel_off[pp, cc] = g.add_variables(VarKind.LM_VEL, steps[cc], inp.ped_ids[pp], np.nan_to_num(vals))

    def cols(off, d):
        return off[:, None] + np.arange(d)[None, :]

    # anchors on the oldest states
    value, info = inp.pose_anchor
    g.add_block(AnchorBlock(cols(pose_off[:1], 3), np.asarray(value, float)[None], np.asarray(info)[None], "pose_anchor", (2,)))
    row_of = {int(p): k for k, p in enumerate(inp.ped_ids)}
    for anchors, offs, kind in ((inp.lm_anchors, lm_off, "lm_anchor"), (inp.vel_anchors, vel_off, "vel_anchor")):
        if not anchors or offs is None:
            continue
        sel, vals, infos = [], [], []
        for pid, (val, inf) in sorted(anchors.items()):
            o = offs[row_of[pid], 0]
            if o >= 0:
                sel.append(o)
                vals.append(val)
                infos.append(inf)
        if sel:
            g.add_block(AnchorBlock(cols(np.array(sel), 2), np.array(vals), np.array(infos), kind))

    # odometry
    if w > 1:
        info = np.broadcast_to(noise.odometry_information(inp.dt), (w - 1, 3, 3))
        g.add_block(OdometryBlock(cols(pose_off[:-1], 3), cols(pose_off[1:], 3), inp.odometry[1:], inp.dt, info))

    # observations
    obs = inp.observations
    if obs.shape[0]:
        s_idx = obs[:, 0].astype(np.int64) - inp.i_min
        p_idx = np.array([row_of[int(p)] for p in obs[:, 1]], dtype=np.int64)
        info = np.broadcast_to(noise.observation_information(), (obs.shape[0], 2, 2))
        g.add_block(ObservationBlock([cols(pose_off[s_idx], 3), cols(lm_off[p_idx, s_idx], 2)], info, obs[:, 2:4]))

    # kinematic priors
    fa = prior_factor_arrays(prior, inp.prior_window(), inp.dt, inp.prior_cache)
    if fa is not None and len(fa):
        rows = np.array([row_of[int(p)] for p in fa.ped_ids], dtype=np.int64)
        c = fa.steps - inp.i_min
        I2 = np.eye(2)
        if fa.kind == FACTOR_CVM_POSITION:
            s2 = 1.0 / inp.dt**2
            slots = [cols(lm_off[rows, c - 2], 2), cols(lm_off[rows, c - 1], 2), cols(lm_off[rows, c], 2)]
            g.add_block(LinearBlock(fa.kind, slots, [s2 * I2, -2 * s2 * I2, s2 * I2], fa.means, fa.information))
        elif fa.kind == FACTOR_CVM_VELOCITY:
            Z = np.zeros((2, 2))
            slots = [
                cols(lm_off[rows, c - 1], 2),
                cols(lm_off[rows, c], 2),
                cols(vel_off[rows, c - 1], 2),
                cols(vel_off[rows, c], 2),
            ]
            coeffs = [
                np.vstack([-I2, Z]),
                np.vstack([I2, Z]),
                np.vstack([-inp.dt * I2, -I2]),
                np.vstack([Z, I2]),
            ]
            g.add_block(LinearBlock(fa.kind, slots, coeffs, fa.means, fa.information))
        elif fa.jacobians is None:
            slots = [cols(lm_off[rows, c - 1], 2), cols(lm_off[rows, c], 2)]
            g.add_block(LinearBlock(fa.kind, slots, [-I2, I2], fa.means, fa.information))
        else:
            g.add_block(_linearized_neural_block(fa, rows, c, lm_off, inp.dt, cols))
    return g, WindowLayout(pose_off, lm_off, vel_off)


def _linearized_neural_block(fa, rows, c, lm_off, dt, cols) -> LinearBlock:
    """Displacement factor with the network linearised in its history.

    ``x_i - x_{i-1} - dt (v0 + sum_t J_t (p_t - p0_t))`` where ``p0`` is the
    history the network saw.  History points that have left the window stay
    at ``p0``, so their terms vanish.
    """
    n, H = fa.jacobians.shape[:2]
    J = fa.jacobians * dt
    hist_cols = c[:, None] - H + np.arange(H)[None, :]  # window column of each history point
    inside = hist_cols >= 0
    off = np.where(inside, lm_off[rows[:, None], np.maximum(hist_cols, 0)], -1)
    inside &= off >= 0
    J = np.where(inside[:, :, None, None], J, 0.0)
    b = fa.means - np.einsum("ntij,ntj->ni", J, fa.history)
    cur = cols(lm_off[rows, c], 2)
    slots, coeffs = [], []
    for t in range(H - 1):
        # points outside the window get a zero coefficient on a harmless column
        slots.append(np.where(inside[:, t, None], cols(off[:, t], 2), cur))
        coeffs.append(-J[:, t])
    slots += [cols(lm_off[rows, c - 1], 2), cur]
    coeffs += [-np.eye(2) - J[:, H - 1], np.broadcast_to(np.eye(2), (n, 2, 2))]
    return LinearBlock(fa.kind, slots, coeffs, b, fa.information)


# ---------------------------------------------------------------------------
# predictions
# ---------------------------------------------------------------------------


@dataclass
class PedPrediction:
    """Horizon forecast for one pedestrian emitted at ``step``.

    ``status`` is ``"ok"``, ``"unavailable"`` (prior cannot predict) or
    ``"insufficient"`` (history shorter than the warm-up).
    """

    ped_id: int
    step: int
    status: str
    origin: np.ndarray
    positions: np.ndarray | None = None
    mu: np.ndarray | None = None
    sigma: np.ndarray | None = None
    covariances: np.ndarray | None = None


def predict_future(win: PriorWindow, prior: PriorConfig, T: int, dt: float, step: int) -> list[PedPrediction]:
    """Forecast every pedestrian that has a state at ``step``."""
    H = prior.history_len
    c = win.column(step)
    tracked = np.flatnonzero(win.has(step))
    rows, hist = win.histories_ending(step, H)
    ready = set(rows.tolist())
    out = []
    for r in tracked:
        if r not in ready:
            out.append(PedPrediction(int(win.ped_ids[r]), step, "insufficient", win.positions[r, c].copy()))
    if rows.size == 0:
        return out
    ids = win.ped_ids[rows]
    origin = hist[:, -1]
    kind = prior.kind
    mu = sigma = cov = None
    if kind == PriorKind.NONE:
        out.extend(PedPrediction(int(p), step, "unavailable", o.copy()) for p, o in zip(ids, origin))
        return sorted(out, key=lambda q: q.ped_id)
    if kind == PriorKind.CVM:
        v = (hist[:, -1] - hist[:, -2]) / dt
        k = np.arange(1, T + 1)[None, :, None]
        pos = origin[:, None, :] + v[:, None, :] * dt * k
    elif kind == PriorKind.MLP:
        pos, _ = mlp_rollout(hist, prior.weights, T, dt)
    elif kind == PriorKind.GAT_DET:
        pos, _ = gat_rollout_deterministic(hist, prior.weights, T, dt)
    else:
        sets = gat_rollout_stochastic(
            hist, prior.weights, T, prior.n_samples, prior.sigma_sto, prior.seed, step=step, ped_ids=ids, dt=dt
        )
        stats = [empirical_stats(s, prior.eps_reg) for s in sets]
        mu = np.stack([s.mu for s in stats])
        sigma = np.stack([s.sigma for s in stats])
        cov = np.cumsum(sigma * dt * dt, axis=1)
        pos = origin[:, None, :] + np.cumsum(mu * dt, axis=1)
    for k, p in enumerate(ids):
        out.append(
            PedPrediction(
                int(p),
                step,
                "ok",
                origin[k].copy(),
                pos[k],
                None if mu is None else mu[k],
                None if sigma is None else sigma[k],
                None if cov is None else cov[k],
            )
        )
    return sorted(out, key=lambda q: q.ped_id)


# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------


@dataclass
class SlamResult:
    """Retrospective estimates, horizon predictions and solver diagnostics of one episode.

    Landmark estimates are NaN where a pedestrian had no state.  Predictions
    are stored in column form, one row per (emission step, pedestrian) with a
    full history; ``pred_positions`` is NaN when the prior cannot predict
    (``predictions_available`` is then False and metrics use a
    zero-velocity hold from ``pred_origin``).
    """

    method: str
    episode_seed: int
    dt: float
    horizon: int
    window: int
    robot: np.ndarray  # (L, 3)
    ped_ids: np.ndarray  # (P,)
    landmarks: np.ndarray  # (L, P, 2)
    pred_step: np.ndarray  # (K,)
    pred_ped: np.ndarray  # (K,)
    pred_origin: np.ndarray  # (K, 2)
    pred_positions: np.ndarray  # (K, T, 2)
    predictions_available: bool
    iterations: np.ndarray  # (L,)
    initial_cost: np.ndarray
    final_cost: np.ndarray
    monotone: np.ndarray  # (L,) bool
    pred_mu: np.ndarray | None = None  # (K, T, 2)
    pred_sigma: np.ndarray | None = None  # (K, T, 2, 2)
    pred_cov: np.ndarray | None = None  # (K, T, 2, 2)

    @property
    def n_steps(self) -> int:
        return self.robot.shape[0]

    def __eq__(self, other):
        if not isinstance(other, SlamResult):
            return NotImplemented
        for name in self.__dataclass_fields__:
            a, b = getattr(self, name), getattr(other, name)
            if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
                if a is None or b is None or not np.array_equal(a, b, equal_nan=a.dtype.kind == "f"):
                    return False
            elif a != b:
                return False
        return True


class SlamError(RuntimeError):
    def __init__(self, step: int, cause: Exception):
        super().__init__(f"step {step}: {cause}")
        self.step = step
        self.cause = cause


class SlamRunner:
    """Incremental sense -> build -> solve -> slide -> predict loop."""

    def __init__(self, record: EpisodeRecord, prior: PriorConfig, settings: SlamSettings | None = None):
        self.settings = settings or SlamSettings()
        errs = self.settings.validate() + prior.validate()
        if errs:
            raise ValueError("invalid SLAM configuration: " + "; ".join(errs))
        self.record = record
        self.prior = prior
        self.noise = self.settings.noise or NoiseModel.from_sim(record.config)
        self.dt = record.config.dt
        if prior.weights is not None and abs(prior.weights.dt - self.dt) > 1e-12:
            raise ValueError(f"weights trained with dt={prior.weights.dt}, episode uses dt={self.dt}")
        L = record.n_steps
        self.ped_ids = np.asarray(record.ped_ids)
        self.row_of = {int(p): k for k, p in enumerate(self.ped_ids)}
        P = len(self.ped_ids)
        self.robot = np.full((L, 3), np.nan)
        self.lm = np.full((P, L, 2), np.nan)
        self.vel = np.full((P, L, 2), np.nan) if prior.uses_velocity_nodes else None
        obs = record.observations
        obs = obs[obs[:, 2] > self.settings.min_range] if obs.shape[0] else obs
        self.obs = obs
        self.obs_bounds = np.searchsorted(obs[:, 0], np.arange(L + 1)) if obs.shape[0] else np.zeros(L + 1, dtype=np.int64)
        self.i_min = 0
        self.i_now = -1
        a = self.settings.anchor_sigma
        self.pose_anchor = (record.robot_poses[0].copy(), np.eye(3) / a**2)
        self.lm_anchors: dict = {}
        self.vel_anchors: dict = {}
        self.prior_cache: dict = {}
        self.iterations = np.zeros(L, dtype=np.int64)
        self.initial_cost = np.zeros(L)
        self.final_cost = np.zeros(L)
        self.monotone = np.ones(L, dtype=bool)
        self.predictions: list[PedPrediction] = []
        self.last_graph = None

    # sensing ---------------------------------------------------------------------

    def add_step(self):
        """Initialise the next step's pose and landmark states from odometry and observations."""
        i = self.i_now + 1
        if i == 0:
            self.robot[0] = self.record.robot_poses[0]
        else:
            self.robot[i] = motion_model_batch(self.robot[i - 1][None], self.record.odometry[i][None], self.dt)[0]
        o = self.obs[self.obs_bounds[i] : self.obs_bounds[i + 1]]
        if o.shape[0]:
            rows = np.array([self.row_of[int(p)] for p in o[:, 1]])
            self.lm[rows, i] = inverse_observation_batch(np.broadcast_to(self.robot[i], (o.shape[0], 3)), o[:, 2:4])
            if self.vel is not None:
                prev = self.vel[rows, i - 1] if i > 0 else np.full((rows.shape[0], 2), np.nan)
                self.vel[rows, i] = np.where(np.isfinite(prev), prev, 0.0)
        self.i_now = i
        self.i_min = max(0, i - self.settings.window + 1)
        for key in [k for k in self.prior_cache if k[1] <= self.i_min]:
            del self.prior_cache[key]

    def window_inputs(self) -> WindowInputs:
        i0, i1 = self.i_min, self.i_now
        base = max(0, i0 - self.prior.history_len)
        odo = self.record.odometry[i0 : i1 + 1].copy()
        odo[np.isnan(odo)] = 0.0
        return WindowInputs(
            i_min=i0,
            i_now=i1,
            dt=self.dt,
            poses=self.robot[i0 : i1 + 1],
            odometry=odo,
            observations=self.obs[self.obs_bounds[i0] : self.obs_bounds[i1 + 1]],
            ped_ids=self.ped_ids,
            landmarks=self.lm[:, base : i1 + 1],
            base_step=base,
            pose_anchor=self.pose_anchor,
            velocities=None if self.vel is None else self.vel[:, base : i1 + 1],
            lm_anchors=self.lm_anchors,
            vel_anchors=self.vel_anchors,
            prior_cache=self.prior_cache,
        )

    # solve ---------------------------------------------------------------------

    def solve_window(self):
        i0, i1 = self.i_min, self.i_now
        graph, layout = build_window_graph(self.window_inputs(), self.prior, self.noise)
        graph, diag = solve(graph, self.settings.solver, check=self.settings.check_rank)
        x = graph.x
        self.robot[i0 : i1 + 1] = x[layout.pose_offsets[:, None] + np.arange(3)]
        pp, cc = np.nonzero(layout.lm_offsets >= 0)
        self.lm[pp, i0 + cc] = x[layout.lm_offsets[pp, cc][:, None] + np.arange(2)]
        if layout.vel_offsets is not None:
            self.vel[pp, i0 + cc] = x[layout.vel_offsets[pp, cc][:, None] + np.arange(2)]
        self.iterations[i1] = diag.iterations
        self.initial_cost[i1] = diag.initial_cost
        self.final_cost[i1] = diag.final_cost
        self.monotone[i1] = diag.monotone
        self.last_graph = graph
        return graph, diag

    def prepare_slide(self, graph: FactorGraph):
        """Anchor the states that become the oldest in the next window."""
        nxt = self.i_now + 2 - self.settings.window
        if nxt <= self.i_min or self.i_now + 1 >= self.record.n_steps:
            return
        vids = [VariableId(VarKind.POSE, nxt)]
        lm_peds, vel_peds = [], []
        for pid in self.ped_ids if self.settings.landmark_anchors else ():
            r = self.row_of[int(pid)]
            if np.isfinite(self.lm[r, nxt, 0]) and np.isfinite(self.lm[r, nxt - 1, 0]):
                vids.append(VariableId(VarKind.LM_POS, nxt, int(pid)))
                lm_peds.append(int(pid))
                if self.vel is not None:
                    vids.append(VariableId(VarKind.LM_VEL, nxt, int(pid)))
                    vel_peds.append(int(pid))
        covs = marginal_covariances(graph, vids)
        by = dict(zip(vids, covs))
        self.pose_anchor = (self.robot[nxt].copy(), np.linalg.inv(by[vids[0]]))
        self.lm_anchors = {
            p: (self.lm[self.row_of[p], nxt].copy(), np.linalg.inv(by[VariableId(VarKind.LM_POS, nxt, p)]))
            for p in lm_peds
        }
        self.vel_anchors = {
            p: (self.vel[self.row_of[p], nxt].copy(), np.linalg.inv(by[VariableId(VarKind.LM_VEL, nxt, p)]))
            for p in vel_peds
        }
        for d in (self.lm_anchors, self.vel_anchors):
            for p, (v, inf) in d.items():
                d[p] = (v, 0.5 * (inf + inf.T))
        inf = self.pose_anchor[1]
        self.pose_anchor = (self.pose_anchor[0], 0.5 * (inf + inf.T))

    def predict(self):
        i = self.i_now
        base = max(0, i - self.prior.history_len + 1)
        win = PriorWindow(self.ped_ids, self.lm[:, base : i + 1], base, self.i_min, i)
        preds = predict_future(win, self.prior, self.settings.horizon, self.dt, i)
        self.predictions.extend(preds)

    def step(self):
        i = self.i_now + 1
        try:
            self.add_step()
            graph, _ = self.solve_window()
            self.prepare_slide(graph)
        except Exception as exc:
            raise SlamError(i, exc) from exc
        if self.settings.predict:
            self.predict()

    def run(self) -> SlamResult:
        while self.i_now + 1 < self.record.n_steps:
            self.step()
        return self.result()

    def result(self) -> SlamResult:
        T = self.settings.horizon
        ok = [p for p in self.predictions if p.status != "insufficient"]
        K = len(ok)
        stoch = self.prior.kind == PriorKind.GAT_STOCH
        pos = np.full((K, T, 2), np.nan)
        mu = np.zeros((K, T, 2)) if stoch else None
        sig = np.zeros((K, T, 2, 2)) if stoch else None
        cov = np.zeros((K, T, 2, 2)) if stoch else None
        for k, p in enumerate(ok):
            if p.positions is not None:
                pos[k] = p.positions
            if stoch:
                mu[k], sig[k], cov[k] = p.mu, p.sigma, p.covariances
        return SlamResult(
            method=self.prior.kind.value,
            episode_seed=int(self.record.seed),
            dt=self.dt,
            horizon=T,
            window=self.settings.window,
            robot=self.robot.copy(),
            ped_ids=self.ped_ids.copy(),
            landmarks=self.lm.transpose(1, 0, 2).copy(),
            pred_step=np.array([p.step for p in ok], dtype=np.int64),
            pred_ped=np.array([p.ped_id for p in ok], dtype=np.int64),
            pred_origin=np.array([p.origin for p in ok]).reshape(K, 2),
            pred_positions=pos,
            predictions_available=self.prior.kind != PriorKind.NONE,
            iterations=self.iterations.copy(),
            initial_cost=self.initial_cost.copy(),
            final_cost=self.final_cost.copy(),
            monotone=self.monotone.copy(),
            pred_mu=mu,
            pred_sigma=sig,
            pred_cov=cov,
        )


def slide_window(runner: SlamRunner) -> FactorGraph:
    """Advance ``runner`` by one step and return the new (unsolved) window graph.

    States older than ``i_now - W + 1`` leave the window; the oldest retained
    pose carries the anchor prepared from the previous solve.
    """
    if runner.last_graph is None:
        raise ValueError("slide_window needs a solved window")
    runner.add_step()
    graph, _ = build_window_graph(runner.window_inputs(), runner.prior, runner.noise)
    return graph


def run_sequence(record: EpisodeRecord, prior: PriorConfig, settings: SlamSettings | None = None) -> SlamResult:
    return SlamRunner(record, prior, settings).run()
