"""2D social-navigation simulator: headed social-force pedestrians, a
sampling-MPC robot, and noisy odometry / range-bearing sensing.

All randomness flows through explicit ``numpy.random.Generator`` objects so
that an episode is a pure function of ``(config, seed)``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from crowdslam import kernels
from crowdslam.geometry import Control, Point2, Pose2, motion_model, observation_model_batch, wrap_angle

ARRIVAL_RADIUS = 0.3
ROBOT_ARRIVAL_RADIUS = 0.5
SPAWN_MARGIN = 1.0
SPAWN_SEPARATION = 1.0


@dataclass
class SimConfig:
    dt: float = 0.1
    episode_length: int = 200
    ped_count_range: tuple[int, int] = (1, 15)
    arena: tuple[float, float, float, float] = (-6.0, 6.0, -6.0, 6.0)
    desired_speed_range: tuple[float, float] = (0.9, 1.4)
    max_speed_factor: float = 1.3
    # headed social force
    relaxation_time: float = 0.5
    repulsion_strength: float = 2.0
    repulsion_range: float = 0.35
    body_radius: float = 0.3
    heading_gain: float = 4.0
    lateral_attenuation: float = 0.3
    robot_radius: float = 0.3
    # sensing
    fov_radius: float = 5.0
    sigma_range: float = 0.1
    sigma_bearing: float = 0.05
    sigma_v: float = 0.05
    sigma_omega: float = 0.05
    # robot / MPC
    v_max: float = 1.5
    omega_max: float = 1.0
    mpc_horizon: int = 10
    mpc_sample_count: int = 96
    mpc_clearance: float = 0.5
    mpc_w_goal: float = 1.0
    mpc_w_collision: float = 2.0
    mpc_w_effort: float = 0.01
    mpc_w_arena: float = 10.0
    mpc_w_heading: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.ped_count_range = tuple(int(v) for v in self.ped_count_range)
        self.arena = tuple(float(v) for v in self.arena)
        self.desired_speed_range = tuple(float(v) for v in self.desired_speed_range)

    def validate(self) -> list[str]:
        """Return a list of ``"field: problem"`` strings (empty when valid)."""
        errs = []
        if not self.dt > 0:
            errs.append("dt: must be > 0")
        if self.episode_length < 2:
            errs.append("episode_length: must be >= 2")
        lo, hi = self.ped_count_range
        if lo < 1 or hi > 15 or lo > hi:
            errs.append("ped_count_range: must satisfy 1 <= lo <= hi <= 15")
        xmin, xmax, ymin, ymax = self.arena
        if not (xmax - xmin > 2 * SPAWN_MARGIN and ymax - ymin > 2 * SPAWN_MARGIN):
            errs.append("arena: too small")
        if not 0 < self.desired_speed_range[0] <= self.desired_speed_range[1]:
            errs.append("desired_speed_range: must be positive and ordered")
        for name in ("sigma_range", "sigma_bearing", "sigma_v", "sigma_omega"):
            if getattr(self, name) < 0:
                errs.append(f"{name}: must be >= 0")
        for name in ("fov_radius", "relaxation_time", "repulsion_range", "body_radius", "v_max", "omega_max"):
            if not getattr(self, name) > 0:
                errs.append(f"{name}: must be > 0")
        if not 0.0 <= self.lateral_attenuation <= 1.0:
            errs.append("lateral_attenuation: must lie in [0, 1]")
        if self.max_speed_factor > 2.0 or self.max_speed_factor < 1.0:
            errs.append("max_speed_factor: must lie in [1, 2]")
        if self.mpc_horizon < 1:
            errs.append("mpc_horizon: must be >= 1")
        if self.mpc_sample_count < 1:
            errs.append("mpc_sample_count: must be >= 1")
        return errs

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown SimConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class PedestrianState:
    id: int
    position: Point2
    velocity: tuple[float, float]
    heading: float
    goal: Point2
    desired_speed: float


@dataclass
class WorldState:
    """Simulator state.  Pedestrians are stored column-wise as arrays."""

    time_step: int
    robot: Pose2
    robot_control: Control
    robot_goal: Point2
    ped_ids: np.ndarray
    ped_pos: np.ndarray
    ped_vel: np.ndarray
    ped_heading: np.ndarray
    ped_goal: np.ndarray
    ped_speed: np.ndarray
    arena: tuple[float, float, float, float] = (-6.0, 6.0, -6.0, 6.0)

    def __post_init__(self):
        if len(set(self.ped_ids.tolist())) != len(self.ped_ids):
            raise ValueError("pedestrian ids must be unique")

    @property
    def pedestrians(self) -> list[PedestrianState]:
        return [
            PedestrianState(
                int(self.ped_ids[k]),
                Point2(*self.ped_pos[k]),
                (float(self.ped_vel[k, 0]), float(self.ped_vel[k, 1])),
                float(self.ped_heading[k]),
                Point2(*self.ped_goal[k]),
                float(self.ped_speed[k]),
            )
            for k in range(len(self.ped_ids))
        ]

    @classmethod
    def from_pedestrians(cls, time_step, robot, robot_control, robot_goal, peds, arena) -> "WorldState":
        return cls(
            time_step=time_step,
            robot=robot,
            robot_control=robot_control,
            robot_goal=robot_goal,
            ped_ids=np.array([p.id for p in peds], dtype=np.int64),
            ped_pos=np.array([[p.position.x, p.position.y] for p in peds], dtype=float).reshape(-1, 2),
            ped_vel=np.array([p.velocity for p in peds], dtype=float).reshape(-1, 2),
            ped_heading=np.array([p.heading for p in peds], dtype=float),
            ped_goal=np.array([[p.goal.x, p.goal.y] for p in peds], dtype=float).reshape(-1, 2),
            ped_speed=np.array([p.desired_speed for p in peds], dtype=float),
            arena=tuple(arena),
        )

    def copy(self) -> "WorldState":
        return dataclasses.replace(
            self,
            ped_ids=self.ped_ids.copy(),
            ped_pos=self.ped_pos.copy(),
            ped_vel=self.ped_vel.copy(),
            ped_heading=self.ped_heading.copy(),
            ped_goal=self.ped_goal.copy(),
            ped_speed=self.ped_speed.copy(),
        )


@dataclass(frozen=True)
class OdometryMeasurement:
    step: int
    u_meas: Control

    def __post_init__(self):
        if self.step < 1:
            raise ValueError("odometry step must be >= 1")


@dataclass(frozen=True)
class Observation:
    step: int
    ped_id: int
    range: float
    bearing: float


# ---------------------------------------------------------------------------
# pedestrian dynamics
# ---------------------------------------------------------------------------


def _goal_forces(pos, vel, goal, speed, tau):
    to_goal = goal - pos
    dist = np.sqrt(np.sum(to_goal**2, axis=1))
    unit = np.where(dist[:, None] > 1e-9, to_goal / np.maximum(dist, 1e-300)[:, None], 0.0)
    return (speed[:, None] * unit - vel) / tau


def _attenuate_lateral(force, heading, lam):
    c, s = np.cos(heading), np.sin(heading)
    fwd = force[:, 0] * c + force[:, 1] * s
    lat = -force[:, 0] * s + force[:, 1] * c
    lat = lam * lat
    return np.stack([fwd * c - lat * s, fwd * s + lat * c], axis=1)


def hsfm_forces(world: WorldState, config: SimConfig) -> np.ndarray:
    """Total headed-social-force on every pedestrian (unit mass), shape ``(n, 2)``."""
    f = _goal_forces(world.ped_pos, world.ped_vel, world.ped_goal, world.ped_speed, config.relaxation_time)
    f = f + kernels.social_forces(
        world.ped_pos,
        world.robot.position,
        config.repulsion_strength,
        config.repulsion_range,
        config.body_radius,
        config.robot_radius,
    )
    return _attenuate_lateral(f, world.ped_heading, config.lateral_attenuation)


def hsfm_force(ped: PedestrianState, others: list[PedestrianState], robot: Pose2, config: SimConfig) -> np.ndarray:
    """Force on a single pedestrian given its neighbours (order-preserving)."""
    if any(o.id == ped.id for o in others):
        raise ValueError("pedestrian must not appear among its own neighbours")
    world = WorldState.from_pedestrians(
        0, robot, Control(0.0, 0.0), Point2(robot.x, robot.y), [ped, *others], (-1e9, 1e9, -1e9, 1e9)
    )
    return hsfm_forces(world, config)[0]


# ---------------------------------------------------------------------------
# robot control
# ---------------------------------------------------------------------------


def _lattice(config: SimConfig) -> np.ndarray:
    vs = np.linspace(0.0, config.v_max, 6)
    ws = np.linspace(-config.omega_max, config.omega_max, 9)
    grid = np.array([(v, w) for v in vs for w in ws])
    return np.repeat(grid[:, None, :], config.mpc_horizon, axis=1)


def mpc_candidates(config: SimConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Candidate control sequences ``(S, horizon, 2)``.

    A fixed lattice of constant controls is always present; when ``rng`` is
    given it is topped up to ``mpc_sample_count`` with random sequences that
    interpolate linearly between two random controls.
    """
    seqs = _lattice(config)
    extra = config.mpc_sample_count - seqs.shape[0]
    if rng is not None and extra > 0:
        lo = np.array([0.0, -config.omega_max])
        hi = np.array([config.v_max, config.omega_max])
        a = rng.uniform(lo, hi, size=(extra, 2))
        b = rng.uniform(lo, hi, size=(extra, 2))
        t = np.linspace(0.0, 1.0, config.mpc_horizon)[None, :, None]
        seqs = np.concatenate([seqs, a[:, None, :] * (1 - t) + b[:, None, :] * t], axis=0)
    return seqs


def mpc_evaluate(world: WorldState, goal: Point2, config: SimConfig, seqs: np.ndarray):
    """Cost and minimum predicted clearance of each candidate sequence."""
    return kernels.mpc_rollout_costs(
        world.robot.to_array(),
        np.ascontiguousarray(seqs, dtype=float),
        config.dt,
        world.ped_pos,
        world.ped_vel,
        goal.to_array(),
        config.body_radius + config.robot_radius,
        config.mpc_clearance,
        np.array(
            [config.mpc_w_goal, config.mpc_w_collision, config.mpc_w_effort, config.mpc_w_arena, config.mpc_w_heading]
        ),
        np.array(world.arena, dtype=float),
    )


def mpc_control(world: WorldState, goal: Point2, config: SimConfig, rng: np.random.Generator | None = None) -> Control:
    """First control of the cheapest sampled sequence (ties go to the lowest index)."""
    seqs = mpc_candidates(config, rng)
    cost, _ = mpc_evaluate(world, goal, config, seqs)
    if not np.all(np.isfinite(cost)):
        return Control(0.0, 0.0)
    best = int(np.argmin(cost))
    v = float(np.clip(seqs[best, 0, 0], -config.v_max, config.v_max))
    w = float(np.clip(seqs[best, 0, 1], -config.omega_max, config.omega_max))
    return Control(v, w)


# ---------------------------------------------------------------------------
# world evolution
# ---------------------------------------------------------------------------


def _sample_goal(rng, arena, margin=SPAWN_MARGIN):
    return rng.uniform([arena[0] + margin, arena[2] + margin], [arena[1] - margin, arena[3] - margin])


def step_world(world: WorldState, config: SimConfig, rng: np.random.Generator) -> WorldState:
    dt = config.dt
    u = mpc_control(world, world.robot_goal, config, rng)
    new = world.copy()

    f = hsfm_forces(world, config)
    vel = world.ped_vel + f * dt
    speed = np.sqrt(np.sum(vel**2, axis=1))
    cap = config.max_speed_factor * world.ped_speed
    scale = np.where(speed > cap, cap / np.maximum(speed, 1e-300), 1.0)
    vel = vel * scale[:, None]
    new.ped_vel = vel
    new.ped_pos = world.ped_pos + vel * dt
    moving = np.sqrt(np.sum(vel**2, axis=1)) > 1e-6
    target = np.arctan2(vel[:, 1], vel[:, 0])
    turn = wrap_angle(target - world.ped_heading) if len(vel) else target
    new.ped_heading = np.where(
        moving, wrap_angle(world.ped_heading + config.heading_gain * dt * turn), world.ped_heading
    )
    for k in range(len(new.ped_ids)):
        if np.hypot(*(new.ped_goal[k] - new.ped_pos[k])) < ARRIVAL_RADIUS:
            new.ped_goal[k] = _sample_goal(rng, world.arena)

    new.robot = motion_model(world.robot, u, dt)
    new.robot_control = u
    if math.hypot(new.robot.x - world.robot_goal.x, new.robot.y - world.robot_goal.y) < ROBOT_ARRIVAL_RADIUS:
        new.robot_goal = Point2(*_sample_goal(rng, world.arena))
    new.time_step = world.time_step + 1
    return new


def sense(world: WorldState, config: SimConfig, rng: np.random.Generator):
    """Noisy odometry of the last applied control and range-bearing returns.

    Returns ``(odometry or None, observations)``; odometry is ``None`` at
    step 0 where no control has been applied yet.
    """
    odo = None
    if world.time_step >= 1:
        noise = rng.normal(0.0, 1.0, size=2) * np.array([config.sigma_v, config.sigma_omega])
        u = world.robot_control
        odo = OdometryMeasurement(world.time_step, Control(u.v + noise[0], u.omega + noise[1]))
    n = len(world.ped_ids)
    if n == 0:
        return odo, []
    poses = np.repeat(world.robot.to_array()[None, :], n, axis=0)
    z = observation_model_batch(poses, world.ped_pos)
    # draw noise for every pedestrian so the stream does not depend on visibility
    noise = rng.normal(0.0, 1.0, size=(n, 2)) * np.array([config.sigma_range, config.sigma_bearing])
    obs = []
    for k in np.flatnonzero(z[:, 0] <= config.fov_radius):
        if z[k, 0] <= 0.0:
            continue
        obs.append(
            Observation(
                world.time_step,
                int(world.ped_ids[k]),
                float(max(z[k, 0] + noise[k, 0], 0.0)),
                float(wrap_angle(z[k, 1] + noise[k, 1])),
            )
        )
    return odo, obs


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------


@dataclass
class EpisodeRecord:
    """One simulated run, stored column-wise.

    Row ``k`` of every per-step array describes time step ``k``.  ``controls[k]``
    and ``odometry[k]`` move the robot from step ``k - 1`` to ``k`` (row 0 is
    zero for controls and NaN for odometry).  ``observations`` has columns
    ``(step, ped_id, range, bearing)``.
    """

    config: SimConfig
    seed: int
    ped_ids: np.ndarray
    desired_speeds: np.ndarray
    robot_poses: np.ndarray
    ped_positions: np.ndarray
    ped_velocities: np.ndarray
    ped_headings: np.ndarray
    ped_goals: np.ndarray
    controls: np.ndarray
    odometry: np.ndarray
    observations: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))

    @property
    def n_steps(self) -> int:
        return self.robot_poses.shape[0]

    @property
    def n_peds(self) -> int:
        return len(self.ped_ids)

    def observations_at(self, step: int) -> np.ndarray:
        lo, hi = np.searchsorted(self.observations[:, 0], [step, step + 1])
        return self.observations[lo:hi]

    def validate(self):
        n = self.n_steps
        if self.n_peds < 1:
            raise ValueError("episode must contain at least one pedestrian")
        if len(set(self.ped_ids.tolist())) != self.n_peds:
            raise ValueError("pedestrian ids must be unique")
        shapes = {
            "robot_poses": (n, 3),
            "ped_positions": (n, self.n_peds, 2),
            "ped_velocities": (n, self.n_peds, 2),
            "ped_headings": (n, self.n_peds),
            "ped_goals": (n, self.n_peds, 2),
            "controls": (n, 2),
            "odometry": (n, 2),
        }
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {getattr(self, name).shape}")
        if self.desired_speeds.shape != (self.n_peds,):
            raise ValueError("desired_speeds: wrong shape")
        obs = self.observations
        if obs.ndim != 2 or obs.shape[1] != 4:
            raise ValueError("observations: expected (m, 4)")
        if len(obs) and (np.any(np.diff(obs[:, 0]) < 0) or obs[0, 0] < 0 or obs[-1, 0] >= n):
            raise ValueError("observations: steps out of order or range")
        if len(obs) and not np.all(np.isin(obs[:, 1], self.ped_ids)):
            raise ValueError("observations: unknown pedestrian id")

    def __eq__(self, other):
        if not isinstance(other, EpisodeRecord):
            return NotImplemented
        if self.config != other.config or self.seed != other.seed:
            return False
        names = [
            "ped_ids", "desired_speeds", "robot_poses", "ped_positions", "ped_velocities",
            "ped_headings", "ped_goals", "controls", "odometry", "observations",
        ]  # fmt: skip
        return all(np.array_equal(getattr(self, k), getattr(other, k), equal_nan=True) for k in names)


def initial_world(config: SimConfig, rng: np.random.Generator) -> WorldState:
    arena = config.arena
    lo, hi = config.ped_count_range
    n = int(rng.integers(lo, hi + 1))
    robot_xy = _sample_goal(rng, arena)
    robot = Pose2(robot_xy[0], robot_xy[1], rng.uniform(-math.pi, math.pi))
    placed = [robot_xy]
    pos = []
    while len(pos) < n:
        p = _sample_goal(rng, arena)
        if all(np.hypot(*(p - q)) >= SPAWN_SEPARATION for q in placed):
            pos.append(p)
            placed.append(p)
    pos = np.array(pos).reshape(-1, 2)
    goals = np.array([_sample_goal(rng, arena) for _ in range(n)]).reshape(-1, 2)
    speeds = rng.uniform(*config.desired_speed_range, size=n)
    to_goal = goals - pos
    heading = np.arctan2(to_goal[:, 1], to_goal[:, 0])
    vel = speeds[:, None] * np.stack([np.cos(heading), np.sin(heading)], axis=1)
    return WorldState(
        time_step=0,
        robot=robot,
        robot_control=Control(0.0, 0.0),
        robot_goal=Point2(*_sample_goal(rng, arena)),
        ped_ids=np.arange(n, dtype=np.int64),
        ped_pos=pos,
        ped_vel=vel,
        ped_heading=heading,
        ped_goal=goals,
        ped_speed=speeds,
        arena=arena,
    )


def run_episode(config: SimConfig, seed: int, world: WorldState | None = None) -> EpisodeRecord:
    """Simulate ``config.episode_length`` steps.

    Ground truth and sensor noise use separate child streams of ``seed``, so
    changing the noise levels never changes the ground-truth trajectories.
    """
    world_rng, sensor_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    if world is None:
        world = initial_world(config, world_rng)
    L = config.episode_length
    n = len(world.ped_ids)
    robot_poses = np.zeros((L, 3))
    ped_pos = np.zeros((L, n, 2))
    ped_vel = np.zeros((L, n, 2))
    ped_head = np.zeros((L, n))
    ped_goal = np.zeros((L, n, 2))
    controls = np.zeros((L, 2))
    odometry = np.full((L, 2), np.nan)
    obs_rows = []
    for k in range(L):
        if k > 0:
            world = step_world(world, config, world_rng)
        odo, obs = sense(world, config, sensor_rng)
        robot_poses[k] = world.robot.to_array()
        ped_pos[k] = world.ped_pos
        ped_vel[k] = world.ped_vel
        ped_head[k] = world.ped_heading
        ped_goal[k] = world.ped_goal
        if k > 0:
            controls[k] = world.robot_control.to_array()
            odometry[k] = odo.u_meas.to_array()
        obs_rows.extend((o.step, o.ped_id, o.range, o.bearing) for o in obs)
    return EpisodeRecord(
        config=config,
        seed=int(seed),
        ped_ids=world.ped_ids.copy(),
        desired_speeds=world.ped_speed.copy(),
        robot_poses=robot_poses,
        ped_positions=ped_pos,
        ped_velocities=ped_vel,
        ped_headings=ped_head,
        ped_goals=ped_goal,
        controls=controls,
        odometry=odometry,
        observations=np.array(obs_rows, dtype=float).reshape(-1, 4),
    )
