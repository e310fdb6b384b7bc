"""Run configuration: one TOML document with a section per module."""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from crowdslam.neuralnet.training import TrainHyper
from crowdslam.priors import PriorConfig, PriorKind
from crowdslam.simulator import SimConfig
from crowdslam.slam.pipeline import SlamSettings
from crowdslam.slam.solver import SolverSettings


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` holds ``"section.field: problem"`` strings."""

    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = list(errors)


@dataclass
class DatasetSection:
    n_train: int = 200
    n_test: int = 50
    master_seed: int = 0


@dataclass
class TrainSection:
    hyper: TrainHyper = field(default_factory=TrainHyper)
    seed: int = 0


@dataclass
class PriorSection:
    """Prior tunables; the kind is usually overridden on the command line."""

    kind: str = "cvm"
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

    def prior_config(self, kind: str | None = None, weights=None) -> PriorConfig:
        kw = dataclasses.asdict(self)
        kw["kind"] = PriorKind(kind or self.kind)
        return PriorConfig(weights=weights, **kw)


@dataclass
class SlamSection:
    window: int = 20
    horizon: int = 20
    anchor_sigma: float = 1e-3
    check_rank: bool = True
    landmark_anchors: bool = False
    min_range: float = 0.3
    solver: SolverSettings = field(default_factory=SolverSettings)

    def settings(self) -> SlamSettings:
        return SlamSettings(
            window=self.window,
            horizon=self.horizon,
            anchor_sigma=self.anchor_sigma,
            solver=dataclasses.replace(self.solver),
            check_rank=self.check_rank,
            landmark_anchors=self.landmark_anchors,
            min_range=self.min_range,
        )


@dataclass
class MetricsSection:
    crowd_radius: float = 4.0
    crowded_min_peds: int = 5


@dataclass
class RunConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    train: TrainSection = field(default_factory=TrainSection)
    prior: PriorSection = field(default_factory=PriorSection)
    slam: SlamSection = field(default_factory=SlamSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    jobs: int = 1

    def validate(self) -> list[str]:
        errs = [f"sim.{e}" for e in self.sim.validate()]
        d = self.dataset
        if d.n_train < 1:
            errs.append("dataset.n_train: must be >= 1")
        if d.n_test < 1:
            errs.append("dataset.n_test: must be >= 1")
        if d.master_seed < 0:
            errs.append("dataset.master_seed: must be >= 0")
        h = self.train.hyper
        if not h.lr > 0:
            errs.append("train.lr: must be > 0")
        if not 0 < h.lr_final_fraction <= 1:
            errs.append("train.lr_final_fraction: must lie in (0, 1]")
        for name in ("batch_size", "epochs", "latent", "scene_stride"):
            if getattr(h, name) < 1:
                errs.append(f"train.{name}: must be >= 1")
        if not h.history_noise >= 0:
            errs.append("train.history_noise: must be >= 0")
        if h.history_len != self.prior.history_len:
            errs.append("train.history_len: must equal prior.history_len")
        if abs(h.dt - self.sim.dt) > 1e-12:
            errs.append("train.dt: must equal sim.dt")
        try:
            prior = self.prior.prior_config(kind="cvm")
            errs += [f"prior.{e}" for e in prior.validate()]
        except ValueError as exc:
            errs.append(f"prior.kind: {exc}")
        try:
            PriorKind(self.prior.kind)
        except ValueError:
            errs.append(f"prior.kind: unknown kind {self.prior.kind!r}")
        errs += [f"slam.{e}" for e in self.slam.settings().validate()]
        s = self.slam.solver
        if s.max_iterations < 1:
            errs.append("slam.solver.max_iterations: must be >= 1")
        if not s.lambda_factor > 1:
            errs.append("slam.solver.lambda_factor: must be > 1")
        if not s.lambda_init > 0:
            errs.append("slam.solver.lambda_init: must be > 0")
        if not self.metrics.crowd_radius > 0:
            errs.append("metrics.crowd_radius: must be > 0")
        if self.jobs < 1:
            errs.append("jobs: must be >= 1")
        return errs

    def check(self) -> "RunConfig":
        errs = self.validate()
        if errs:
            raise ConfigError(errs)
        return self

    # serialisation ------------------------------------------------------------

    def to_dict(self) -> dict:
        train = self.train.hyper.to_dict()
        train["seed"] = self.train.seed
        slam = dataclasses.asdict(self.slam)
        return {
            "jobs": self.jobs,
            "sim": self.sim.to_dict(),
            "dataset": dataclasses.asdict(self.dataset),
            "train": train,
            "prior": dataclasses.asdict(self.prior),
            "slam": slam,
            "metrics": dataclasses.asdict(self.metrics),
        }

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {"jobs", "sim", "dataset", "train", "prior", "slam", "metrics"}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError([f"{k}: unknown section or key" for k in unknown])
        errs: list[str] = []
        cfg = cls()
        cfg.jobs = int(doc.get("jobs", 1))
        train = dict(doc.get("train", {}))
        seed = int(train.pop("seed", 0))
        slam = dict(doc.get("slam", {}))
        solver = slam.pop("solver", {})
        cfg.sim = _build(SimConfig, doc.get("sim", {}), "sim", errs, cfg.sim)
        cfg.dataset = _build(DatasetSection, doc.get("dataset", {}), "dataset", errs, cfg.dataset)
        cfg.train = TrainSection(_build(TrainHyper, train, "train", errs, cfg.train.hyper), seed)
        cfg.prior = _build(PriorSection, doc.get("prior", {}), "prior", errs, cfg.prior)
        cfg.slam = _build(SlamSection, slam, "slam", errs, cfg.slam)
        cfg.slam.solver = _build(SolverSettings, solver, "slam.solver", errs, SolverSettings())
        cfg.metrics = _build(MetricsSection, doc.get("metrics", {}), "metrics", errs, cfg.metrics)
        if errs:
            raise ConfigError(errs)
        return cfg

    @classmethod
    def from_toml(cls, text: str) -> "RunConfig":
        try:
            doc = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError([f"config: not valid TOML ({exc})"]) from exc
        return cls.from_dict(doc)


def _build(kind, data: dict, name: str, errs: list[str], fallback):
    """Instantiate ``kind`` from ``data``, recording unknown keys and type errors in ``errs``."""
    fields = {f.name for f in dataclasses.fields(kind)}
    kw = {}
    for k, v in data.items():
        if k not in fields:
            errs.append(f"{name}.{k}: unknown key")
        else:
            kw[k] = tuple(v) if isinstance(v, list) else v
    try:
        return kind(**kw)
    except (TypeError, ValueError) as exc:
        errs.append(f"{name}: {exc}")
        return fallback


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([f"config: cannot read {path} ({exc})"]) from exc
    return RunConfig.from_toml(text)


def default_config_text() -> str:
    return RunConfig().to_toml()
