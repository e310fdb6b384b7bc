"""Episode persistence, dataset generation, and training-sample extraction.

Episode files are UTF-8 JSON lines: a header object followed by one object
per time step.  Floats are written with ``repr`` (shortest round-trip form),
so ``read_episode(write_episode(r)) == r`` bit for bit.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from crowdslam.simulator import EpisodeRecord, SimConfig, run_episode

FORMAT_VERSION = 1
DEFAULT_HISTORY = 8


class EpisodeFormatError(ValueError):
    """Base class for unreadable episode or manifest files."""


class MalformedEpisodeError(EpisodeFormatError):
    pass


class UnsupportedVersionError(EpisodeFormatError):
    pass


class TruncatedEpisodeError(EpisodeFormatError):
    pass


def _floats(a) -> list:
    return np.asarray(a, dtype=float).tolist()


def episode_to_lines(record: EpisodeRecord) -> list[str]:
    record.validate()
    header = {
        "format_version": FORMAT_VERSION,
        "kind": "episode",
        "seed": record.seed,
        "n_steps": record.n_steps,
        "ped_ids": record.ped_ids.tolist(),
        "desired_speeds": _floats(record.desired_speeds),
        "config": record.config.to_dict(),
    }
    lines = [json.dumps(header, allow_nan=False)]
    obs = record.observations
    bounds = np.searchsorted(obs[:, 0], np.arange(record.n_steps + 1))
    for k in range(record.n_steps):
        peds = np.concatenate(
            [
                record.ped_positions[k],
                record.ped_velocities[k],
                record.ped_headings[k][:, None],
                record.ped_goals[k],
            ],
            axis=1,
        )
        o = obs[bounds[k] : bounds[k + 1]]
        row = {
            "step": k,
            "robot": _floats(record.robot_poses[k]),
            "control": _floats(record.controls[k]),
            "odometry": None if k == 0 else _floats(record.odometry[k]),
            "peds": _floats(peds),
            "obs": [[int(r[1]), float(r[2]), float(r[3])] for r in o],
        }
        lines.append(json.dumps(row, allow_nan=False))
    return lines


def write_episode(record: EpisodeRecord, path) -> Path:
    path = Path(path)
    lines = episode_to_lines(record)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))
        fh.write("\n")
    os.replace(tmp, path)
    return path


def read_episode(path) -> EpisodeRecord:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_episode(text, source=str(path))


def parse_episode(text: str, source: str = "<string>") -> EpisodeRecord:
    ends_clean = text.endswith("\n")
    lines = text.split("\n")
    if ends_clean:
        lines = lines[:-1]
    if not lines or not lines[0].strip():
        raise MalformedEpisodeError(f"{source}: empty episode file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        if len(lines) == 1 and not ends_clean:
            raise TruncatedEpisodeError(f"{source}: header cut short") from exc
        raise MalformedEpisodeError(f"{source}: header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict) or "format_version" not in header:
        raise MalformedEpisodeError(f"{source}: missing format_version")
    if header["format_version"] != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"{source}: format_version {header['format_version']!r} not supported (expected {FORMAT_VERSION})"
        )
    try:
        n_steps = int(header["n_steps"])
        ped_ids = np.array(header["ped_ids"], dtype=np.int64)
        speeds = np.array(header["desired_speeds"], dtype=float)
        config = SimConfig.from_dict(header["config"])
        seed = int(header["seed"])
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedEpisodeError(f"{source}: bad header: {exc}") from exc

    body = lines[1:]
    if len(body) > n_steps:
        raise MalformedEpisodeError(f"{source}: {len(body)} step rows but header declares {n_steps}")
    n = len(ped_ids)
    robot = np.zeros((n_steps, 3))
    controls = np.zeros((n_steps, 2))
    odometry = np.full((n_steps, 2), np.nan)
    peds = np.zeros((n_steps, n, 7))
    obs_rows = []
    for k, line in enumerate(body):
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            if k == len(body) - 1 and not ends_clean:
                raise TruncatedEpisodeError(f"{source}: stream ends mid-record at step {k}") from exc
            raise MalformedEpisodeError(f"{source}: step row {k} is not valid JSON: {exc}") from exc
        try:
            if row["step"] != k:
                raise MalformedEpisodeError(f"{source}: expected step {k}, found {row['step']}")
            robot[k] = row["robot"]
            controls[k] = row["control"]
            if k > 0:
                odometry[k] = row["odometry"]
            peds[k] = np.array(row["peds"], dtype=float).reshape(n, 7)
            obs_rows.extend((k, o[0], o[1], o[2]) for o in row["obs"])
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, MalformedEpisodeError):
                raise
            raise MalformedEpisodeError(f"{source}: bad step row {k}: {exc}") from exc
    if len(body) < n_steps:
        raise TruncatedEpisodeError(f"{source}: {len(body)} of {n_steps} step rows present")
    record = EpisodeRecord(
        config=config,
        seed=seed,
        ped_ids=ped_ids,
        desired_speeds=speeds,
        robot_poses=robot,
        ped_positions=peds[..., 0:2].copy(),
        ped_velocities=peds[..., 2:4].copy(),
        ped_headings=peds[..., 4].copy(),
        ped_goals=peds[..., 5:7].copy(),
        controls=controls,
        odometry=odometry,
        observations=np.array(obs_rows, dtype=float).reshape(-1, 4),
    )
    try:
        record.validate()
    except ValueError as exc:
        raise MalformedEpisodeError(f"{source}: {exc}") from exc
    return record


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    path: str
    split: str
    seed: int


@dataclass
class DatasetManifest:
    root: Path
    master_seed: int
    config: SimConfig
    entries: list[ManifestEntry] = field(default_factory=list)

    @property
    def counts(self) -> dict[str, int]:
        out = {"train": 0, "test": 0}
        for e in self.entries:
            out[e.split] += 1
        return out

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def episode_path(self, entry: ManifestEntry) -> Path:
        return self.root / entry.path

    def load(self, split: str | None = None):
        """Yield ``(entry, record)`` pairs, optionally for one split."""
        for e in self.entries:
            if split is None or e.split == split:
                yield e, read_episode(self.episode_path(e))

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "manifest",
            "master_seed": self.master_seed,
            "counts": self.counts,
            "config": self.config.to_dict(),
            "episodes": [{"path": e.path, "split": e.split, "seed": e.seed} for e in self.entries],
        }

    def __eq__(self, other):
        if not isinstance(other, DatasetManifest):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def write_manifest(manifest: DatasetManifest, path=None) -> Path:
    path = Path(path) if path is not None else manifest.root / "manifest.json"
    path.write_text(json.dumps(manifest.to_dict(), indent=1) + "\n", encoding="utf-8")
    return path


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise EpisodeFormatError(f"{path}: manifest is not valid JSON: {exc}") from exc
    if doc.get("format_version") != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported manifest version {doc.get('format_version')!r}")
    entries = [ManifestEntry(e["path"], e["split"], int(e["seed"])) for e in doc["episodes"]]
    train = {e.path for e in entries if e.split == "train"}
    if any(e.path in train for e in entries if e.split == "test"):
        raise EpisodeFormatError(f"{path}: train and test splits overlap")
    return DatasetManifest(path.parent, int(doc["master_seed"]), SimConfig.from_dict(doc["config"]), entries)


def episode_seed(master_seed: int, index: int) -> int:
    """Independent per-episode seed derived from ``(master_seed, index)``."""
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1, np.uint64)[0])


def _generate_one(args):
    config, seed, path = args
    write_episode(run_episode(config, seed), path)
    return path


def generate_dataset(config: SimConfig, n_train: int, n_test: int, master_seed: int, out_dir, jobs: int = 1):
    """Simulate ``n_train + n_test`` episodes into ``out_dir`` and write the manifest.

    The first ``n_train`` indices form the training split.
    """
    if n_train <= 0 or n_test <= 0:
        raise ValueError("n_train and n_test must be positive")
    errs = config.validate()
    if errs:
        raise ValueError("invalid SimConfig: " + "; ".join(errs))
    root = Path(out_dir)
    (root / "episodes").mkdir(parents=True, exist_ok=True)
    entries, jobs_args = [], []
    for idx in range(n_train + n_test):
        seed = episode_seed(master_seed, idx)
        rel = f"episodes/ep_{idx:05d}.jsonl"
        entries.append(ManifestEntry(rel, "train" if idx < n_train else "test", seed))
        jobs_args.append((config, seed, root / rel))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_generate_one, jobs_args, chunksize=4))
    else:
        for a in jobs_args:
            _generate_one(a)
    manifest = DatasetManifest(root, int(master_seed), config, entries)
    write_manifest(manifest)
    return manifest


# ---------------------------------------------------------------------------
# training samples
# ---------------------------------------------------------------------------


@dataclass
class SceneSample:
    """All pedestrians of one episode at one step: a shared history block."""

    step: int
    ped_ids: np.ndarray
    histories: np.ndarray  # (n, H, 2) positions at steps step-H .. step-1
    targets: np.ndarray  # (n, 2) velocity over step-1 -> step


@dataclass
class TrainingSample:
    ped_id: int
    step: int
    histories: np.ndarray  # (n, H, 2), row ``target_index`` is this pedestrian
    target_index: int
    target: np.ndarray  # (2,) m/s

    @property
    def history(self) -> np.ndarray:
        return self.histories[self.target_index]


def extract_scenes(record: EpisodeRecord, H: int = DEFAULT_HISTORY) -> list[SceneSample]:
    """One scene per step ``i`` with ``H + 1 <= i < n_steps``.

    Histories never include step 0 (the spawn state), so every history point
    was produced by the simulated dynamics.  This yields ``n_steps - H - 1``
    scenes per episode.
    """
    L = record.n_steps
    if L <= H + 1:
        raise ValueError(f"episode of {L} steps is too short for history {H}")
    pos = record.ped_positions
    dt = record.config.dt
    return [
        SceneSample(i, record.ped_ids, pos[i - H : i].transpose(1, 0, 2).copy(), (pos[i] - pos[i - 1]) / dt)
        for i in range(H + 1, L)
    ]


def extract_samples(record: EpisodeRecord, H: int = DEFAULT_HISTORY) -> list[TrainingSample]:
    out = []
    for sc in extract_scenes(record, H):
        for k, pid in enumerate(sc.ped_ids):
            out.append(TrainingSample(int(pid), sc.step, sc.histories, k, sc.targets[k]))
    return out
