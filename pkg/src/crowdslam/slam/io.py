"""SlamResult persistence and the stochastic-prior rollout stream.

Results are single JSON documents; NaN entries (missing landmark states,
unavailable predictions) are written as ``null``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from crowdslam.slam.pipeline import SlamResult

RESULT_FORMAT = 1

_ARRAYS = {
    "robot": float,
    "ped_ids": np.int64,
    "landmarks": float,
    "pred_step": np.int64,
    "pred_ped": np.int64,
    "pred_origin": float,
    "pred_positions": float,
    "iterations": np.int64,
    "initial_cost": float,
    "final_cost": float,
    "monotone": bool,
}
_OPTIONAL = ("pred_mu", "pred_sigma", "pred_cov")


class ResultFormatError(ValueError):
    pass


def _encode(a: np.ndarray):
    a = np.asarray(a)
    if a.dtype.kind == "f":
        return {"shape": list(a.shape), "data": [None if np.isnan(v) else float(v) for v in a.ravel()]}
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _decode(doc, dtype) -> np.ndarray:
    shape = tuple(doc["shape"])
    data = doc["data"]
    if dtype is float:
        arr = np.array([np.nan if v is None else v for v in data], dtype=float)
    else:
        arr = np.array(data, dtype=dtype)
    return arr.reshape(shape)


def result_to_dict(res: SlamResult) -> dict:
    doc = {
        "format_version": RESULT_FORMAT,
        "kind": "slam_result",
        "method": res.method,
        "episode_seed": int(res.episode_seed),
        "dt": float(res.dt),
        "horizon": int(res.horizon),
        "window": int(res.window),
        "predictions_available": bool(res.predictions_available),
    }
    for name in _ARRAYS:
        doc[name] = _encode(getattr(res, name))
    for name in _OPTIONAL:
        val = getattr(res, name)
        doc[name] = None if val is None else _encode(val)
    return doc


def result_from_dict(doc: dict, source: str = "<dict>") -> SlamResult:
    if doc.get("kind") != "slam_result":
        raise ResultFormatError(f"{source}: not a SLAM result")
    if doc.get("format_version") != RESULT_FORMAT:
        raise ResultFormatError(f"{source}: unsupported result version {doc.get('format_version')!r}")
    try:
        kw = {name: _decode(doc[name], dt) for name, dt in _ARRAYS.items()}
        for name in _OPTIONAL:
            kw[name] = None if doc.get(name) is None else _decode(doc[name], float)
        return SlamResult(
            method=doc["method"],
            episode_seed=int(doc["episode_seed"]),
            dt=float(doc["dt"]),
            horizon=int(doc["horizon"]),
            window=int(doc["window"]),
            predictions_available=bool(doc["predictions_available"]),
            **kw,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ResultFormatError(f"{source}: malformed result ({exc})") from exc


def save_result(res: SlamResult, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(result_to_dict(res), allow_nan=False) + "\n", encoding="utf-8")
    return path


def load_result(path) -> SlamResult:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ResultFormatError(f"{path}: not valid JSON ({exc})") from exc
    return result_from_dict(doc, str(path))


def write_rollout_stream(res: SlamResult, path) -> Path:
    """One JSON line per (emission step, pedestrian): ``mu`` (T, 2) in m/s and ``sigma`` (T, 2, 2)."""
    if res.pred_mu is None or res.pred_sigma is None:
        raise ValueError(f"result of method {res.method!r} carries no rollout statistics")
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for k in range(res.pred_step.shape[0]):
            row = {
                "step": int(res.pred_step[k]),
                "ped_id": int(res.pred_ped[k]),
                "mu": res.pred_mu[k].tolist(),
                "sigma": res.pred_sigma[k].tolist(),
            }
            fh.write(json.dumps(row, allow_nan=False) + "\n")
    return path


def read_rollout_stream(path) -> list[dict]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            row = json.loads(line)
            row["mu"] = np.asarray(row["mu"], dtype=float)
            row["sigma"] = np.asarray(row["sigma"], dtype=float)
            out.append(row)
    return out
