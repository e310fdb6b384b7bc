"""Versioned JSON weight files.

Layout::

    {"format_version": 1, "kind": "mlp" | "gat", "history_len": H, "dt": ...,
     "radius": R (gat only), "dims": {...}, "arrays": {name: {"shape", "values"}}}
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from crowdslam.neuralnet.models import GatWeights, MlpWeights, SingleAgentPredictor

FORMAT_VERSION = 1


class WeightsFormatError(ValueError):
    pass


def _dims(model) -> dict:
    if isinstance(model, GatWeights):
        return {"f_hist": model.f_hist.dims, "latent": model.latent_dim, "head": model.head.dims}
    return {"mlp": model.net.dims}


def save_weights(model, path) -> Path:
    if isinstance(model, GatWeights):
        params = model.params()
    elif isinstance(model, SingleAgentPredictor):
        params = model.params()
    else:
        raise TypeError(f"cannot save {type(model).__name__}")
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": model.kind,
        "history_len": model.history_len,
        "dt": model.dt,
        "dims": _dims(model),
        "arrays": {k: {"shape": list(v.shape), "values": v.ravel().tolist()} for k, v in params.items()},
    }
    if isinstance(model, GatWeights):
        doc["radius"] = model.radius
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, allow_nan=False) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return path


def load_weights(path, expected_kind: str | None = None, history_len: int | None = None):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise WeightsFormatError(f"{path}: not valid JSON: {exc}") from exc
    if doc.get("format_version") != FORMAT_VERSION:
        raise WeightsFormatError(f"{path}: unsupported format_version {doc.get('format_version')!r}")
    kind = doc.get("kind")
    if expected_kind is not None and kind != expected_kind:
        raise WeightsFormatError(f"{path}: holds '{kind}' weights, expected '{expected_kind}'")
    H = int(doc["history_len"])
    if history_len is not None and H != history_len:
        raise WeightsFormatError(f"{path}: history_len {H} does not match configured {history_len}")
    params = {}
    for name, blob in doc["arrays"].items():
        shape = tuple(blob["shape"])
        vals = np.array(blob["values"], dtype=float)
        if vals.size != int(np.prod(shape)):
            raise WeightsFormatError(f"{path}: array {name} has {vals.size} values for shape {shape}")
        params[name] = vals.reshape(shape)
    try:
        if kind == "gat":
            f_hist = MlpWeights.from_params(params, "hist.")
            head = MlpWeights.from_params(params, "head.")
            model = GatWeights(f_hist, params["W"], params["a"], head, H, float(doc["dt"]), float(doc["radius"]))
        elif kind == "mlp":
            model = SingleAgentPredictor(MlpWeights.from_params(params, "mlp."), H, float(doc["dt"]))
            if model.net.dims[0] != 2 * (H - 1) or model.net.dims[-1] != 2:
                raise ValueError(f"mlp dims {model.net.dims} inconsistent with history_len {H}")
        else:
            raise WeightsFormatError(f"{path}: unknown kind {kind!r}")
    except (KeyError, ValueError) as exc:
        if isinstance(exc, WeightsFormatError):
            raise
        raise WeightsFormatError(f"{path}: {exc}") from exc
    if _dims(model) != doc["dims"]:
        raise WeightsFormatError(f"{path}: header dims {doc['dims']} disagree with arrays {_dims(model)}")
    return model
