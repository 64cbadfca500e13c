"""CSV and JSON persistence for datasets, models and reports."""

import hashlib
import json
from pathlib import Path

import numpy as np

from .flowmatch import FlowSampleConfig, VelocityField
from .gan import GanModel
from .neuralnet import MlpNetwork
from .vmf import VmfMixture

COLUMN_PREFIX = {"cartesian": "x", "unit_sphere": "w", "angles": "theta"}
MODEL_KINDS = ("vmf", "flow_matching", "gan")


class SchemaError(ValueError):
    """A persisted document does not match its expected schema."""


def write_csv(path, rows, representation="cartesian"):
    """Write rows with a ``<prefix>1,...,<prefix>k`` header at 17 significant digits."""
    rows = np.asarray(rows, dtype=float)
    prefix = COLUMN_PREFIX[representation]
    header = ",".join(f"{prefix}{i + 1}" for i in range(rows.shape[1]))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write(header + "\n")
        np.savetxt(fh, rows, fmt="%.17g", delimiter=",")


def read_csv(path):
    """Return ``(rows, representation)``; the representation is inferred from the header."""
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    if not header or not header[0]:
        raise SchemaError(f"{path}: missing header row")
    representation = None
    for rep, prefix in COLUMN_PREFIX.items():
        if all(h == f"{prefix}{i + 1}" for i, h in enumerate(header)):
            representation = rep
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if rows.shape[0] and rows.shape[1] != len(header):
        raise SchemaError(f"{path}: {rows.shape[1]} columns but {len(header)} header fields")
    return rows, representation


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def write_json(path, doc):
    # repr-based float output is the shortest string that round-trips exactly
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True, default=_json_default)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# models


def model_to_dict(model):
    if isinstance(model, VmfMixture):
        return {
            "model_kind": "vmf",
            "d": model.d,
            "K": model.K,
            "weights": model.weights.tolist(),
            "components": [{"mu": c.mu.tolist(), "kappa": c.kappa} for c in model.components],
        }
    if isinstance(model, VelocityField):
        doc = model.net.to_dict()
        doc["model_kind"] = "flow_matching"
        doc["sample_config"] = {
            "steps": model.sample_config.steps,
            "integrator": model.sample_config.integrator,
        }
        return doc
    if isinstance(model, GanModel):
        return {
            "model_kind": "gan",
            "latent_dim": model.latent_dim,
            "generator": model.generator.to_dict(),
            "discriminator": model.discriminator.to_dict(),
        }
    raise TypeError(f"unsupported model type {type(model).__name__}")


def _require(doc, keys, where):
    missing = [k for k in keys if k not in doc]
    if missing:
        raise SchemaError(f"{where}: missing field(s) {', '.join(missing)}")


def _net(doc, where):
    _require(doc, ("layer_dims", "activation", "output_head", "weights", "biases"), where)
    try:
        return MlpNetwork.from_dict(doc)
    except (ValueError, TypeError, IndexError) as exc:
        raise SchemaError(f"{where}: {exc}") from exc


def model_from_dict(doc):
    if not isinstance(doc, dict):
        raise SchemaError("model document must be a JSON object")
    _require(doc, ("model_kind",), "model")
    kind = doc["model_kind"]
    try:
        if kind == "vmf":
            _require(doc, ("d", "K", "weights", "components"), "vmf model")
            comps = doc["components"]
            if len(comps) != doc["K"] or len(doc["weights"]) != doc["K"]:
                raise SchemaError("vmf model: K does not match weights/components")
            means = np.array([c["mu"] for c in comps], dtype=float)
            if means.shape[1] != doc["d"]:
                raise SchemaError("vmf model: mean directions do not have length d")
            return VmfMixture.from_arrays(doc["weights"], means, [c["kappa"] for c in comps])
        if kind == "flow_matching":
            sc = doc.get("sample_config", {})
            return VelocityField(_net(doc, "flow_matching model"), FlowSampleConfig(**sc))
        if kind == "gan":
            _require(doc, ("latent_dim", "generator", "discriminator"), "gan model")
            return GanModel(_net(doc["generator"], "gan generator"),
                            _net(doc["discriminator"], "gan discriminator"),
                            int(doc["latent_dim"]))
    except SchemaError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise SchemaError(f"{kind} model: {exc}") from exc
    raise SchemaError(f"unknown model_kind {kind!r}; expected one of {MODEL_KINDS}")


def save_model(path, model):
    write_json(path, model_to_dict(model))


def load_model(path):
    try:
        doc = read_json(path)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from exc
    return model_from_dict(doc)
