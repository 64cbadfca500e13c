"""Experiment stages: simulate -> fit -> generate -> evaluate, and study grids.

Every stage writes under ``cfg.output_dir`` and records the relative path
and SHA-256 of each file it produced in ``manifest.json``::

    data/     train_{cartesian,unit_sphere,angles}.csv, truth_*.csv
    models/   <model>.json, <model>_history.csv
    samples/  <model>_unit_sphere.csv, <model>_angles.csv
    eval/     report.json, summary.csv, orthants.csv, qq_<model>.csv, hist_<model>.csv

Nothing time-dependent goes into any output, so rerunning a stage with the
same config reproduces the same checksums.
"""

from concurrent.futures import ProcessPoolExecutor
import csv
from dataclasses import replace
import logging
from pathlib import Path

import numpy as np

from . import __version__, geometry
from .config import MODEL_NAMES, ConfigError, derive_seed, format_config
from .datagen import (
    CopulaSpec,
    Dataset,
    MarginSpec,
    default_block_sizes,
    generate_dataset,
    random_correlation,
    sparse_block_correlation,
    validate_rows,
)
from .evaluation import evaluate_samples
from .flowmatch import FlowSampleConfig, VelocityField, sample_flow, train_flow_matching
from .gan import GanModel, GanTrainConfig, sample_gan, train_gan
from .io import SchemaError, load_model, read_csv, read_json, save_model, sha256, write_csv, write_json
from .neuralnet import TrainConfig
from .vmf import EmConfig, VmfMixture, fit_vmf_mixture, sample_vmf_mixture

logger = logging.getLogger(__name__)

#: Order of models in summary tables (flow matching, GAN, then the baseline).
SUMMARY_ORDER = ("flow_matching", "gan", "vmf")
MANIFEST = "manifest.json"


class StageError(RuntimeError):
    """A pipeline stage could not complete."""


# ---------------------------------------------------------------------------
# manifest


class Manifest:
    def __init__(self, root, cfg=None):
        self.root = Path(root)
        path = self.root / MANIFEST
        self.doc = read_json(path) if path.exists() else {}
        self.doc.setdefault("files", {})
        self.doc.setdefault("failures", {})
        self.doc.setdefault("seeds", {})
        self.doc["tool_version"] = __version__
        if cfg is not None:
            self.doc["config_hash"] = cfg.config_hash()

    def record(self, path):
        rel = Path(path).resolve().relative_to(self.root.resolve()).as_posix()
        self.doc["files"][rel] = sha256(path)

    def fail(self, stage, name, message):
        self.doc["failures"].setdefault(stage, {})[name] = message

    def clear_failure(self, stage, name):
        self.doc["failures"].get(stage, {}).pop(name, None)
        if not self.doc["failures"].get(stage, True):
            del self.doc["failures"][stage]

    def save(self):
        write_json(self.root / MANIFEST, self.doc)


def verify_manifest(root):
    """Return the manifest entries whose file is missing or whose checksum differs."""
    root = Path(root)
    doc = read_json(root / MANIFEST)
    bad = []
    for rel, digest in sorted(doc.get("files", {}).items()):
        path = root / rel
        if not path.exists():
            bad.append((rel, "missing"))
        elif sha256(path) != digest:
            bad.append((rel, "checksum mismatch"))
    return bad


# ---------------------------------------------------------------------------
# simulate


def resolve_copula(cfg):
    """Build the ``CopulaSpec`` for a config; matrices come from ``corr_seed``."""
    c = cfg.copula
    corr = None
    rng = np.random.default_rng(c.corr_seed)
    if c.kind in ("gaussian", "gaussian_t_mixture"):
        corr = random_correlation(cfg.d, rng)
    elif c.kind == "sparse_gaussian":
        corr = sparse_block_correlation(c.blocks or default_block_sizes(cfg.d), rng)
    return CopulaSpec(c.kind, corr=corr, alpha=c.alpha, nu=c.nu, mix_weights=tuple(c.weights))


def _write_representations(out, stem, cartesian, manifest):
    ds = Dataset(cartesian, "cartesian")
    for rep in ("cartesian", "unit_sphere", "angles"):
        path = out / f"{stem}_{rep}.csv"
        write_csv(path, ds.to(rep).rows, rep)
        manifest.record(path)


def _user_split(cfg):
    rows, rep = read_csv(cfg.data_csv)
    if rep not in (None, "cartesian"):
        raise SchemaError(f"{cfg.data_csv}: user data must be Cartesian (header x1,...,xd)")
    try:
        validate_rows(rows, "cartesian")
    except ValueError as exc:
        raise SchemaError(f"{cfg.data_csv}: {exc}") from exc
    if rows.shape[1] != cfg.d:
        raise ConfigError(f"{cfg.data_csv} has {rows.shape[1]} columns but d = {cfg.d}")
    if np.any(np.linalg.norm(rows, axis=1) == 0):
        raise SchemaError(f"{cfg.data_csv}: rows at the origin have no direction")
    rng = np.random.default_rng(cfg.stage_seed("data"))
    rows = rows[rng.permutation(rows.shape[0])]
    n_train = int(round(cfg.train_fraction * rows.shape[0]))
    if n_train < 1 or n_train >= rows.shape[0]:
        raise ConfigError("train_fraction leaves an empty train or truth split")
    return rows[:n_train], rows[n_train:]


def cmd_simulate(cfg):
    """Write the training set and the truth sample in all three representations.

    Simulated training data has ``cfg.n`` rows; the truth sample has
    ``cfg.eval.N`` rows from the same law with an independent seed. With
    ``cfg.data_csv`` set, the user file is shuffled and split instead.
    """
    cfg.validate()
    if cfg.data_csv:
        train, truth = _user_split(cfg)
        seeds = {"data": cfg.stage_seed("data")}
    else:
        copula = resolve_copula(cfg)
        margin = MarginSpec(cfg.margin)
        seeds = {"data": cfg.stage_seed("data"), "truth": cfg.stage_seed("truth")}
        train = generate_dataset(copula, margin, cfg.n, cfg.d, seeds["data"]).rows
        truth = generate_dataset(copula, margin, cfg.eval.N, cfg.d, seeds["truth"]).rows
    root = Path(cfg.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(root, cfg)
    manifest.doc["seeds"].update(seeds)
    (root / "config.ini").write_text(format_config(cfg))
    manifest.record(root / "config.ini")
    _write_representations(root / "data", "train", train, manifest)
    _write_representations(root / "data", "truth", truth, manifest)
    manifest.save()
    return manifest


# ---------------------------------------------------------------------------
# fit


def model_seed(stage_seed, name):
    """Per-model seed, independent of which other models are requested."""
    return derive_seed(stage_seed, MODEL_NAMES.index(name))


def fit_model(name, cfg, unit_rows, angle_rows, seed):
    if name == "vmf":
        v = cfg.vmf
        return fit_vmf_mixture(unit_rows, EmConfig(v.K, v.iterations, v.kappa_cap, init_seed=seed))
    if name == "flow_matching":
        f = cfg.flow_matching
        tc = TrainConfig(f.max_epochs, f.patience, f.batch_size, f.val_fraction, seed, f.lr)
        return train_flow_matching(unit_rows, tc, tuple(f.hidden), FlowSampleConfig(f.steps, f.integrator))
    if name == "gan":
        g = cfg.gan
        gc = GanTrainConfig(g.epochs, g.batch_size, g.lr, seed, g.beta1)
        return train_gan(angle_rows, gc, tuple(g.hidden), g.latent_dim or None)
    raise ConfigError(f"unknown model {name!r}")


def history_rows(model):
    """``(header, rows)`` for a model's training history."""
    if isinstance(model, VmfMixture):
        return ["sweep", "log_likelihood"], [[i, ll] for i, ll in enumerate(model.history)]
    if isinstance(model, VelocityField):
        return ["epoch", "train_loss", "val_loss"], [
            [h["epoch"], h["train_loss"], h["val_loss"]] for h in model.history
        ]
    if isinstance(model, GanModel):
        return ["epoch", "d_loss", "g_loss"], [[h["epoch"], h["d_loss"], h["g_loss"]] for h in model.history]
    raise TypeError(type(model).__name__)


def _write_table(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def cmd_fit(cfg, models=None):
    """Fit the requested models on ``data/train_*``; failures are recorded, not raised.

    Returns the list of models that failed.
    """
    cfg.validate()
    models = tuple(models or cfg.models)
    root = Path(cfg.output_dir)
    unit, _ = read_csv(root / "data" / "train_unit_sphere.csv")
    angles, _ = read_csv(root / "data" / "train_angles.csv")
    manifest = Manifest(root, cfg)
    seed = cfg.stage_seed("fit")
    manifest.doc["seeds"]["fit"] = seed
    failed = []
    for name in models:
        if name not in MODEL_NAMES:
            raise ConfigError(f"unknown model {name!r}")
        logger.info("fitting %s", name)
        try:
            model = fit_model(name, cfg, unit, angles, model_seed(seed, name))
        except (ValueError, ArithmeticError, RuntimeError) as exc:
            logger.error("fitting %s failed: %s", name, exc)
            manifest.fail("fit", name, f"{type(exc).__name__}: {exc}")
            failed.append(name)
            continue
        manifest.clear_failure("fit", name)
        path = root / "models" / f"{name}.json"
        save_model(path, model)
        manifest.record(path)
        header, rows = history_rows(model)
        hpath = root / "models" / f"{name}_history.csv"
        _write_table(hpath, header, rows)
        manifest.record(hpath)
    manifest.save()
    return failed


# ---------------------------------------------------------------------------
# generate


def sample_model(model, n, rng):
    """``(unit_rows, angle_rows)`` for ``n`` draws from a fitted model."""
    if isinstance(model, VmfMixture):
        unit = sample_vmf_mixture(model, n, rng)
        return unit, geometry.to_spherical(unit)[1]
    if isinstance(model, VelocityField):
        unit = sample_flow(model, n, rng=rng)
        return unit, geometry.to_spherical(unit)[1]
    if isinstance(model, GanModel):
        angles = sample_gan(model, n, rng)
        return geometry.from_spherical(np.ones(n), angles), angles
    raise TypeError(type(model).__name__)


def cmd_generate(model_file, n, seed, out_dir, name=None):
    """Sample ``n`` rows from a model file into ``<name>_unit_sphere.csv`` and ``<name>_angles.csv``."""
    if n < 1:
        raise ConfigError("n must be at least 1")
    model = load_model(model_file)
    name = name or Path(model_file).stem
    unit, angles = sample_model(model, int(n), np.random.default_rng(seed))
    out = Path(out_dir)
    paths = (out / f"{name}_unit_sphere.csv", out / f"{name}_angles.csv")
    write_csv(paths[0], unit, "unit_sphere")
    write_csv(paths[1], angles, "angles")
    return paths


def generate_stage(cfg, models=None):
    """Draw ``cfg.eval.M`` rows from every fitted model; returns models that failed."""
    root = Path(cfg.output_dir)
    manifest = Manifest(root, cfg)
    seed = cfg.stage_seed("generate")
    manifest.doc["seeds"]["generate"] = seed
    failed = []
    for name in tuple(models or cfg.models):
        path = root / "models" / f"{name}.json"
        if not path.exists():
            logger.warning("no fitted %s model; skipping generation", name)
            continue
        try:
            written = cmd_generate(path, cfg.eval.M, model_seed(seed, name), root / "samples", name)
        except (ValueError, ArithmeticError, RuntimeError) as exc:
            logger.error("sampling %s failed: %s", name, exc)
            manifest.fail("generate", name, f"{type(exc).__name__}: {exc}")
            failed.append(name)
            continue
        for p in written:
            manifest.record(p)
    manifest.save()
    return failed


# ---------------------------------------------------------------------------
# evaluate


def summary_rows(report):
    rank = {name: i for i, name in enumerate(SUMMARY_ORDER)}
    scores = sorted(report.models, key=lambda s: (rank.get(s.name, len(rank)), s.name))
    return [[s.name, s.expected_ccrps, s.skill, s.M, s.N] for s in scores]


def cmd_evaluate(truth_file, sample_files, baseline="vmf", eval_cfg=None, out_dir="eval"):
    """Score model samples against a truth sample and write the report files.

    ``sample_files`` maps model name to a unit-sphere CSV. Returns the list
    of written paths.
    """
    truth, _ = read_csv(truth_file)
    samples = {}
    for name, path in sample_files.items():
        rows, _ = read_csv(path)
        if rows.shape[1] != truth.shape[1]:
            raise StageError(f"{path} has d={rows.shape[1]} but the truth sample has d={truth.shape[1]}")
        samples[name] = rows
    if baseline not in samples:
        raise StageError(f"baseline {baseline!r} is not among the evaluated models {sorted(samples)}")
    kwargs = {}
    if eval_cfg is not None:
        kwargs = dict(bins=eval_cfg.bins, quantile_grid=eval_cfg.quantile_grid,
                      workers=eval_cfg.workers or None)
    try:
        report = evaluate_samples(truth, samples, baseline, **kwargs)
    except ValueError as exc:
        raise StageError(str(exc)) from exc
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "report.json", out / "summary.csv", out / "orthants.csv"]
    write_json(written[0], report.to_dict())
    _write_table(written[1], ["model", "expected_ccrps", "skill", "M", "N"], summary_rows(report))
    orth = report.orthants
    if orth["truth"] is not None:
        names = [n for n in SUMMARY_ORDER if n in orth["models"]] + sorted(
            n for n in orth["models"] if n not in SUMMARY_ORDER)
        rows = [[j, orth["truth"][j]] + [orth["models"][n]["probabilities"][j] for n in names]
                for j in range(len(orth["truth"]))]
        _write_table(written[2], ["orthant", "truth"] + names, rows)
    else:
        written.pop()
    for name, per_angle in report.qq["models"].items():
        path = out / f"qq_{name}.csv"
        grid = report.qq["grid"]
        k = len(per_angle)
        rows = [[q] + [v for i in range(k) for v in per_angle[i][qi]] for qi, q in enumerate(grid)]
        header = ["quantile"] + [f"{s}_theta{i + 1}" for i in range(k) for s in ("truth", "model")]
        _write_table(path, header, rows)
        written.append(path)
    for name, per_angle in report.histograms["models"].items():
        path = out / f"hist_{name}.csv"
        rows = []
        for i, h in enumerate(per_angle):
            truth_h = report.histograms["truth"][i]
            for b in range(len(h["density"])):
                rows.append([i + 1, h["edges"][b], h["edges"][b + 1], truth_h["density"][b], h["density"][b]])
        _write_table(path, ["angle", "lower", "upper", "truth_density", "model_density"], rows)
        written.append(path)
    return written


def evaluate_stage(cfg):
    root = Path(cfg.output_dir)
    samples = {
        name: root / "samples" / f"{name}_unit_sphere.csv"
        for name in cfg.models
        if (root / "samples" / f"{name}_unit_sphere.csv").exists()
    }
    if not samples:
        raise StageError("no model samples to evaluate")
    manifest = Manifest(root, cfg)
    manifest.doc["seeds"]["eval"] = cfg.stage_seed("eval")
    try:
        written = cmd_evaluate(root / "data" / "truth_unit_sphere.csv", samples, cfg.eval.baseline,
                               cfg.eval, root / "eval")
    except StageError as exc:
        manifest.fail("evaluate", "report", str(exc))
        manifest.save()
        raise
    manifest.clear_failure("evaluate", "report")
    for p in written:
        manifest.record(p)
    manifest.save()
    return read_json(root / "eval" / "report.json")


def run_pipeline(cfg):
    """All four stages in sequence. Returns ``(report_dict or None, failed models)``."""
    cmd_simulate(cfg)
    failed = cmd_fit(cfg)
    failed += generate_stage(cfg)
    report = evaluate_stage(cfg)
    return report, failed


# ---------------------------------------------------------------------------
# study grid


def cell_name(copula, margin, n, d):
    return f"{copula}_{margin}_n{n}_d{d}"


def cell_config(grid, copula, margin, n, d, root):
    base = grid.base
    return replace(
        base,
        copula=replace(base.copula, kind=copula, blocks=()),
        margin=margin, n=n, d=d,
        output_dir=str(Path(root) / "cells" / cell_name(copula, margin, n, d)),
    )


def _run_cell(cfg):
    try:
        report, failed = run_pipeline(cfg)
    except (ConfigError, StageError, SchemaError, OSError, ValueError, ArithmeticError) as exc:
        return None, [f"{type(exc).__name__}: {exc}"]
    return report, [f"model {m} failed" for m in failed]


def cmd_study(grid, out_dir=None, jobs=1):
    """Run every grid cell and write ``study_summary.csv``; returns the failed cell names.

    The summary has one row per cell and configured model, keyed by
    ``(copula, margin, n, d, model)``; models without a score are marked
    ``failed`` with empty scores.
    """
    root = Path(out_dir or grid.base.output_dir)
    cells = list(grid.cells())
    configs = [cell_config(grid, *cell, root) for cell in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, configs))
    else:
        results = [_run_cell(c) for c in configs]
    rows = []
    failed_cells = []
    for cell, (report, problems) in zip(cells, results):
        if problems:
            logger.error("cell %s: %s", cell_name(*cell), "; ".join(problems))
            failed_cells.append(cell_name(*cell))
        scores = {m["name"]: m for m in (report or {}).get("models", [])}
        for model in [m for m in SUMMARY_ORDER if m in grid.base.models]:
            s = scores.get(model)
            if s is None:
                rows.append([*cell, model, "", "", "failed"])
            else:
                rows.append([*cell, model, s["expected_ccrps"], s["skill"], "ok"])
    root.mkdir(parents=True, exist_ok=True)
    _write_table(root / "study_summary.csv",
                 ["copula", "margin", "n", "d", "model", "expected_ccrps", "skill", "status"], rows)
    return failed_cells


# ---------------------------------------------------------------------------
# validate


def validate_file(path):
    """Check one output file; raises ``SchemaError`` describing the first problem."""
    path = Path(path)
    if path.is_dir():
        bad = verify_manifest(path)
        if bad:
            raise SchemaError("; ".join(f"{rel}: {why}" for rel, why in bad))
        return "manifest"
    if path.suffix == ".csv":
        rows, rep = read_csv(path)
        if rep is None:
            raise SchemaError(f"{path}: header is not x*, w* or theta* columns")
        try:
            validate_rows(rows, rep)
        except ValueError as exc:
            raise SchemaError(f"{path}: {exc}") from exc
        return rep
    if path.suffix == ".json":
        load_model(path)
        return "model"
    raise SchemaError(f"{path}: unrecognised file type")
