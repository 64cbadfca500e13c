"""Scoring generated directional samples against a truth sample.

The circular CRPS of a model sample ``w_1..w_M`` at a point ``v`` is
``mean_m a(w_m, v) - 0.5 * mean_{m,r} a(w_m, w_r)`` with ``a`` the
great-circle distance. The second term depends on the model sample only and
is computed once per :class:`ModelSample`.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
import os

import numpy as np

from . import geometry

#: Target number of pair distances held in memory per work item.
_BLOCK_ELEMENTS = 1 << 21

DEFAULT_QUANTILE_GRID = np.linspace(0.005, 0.995, 199)
DEFAULT_BINS = 50
MAX_ORTHANT_DIM = 20

SHARPNESS_CAVEAT = (
    "skill ratios are reported as-is; expected cCRPS always favours sharper "
    "models when training-sample sizes differ and no correction is applied"
)


def default_workers():
    return max(1, min(os.cpu_count() or 1, 8))


def _unit_rows(x, name):
    x = np.asarray(getattr(x, "rows", x), dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError(f"{name} must be a non-empty (n, d) array")
    return x


def _row_distance_sums(a, b, workers=None):
    """``out[i] = sum_j arccos(a_i . b_j)``, blocked and thread-parallel.

    Each work item writes its own slice of ``out``, so the result does not
    depend on the number of workers.
    """
    n, m = a.shape[0], b.shape[0]
    bt = np.ascontiguousarray(b.T)
    rows_per = max(1, min(n, _BLOCK_ELEMENTS // max(m, 1)))
    cols_per = m if rows_per > 1 else min(m, _BLOCK_ELEMENTS)
    out = np.zeros(n)

    def work(start):
        stop = min(start + rows_per, n)
        acc = np.zeros(stop - start)
        for c0 in range(0, m, cols_per):
            dots = a[start:stop] @ bt[:, c0 : c0 + cols_per]
            np.clip(dots, -1.0, 1.0, out=dots)
            np.arccos(dots, out=dots)
            acc += dots.sum(axis=1)
        out[start:stop] = acc

    starts = range(0, n, rows_per)
    workers = default_workers() if workers is None else workers
    if workers == 1:
        for s in starts:
            work(s)
    else:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(work, starts))
    return out


def _mean_self_distance(w, workers=None):
    """``(1/M^2) sum_{m,r} a(w_m, w_r)`` using the symmetry of the double sum."""
    m = w.shape[0]
    block = max(1, min(m, int(np.sqrt(_BLOCK_ELEMENTS))))
    starts = list(range(0, m, block))
    pairs = [(i, j) for i in range(len(starts)) for j in range(i, len(starts))]
    sums = np.zeros(len(pairs))

    def work(k):
        i, j = pairs[k]
        a = w[starts[i] : starts[i] + block]
        b = w[starts[j] : starts[j] + block]
        dots = a @ b.T
        np.clip(dots, -1.0, 1.0, out=dots)
        np.arccos(dots, out=dots)
        sums[k] = dots.sum() * (1.0 if i == j else 2.0)

    workers = default_workers() if workers is None else workers
    if workers == 1:
        for k in range(len(pairs)):
            work(k)
    else:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(work, range(len(pairs))))
    return float(sums.sum() / (m * m))


class ModelSample:
    """A model sample with its cached self-distance term."""

    def __init__(self, rows, workers=None):
        self.rows = _unit_rows(rows, "model sample")
        self.workers = workers

    @property
    def M(self):
        return self.rows.shape[0]

    @cached_property
    def mean_self_distance(self):
        return _mean_self_distance(self.rows, self.workers)


def _as_model_sample(sample):
    return sample if isinstance(sample, ModelSample) else ModelSample(sample)


def ccrps_at(v, model_sample):
    """Monte Carlo circular CRPS of ``model_sample`` at point(s) ``v``.

    Returns a float for a single point and an array for a batch.
    """
    sample = _as_model_sample(model_sample)
    v_arr = np.asarray(v, dtype=float)
    rows = _unit_rows(v_arr, "query point")
    if rows.shape[1] != sample.rows.shape[1]:
        raise ValueError("query and model sample dimensions differ")
    first = _row_distance_sums(rows, sample.rows, sample.workers) / sample.M
    value = first - 0.5 * sample.mean_self_distance
    return float(value[0]) if v_arr.ndim == 1 else value


@dataclass(frozen=True)
class CcrpsEstimate:
    value: float
    M: int
    N: int


def expected_ccrps(truth_sample, model_sample):
    """Average of :func:`ccrps_at` over the truth rows."""
    sample = _as_model_sample(model_sample)
    truth = _unit_rows(truth_sample, "truth sample")
    if truth.shape[1] != sample.rows.shape[1]:
        raise ValueError("truth and model sample dimensions differ")
    per_point = ccrps_at(truth, sample)
    return CcrpsEstimate(float(np.mean(per_point)), sample.M, truth.shape[0])


def skill_ratio(new_expected, baseline_expected):
    new = getattr(new_expected, "value", new_expected)
    base = getattr(baseline_expected, "value", baseline_expected)
    if not base > 0:
        raise ValueError("baseline expected cCRPS must be positive")
    return float(new / base)


# ---------------------------------------------------------------------------
# orthants


@dataclass(frozen=True)
class OrthantTable:
    """Empirical orthant probabilities indexed by sign bits.

    Orthant index ``k`` has bit ``j`` set when coordinate ``j`` is
    non-negative (exact zeros count as positive).
    """

    probabilities: np.ndarray
    sample_size: int

    @property
    def d(self):
        return int(np.log2(self.probabilities.size))


def orthant_index(x):
    x = np.asarray(x, dtype=float)
    bits = (x >= 0).astype(np.int64)
    return bits @ (1 << np.arange(x.shape[1], dtype=np.int64))


def orthant_probabilities(sample):
    x = _unit_rows(sample, "sample")
    d = x.shape[1]
    if d > MAX_ORTHANT_DIM:
        raise ValueError(f"orthant tables are limited to d <= {MAX_ORTHANT_DIM}")
    counts = np.bincount(orthant_index(x), minlength=1 << d)
    return OrthantTable(counts / x.shape[0], x.shape[0])


@dataclass(frozen=True)
class OrthantComparison:
    pairs: np.ndarray  # (2^d, 2): log(p_truth + 1), log(p_model + 1)

    @property
    def gaps(self):
        return np.abs(self.pairs[:, 0] - self.pairs[:, 1])

    @property
    def max_gap(self):
        return float(self.gaps.max())

    @property
    def mean_gap(self):
        return float(self.gaps.mean())


def orthant_comparison(truth, model):
    if truth.probabilities.shape != model.probabilities.shape:
        raise ValueError("orthant tables have different dimensions")
    pairs = np.column_stack([np.log1p(truth.probabilities), np.log1p(model.probabilities)])
    return OrthantComparison(pairs)


# ---------------------------------------------------------------------------
# marginal angle diagnostics


def _angle_rows(x, name):
    x = np.asarray(getattr(x, "rows", x), dtype=float)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError(f"{name} must be a non-empty (n, d-1) array")
    return x


def rescale_final_angle(theta):
    """Map the last angle from ``(-pi, pi]`` to ``(0, pi]`` via ``(theta + pi) / 2``."""
    theta = np.array(theta, dtype=float)
    theta[..., -1] = (theta[..., -1] + np.pi) / 2.0
    return theta


def qq_payload(truth_angles, model_angles, quantile_grid=DEFAULT_QUANTILE_GRID):
    """Per-angle empirical quantile pairs ``(truth, model)`` on a probability grid.

    Returns a dict with ``grid`` and ``angles``: a list of ``(len(grid), 2)``
    arrays, one per angle, with the last angle rescaled to ``[0, pi]``.
    """
    truth = rescale_final_angle(_angle_rows(truth_angles, "truth angles"))
    model = rescale_final_angle(_angle_rows(model_angles, "model angles"))
    if truth.shape[1] != model.shape[1]:
        raise ValueError("truth and model angle widths differ")
    grid = np.asarray(quantile_grid, dtype=float)
    qt = np.quantile(truth, grid, axis=0)
    qm = np.quantile(model, grid, axis=0)
    return {"grid": grid, "angles": [np.column_stack([qt[:, i], qm[:, i]]) for i in range(truth.shape[1])]}


def angle_ranges(n_angles):
    return [(0.0, np.pi)] * (n_angles - 1) + [(-np.pi, np.pi)]


def histogram_payload(angles, bins=DEFAULT_BINS):
    """Density-normalised histograms on fixed edges spanning each angle's range."""
    if bins < 1:
        raise ValueError("bins must be at least 1")
    x = _angle_rows(angles, "angles")
    out = []
    for i, (lo, hi) in enumerate(angle_ranges(x.shape[1])):
        edges = np.linspace(lo, hi, bins + 1)
        counts, _ = np.histogram(x[:, i], bins=edges)
        widths = np.diff(edges)
        out.append({"edges": edges, "density": counts / (x.shape[0] * widths)})
    return out


def total_variation(hist_a, hist_b):
    """Total-variation distance between two histograms on the same edges."""
    widths = np.diff(hist_a["edges"])
    return 0.5 * float(np.sum(np.abs(hist_a["density"] - hist_b["density"]) * widths))


# ---------------------------------------------------------------------------
# report


@dataclass
class ModelScore:
    name: str
    expected_ccrps: float
    skill: float
    M: int
    N: int


@dataclass
class EvalReport:
    baseline: str
    models: list
    orthants: dict
    qq: dict
    histograms: dict
    meta: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "baseline": self.baseline,
            "models": [vars(m) for m in self.models],
            "orthants": self.orthants,
            "qq": self.qq,
            "histograms": self.histograms,
            "meta": self.meta,
        }


def evaluate_samples(truth_unit, model_units, baseline="vmf", bins=DEFAULT_BINS,
                     quantile_grid=DEFAULT_QUANTILE_GRID, workers=None):
    """Score every model sample against the truth sample.

    Parameters
    ----------
    truth_unit : (N, d) array
    model_units : dict of name -> (M, d) array
    baseline : str
        Model whose expected cCRPS is the skill denominator.
    """
    if baseline not in model_units:
        raise ValueError(f"baseline {baseline!r} is not among the models {sorted(model_units)}")
    truth = _unit_rows(truth_unit, "truth sample")
    d = truth.shape[1]
    for name, rows in model_units.items():
        if np.asarray(rows).shape[1] != d:
            raise ValueError(f"model sample {name!r} has dimension {np.asarray(rows).shape[1]}, truth has {d}")
    scores = {name: expected_ccrps(truth, ModelSample(rows, workers)) for name, rows in model_units.items()}
    base = scores[baseline].value
    models = [
        ModelScore(name, est.value, skill_ratio(est.value, base), est.M, est.N)
        for name, est in scores.items()
    ]

    _, truth_angles = geometry.to_spherical(truth)
    truth_orth = orthant_probabilities(truth) if d <= MAX_ORTHANT_DIM else None
    orthants = {"d": d, "truth": None if truth_orth is None else truth_orth.probabilities.tolist(), "models": {}}
    qq = {"grid": np.asarray(quantile_grid).tolist(), "models": {}}
    hist = {"truth": [_hist_json(h) for h in histogram_payload(truth_angles, bins)], "models": {}}
    for name, rows in model_units.items():
        _, angles = geometry.to_spherical(np.asarray(rows, dtype=float))
        if truth_orth is not None:
            model_orth = orthant_probabilities(rows)
            cmp = orthant_comparison(truth_orth, model_orth)
            orthants["models"][name] = {
                "probabilities": model_orth.probabilities.tolist(),
                "pairs": cmp.pairs.tolist(),
                "max_gap": cmp.max_gap,
                "mean_gap": cmp.mean_gap,
            }
        payload = qq_payload(truth_angles, angles, quantile_grid)
        qq["models"][name] = [a.tolist() for a in payload["angles"]]
        hist["models"][name] = [_hist_json(h) for h in histogram_payload(angles, bins)]
    meta = {"sharpness_caveat": SHARPNESS_CAVEAT}
    return EvalReport(baseline, models, orthants, qq, hist, meta)


def _hist_json(h):
    return {"edges": h["edges"].tolist(), "density": h["density"].tolist()}
