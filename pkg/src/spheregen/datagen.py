"""Copula samplers, margins and correlation matrices for the simulation study.

Copula samplers return ``(n, d)`` arrays of dependent uniforms; margins are
attached column-wise through their quantile functions by
:func:`generate_dataset`.
"""

from dataclasses import dataclass, field
import logging
import warnings

import numpy as np
from scipy import special

from . import geometry

logger = logging.getLogger(__name__)

COPULA_KINDS = (
    "gaussian",
    "gaussian_t_mixture",
    "logistic",
    "logistic_independence_mixture",
    "sparse_gaussian",
)
# Building blocks accepted inside mixtures in addition to the study kinds.
COMPONENT_KINDS = COPULA_KINDS + ("student_t", "independence")

#: Copula numbering used by the study grid.
COPULA_NUMBERS = {
    1: "gaussian",
    2: "gaussian_t_mixture",
    3: "logistic",
    4: "logistic_independence_mixture",
    5: "sparse_gaussian",
}

MARGIN_KINDS = ("laplace", "double_pareto")
REPRESENTATIONS = ("cartesian", "angles", "unit_sphere")

_TINY = np.finfo(float).tiny
_ONE_BELOW = np.nextafter(1.0, 0.0)


# ---------------------------------------------------------------------------
# margins


def _check_open_unit(u):
    u = np.asarray(u, dtype=float)
    if np.any(~(u > 0.0)) or np.any(~(u < 1.0)):
        raise ValueError("probabilities must lie strictly inside (0, 1)")
    return u


def laplace_cdf(x):
    x = np.asarray(x, dtype=float)
    return np.where(x <= 0, 0.5 * np.exp(np.minimum(x, 0.0)), -0.5 * np.expm1(-np.maximum(x, 0.0)) + 0.5)


def laplace_quantile(u):
    u = _check_open_unit(u)
    return np.where(u <= 0.5, np.log(2.0 * np.minimum(u, 0.5)), -np.log(2.0 * (1.0 - np.maximum(u, 0.5))))


def laplace_pdf(x):
    return 0.5 * np.exp(-np.abs(np.asarray(x, dtype=float)))


def double_pareto_cdf(x):
    x = np.asarray(x, dtype=float)
    return np.where(x <= 0, 0.5 / (1.0 - np.minimum(x, 0.0)), 1.0 - 0.5 / (1.0 + np.maximum(x, 0.0)))


def double_pareto_quantile(u):
    u = _check_open_unit(u)
    lo = 1.0 - 0.5 / np.minimum(u, 0.5)
    hi = 0.5 / (1.0 - np.maximum(u, 0.5)) - 1.0
    return np.where(u <= 0.5, lo, hi)


def double_pareto_pdf(x):
    return 0.5 / (1.0 + np.abs(np.asarray(x, dtype=float))) ** 2


@dataclass(frozen=True)
class MarginSpec:
    """Common marginal distribution applied to every coordinate."""

    kind: str = "laplace"

    def __post_init__(self):
        if self.kind not in MARGIN_KINDS:
            raise ValueError(f"unknown margin {self.kind!r}; expected one of {MARGIN_KINDS}")

    def cdf(self, x):
        return laplace_cdf(x) if self.kind == "laplace" else double_pareto_cdf(x)

    def quantile(self, u):
        return laplace_quantile(u) if self.kind == "laplace" else double_pareto_quantile(u)

    def pdf(self, x):
        return laplace_pdf(x) if self.kind == "laplace" else double_pareto_pdf(x)


# ---------------------------------------------------------------------------
# correlation matrices


def validate_correlation(corr, tol=1e-10):
    """Return ``corr`` as an array after checking it is a correlation matrix."""
    corr = np.asarray(corr, dtype=float)
    if corr.ndim != 2 or corr.shape[0] != corr.shape[1] or corr.shape[0] < 2:
        raise ValueError("correlation matrix must be square with d >= 2")
    if not np.all(np.isfinite(corr)):
        raise ValueError("correlation matrix must be finite")
    if np.max(np.abs(corr - corr.T)) > 1e-12:
        raise ValueError("correlation matrix must be symmetric")
    if np.max(np.abs(np.diag(corr) - 1.0)) > 1e-12:
        raise ValueError("correlation matrix must have unit diagonal")
    if np.linalg.eigvalsh(corr).min() < -tol:
        raise ValueError("correlation matrix must be positive semi-definite")
    return corr


def random_correlation(d, rng, eta=1.0):
    """Random correlation matrix by the onion method.

    The matrix is grown one row at a time and every row consumes a fixed
    number of draws, so with the same generator state the leading ``k x k``
    block of a ``d x d`` result equals the ``k x k`` result. Each step draws
    the squared norm of the new partial-correlation vector from
    ``Beta(k/2, eta)``, independent of the final dimension, which is what
    makes the nesting hold.
    """
    if d < 2:
        raise ValueError("d must be at least 2")
    corr = np.ones((1, 1))
    for k in range(1, d):
        y = rng.beta(k / 2.0, eta)
        direction = rng.standard_normal(k)
        direction /= np.linalg.norm(direction)
        chol = np.linalg.cholesky(corr)
        q = np.sqrt(y) * (chol @ direction)
        grown = np.empty((k + 1, k + 1))
        grown[:k, :k] = corr
        grown[k, :k] = grown[:k, k] = q
        grown[k, k] = 1.0
        corr = grown
    return _symmetrize_unit(corr)


def _symmetrize_unit(a):
    a = 0.5 * (a + a.T)
    s = np.sqrt(np.diag(a))
    a = a / np.outer(s, s)
    np.fill_diagonal(a, 1.0)
    return a


def nearest_correlation(a, tol=1e-8, max_iter=100):
    """Higham's alternating projections with Dykstra correction.

    Alternates between the positive semi-definite cone and the set of
    unit-diagonal symmetric matrices until the Frobenius change of an
    iterate drops below ``tol``.

    Returns
    -------
    corr : ndarray
        Valid correlation matrix (rescaled to unit diagonal).
    residual : float
        Frobenius change at the final iteration.
    """
    a = np.asarray(a, dtype=float)
    a = 0.5 * (a + a.T)
    y = a.copy()
    correction = np.zeros_like(a)
    residual = np.inf
    for _ in range(max_iter):
        r = y - correction
        evals, evecs = np.linalg.eigh(r)
        x = (evecs * np.maximum(evals, 0.0)) @ evecs.T
        x = 0.5 * (x + x.T)
        correction = x - r
        y_new = x.copy()
        np.fill_diagonal(y_new, 1.0)
        residual = np.linalg.norm(y_new - y, "fro")
        y = y_new
        if residual < tol:
            break
    else:
        warnings.warn(
            f"nearest_correlation did not converge in {max_iter} iterations "
            f"(residual {residual:.3e})",
            RuntimeWarning,
            stacklevel=2,
        )
    # final PSD clip keeps the smallest eigenvalue non-negative after rescaling
    evals, evecs = np.linalg.eigh(y)
    if evals.min() < 0:
        y = (evecs * np.maximum(evals, 0.0)) @ evecs.T
    return _symmetrize_unit(y), float(residual)


def default_block_sizes(d):
    """Block sizes ``2, 3, 2, 3, ...`` truncated to sum to ``d``."""
    sizes = []
    pattern = (2, 3)
    while sum(sizes) < d:
        sizes.append(min(pattern[len(sizes) % 2], d - sum(sizes)))
    return sizes


def sparse_block_correlation(block_sizes, rng, block_source=random_correlation):
    """Block-diagonal correlation matrix repaired by :func:`nearest_correlation`.

    ``block_source(size, rng)`` supplies each diagonal block; blocks of size
    one are the scalar 1. Variables in different blocks are uncorrelated.
    """
    block_sizes = [int(b) for b in block_sizes]
    if any(b < 1 for b in block_sizes):
        raise ValueError("block sizes must be positive")
    d = sum(block_sizes)
    out = np.zeros((d, d))
    start = 0
    for size in block_sizes:
        block = np.ones((1, 1)) if size == 1 else block_source(size, rng)
        out[start : start + size, start : start + size] = block
        start += size
    corr, residual = nearest_correlation(out)
    logger.debug("sparse block correlation repaired with residual %.3e", residual)
    return corr


# ---------------------------------------------------------------------------
# copula samplers


def sample_gaussian_copula(corr, n, rng):
    corr = validate_correlation(corr)
    chol = np.linalg.cholesky(corr)  # LinAlgError on indefinite input
    z = rng.standard_normal((n, corr.shape[0])) @ chol.T
    return _clip_open(special.ndtr(z))


def t_cdf(t, nu):
    """Student-t CDF via the regularized incomplete beta function."""
    t = np.asarray(t, dtype=float)
    x = nu / (nu + t * t)
    tail = 0.5 * special.betainc(0.5 * nu, 0.5, x)
    return np.where(t > 0, 1.0 - tail, tail)


def sample_t_copula(corr, nu, n, rng):
    if not nu > 0:
        raise ValueError("degrees of freedom must be positive")
    corr = validate_correlation(corr)
    chol = np.linalg.cholesky(corr)
    z = rng.standard_normal((n, corr.shape[0])) @ chol.T
    g = rng.chisquare(nu, size=(n, 1))
    # t = z / sqrt(g / nu), so nu / (nu + t^2) = g / (g + z^2); this avoids
    # overflowing t when the chi-square draw is tiny (common for nu < 1).
    x = g / (g + z * z)
    tail = 0.5 * special.betainc(0.5 * nu, 0.5, x)
    return _clip_open(np.where(z > 0, 1.0 - tail, tail))


def sample_positive_stable(alpha, n, rng):
    """Positive alpha-stable variates with Laplace transform ``exp(-s**alpha)``.

    Chambers-Mallows-Stuck (Kanter) representation.
    """
    v = rng.uniform(0.0, np.pi, size=n)
    e = rng.standard_exponential(n)
    if alpha == 1.0:
        return np.ones(n)
    a = np.sin(alpha * v) / np.sin(v) ** (1.0 / alpha)
    b = (np.sin((1.0 - alpha) * v) / e) ** ((1.0 - alpha) / alpha)
    return a * b


def sample_logistic_copula(alpha, d, n, rng):
    """Logistic (Gumbel) copula by the Marshall-Olkin frailty construction."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    s = sample_positive_stable(alpha, n, rng)
    e = rng.standard_exponential((n, d))
    return _clip_open(np.exp(-((e / s[:, None]) ** alpha)))


def sample_mixture_copula(components, weights, d, n, rng):
    """Row-wise mixture of copulas.

    Every component is sampled for all ``n`` rows (in list order, from the
    same generator) before the row labels are drawn, so a mixture whose
    weight vector puts all mass on the first component reproduces that
    component exactly for the same seed.
    """
    if not components:
        raise ValueError("mixture needs at least one component")
    weights = _check_weights(weights, len(components))
    draws = [sample_copula(c, d, n, rng) for c in components]
    labels = rng.choice(len(components), size=n, p=weights)
    out = np.empty((n, d))
    for k, u in enumerate(draws):
        mask = labels == k
        out[mask] = u[mask]
    return out


def _check_weights(weights, k):
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (k,) or np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
        raise ValueError(f"mixture weights must be a probability vector of length {k}")
    return weights


def _clip_open(u):
    return np.clip(u, _TINY, _ONE_BELOW)


@dataclass(frozen=True)
class CopulaSpec:
    """Dependence model. ``corr`` is required by the Gaussian and t kinds."""

    kind: str
    corr: np.ndarray = None
    alpha: float = 0.5
    nu: float = 0.3
    mix_weights: tuple = (0.5, 0.5)

    def __post_init__(self):
        if self.kind not in COMPONENT_KINDS:
            raise ValueError(f"unknown copula kind {self.kind!r}")
        if self.kind in ("gaussian", "gaussian_t_mixture", "sparse_gaussian", "student_t"):
            if self.corr is None:
                raise ValueError(f"copula {self.kind!r} requires a correlation matrix")
            object.__setattr__(self, "corr", validate_correlation(self.corr))
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if not self.nu > 0:
            raise ValueError("nu must be positive")
        _check_weights(self.mix_weights, len(self.mix_weights))

    @property
    def dim(self):
        return None if self.corr is None else self.corr.shape[0]


def sample_copula(spec, d, n, rng):
    """Draw ``n`` rows of ``d`` dependent uniforms from ``spec``."""
    if spec.dim is not None and spec.dim != d:
        raise ValueError(f"correlation matrix is {spec.dim}-dimensional, requested d={d}")
    kind = spec.kind
    if kind in ("gaussian", "sparse_gaussian"):
        return sample_gaussian_copula(spec.corr, n, rng)
    if kind == "student_t":
        return sample_t_copula(spec.corr, spec.nu, n, rng)
    if kind == "logistic":
        return sample_logistic_copula(spec.alpha, d, n, rng)
    if kind == "independence":
        return _clip_open(rng.uniform(size=(n, d)))
    if kind == "gaussian_t_mixture":
        parts = [
            CopulaSpec("gaussian", corr=spec.corr),
            CopulaSpec("student_t", corr=spec.corr, nu=spec.nu),
        ]
        return sample_mixture_copula(parts, spec.mix_weights, d, n, rng)
    if kind == "logistic_independence_mixture":
        parts = [CopulaSpec("logistic", alpha=spec.alpha), CopulaSpec("independence")]
        return sample_mixture_copula(parts, spec.mix_weights, d, n, rng)
    raise AssertionError(kind)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    """Sample matrix together with the representation its rows live in."""

    rows: np.ndarray
    representation: str = "cartesian"
    seed: int = None
    provenance: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=float)
        if self.rows.ndim != 2:
            raise ValueError("dataset rows must form a 2-d array")
        if self.representation not in REPRESENTATIONS:
            raise ValueError(f"unknown representation {self.representation!r}")
        validate_rows(self.rows, self.representation)

    @property
    def n(self):
        return self.rows.shape[0]

    @property
    def d(self):
        """Ambient dimension (angle datasets carry ``d - 1`` columns)."""
        width = self.rows.shape[1]
        return width + 1 if self.representation == "angles" else width

    def to(self, representation):
        """Convert to another representation (cartesian -> others only loses the radius)."""
        if representation == self.representation:
            return self
        if representation == "cartesian":
            raise ValueError("the radius cannot be recovered from a directional dataset")
        if self.representation == "angles":
            rows = geometry.from_spherical(np.ones(self.n), self.rows)
        elif representation == "unit_sphere":
            rows = geometry.unit_project(self.rows)
        else:
            _, rows = geometry.to_spherical(self.rows)
        return Dataset(rows, representation, self.seed, self.provenance, dict(self.meta))


def validate_rows(rows, representation):
    """Check the per-row invariants of a representation; raise ``ValueError``."""
    rows = np.asarray(rows, dtype=float)
    if not np.all(np.isfinite(rows)):
        raise ValueError("dataset contains non-finite values")
    if representation == "cartesian":
        if rows.shape[1] < 2:
            raise ValueError("cartesian rows need d >= 2 columns")
    elif representation == "unit_sphere":
        if rows.shape[1] < 2:
            raise ValueError("unit-sphere rows need d >= 2 columns")
        if rows.size and np.max(np.abs(np.linalg.norm(rows, axis=1) - 1.0)) > 1e-12:
            raise ValueError("unit-sphere rows must have unit norm")
    elif representation == "angles":
        geometry.check_angles(rows)


def generate_dataset(copula, margin, n, d, seed):
    """Simulate ``n`` Cartesian rows: copula uniforms pushed through the margin quantile."""
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    u = sample_copula(copula, d, n, rng)
    x = margin.quantile(u)
    return Dataset(
        x,
        "cartesian",
        seed=seed,
        provenance=f"copula={copula.kind} margin={margin.kind} n={n} d={d}",
    )
