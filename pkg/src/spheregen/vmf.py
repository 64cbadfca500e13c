"""von Mises-Fisher distributions and mixtures fitted by EM."""

from dataclasses import dataclass, field
import logging

import numpy as np
from scipy import special

logger = logging.getLogger(__name__)

DEFAULT_KAPPA_CAP = 5e3


def _rows(data):
    rows = getattr(data, "rows", data)
    rows = np.asarray(rows, dtype=float)
    if rows.ndim == 1:
        rows = rows[None, :]
    return rows


def log_bessel_iv(order, kappa):
    """``log I_order(kappa)`` for ``kappa >= 0``, stable for large arguments."""
    kappa = np.asarray(kappa, dtype=float)
    with np.errstate(divide="ignore"):
        scaled = special.ive(order, kappa)
        out = np.log(scaled) + kappa
    # ive underflows for tiny kappa at high order; use the leading series terms
    small = ~(scaled > 1e-280)
    if np.any(small):
        k = np.where(small, kappa, 1.0)
        q = 0.25 * k * k
        series = (
            order * np.log(0.5 * k)
            - special.gammaln(order + 1.0)
            + np.log1p(q / (order + 1.0) * (1.0 + q / (2.0 * (order + 2.0))))
        )
        out = np.where(small, series, out)
    return out


def log_norm_const(d, kappa):
    """``log c_d(kappa)``; the ``kappa -> 0`` limit is the uniform density."""
    kappa = np.asarray(kappa, dtype=float)
    nu = d / 2.0 - 1.0
    log_uniform = special.gammaln(d / 2.0) - np.log(2.0) - (d / 2.0) * np.log(np.pi)
    k = np.where(kappa > 0, kappa, 1.0)
    with np.errstate(divide="ignore"):
        general = nu * np.log(k) - (d / 2.0) * np.log(2.0 * np.pi) - log_bessel_iv(nu, k)
    return np.where(kappa > 0, general, log_uniform)


def mean_resultant_length(d, kappa):
    """``A_d(kappa) = I_{d/2}(kappa) / I_{d/2-1}(kappa)``, the expected ``mu . x``."""
    kappa = np.asarray(kappa, dtype=float)
    k = np.where(kappa > 0, kappa, 1.0)
    ratio = np.exp(log_bessel_iv(d / 2.0, k) - log_bessel_iv(d / 2.0 - 1.0, k))
    return np.where(kappa > 0, ratio, 0.0)


@dataclass(frozen=True)
class VmfComponent:
    mu: np.ndarray
    kappa: float

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        if mu.ndim != 1 or mu.size < 2:
            raise ValueError("mean direction must be a vector with d >= 2")
        if abs(np.linalg.norm(mu) - 1.0) > 1e-12:
            raise ValueError("mean direction must be a unit vector")
        if not (np.isfinite(self.kappa) and self.kappa >= 0):
            raise ValueError("kappa must be finite and non-negative")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "kappa", float(self.kappa))

    @property
    def d(self):
        return self.mu.size


@dataclass(frozen=True)
class VmfMixture:
    """Finite vMF mixture.

    After :func:`fit_vmf_mixture`, ``history`` holds the log-likelihood at
    the start of every sweep plus the final value, and ``n_reinitialized``
    counts degenerate components that were re-seeded.
    """

    components: tuple
    weights: np.ndarray
    history: tuple = field(default=(), compare=False)
    n_reinitialized: int = field(default=0, compare=False)

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise ValueError("a mixture needs at least one component")
        weights = np.asarray(self.weights, dtype=float)
        if weights.shape != (len(comps),):
            raise ValueError("one weight per component is required")
        if np.any(weights < 0) or np.any(weights > 1) or abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must form a probability vector")
        if len({c.d for c in comps}) != 1:
            raise ValueError("components must share a dimension")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "weights", weights)

    @property
    def K(self):
        return len(self.components)

    @property
    def d(self):
        return self.components[0].d

    @property
    def means(self):
        return np.stack([c.mu for c in self.components])

    @property
    def kappas(self):
        return np.array([c.kappa for c in self.components])

    @classmethod
    def from_arrays(cls, weights, means, kappas, history=()):
        weights = np.asarray(weights, dtype=float)
        weights = weights / weights.sum()
        comps = tuple(VmfComponent(m / np.linalg.norm(m), k) for m, k in zip(means, kappas))
        return cls(comps, weights, tuple(history))


def vmf_log_density(x, comp):
    """Log density of ``comp`` at unit vector(s) ``x``."""
    if comp.kappa < 0:
        raise ValueError("kappa must be non-negative")
    x = np.asarray(x, dtype=float)
    return log_norm_const(comp.d, comp.kappa) + comp.kappa * (x @ comp.mu)


def _component_log_densities(x, means, kappas):
    d = x.shape[1]
    return log_norm_const(d, kappas)[None, :] + (x @ means.T) * kappas[None, :]


def _householder_from_pole(mu, x):
    """Reflect rows of ``x`` so that ``e_1`` maps onto ``mu``."""
    u = -mu.copy()
    u[0] += 1.0
    norm2 = u @ u
    if norm2 < 1e-30:
        return x
    return x - np.outer(x @ u, u) * (2.0 / norm2)


def sample_vmf(comp, n, rng, max_rounds=1_000_000):
    """Draw ``n`` points from a vMF law with Wood's rejection sampler."""
    d, kappa = comp.d, comp.kappa
    m1 = d - 1.0
    # same value as (-2k + sqrt(4k^2 + (d-1)^2)) / (d-1) without the cancellation
    b = m1 / (2.0 * kappa + np.sqrt(4.0 * kappa * kappa + m1 * m1))
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + m1 * np.log(1.0 - x0 * x0)
    w = np.empty(n)
    pending = np.arange(n)
    rounds = 0
    while pending.size:
        rounds += 1
        if rounds > max_rounds:
            raise RuntimeError("vMF rejection sampler exceeded its iteration cap")
        k = pending.size
        z = rng.beta(m1 / 2.0, m1 / 2.0, size=k)
        cand = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.uniform(size=k)
        ok = kappa * cand + m1 * np.log(1.0 - x0 * cand) - c >= np.log(u)
        w[pending[ok]] = cand[ok]
        pending = pending[~ok]
    v = rng.standard_normal((n, d - 1))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    out = np.empty((n, d))
    out[:, 0] = w
    out[:, 1:] = np.sqrt(np.clip(1.0 - w * w, 0.0, None))[:, None] * v
    out = _householder_from_pole(comp.mu, out)
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def sample_vmf_mixture(model, n, rng):
    """Component labels by weight, then :func:`sample_vmf` per component."""
    if model.K == 1:
        return sample_vmf(model.components[0], n, rng)
    labels = rng.choice(model.K, size=n, p=model.weights)
    out = np.empty((n, model.d))
    for k, comp in enumerate(model.components):
        idx = np.flatnonzero(labels == k)
        if idx.size:
            out[idx] = sample_vmf(comp, idx.size, rng)
    return out


def mixture_log_likelihood(data, model):
    x = _rows(data)
    if x.shape[1] != model.d:
        raise ValueError("data and model dimensions differ")
    with np.errstate(divide="ignore"):
        logw = np.log(model.weights)
    logp = _component_log_densities(x, model.means, model.kappas) + logw[None, :]
    return float(special.logsumexp(logp, axis=1).sum())


def n_free_parameters(K, d):
    """``K - 1`` weights, ``d - 1`` per mean direction and one kappa per component."""
    return K * d - 1


def bic(data, model):
    n = _rows(data).shape[0]
    return -2.0 * mixture_log_likelihood(data, model) + n_free_parameters(model.K, model.d) * np.log(n)


# ---------------------------------------------------------------------------
# EM


@dataclass(frozen=True)
class EmConfig:
    K: int = 100
    iterations: int = 10
    kappa_cap: float = DEFAULT_KAPPA_CAP
    init_seed: int = 0

    def __post_init__(self):
        if self.K < 1 or self.iterations < 1:
            raise ValueError("K and iterations must be at least 1")
        if not self.kappa_cap > 0:
            raise ValueError("kappa_cap must be positive")


def estimate_kappa(rbar, d, cap=DEFAULT_KAPPA_CAP, newton_steps=3):
    """Solve ``A_d(kappa) = rbar`` for the concentration.

    Starts from Banerjee's approximation ``(rbar d - rbar^3) / (1 - rbar^2)``
    and polishes it with a few Newton steps so that the M-step is an exact
    maximiser (which keeps EM monotone). Results are clipped to ``[0, cap]``.
    """
    rbar = np.clip(np.asarray(rbar, dtype=float), 0.0, 1.0 - 1e-15)
    kappa = (rbar * d - rbar**3) / (1.0 - rbar * rbar)
    kappa = np.clip(kappa, 0.0, cap)
    for _ in range(newton_steps):
        live = (kappa > 0) & (kappa < cap)
        if not np.any(live):
            break
        k = np.where(live, kappa, 1.0)
        a = mean_resultant_length(d, k)
        slope = 1.0 - a * a - (d - 1.0) * a / k
        step = np.where(live & (slope > 0), (a - rbar) / np.where(slope > 0, slope, 1.0), 0.0)
        kappa = np.clip(kappa - step, 0.0, cap)
    return kappa


def _spread_init(x, K, rng):
    """k-means++ style seeding with cosine dissimilarity; returns K distinct row indices."""
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    dist = 1.0 - x @ x[chosen[0]]
    for _ in range(1, K):
        weights = np.clip(dist, 0.0, None)
        weights[chosen] = 0.0
        total = weights.sum()
        if total <= 0:
            pool = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(pool))
        else:
            nxt = int(rng.choice(n, p=weights / total))
        chosen.append(nxt)
        dist = np.minimum(dist, 1.0 - x @ x[nxt])
    return np.array(chosen)


def m_step(x, resp, means, kappa_cap, rng):
    """Weights, mean directions and concentrations from responsibilities.

    Components whose responsibility mass is below ``1e-6 * n`` are re-seeded
    at random data points with ``kappa = 1``; ``means`` supplies the
    fallback direction and the count of re-seeded components is returned
    last.
    """
    n, d = x.shape
    mass = resp.sum(axis=0)
    sums = resp.T @ x
    lengths = np.linalg.norm(sums, axis=1)
    dead = mass < 1e-6 * n
    live = ~dead
    means = means.copy()
    means[live] = sums[live] / lengths[live, None]
    rbar = np.where(live, lengths / np.where(live, mass, 1.0), 0.0)
    kappas = np.where(live, estimate_kappa(rbar, d, kappa_cap), 1.0)
    weights = mass / n
    if np.any(dead):
        idx = np.flatnonzero(dead)
        means[idx] = x[rng.integers(n, size=idx.size)]
        weights[idx] = np.maximum(weights[idx], 1.0 / n)
    return means, kappas, weights / weights.sum(), int(dead.sum())


def fit_vmf_mixture(data, cfg=EmConfig()):
    """Fit a K-component vMF mixture with ``cfg.iterations`` EM sweeps.

    Responsibilities use log-sum-exp; components are seeded at K distinct
    data points with ``kappa = 1`` and equal weights. A component whose
    responsibility mass falls below ``1e-6 * n`` is re-seeded at a random
    data point; the count is logged and kept on the returned model.
    """
    x = _rows(data)
    n, d = x.shape
    if n < cfg.K:
        raise ValueError(f"need at least K={cfg.K} points, got {n}")
    if np.max(np.abs(np.linalg.norm(x, axis=1) - 1.0)) > 1e-10:
        raise ValueError("EM expects unit-sphere rows")
    rng = np.random.default_rng(cfg.init_seed)
    means = x[_spread_init(x, cfg.K, rng)].copy()
    kappas = np.ones(cfg.K)
    weights = np.full(cfg.K, 1.0 / cfg.K)
    loglik = []
    reinit = 0
    for _ in range(cfg.iterations):
        with np.errstate(divide="ignore"):
            logw = np.log(weights)
        logp = _component_log_densities(x, means, kappas) + logw[None, :]
        norm = special.logsumexp(logp, axis=1)
        loglik.append(float(norm.sum()))
        resp = np.exp(logp - norm[:, None])
        means, kappas, weights, dead = m_step(x, resp, means, cfg.kappa_cap, rng)
        reinit += dead

    model = VmfMixture.from_arrays(weights, means, kappas)
    loglik.append(mixture_log_likelihood(x, model))
    if reinit:
        logger.info("EM re-seeded %d degenerate component(s)", reinit)
    return VmfMixture(model.components, model.weights, history=tuple(loglik), n_reinitialized=reinit)
