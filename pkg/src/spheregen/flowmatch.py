"""Flow matching on the unit sphere along great circles.

The velocity field is an MLP of ``(x, t)`` whose output is projected onto
the tangent space at ``x``. Training regresses it on the velocity of the
geodesic from a uniform base point to a data point; sampling integrates
the ODE from ``t = 0`` to ``t = 1`` with a renormalisation after every step.
"""

from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .neuralnet import MlpNetwork, TrainConfig, train_loop

#: Training pairs whose arc exceeds ``pi - PAIR_ANTIPODAL_TOL`` are redrawn.
PAIR_ANTIPODAL_TOL = 1e-3
MAX_RESAMPLE = 100
INTEGRATORS = ("euler_project", "rk4_project")


def _rows(data):
    return np.asarray(getattr(data, "rows", data), dtype=float)


@dataclass(frozen=True)
class FlowSampleConfig:
    steps: int = 100
    integrator: str = "euler_project"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.integrator not in INTEGRATORS:
            raise ValueError(f"unknown integrator {self.integrator!r}")


@dataclass
class VelocityField:
    """Tangent velocity field on the sphere backed by an ``MlpNetwork``."""

    net: MlpNetwork
    sample_config: FlowSampleConfig = FlowSampleConfig()
    history: list = field(default_factory=list)

    def __post_init__(self):
        dims = self.net.layer_dims
        if dims[0] != dims[-1] + 1:
            raise ValueError("velocity net must map d + 1 inputs to d outputs")

    @classmethod
    def create(cls, d, hidden=(128, 128, 128, 128), rng=None, **kwargs):
        net = MlpNetwork([d + 1, *hidden, d], "swish", "linear", rng=rng)
        return cls(net, **kwargs)

    @property
    def d(self):
        return self.net.layer_dims[-1]

    def _inputs(self, x, t):
        t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
        return np.column_stack([x, t])

    def __call__(self, x, t):
        x = np.asarray(x, dtype=float)
        raw = self.net.forward(self._inputs(x, t))
        return geometry.tangent_project(x, raw)

    def loss_and_grad(self, x_t, t, u_target, need_grad=True):
        """Mean squared tangent residual and its parameter gradients."""
        raw, cache = self.net.forward(self._inputs(x_t, t), return_cache=True)
        resid = geometry.tangent_project(x_t, raw) - u_target
        m = x_t.shape[0]
        loss = float(np.sum(resid * resid) / m)
        if not need_grad:
            return loss, None
        # projection is symmetric, so the upstream gradient is P (2 r / m)
        upstream = geometry.tangent_project(x_t, 2.0 * resid / m)
        grads, _ = self.net.backward(cache, upstream)
        return loss, grads


def sample_base_sphere(d, n, rng):
    """Uniform points on the sphere (normalised standard normals)."""
    if d < 2:
        raise ValueError("d must be at least 2")
    z = rng.standard_normal((n, d))
    norm = np.linalg.norm(z, axis=1, keepdims=True)
    # an exactly-zero normal vector has probability zero; redraw defensively
    while np.any(norm == 0):
        bad = norm[:, 0] == 0
        z[bad] = rng.standard_normal((bad.sum(), d))
        norm = np.linalg.norm(z, axis=1, keepdims=True)
    return z / norm


def cfm_training_pair(x1, rng, x0=None, t=None):
    """Draw ``(x_t, t, u_target)`` on the geodesic from a base point to ``x1``.

    ``x1`` may be one point or an ``(m, d)`` batch. ``x0`` and ``t`` may be
    supplied (tests, fixed validation draws); otherwise ``t ~ U[0, 1]`` and
    ``x0`` is uniform on the sphere, redrawn while the pair is within
    ``PAIR_ANTIPODAL_TOL`` of antipodal.
    """
    x1 = np.asarray(x1, dtype=float)
    single = x1.ndim == 1
    x1 = np.atleast_2d(x1)
    m, d = x1.shape
    if t is None:
        t = rng.uniform(size=m)
    t = np.broadcast_to(np.asarray(t, dtype=float), (m,)).copy()
    if x0 is None:
        x0 = sample_base_sphere(d, m, rng)
        for _ in range(MAX_RESAMPLE):
            bad = geometry._arc(x0, x1) > np.pi - PAIR_ANTIPODAL_TOL
            if not np.any(bad):
                break
            x0[bad] = sample_base_sphere(d, int(bad.sum()), rng)
        else:
            raise geometry.AntipodalPairError(
                f"base draw stayed antipodal to the target after {MAX_RESAMPLE} attempts"
            )
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    x_t = geometry.geodesic_point(x0, x1, t)
    u = geometry.geodesic_velocity(x0, x1, t)
    if single:
        return x_t[0], t[0], u[0]
    return x_t, t, u


def cfm_loss(field_, x_t, t, u_target, need_grad=True):
    """Conditional flow-matching loss ``mean ||v(x_t, t) - u_target||^2``."""
    return field_.loss_and_grad(np.asarray(x_t, float), np.asarray(t, float),
                                np.asarray(u_target, float), need_grad)


def train_flow_matching(data, cfg=TrainConfig(), hidden=(128, 128, 128, 128),
                        sample_config=FlowSampleConfig()):
    """Fit a velocity field to unit-sphere data.

    Fresh ``(x0, t)`` pairs are drawn for every minibatch; the validation
    loss reuses one seeded set of draws each epoch.
    """
    x = _rows(data)
    if x.shape[0] < 10:
        raise ValueError("flow matching needs at least 10 points")
    if np.max(np.abs(np.linalg.norm(x, axis=1) - 1.0)) > 1e-10:
        raise ValueError("flow matching expects unit-sphere rows")
    init_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xF10]))
    field_ = VelocityField.create(x.shape[1], hidden, rng=init_rng, sample_config=sample_config)

    def loss_fn(net, batch, rng, need_grad):
        x_t, t, u = cfm_training_pair(batch, rng)
        return field_.loss_and_grad(x_t, t, u, need_grad)

    result = train_loop(field_.net, loss_fn, x, cfg)
    field_.history = result.history
    return field_


def sample_flow(field_, n, cfg=None, rng=None, chunk=20000):
    """Integrate base samples to ``t = 1``; every row ends on the unit sphere."""
    cfg = field_.sample_config if cfg is None else cfg
    rng = np.random.default_rng() if rng is None else rng
    x0 = sample_base_sphere(field_.d, n, rng)
    out = np.empty_like(x0)
    for start in range(0, n, chunk):
        out[start : start + chunk] = integrate_flow(field_, x0[start : start + chunk], cfg)
    return out


def _renorm(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def integrate_flow(field_, x0, cfg):
    x = np.array(x0, dtype=float)
    h = 1.0 / cfg.steps
    for k in range(cfg.steps):
        t = k * h
        if cfg.integrator == "euler_project":
            x = x + h * field_(x, t)
        else:
            k1 = field_(x, t)
            k2 = field_(_renorm(x + 0.5 * h * k1), t + 0.5 * h)
            k3 = field_(_renorm(x + 0.5 * h * k2), t + 0.5 * h)
            k4 = field_(_renorm(x + h * k3), t + h)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"flow state became non-finite at step {k}")
        x = _renorm(x)
    return x
