"""Cartesian / spherical-angle / unit-sphere conversions and great-circle utilities.

Every function is vectorised over leading axes: a single point is a 1-d
array of length ``d`` and a batch is an ``(n, d)`` array.
"""

import numpy as np

#: Great-circle arcs longer than this are treated as antipodal.
ANTIPODAL_TOL = 1e-6


class AntipodalPairError(ValueError):
    """Raised when a geodesic between (near-)antipodal points is requested.

    The great circle through antipodal points is not unique; callers are
    expected to resample the pair.
    """


def _as_float_array(x, name="x"):
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} must be finite")
    # Adding +0.0 turns -0.0 into 0.0 so that atan2 never returns -pi.
    return x + 0.0


def to_spherical(x):
    """Split Cartesian vectors into a radius and spherical angles.

    Parameters
    ----------
    x : array_like, shape (..., d)
        Cartesian coordinates, ``d >= 2``.

    Returns
    -------
    r : ndarray, shape (...)
        Euclidean norm of each vector.
    theta : ndarray, shape (..., d - 1)
        Angles with ``theta[..., i]`` in ``[0, pi]`` for ``i < d - 2`` and
        the last angle in ``(-pi, pi]``. A zero vector maps to all-zero
        angles.
    """
    x = _as_float_array(x)
    d = x.shape[-1]
    if d < 2:
        raise ValueError("dimension must be at least 2")
    sq = x * x
    # tail[..., i] = sqrt(x_{i+1}^2 + ... + x_d^2) (0-based: sum over j > i)
    tail = np.sqrt(np.cumsum(sq[..., ::-1], axis=-1)[..., ::-1])
    r = tail[..., 0]
    theta = np.empty(x.shape[:-1] + (d - 1,))
    theta[..., : d - 2] = np.arctan2(tail[..., 1 : d - 1], x[..., : d - 2])
    theta[..., d - 2] = np.arctan2(x[..., d - 1], x[..., d - 2])
    return r, theta


def check_angles(theta):
    """Raise ``ValueError`` unless ``theta`` satisfies the angle ranges."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape[-1] < 1:
        raise ValueError("angle vectors need at least one component")
    if not np.all(np.isfinite(theta)):
        raise ValueError("angles must be finite")
    polar = theta[..., :-1]
    last = theta[..., -1]
    if np.any(polar < 0.0) or np.any(polar > np.pi):
        raise ValueError("polar angles must lie in [0, pi]")
    if np.any(last <= -np.pi) or np.any(last > np.pi):
        raise ValueError("final angle must lie in (-pi, pi]")


def from_spherical(r, theta):
    """Inverse of :func:`to_spherical`.

    Parameters
    ----------
    r : array_like, shape (...)
        Non-negative radii (broadcast against ``theta``).
    theta : array_like, shape (..., d - 1)

    Returns
    -------
    ndarray, shape (..., d)
    """
    theta = np.asarray(theta, dtype=float)
    check_angles(theta)
    r = np.asarray(r, dtype=float)
    if np.any(r < 0) or not np.all(np.isfinite(r)):
        raise ValueError("radius must be finite and non-negative")
    d = theta.shape[-1] + 1
    sines = np.sin(theta)
    # prefix[..., k] = sin(theta_1) ... sin(theta_k), prefix[..., 0] = 1
    prefix = np.ones(theta.shape[:-1] + (d,))
    prefix[..., 1:] = np.cumprod(sines, axis=-1)
    x = np.empty(theta.shape[:-1] + (d,))
    x[..., : d - 1] = prefix[..., : d - 1] * np.cos(theta)
    x[..., d - 1] = prefix[..., d - 1]
    return x * r[..., None]


def unit_project(x):
    """Scale vectors onto the unit sphere, ``x / ||x||``."""
    x = _as_float_array(x)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("cannot project the zero vector onto the sphere")
    return x / norm


def angular_distance(a, b):
    """Great-circle distance ``arccos(a . b)`` between unit vectors, in radians."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    dot = np.sum(a * b, axis=-1)
    return np.arccos(np.clip(dot, -1.0, 1.0))


def _arc(a, b):
    # 2*atan2(|a-b|, |a+b|) stays accurate for tiny and near-pi arcs.
    return 2.0 * np.arctan2(
        np.linalg.norm(a - b, axis=-1), np.linalg.norm(a + b, axis=-1)
    )


def _checked_arc(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    omega = _arc(a, b)
    if np.any(omega > np.pi - ANTIPODAL_TOL):
        raise AntipodalPairError("geodesic endpoints are (near-)antipodal")
    return a, b, omega


def geodesic_point(a, b, t):
    """Point at fraction ``t`` along the great circle from ``a`` to ``b`` (slerp).

    ``t`` broadcasts against the leading axes of ``a`` and ``b``.
    """
    a, b, omega = _checked_arc(a, b)
    t = np.asarray(t, dtype=float)
    # sin(s*w)/sin(w) written with sinc so that w -> 0 degrades to lerp
    denom = np.sinc(omega / np.pi)
    ca = (1.0 - t) * np.sinc((1.0 - t) * omega / np.pi) / denom
    cb = t * np.sinc(t * omega / np.pi) / denom
    p = ca[..., None] * a + cb[..., None] * b
    return p / np.linalg.norm(p, axis=-1, keepdims=True)


def geodesic_velocity(a, b, t):
    """Time derivative of :func:`geodesic_point`; tangent with norm equal to the arc."""
    a, b, omega = _checked_arc(a, b)
    t = np.asarray(t, dtype=float)
    denom = np.sinc(omega / np.pi)
    ca = -np.cos((1.0 - t) * omega) / denom
    cb = np.cos(t * omega) / denom
    v = ca[..., None] * a + cb[..., None] * b
    # remove the O(eps) radial drift so the result is tangent to machine precision
    return tangent_project(geodesic_point(a, b, t), v)


def tangent_project(x, v):
    """Project ``v`` onto the tangent space of the sphere at unit vector ``x``."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    return v - np.sum(v * x, axis=-1, keepdims=True) * x
