"""Forward evolution of a level set under the localized, parameter-mapped flow.

One explicit Euler step is::

    phi <- phi + dt * ( D(phi) * [mu*kappa - lam1*(I - m1)^2 + lam2*(I - m2)^2]
                        + nu * R(phi) )

where ``D`` is the smoothed Dirac (or its square, see
``EvolutionConfig.double_dirac``), ``kappa`` the level-set curvature, ``m1``
and ``m2`` the interior/exterior intensity means inside the ``(2f+1)^2``
window around each pixel, and ``R`` the normal-direction diffusion used as a
distance regularizer.  ``phi > 0`` marks the interior.

The sign of the region term is chosen so that the step descends the region
energy: a pixel whose intensity is closer to the interior mean is pushed
towards the interior.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .fields import (
    EvolutionConfig,
    FieldError,
    box_sum,
    check_field,
    check_image,
    check_same_shape,
    dirac,
    heaviside,
    spatial_derivatives,
    to_luminance,
    window_count,
)


class EvolutionError(RuntimeError):
    """Raised when an evolution step produces a non-finite level set."""

    def __init__(self, message, step=None, pixel=None):
        super().__init__(message)
        self.step = step
        self.pixel = pixel


@dataclass(frozen=True)
class ParameterMaps:
    """Per-pixel weights of the interior (``lambda1``) and exterior (``lambda2``) residuals."""

    lambda1: np.ndarray
    lambda2: np.ndarray

    def __post_init__(self):
        l1 = np.asarray(self.lambda1, dtype=np.float64)
        l2 = np.asarray(self.lambda2, dtype=np.float64)
        check_same_shape(("lambda1", l1), ("lambda2", l2))
        for name, a in (("lambda1", l1), ("lambda2", l2)):
            if a.ndim != 2 or not np.isfinite(a).all():
                raise FieldError(f"{name} must be a finite 2-D field")
            if (a < 0).any():
                raise FieldError(f"{name} must be non-negative")
        object.__setattr__(self, "lambda1", l1)
        object.__setattr__(self, "lambda2", l2)

    @classmethod
    def constant(cls, shape, lambda1=1.0, lambda2=1.0):
        return cls(np.full(shape, float(lambda1)), np.full(shape, float(lambda2)))


@dataclass
class EvolutionTrace:
    """Record of an unrolled evolution: ``phis[t]`` for ``t = 0..L`` plus per-step caches.

    ``caches[t]`` holds the intermediates of the step that maps ``phis[t]``
    to ``phis[t+1]``; it is empty when the trace was recorded without caches.
    """

    config: EvolutionConfig
    image: np.ndarray
    maps: ParameterMaps
    phis: list = field(default_factory=list)
    caches: list = field(default_factory=list)

    @property
    def phi_final(self):
        return self.phis[-1]

    @property
    def complete(self):
        return len(self.phis) == self.config.L + 1


def curvature(phi, eta=1e-8):
    """Mean curvature ``div(grad phi / |grad phi|)`` with the gradient norm floored by ``eta``.

    For a field that is positive inside a disk of radius ``r`` (e.g. its
    signed distance) the value on the circle is ``-1/r``.
    """
    if eta <= 0:
        raise ValueError("eta must be > 0")
    px, py, pxx, pyy, pxy = spatial_derivatives(phi)
    num = pxx * py * py - 2.0 * pxy * px * py + pyy * px * px
    return num / (px * px + py * py + eta) ** 1.5


def distance_regularize(phi, eta=1e-8):
    """Regularizing force ``laplacian(phi) - kappa * |grad phi|``.

    With ``|grad phi| = sqrt(phi_x^2 + phi_y^2 + eta)`` this equals the second
    derivative of ``phi`` along its gradient direction.  It vanishes on
    signed distance fields and on any field that is linear along its normals,
    and flattens kinks in the normal profile.
    """
    px, py, pxx, pyy, pxy = spatial_derivatives(phi)
    num = pxx * py * py - 2.0 * pxy * px * py + pyy * px * px
    return pxx + pyy - num / (px * px + py * py + eta)


def local_means(image, h_phi, f, eta=1e-8):
    """Windowed mean intensity inside (``m1``) and outside (``m2``) the contour.

    ``m1 = box(H*I) / max(box(H), eta)`` and
    ``m2 = box((1-H)*I) / max(box(1-H), eta)`` with clipped windows.
    """
    image = np.asarray(image, dtype=np.float64)
    h_phi = np.asarray(h_phi, dtype=np.float64)
    check_same_shape(("image", image), ("H", h_phi))
    a1 = box_sum(h_phi * image, f)
    b1 = box_sum(h_phi, f)
    a2 = box_sum((1.0 - h_phi) * image, f)
    b2 = box_sum(1.0 - h_phi, f)
    return a1 / np.maximum(b1, eta), a2 / np.maximum(b2, eta)


def _prepare(phi, image, maps):
    phi = check_field(phi, "phi")
    image = check_image(image)
    lum = to_luminance(image)
    check_same_shape(("phi", phi), ("image", lum), ("lambda1", maps.lambda1))
    return phi, lum


def step_forward(phi, lum, lam1, lam2, cfg: EvolutionConfig, count=None, box_i=None):
    """Unchecked evolution step on prepared float64 arrays; returns ``(phi_next, cache)``.

    ``count`` and ``box_i`` (window pixel counts and windowed intensity sums)
    may be supplied to avoid recomputing them on every step.  The cache holds
    ``H``, ``delta``, ``m1``, ``m2``, ``b1`` (windowed interior mass),
    ``kappa`` and ``count``.
    """
    if count is None:
        count = window_count(phi.shape, cfg.f)
    if box_i is None:
        box_i = box_sum(lum, cfg.f)
    return _kernels.step_forward(phi, lum, lam1, lam2, cfg, count, box_i)


def _check_finite(phi_next, step=None):
    if not np.isfinite(phi_next).all():
        bad = np.argwhere(~np.isfinite(phi_next))[0]
        where = f" at step {step}" if step is not None else ""
        raise EvolutionError(
            f"non-finite level set{where} at pixel (row={bad[0]}, col={bad[1]}); "
            "the time step is likely too large",
            step=step,
            pixel=tuple(int(v) for v in bad),
        )


def evolution_step(phi, image, maps: ParameterMaps, cfg: EvolutionConfig):
    """Advance ``phi`` by one explicit Euler step.

    Returns
    -------
    phi_next : ndarray
    cache : dict
        Every intermediate needed to differentiate the step.

    Raises
    ------
    EvolutionError
        If the updated field is not finite.
    """
    phi, lum = _prepare(phi, image, maps)
    phi_next, cache = step_forward(phi, lum, maps.lambda1, maps.lambda2, cfg)
    _check_finite(phi_next)
    return phi_next, cache


def evolve(phi0, image, maps: ParameterMaps, cfg: EvolutionConfig, keep_cache=True):
    """Run ``cfg.L`` evolution steps from ``phi0`` and return the full trace.

    With ``keep_cache=False`` only the level-set snapshots are stored; the
    reverse pass then recomputes each step's intermediates.
    """
    phi, lum = _prepare(phi0, image, maps)
    count = window_count(phi.shape, cfg.f)
    box_i = box_sum(lum, cfg.f)
    trace = EvolutionTrace(config=cfg, image=lum, maps=maps, phis=[phi])
    for t in range(cfg.L):
        phi, cache = step_forward(phi, lum, maps.lambda1, maps.lambda2, cfg, count, box_i)
        _check_finite(phi, step=t + 1)
        trace.phis.append(phi)
        if keep_cache:
            trace.caches.append(cache)
    return trace


def data_force(phi, image, maps: ParameterMaps, cfg: EvolutionConfig):
    """Region force ``lam2*(I-m2)^2 - lam1*(I-m1)^2`` without the Dirac weight."""
    phi, lum = _prepare(phi, image, maps)
    m1, m2 = local_means(lum, heaviside(phi, cfg.epsilon), cfg.f, cfg.eta)
    return maps.lambda2 * (lum - m2) ** 2 - maps.lambda1 * (lum - m1) ** 2


def windowed_data_force(phi, image, maps: ParameterMaps, cfg: EvolutionConfig):
    """Slow reference form of the region force with the window integral kept explicit.

    For every pixel ``u`` this sums, over all window centres ``x`` whose
    window contains ``u``, ``lam2(x)*(I(u)-m2(x))^2 - lam1(x)*(I(u)-m1(x))^2``.
    This is the exact first variation of the windowed region energy and is
    only used for comparisons in tests; it costs O(HW f^2).
    """
    phi, lum = _prepare(phi, image, maps)
    m1, m2 = local_means(lum, heaviside(phi, cfg.epsilon), cfg.f, cfg.eta)
    h, w = phi.shape
    f = cfg.f
    out = np.zeros_like(phi)
    for dy in range(-f, f + 1):
        for dx in range(-f, f + 1):
            # u = x + (dy, dx): accumulate the contribution of centre x onto u
            ys, yd = slice(max(0, -dy), min(h, h - dy)), slice(max(0, dy), min(h, h + dy))
            xs, xd = slice(max(0, -dx), min(w, w - dx)), slice(max(0, dx), min(w, w + dx))
            iu = lum[yd, xd]
            out[yd, xd] += (
                maps.lambda2[ys, xs] * (iu - m2[ys, xs]) ** 2
                - maps.lambda1[ys, xs] * (iu - m1[ys, xs]) ** 2
            )
    return out


def region_energy(phi, image, maps: ParameterMaps, cfg: EvolutionConfig):
    """Discrete contour energy: length term plus windowed region term.

    ``E = sum_p mu*delta(phi_p)*|grad phi_p|
          + sum_x sum_{u in W(x)} [lam1(x) H(phi_u) (I_u - m1(x))^2
                                   + lam2(x) (1 - H(phi_u)) (I_u - m2(x))^2]``

    with the gradient norm floored by ``eta`` as in the curvature.
    """
    phi, lum = _prepare(phi, image, maps)
    f, eps = cfg.f, cfg.epsilon
    h = heaviside(phi, eps)
    m1, m2 = local_means(lum, h, f, cfg.eta)
    px, py, *_ = spatial_derivatives(phi)
    length = cfg.mu * np.sum(dirac(phi, eps) * np.sqrt(px * px + py * py + cfg.eta))
    # sum_u H_u (I_u - m(x))^2 over the window, expanded in moments of I
    s0 = box_sum(h, f)
    s1 = box_sum(h * lum, f)
    s2 = box_sum(h * lum * lum, f)
    t0 = box_sum(1.0 - h, f)
    t1 = box_sum((1.0 - h) * lum, f)
    t2 = box_sum((1.0 - h) * lum * lum, f)
    inner = maps.lambda1 * (s2 - 2.0 * m1 * s1 + m1 * m1 * s0)
    outer = maps.lambda2 * (t2 - 2.0 * m2 * t1 + m2 * m2 * t0)
    return float(length + np.sum(inner + outer))
