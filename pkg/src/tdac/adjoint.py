"""Reverse-mode differentiation of the unrolled level-set evolution.

Each evolution step is differentiated by hand, primitive by primitive, using
the intermediates recorded in the forward trace.  The adjoints are exact for
the forward map as implemented, including the clamped denominators of the
local means (a clamp that is active passes no gradient).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .evolution import EvolutionTrace, ParameterMaps, evolve, step_forward
from .fields import box_sum, dirac, heaviside, signed_distance_from_mask, window_count
from .losses import bce_dice_loss


class AdjointError(RuntimeError):
    """Raised for incomplete traces or non-finite adjoints."""


@dataclass
class GradientBundle:
    """Gradients of a scalar loss with respect to the evolution inputs."""

    d_lambda1: np.ndarray
    d_lambda2: np.ndarray
    d_phi0: np.ndarray


def backprop_step(cache, g_next, phi, lum, lam1, lam2, cfg):
    """Pull the adjoint of ``phi_next`` back through one step.

    Returns ``(g_phi, g_lambda1, g_lambda2)``.
    """
    g_lam1 = np.zeros_like(phi)
    g_lam2 = np.zeros_like(phi)
    g_phi = _kernels.step_backward(cache, g_next, phi, lum, lam1, lam2, cfg, g_lam1, g_lam2)
    return g_phi, g_lam1, g_lam2


def backprop_evolution(trace: EvolutionTrace, d_phiL) -> GradientBundle:
    """Adjoints of ``(phi0, lambda1, lambda2) -> phi_L`` for upstream gradient ``d_phiL``.

    Raises
    ------
    AdjointError
        If the trace is incomplete or an adjoint becomes non-finite.
    """
    cfg = trace.config
    if not trace.complete:
        raise AdjointError(
            f"trace has {len(trace.phis)} snapshots, expected {cfg.L + 1}"
        )
    g = np.asarray(d_phiL, dtype=np.float64)
    if g.shape != trace.phis[0].shape:
        raise AdjointError(f"upstream gradient shape {g.shape} != field shape {trace.phis[0].shape}")
    if not np.isfinite(g).all():
        raise AdjointError("upstream gradient is not finite")

    lum = trace.image
    lam1, lam2 = trace.maps.lambda1, trace.maps.lambda2
    have_cache = len(trace.caches) == cfg.L
    if not have_cache:
        count = window_count(lum.shape, cfg.f)
        box_i = box_sum(lum, cfg.f)

    g_lam1 = np.zeros_like(g)
    g_lam2 = np.zeros_like(g)
    for t in range(cfg.L - 1, -1, -1):
        phi = trace.phis[t]
        if have_cache:
            cache = trace.caches[t]
        else:
            _, cache = step_forward(phi, lum, lam1, lam2, cfg, count, box_i)
        g = _kernels.step_backward(cache, g, phi, lum, lam1, lam2, cfg, g_lam1, g_lam2)
        if not np.isfinite(g).all():
            raise AdjointError(f"non-finite adjoint at step {t + 1}")
    return GradientBundle(d_lambda1=g_lam1, d_lambda2=g_lam2, d_phi0=g)


@dataclass
class FiniteDiffReport:
    """Outcome of a finite-difference gradient audit."""

    max_rel_error: float
    rel_error_phi0: float
    rel_error_lambda1: float
    rel_error_lambda2: float
    probes: int
    records: list

    @property
    def per_class(self):
        return (self.rel_error_phi0, self.rel_error_lambda1, self.rel_error_lambda2)


def finite_diff_check(image, phi0, maps, cfg, loss, probes=50, step=1e-5, seed=0, floor=1e-5):
    """Compare reverse-mode adjoints with central differences of ``loss(phi_L)``.

    ``loss`` maps ``phi_L`` to ``(value, d_value/d_phi_L)``.  ``probes`` entries
    are drawn at random (with a seeded generator) from each of ``phi0``,
    ``lambda1`` and ``lambda2``.  The relative error of a probe is
    ``|a - n| / max(|a|, |n|, s)`` with ``s = max(floor * max|A|, 1e-12)``,
    where ``A`` is the full analytic adjoint of that input.  Entries far
    below the adjoint's scale are thus compared at that scale: a central
    difference cannot resolve them beyond the rounding noise of the loss.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    if step <= 0:
        raise ValueError("step must be > 0")
    phi0 = np.asarray(phi0, dtype=np.float64)
    trace = evolve(phi0, image, maps, cfg)
    _, d_phiL = loss(trace.phi_final)
    bundle = backprop_evolution(trace, d_phiL)

    def loss_at(p, l1, l2):
        tr = evolve(p, image, ParameterMaps(l1, l2), cfg, keep_cache=False)
        return loss(tr.phi_final)[0]

    rng = np.random.default_rng(seed)
    h, w = phi0.shape
    inputs = {"phi0": phi0, "lambda1": maps.lambda1, "lambda2": maps.lambda2}
    analytic = {"phi0": bundle.d_phi0, "lambda1": bundle.d_lambda1, "lambda2": bundle.d_lambda2}
    scale = {k: max(floor * float(np.abs(v).max()), 1e-12) for k, v in analytic.items()}
    worst = {k: 0.0 for k in inputs}
    records = []
    for name in inputs:
        coords = rng.integers(0, [h, w], size=(probes, 2))
        for r, c in coords:
            vals = []
            for sgn in (1.0, -1.0):
                args = {k: v.copy() for k, v in inputs.items()}
                args[name][r, c] += sgn * step
                vals.append(loss_at(args["phi0"], args["lambda1"], args["lambda2"]))
            numeric = (vals[0] - vals[1]) / (2.0 * step)
            a = float(analytic[name][r, c])
            err = abs(a - numeric) / max(abs(a), abs(numeric), scale[name])
            worst[name] = max(worst[name], err)
            records.append((name, int(r), int(c), a, numeric, err))
    return FiniteDiffReport(
        max_rel_error=max(worst.values()),
        rel_error_phi0=worst["phi0"],
        rel_error_lambda1=worst["lambda1"],
        rel_error_lambda2=worst["lambda2"],
        probes=probes,
        records=records,
    )


def gradcheck_fixture(size=16, seed=0):
    """Random but well-posed problem for :func:`finite_diff_check`.

    Returns ``(image, phi0, maps, target)``: a noisy two-level image of a
    random disk, a perturbed and scaled signed distance of a shifted disk as ``phi0``
    compressed so that every pixel lies within a few epsilon of the contour, positive random ``lambda`` maps,
    and the true disk mask as the segmentation target.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size]
    r = rng.uniform(0.2, 0.35) * size
    cy, cx = rng.uniform(0.35, 0.65, size=2) * size
    target = ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(np.uint8)
    image = np.clip(0.2 + 0.6 * target + rng.normal(0.0, 0.1, target.shape), 0.0, 1.0)
    dy, dx = rng.uniform(-2.0, 2.0, size=2)
    start = ((yy - cy - dy) ** 2 + (xx - cx - dx) ** 2 <= (0.8 * r) ** 2).astype(np.uint8)
    phi0 = 0.4 * signed_distance_from_mask(start) + rng.uniform(-0.3, 0.3, target.shape)
    maps = ParameterMaps(rng.uniform(0.5, 1.5, target.shape), rng.uniform(0.5, 1.5, target.shape))
    return image, phi0, maps, target


def contour_loss(target, epsilon=1.0):
    """``phi_L -> (BCE + Dice of H(phi_L) against target, gradient)`` for gradient checks."""
    g = np.asarray(target, dtype=np.float64)

    def loss(phi_L):
        value, d_h = bce_dice_loss(heaviside(phi_L, epsilon), g)
        return value, d_h * dirac(phi_L, epsilon)

    return loss


def linear_probe_loss(base_phi_L, seed=0):
    """``phi_L -> <c, phi_L - base_phi_L>`` with fixed standard-normal weights ``c``.

    The value is zero at the base point, so central differences are limited
    by the rounding of ``phi_L`` itself rather than by the magnitude of the
    loss; this resolves adjoint entries many orders of magnitude smaller
    than an O(1) loss can.
    """
    base = np.array(base_phi_L, dtype=np.float64)
    c = np.random.default_rng(seed).standard_normal(base.shape)

    def loss(phi_L):
        return float(np.sum(c * (phi_L - base))), c.copy()

    return loss
