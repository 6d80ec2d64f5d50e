"""Training losses: binary cross-entropy plus soft Dice, for both branches."""

from __future__ import annotations

import numpy as np

from .fields import FieldError, dirac, heaviside

CLAMP = 1e-7


def bce_dice_loss(x, g):
    """Binary cross-entropy plus soft Dice loss, and its gradient with respect to ``x``.

    ``loss = -mean(G log X + (1-G) log(1-X)) + 1 - 2 sum(XG) / (sum X + sum G)``

    ``x`` is clamped to ``[1e-7, 1 - 1e-7]`` first; entries where the clamp is
    active receive zero gradient.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if x.shape != g.shape:
        raise FieldError(f"prediction shape {x.shape} does not match ground truth {g.shape}")
    n = x.size
    xc = np.clip(x, CLAMP, 1.0 - CLAMP)
    bce = -np.sum(g * np.log(xc) + (1.0 - g) * np.log1p(-xc)) / n
    inter = np.sum(xc * g)
    denom = np.sum(xc) + np.sum(g)
    dice = 1.0 - 2.0 * inter / denom

    d_bce = -(g / xc - (1.0 - g) / (1.0 - xc)) / n
    d_dice = -2.0 * (g * denom - inter) / (denom * denom)
    grad = d_bce + d_dice
    grad[(x < CLAMP) | (x > 1.0 - CLAMP)] = 0.0
    return float(bce + dice), grad


def total_loss(phi_L, p, g, epsilon=1.0):
    """Sum of the contour-branch and network-branch losses.

    The final level set is squashed through the smoothed Heaviside before the
    loss is applied.

    Returns
    -------
    loss : float
    d_phi_L : ndarray
        Gradient with respect to the final level set.
    d_p : ndarray
        Gradient with respect to the network probability map.
    """
    phi_L = np.asarray(phi_L, dtype=np.float64)
    if phi_L.shape != np.shape(p) or phi_L.shape != np.shape(g):
        raise FieldError("phi_L, P and G must share one shape")
    loss_acm, d_x = bce_dice_loss(heaviside(phi_L, epsilon), g)
    loss_cnn, d_p = bce_dice_loss(p, g)
    return loss_acm + loss_cnn, d_x * dirac(phi_L, epsilon), d_p
