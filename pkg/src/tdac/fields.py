"""Grid containers and discrete operators shared by the contour and training code.

Fields are plain 2-D ``numpy`` arrays indexed ``[row, col]``; ``x`` is the
column axis and ``y`` the row axis.  Images are ``(H, W)`` or ``(H, W, C)``.
The validators below enforce the invariants every other module relies on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


class FieldError(ValueError):
    """Raised when a field violates a shape or value invariant."""


def check_field(a, name="field", min_size=3) -> np.ndarray:
    """Return ``a`` as a finite float64 2-D array of at least ``min_size`` per side."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise FieldError(f"{name} must be 2-D, got shape {a.shape}")
    if a.shape[0] < min_size or a.shape[1] < min_size:
        raise FieldError(
            f"{name} is {a.shape[0]}x{a.shape[1]}; at least {min_size}x{min_size} required"
        )
    if not np.isfinite(a).all():
        raise FieldError(f"{name} contains non-finite values")
    return a


def check_image(img) -> np.ndarray:
    """Validate an image grid: finite, in [0, 1], 1 or 3 channels, >= 3x3."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim == 3 and img.shape[2] != 3:
        raise FieldError(f"image must have 1 or 3 channels, got {img.shape[2]}")
    if img.ndim not in (2, 3):
        raise FieldError(f"image must be HxW or HxWxC, got shape {img.shape}")
    check_field(img[..., 0] if img.ndim == 3 else img, "image")
    if not np.isfinite(img).all():
        raise FieldError("image contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise FieldError("image intensities must lie in [0, 1]")
    return img


def check_mask(mask) -> np.ndarray:
    """Validate a binary mask and return it as ``uint8`` with values in {0, 1}."""
    m = np.asarray(mask)
    if m.ndim != 2:
        raise FieldError(f"mask must be 2-D, got shape {m.shape}")
    if m.dtype == bool:
        return m.astype(np.uint8)
    if not np.isin(m, (0, 1)).all():
        raise FieldError("mask values must be 0 or 1")
    return m.astype(np.uint8)


def check_same_shape(*named):
    """``check_same_shape(("phi", phi), ("image", img))`` raises on any 2-D shape mismatch."""
    ref_name, ref = named[0]
    for name, a in named[1:]:
        if a.shape[:2] != ref.shape[:2]:
            raise FieldError(f"{name} shape {a.shape[:2]} does not match {ref_name} {ref.shape[:2]}")


def to_luminance(img: np.ndarray) -> np.ndarray:
    """Collapse an RGB image to Rec.601 luminance; grayscale passes through."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    return img @ LUMA_WEIGHTS


@dataclass(frozen=True)
class EvolutionConfig:
    """Parameters of the unrolled level-set evolution.

    Attributes
    ----------
    mu : float
        Weight of the length (curvature) force.
    epsilon : float
        Width of the smoothed Heaviside, in pixels.
    dt : float
        Explicit Euler time step.
    L : int
        Number of evolution steps.
    f : int
        Half-width of the local statistics window; the window is ``(2f+1)^2``.
    eta : float
        Floor used in the curvature denominator and the local-mean quotients.
    nu : float
        Weight of the distance-regularization force.
    double_dirac : bool
        Multiply the force by ``delta(phi)**2`` instead of ``delta(phi)``.
    kappa_max : float
        Bound on ``|kappa|`` inside the evolution step (``inf`` disables it).
        Curvatures above one per pixel are not resolved by the grid and
        appear where ``phi`` is nearly flat; left unbounded they make the
        unrolled map badly conditioned.
    """

    mu: float = 0.2
    epsilon: float = 1.0
    dt: float = 0.1
    L: int = 60
    f: int = 5
    eta: float = 1e-8
    nu: float = 0.1
    double_dirac: bool = False
    kappa_max: float = 1.0

    def __post_init__(self):
        if self.mu < 0:
            raise ValueError("mu must be >= 0")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.dt <= 0:
            raise ValueError("dt must be > 0")
        if not self.kappa_max > 0:
            raise ValueError("kappa_max must be > 0")
        if int(self.L) != self.L or self.L < 1:
            raise ValueError("L must be an integer >= 1")
        if int(self.f) != self.f or self.f < 1:
            raise ValueError("f must be an integer >= 1")
        if not 0 < self.eta <= 1e-6:
            raise ValueError("eta must lie in (0, 1e-6]")
        if self.nu < 0:
            raise ValueError("nu must be >= 0")


# --- finite differences -----------------------------------------------------


def spatial_derivatives(phi):
    """Central differences with unit spacing and replicate padding.

    Returns
    -------
    tuple of ndarray
        ``(phi_x, phi_y, phi_xx, phi_yy, phi_xy)``.
    """
    phi = check_field(phi, "phi")
    p = np.pad(phi, 1, mode="edge")
    c = p[1:-1, 1:-1]
    left, right = p[1:-1, :-2], p[1:-1, 2:]
    up, down = p[:-2, 1:-1], p[2:, 1:-1]
    phi_x = 0.5 * (right - left)
    phi_y = 0.5 * (down - up)
    phi_xx = right - 2.0 * c + left
    phi_yy = down - 2.0 * c + up
    phi_xy = 0.25 * (p[2:, 2:] - p[2:, :-2] - p[:-2, 2:] + p[:-2, :-2])
    return phi_x, phi_y, phi_xx, phi_yy, phi_xy


def spatial_derivatives_adjoint(g_x, g_y, g_xx, g_yy, g_xy):
    """Transpose of :func:`spatial_derivatives` applied to five output adjoints.

    The replicate padding is folded back onto the edge rows and columns, so
    the result is the exact adjoint of the padded stencil.
    """
    h, w = g_x.shape
    gp = np.zeros((h + 2, w + 2))
    gp[1:-1, 2:] += 0.5 * g_x + g_xx
    gp[1:-1, :-2] += -0.5 * g_x + g_xx
    gp[2:, 1:-1] += 0.5 * g_y + g_yy
    gp[:-2, 1:-1] += -0.5 * g_y + g_yy
    gp[1:-1, 1:-1] -= 2.0 * (g_xx + g_yy)
    q = 0.25 * g_xy
    gp[2:, 2:] += q
    gp[2:, :-2] -= q
    gp[:-2, 2:] -= q
    gp[:-2, :-2] += q
    # fold padding: rows first, then columns (corners land on corner pixels)
    gp[1, :] += gp[0, :]
    gp[-2, :] += gp[-1, :]
    gp[:, 1] += gp[:, 0]
    gp[:, -2] += gp[:, -1]
    return gp[1:-1, 1:-1].copy()


# --- windowed sums ----------------------------------------------------------


def _box_sum_axis(a, f, axis):
    n = a.shape[axis]
    c = np.cumsum(a, axis=axis)
    c = np.concatenate([np.zeros_like(np.take(c, [0], axis=axis)), c], axis=axis)
    idx = np.arange(n)
    hi = np.minimum(idx + f + 1, n)
    lo = np.maximum(idx - f, 0)
    return np.take(c, hi, axis=axis) - np.take(c, lo, axis=axis)


def box_sum(field, f):
    """Sum over the ``(2f+1) x (2f+1)`` window centred on each pixel.

    The window is clipped at the image border: pixels outside the grid do not
    contribute.  Runs in O(HW) via separable running sums.  The clipped
    operator is symmetric, so it is its own adjoint.
    """
    if int(f) != f or f < 1:
        raise ValueError("window half-width f must be an integer >= 1")
    a = np.asarray(field, dtype=np.float64)
    if a.ndim != 2:
        raise FieldError(f"field must be 2-D, got shape {a.shape}")
    return _box_sum_axis(_box_sum_axis(a, int(f), 0), int(f), 1)


def window_count(shape, f):
    """Number of in-image pixels in each clipped window."""
    h, w = shape
    r = np.minimum(np.arange(h) + f, h - 1) - np.maximum(np.arange(h) - f, 0) + 1
    c = np.minimum(np.arange(w) + f, w - 1) - np.maximum(np.arange(w) - f, 0) + 1
    return np.outer(r, c).astype(np.float64)


# --- smoothed step ----------------------------------------------------------


def heaviside(phi, epsilon=1.0):
    """Arctangent-smoothed Heaviside ``1/2 + arctan(phi/eps)/pi``."""
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    return 0.5 + np.arctan(np.asarray(phi, dtype=np.float64) / epsilon) / np.pi


def dirac(phi, epsilon=1.0):
    """Derivative of :func:`heaviside`: ``(eps/pi) / (eps^2 + phi^2)``."""
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    phi = np.asarray(phi, dtype=np.float64)
    return (epsilon / np.pi) / (epsilon * epsilon + phi * phi)


def dirac_derivative(phi, epsilon=1.0):
    """Second derivative of :func:`heaviside` with respect to ``phi``."""
    phi = np.asarray(phi, dtype=np.float64)
    s = epsilon * epsilon + phi * phi
    return -2.0 * (epsilon / np.pi) * phi / (s * s)


# --- signed distance ---------------------------------------------------------


def signed_distance_from_mask(mask):
    """Signed Euclidean distance to the mask boundary, positive inside.

    The boundary is taken to run along pixel edges, half a pixel away from
    the centres on either side.  A foreground pixel whose nearest background
    pixel is ``d`` centres away gets ``d - 0.5``; background pixels get the
    negated analogue.  Consequently a single foreground pixel has value
    ``+0.5`` and its 4-neighbours ``-0.5``, and inverting the mask negates
    the field exactly.
    """
    m = check_mask(mask).astype(bool)
    if m.all() or not m.any():
        raise FieldError("mask must contain both foreground and background pixels")
    inside = distance_transform_edt(m)
    outside = distance_transform_edt(~m)
    return np.where(m, inside - 0.5, -(outside - 0.5))
