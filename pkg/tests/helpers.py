"""Shared fixtures: analytic disk images and their signed distances."""

import numpy as np


def disk_mask(size=64, radius=16.0, centre=None):
    c = (size - 1) / 2.0 if centre is None else centre
    cy, cx = (c, c) if np.isscalar(c) else c
    yy, xx = np.mgrid[:size, :size]
    return ((yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2).astype(np.uint8)


def disk_fixture(size=64, radius=16.0, shrink=3.0):
    """Two-level disk image (0.9 on 0.1) and an initial level set ``(R - shrink) - r``."""
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[:size, :size]
    r = np.hypot(yy - c, xx - c)
    mask = (r <= radius).astype(np.uint8)
    image = np.where(mask, 0.9, 0.1)
    phi0 = (radius - shrink) - r
    return image, phi0, mask


def two_disk_fixture(size=64, radius=10.0, shrink=3.0):
    yy, xx = np.mgrid[:size, :size]
    centres = [(size * 0.3, size * 0.3), (size * 0.7, size * 0.68)]
    dists = [np.hypot(yy - cy, xx - cx) for cy, cx in centres]
    masks = [(d <= radius).astype(np.uint8) for d in dists]
    image = np.where(masks[0] | masks[1], 0.9, 0.1)
    phi0 = np.maximum(*[(radius - shrink) - d for d in dists])
    return image, phi0, masks
