"""Fused per-pixel kernels for one evolution step and its adjoint.

These compute exactly the quantities defined by the numpy operators in
``fields`` and ``evolution`` (replicate-padded central differences, clipped
window sums, arctan Heaviside), fused into a few passes over the grid.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def box_sum_into(a, f, out, tmp):
    """Clipped ``(2f+1)^2`` window sums of ``a`` via running sums along each axis."""
    h, w = a.shape
    for i in range(h):
        s = 0.0
        for j in range(min(f + 1, w)):
            s += a[i, j]
        for j in range(w):
            tmp[i, j] = s
            if j + f + 1 < w:
                s += a[i, j + f + 1]
            if j - f >= 0:
                s -= a[i, j - f]
    for j in range(w):
        s = 0.0
        for i in range(min(f + 1, h)):
            s += tmp[i, j]
        for i in range(h):
            out[i, j] = s
            if i + f + 1 < h:
                s += tmp[i + f + 1, j]
            if i - f >= 0:
                s -= tmp[i - f, j]


@njit(cache=True)
def step_forward_kernel(phi, lum, lam1, lam2, count, box_i, mu, eps, dt, eta, nu, f, double_dirac, kmax,
                        phi_next, H, D, M1, M2, B1, K, work, a1, tmp):
    h, w = phi.shape
    inv_pi = 1.0 / math.pi
    for i in range(h):
        for j in range(w):
            p = phi[i, j]
            H[i, j] = 0.5 + math.atan(p / eps) * inv_pi
            D[i, j] = eps * inv_pi / (eps * eps + p * p)
            work[i, j] = H[i, j] * lum[i, j]
    box_sum_into(work, f, a1, tmp)
    box_sum_into(H, f, B1, tmp)
    for i in range(h):
        im = max(i - 1, 0)
        ip = min(i + 1, h - 1)
        for j in range(w):
            jm = max(j - 1, 0)
            jp = min(j + 1, w - 1)
            c = phi[i, j]
            px = 0.5 * (phi[i, jp] - phi[i, jm])
            py = 0.5 * (phi[ip, j] - phi[im, j])
            pxx = phi[i, jp] - 2.0 * c + phi[i, jm]
            pyy = phi[ip, j] - 2.0 * c + phi[im, j]
            pxy = 0.25 * (phi[ip, jp] - phi[ip, jm] - phi[im, jp] + phi[im, jm])
            g2 = px * px + py * py + eta
            num = pxx * py * py - 2.0 * pxy * px * py + pyy * px * px
            kappa = min(max(num / (g2 * math.sqrt(g2)), -kmax), kmax)
            K[i, j] = kappa

            b1 = B1[i, j]
            b2 = count[i, j] - b1
            m1 = a1[i, j] / max(b1, eta)
            m2 = (box_i[i, j] - a1[i, j]) / max(b2, eta)
            M1[i, j] = m1
            M2[i, j] = m2
            r1 = lum[i, j] - m1
            r2 = lum[i, j] - m2
            data = lam2[i, j] * r2 * r2 - lam1[i, j] * r1 * r1
            d = D[i, j]
            wgt = d * d if double_dirac else d
            force = wgt * (mu * kappa + data)
            if nu > 0.0:
                force += nu * (pxx + pyy - num / g2)
            phi_next[i, j] = c + dt * force


@njit(cache=True)
def step_backward_kernel(g_next, phi, lum, lam1, lam2, count, H, D, M1, M2, B1, K,
                         mu, eps, dt, eta, nu, f, double_dirac, kmax,
                         g_phi, g_lam1, g_lam2, ga1, gb1, box_a, box_b, gp, tmp):
    """Adjoint of one step; accumulates into ``g_lam1``/``g_lam2`` and overwrites ``g_phi``."""
    h, w = phi.shape
    gp[:, :] = 0.0
    for i in range(h):
        im = max(i - 1, 0)
        ip = min(i + 1, h - 1)
        for j in range(w):
            jm = max(j - 1, 0)
            jp = min(j + 1, w - 1)
            c = phi[i, j]
            px = 0.5 * (phi[i, jp] - phi[i, jm])
            py = 0.5 * (phi[ip, j] - phi[im, j])
            pxx = phi[i, jp] - 2.0 * c + phi[i, jm]
            pyy = phi[ip, j] - 2.0 * c + phi[im, j]
            pxy = 0.25 * (phi[ip, jp] - phi[ip, jm] - phi[im, jp] + phi[im, jm])
            g2 = px * px + py * py + eta
            sg2 = math.sqrt(g2)
            den = g2 * sg2
            num = pxx * py * py - 2.0 * pxy * px * py + pyy * px * px
            kappa = K[i, j]

            g = g_next[i, j]
            g_force = dt * g
            d = D[i, j]
            wgt = d * d if double_dirac else d
            m1 = M1[i, j]
            m2 = M2[i, j]
            r1 = lum[i, j] - m1
            r2 = lum[i, j] - m2
            l1 = lam1[i, j]
            l2 = lam2[i, j]
            data = l2 * r2 * r2 - l1 * r1 * r1

            g_weight = g_force * (mu * kappa + data)
            g_kappa = g_force * wgt * mu
            g_data = g_force * wgt
            g_lam1[i, j] -= g_data * r1 * r1
            g_lam2[i, j] += g_data * r2 * r2
            g_m1 = 2.0 * g_data * l1 * r1
            g_m2 = -2.0 * g_data * l2 * r2

            b1 = B1[i, j]
            b2 = count[i, j] - b1
            c1 = max(b1, eta)
            c2 = max(b2, eta)
            g_a2 = g_m2 / c2
            g_b2 = -g_m2 * m2 / c2 if b2 > eta else 0.0
            ga1[i, j] = g_m1 / c1 - g_a2
            gb1[i, j] = (-g_m1 * m1 / c1 if b1 > eta else 0.0) - g_b2

            s = eps * eps + c * c
            d_prime = -2.0 * c * d / s
            if double_dirac:
                g_local = g + g_weight * 2.0 * d * d_prime
            else:
                g_local = g + g_weight * d_prime

            if abs(num / den) > kmax:
                g_kappa = 0.0  # clamp active
            g_num = g_kappa / den
            g_g2 = -g_kappa * kappa / den * 1.5 * sg2
            g_pxx = 0.0
            g_pyy = 0.0
            if nu > 0.0:
                g_r = g_force * nu
                g_num -= g_r / g2
                g_g2 += g_r * num / (g2 * g2)
                g_pxx = g_r
                g_pyy = g_r
            g_pxx += g_num * py * py
            g_pyy += g_num * px * px
            g_pxy = -2.0 * g_num * px * py
            g_px = g_num * (2.0 * pyy * px - 2.0 * pxy * py) + 2.0 * g_g2 * px
            g_py = g_num * (2.0 * pxx * py - 2.0 * pxy * px) + 2.0 * g_g2 * py

            # scatter onto the padded grid; centre is (i+1, j+1)
            gp[i + 1, j + 2] += 0.5 * g_px + g_pxx
            gp[i + 1, j] += -0.5 * g_px + g_pxx
            gp[i + 2, j + 1] += 0.5 * g_py + g_pyy
            gp[i, j + 1] += -0.5 * g_py + g_pyy
            gp[i + 1, j + 1] -= 2.0 * (g_pxx + g_pyy)
            q = 0.25 * g_pxy
            gp[i + 2, j + 2] += q
            gp[i + 2, j] -= q
            gp[i, j + 2] -= q
            gp[i, j] += q
            g_phi[i, j] = g_local

    box_sum_into(ga1, f, box_a, tmp)
    box_sum_into(gb1, f, box_b, tmp)
    # fold the replicate padding back onto the edge pixels
    for j in range(w + 2):
        gp[1, j] += gp[0, j]
        gp[h, j] += gp[h + 1, j]
    for i in range(h + 2):
        gp[i, 1] += gp[i, 0]
        gp[i, w] += gp[i, w + 1]
    for i in range(h):
        for j in range(w):
            g_phi[i, j] += (box_a[i, j] * lum[i, j] + box_b[i, j]) * D[i, j] + gp[i + 1, j + 1]


def step_forward(phi, lum, lam1, lam2, cfg, count, box_i):
    h, w = phi.shape
    out = {k: np.empty((h, w)) for k in ("H", "delta", "m1", "m2", "b1", "kappa")}
    phi_next = np.empty((h, w))
    work = np.empty((h, w))
    a1 = np.empty((h, w))
    tmp = np.empty((h, w))
    step_forward_kernel(
        phi, lum, lam1, lam2, count, box_i,
        float(cfg.mu), float(cfg.epsilon), float(cfg.dt), float(cfg.eta), float(cfg.nu), int(cfg.f),
        bool(cfg.double_dirac), float(cfg.kappa_max),
        phi_next, out["H"], out["delta"], out["m1"], out["m2"], out["b1"], out["kappa"], work, a1, tmp,
    )
    out["count"] = count
    return phi_next, out


def step_backward(cache, g_next, phi, lum, lam1, lam2, cfg, g_lam1, g_lam2):
    h, w = phi.shape
    g_phi = np.empty((h, w))
    scratch = [np.empty((h, w)) for _ in range(5)]
    gp = np.empty((h + 2, w + 2))
    step_backward_kernel(
        g_next, phi, lum, lam1, lam2, cache["count"], cache["H"], cache["delta"], cache["m1"], cache["m2"],
        cache["b1"], cache["kappa"],
        float(cfg.mu), float(cfg.epsilon), float(cfg.dt), float(cfg.eta), float(cfg.nu), int(cfg.f),
        bool(cfg.double_dirac), float(cfg.kappa_max),
        g_phi, g_lam1, g_lam2, scratch[0], scratch[1], scratch[2], scratch[3], gp, scratch[4],
    )
    return g_phi
