"""Compiled surface-A kernel; same terms as the numpy path in ``surrogate``."""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _switch(r, r_on, r_off):
    if r <= r_on:
        return 1.0, 0.0
    if r >= r_off:
        return 0.0, 0.0
    w = r_off - r_on
    x = (r - r_on) / w
    return 1.0 - 3.0 * x * x + 2.0 * x * x * x, (-6.0 * x + 6.0 * x * x) / w


@njit(cache=True)
def surface_a(pos, k_bond, r0, k_angle, theta0, eps, sigma, q, rep_eps, rep_sigma,
              r_on, r_off, coulomb):
    """Energy and gradient (not forces) for O,H,H-ordered positions."""
    n_mol = pos.shape[0] // 3
    g = np.zeros_like(pos)
    e = 0.0
    for m in range(n_mol):
        o = 3 * m
        r1 = pos[o + 1] - pos[o]
        r2 = pos[o + 2] - pos[o]
        d1 = math.sqrt(r1[0] ** 2 + r1[1] ** 2 + r1[2] ** 2)
        d2 = math.sqrt(r2[0] ** 2 + r2[1] ** 2 + r2[2] ** 2)
        c = (r1[0] * r2[0] + r1[1] * r2[1] + r1[2] * r2[2]) / (d1 * d2)
        c = min(1.0, max(-1.0, c))
        th = math.acos(c)
        e += 0.5 * k_bond * ((d1 - r0) ** 2 + (d2 - r0) ** 2)
        e += 0.5 * k_angle * (th - theta0) ** 2
        s = math.sqrt(max(1.0 - c * c, 1e-300))
        de_dc = -k_angle * (th - theta0) / s
        for k in range(3):
            g1 = k_bond * (d1 - r0) / d1 * r1[k] + de_dc * (r2[k] / (d1 * d2) - c / d1**2 * r1[k])
            g2 = k_bond * (d2 - r0) / d2 * r2[k] + de_dc * (r1[k] / (d1 * d2) - c / d2**2 * r2[k])
            g[o + 1, k] += g1
            g[o + 2, k] += g2
            g[o, k] -= g1 + g2

    gp = np.zeros((6, 3))
    for m in range(n_mol):
        for n in range(m + 1, n_mol):
            a0, b0 = 3 * m, 3 * n
            v = pos[b0] - pos[a0]
            r_oo = math.sqrt(v[0] ** 2 + v[1] ** 2 + v[2] ** 2)
            if r_oo >= r_off:
                continue
            sw, dsw = _switch(r_oo, r_on, r_off)
            gp[:, :] = 0.0
            u = 0.0
            for a in range(3):
                for b in range(3):
                    va = pos[b0 + b] - pos[a0 + a]
                    r = math.sqrt(va[0] ** 2 + va[1] ** 2 + va[2] ** 2)
                    qq = coulomb * q[a] * q[b]
                    u += qq / r
                    du = -qq / (r * r)
                    if a == 0 and b == 0:
                        sr6 = (sigma / r) ** 6
                        u += 4.0 * eps * (sr6 * sr6 - sr6)
                        du += -24.0 * eps * (2.0 * sr6 * sr6 - sr6) / r
                    else:
                        sr12 = (rep_sigma / r) ** 12
                        u += rep_eps * sr12
                        du += -12.0 * rep_eps * sr12 / r
                    for k in range(3):
                        gk = du * va[k] / r
                        gp[3 + b, k] += gk
                        gp[a, k] -= gk
            e += sw * u
            for k in range(3):
                go = u * dsw * v[k] / r_oo
                for a in range(3):
                    g[a0 + a, k] += sw * gp[a, k]
                    g[b0 + a, k] += sw * gp[3 + a, k]
                g[b0, k] += go
                g[a0, k] -= go
    return e, g


@njit(cache=True)
def relax_lbfgs(x0, fmax, max_iter, memory, max_disp, k_bond, r0, k_angle, theta0, eps,
                sigma, q, rep_eps, rep_sigma, r_on, r_off, coulomb):
    """L-BFGS with Armijo backtracking on surface A; x0 is (N, 3)."""
    n_atoms = x0.shape[0]
    n = 3 * n_atoms
    x = x0.copy().reshape(n)
    e, g2 = surface_a(x.reshape(n_atoms, 3), k_bond, r0, k_angle, theta0, eps, sigma, q,
                      rep_eps, rep_sigma, r_on, r_off, coulomb)
    g = g2.reshape(n).copy()
    S = np.zeros((memory, n))
    Y = np.zeros((memory, n))
    rho = np.zeros(memory)
    alpha = np.zeros(memory)
    k = 0
    for it in range(max_iter):
        if np.max(np.abs(g)) < fmax:
            return x.reshape(n_atoms, 3), e, True, it
        hist = min(k, memory)
        r = g.copy()
        for i in range(hist):
            j = (k - 1 - i) % memory
            alpha[j] = rho[j] * np.dot(S[j], r)
            r -= alpha[j] * Y[j]
        if hist > 0:
            j = (k - 1) % memory
            r *= np.dot(S[j], Y[j]) / np.dot(Y[j], Y[j])
        else:
            r *= 1e-3
        for i in range(hist - 1, -1, -1):
            j = (k - 1 - i) % memory
            beta = rho[j] * np.dot(Y[j], r)
            r += S[j] * (alpha[j] - beta)
        d = -r
        gd = np.dot(g, d)
        if gd >= 0.0:
            d = -1e-3 * g
            gd = np.dot(g, d)
            k = 0
        step = 1.0
        dmax = np.max(np.abs(d))
        if dmax > max_disp:
            step = max_disp / dmax
        while True:
            xn = x + step * d
            en, gn2 = surface_a(xn.reshape(n_atoms, 3), k_bond, r0, k_angle, theta0, eps,
                                sigma, q, rep_eps, rep_sigma, r_on, r_off, coulomb)
            if en <= e + 1e-4 * step * gd or step < 1e-14:
                break
            step *= 0.5
        gn = gn2.reshape(n).copy()
        s = xn - x
        y = gn - g
        sy = np.dot(s, y)
        if sy > 1e-14:
            j = k % memory
            S[j] = s
            Y[j] = y
            rho[j] = 1.0 / sy
            k += 1
        x, e, g = xn, en, gn
    return x.reshape(n_atoms, 3), e, np.max(np.abs(g)) < fmax, max_iter
