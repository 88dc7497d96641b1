"""Defect potential with its proximal map and Yosida approximation, the smooth
positivity barrier, and the quadratic energy and dissipation functionals.

Matrix arguments may carry leading batch axes; the last two axes are the
3x3 matrix. Norms are Frobenius.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import EnergyForms, cofactor, frob, invariants


@dataclass(frozen=True)
class DefectPotentialParams:
    k: float = 1.0
    lam: float = 0.1

    def __post_init__(self):
        if not self.k >= 0:
            raise ValueError("threshold k must be nonnegative")
        if not 0 < self.lam <= 1:
            raise ValueError("lambda must lie in (0, 1]")


def psi_D_density(A, k):
    r = frob(np.asarray(A, dtype=float))
    return k * r + 0.5 * r * r


def _radial_scale(A, fn):
    A = np.asarray(A, dtype=float)
    r = frob(A)
    safe = np.where(r > 0, r, 1.0)
    return fn(r)[..., None, None] * A / safe[..., None, None]


def prox_psi_D(A, k, lam):
    """argmin_B 1/2|B - A|^2 + lam psi_D(B): shrink the norm by lam k, then divide by 1 + lam."""
    return _radial_scale(A, lambda r: np.maximum(r - lam * k, 0.0) / (1.0 + lam))


def yosida_dpsi_D(A, k, lam):
    """(A - prox(A)) / lam."""
    return _radial_scale(A, lambda r: np.where(r <= lam * k, r / lam, (r + k) / (1.0 + lam)))


def moreau_envelope(A, k, lam):
    """psi_D(prox A) + |A - prox A|^2 / (2 lam)."""
    A = np.asarray(A, dtype=float)
    P = prox_psi_D(A, k, lam)
    return psi_D_density(P, k) + np.sum((A - P) ** 2, axis=(-2, -1)) / (2.0 * lam)


def prox_radial_bisection(r, k, lam, tol=1e-15, iters=200):
    """Radius of the proximal point found by bisection on the 1-D optimality condition.

    Minimizes q(s) = 1/2 (s - r)^2 + lam (k s + s^2 / 2) over s >= 0. q'(s) is
    increasing, so the minimizer is 0 when q'(0) >= 0 and the root otherwise.
    """
    dq = lambda s: (s - r) + lam * (k + s)
    if dq(0.0) >= 0:
        return 0.0
    lo, hi = 0.0, max(r, 1.0)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if dq(mid) > 0:
            hi = mid
        else:
            lo = mid
        if hi - lo <= tol * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


def dpsi_bound_constants(radii, lams, k):
    """Smallest constants making both growth bounds hold on the sampled (radius, lambda) grid.

    Returns (C_lower, C_grad) with 1/2 r^2 <= C_lower + psi^lam(r) and
    |d psi^lam|^2 <= C_grad (psi^lam + 1).
    """
    radii = np.asarray(radii, dtype=float)
    c1 = c2 = 0.0
    for lam in lams:
        A = radii[:, None, None] * np.eye(3)[None] / np.sqrt(3.0)
        env = moreau_envelope(A, k, lam)
        g = frob(yosida_dpsi_D(A, k, lam))
        c1 = max(c1, float(np.max(0.5 * radii**2 - env)))
        c2 = max(c2, float(np.max(g**2 / (env + 1.0))))
    return c1, c2


# ---------------------------------------------------------------------------
# barrier


@dataclass(frozen=True)
class BarrierParams:
    alpha: float = 0.1
    eps: float = 0.05

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if not 0 < self.eps < min(self.betas):
            raise ValueError(f"eps must lie in (0, {min(self.betas):.4g})")

    @property
    def betas(self):
        a = self.alpha
        return (1.0 - a**3, 3.0 - 3.0 * a**2, 3.0 - 3.0 * a)

    @property
    def floors(self):
        a = self.alpha
        return (a**3, 3.0 * a**2, 3.0 * a)


class BarrierDomainError(ValueError):
    pass


def smooth_plus(s, eps):
    """C2 positive part: 0 for s <= 0, s for s >= eps, eps q(s/eps) between with q = 6t^3 - 8t^4 + 3t^5."""
    s = np.asarray(s, dtype=float)
    t = np.clip(s / eps, 0.0, 1.0)
    blend = eps * t**3 * (6.0 - 8.0 * t + 3.0 * t * t)
    return np.where(s >= eps, s, np.where(s <= 0, 0.0, blend))


def smooth_plus_prime(s, eps):
    s = np.asarray(s, dtype=float)
    t = np.clip(s / eps, 0.0, 1.0)
    blend = t * t * (18.0 - 32.0 * t + 15.0 * t * t)
    return np.where(s >= eps, 1.0, np.where(s <= 0, 0.0, blend))


def _margins(W, p: BarrierParams):
    tr, tc, det = invariants(W)
    a = p.floors
    return det - a[0], tc - a[1], tr - a[2]


def barrier_value(W, p: BarrierParams):
    """Sum of the three smoothed barrier terms; +inf where any margin is <= 0."""
    W = np.asarray(W, dtype=float)
    ms = _margins(W, p)
    bad = np.zeros(np.shape(ms[0]), dtype=bool)
    total = np.zeros(np.shape(ms[0]))
    for x, beta in zip(ms, p.betas):
        bad |= x <= 0
        safe = np.where(x > 0, x, 1.0)
        total = total + smooth_plus(beta - safe, p.eps) / safe
    out = np.where(bad, np.inf, total)
    return float(out) if out.ndim == 0 else out


def barrier_gradient(W, p: BarrierParams):
    """Derivative of barrier_value with respect to a symmetric W (as a symmetric matrix)."""
    W = np.asarray(W, dtype=float)
    ms = _margins(W, p)
    if any(np.any(x <= 0) for x in ms):
        raise BarrierDomainError("W is outside the barrier domain")
    tr = np.trace(W, axis1=-2, axis2=-1)
    I = np.broadcast_to(np.eye(3), W.shape)
    dm = (cofactor(W), tr[..., None, None] * I - np.swapaxes(W, -1, -2), I)
    G = np.zeros_like(W)
    for x, beta, d in zip(ms, p.betas, dm):
        s = beta - x
        dIdx = -smooth_plus_prime(s, p.eps) / x - smooth_plus(s, p.eps) / (x * x)
        G = G + dIdx[..., None, None] * d
    return G


def barrier_integral(W, weights, p: BarrierParams):
    """(integral, inside): the integral is only formed when every node is inside the domain."""
    ms = _margins(W, p)
    inside = bool(all(np.all(x > 0) for x in ms))
    if not inside:
        return np.inf, False
    return float(np.sum(weights * barrier_value(W, p))), True


# ---------------------------------------------------------------------------
# free energy and dissipation


def free_energy(forms: EnergyForms, W, R, curlZ_cells, cell_volume, dp: DefectPotentialParams, bp: BarrierParams):
    """Term breakdown of the free energy by discrete quadrature.

    ``curlZ_cells`` holds the curl of the defect tensor at cell centres, shape (..., 3, 3).
    """
    I = np.eye(3)
    E = W - I
    bar, _ = barrier_integral(W, forms.grid.weights, bp)
    c = np.asarray(curlZ_cells, dtype=float)
    r = frob(c) if c.size else np.zeros(0)
    terms = {
        "W_l2": 0.5 * forms.l2(E),
        "barrier": bar,
        "grad_W": 0.5 * forms.h1(E),
        "grad_R": 0.5 * forms.h1(R),
        "defect_k": dp.k * cell_volume * float(np.sum(r)),
        "defect_l2": 0.5 * cell_volume * float(np.sum(r * r)),
        "gradgrad_W": 0.5 * forms.h2(E),
    }
    terms["total"] = sum(terms.values())
    return terms


def dissipation_rate(forms: EnergyForms, Wdot, Omega):
    """1/2 (|Wdot|^2 + |grad Omega|^2 + |grad Wdot|^2 + |gradgrad Wdot|^2 + |gradgrad Omega|^2)."""
    return 0.5 * (forms.l2(Wdot) + forms.h1(Omega) + forms.h1(Wdot) + forms.h2(Wdot) + forms.h2(Omega))
