"""Pure-Python coordinate descent kernel (fallback for :mod:`madml._cd`)."""
import numpy as np


def _sweep(Z, h, grad0, beta0, beta, lam, hdiag, mu, inv_n, s, active_only):
    max_change = 0.0
    for l in range(Z.shape[1]):
        b_old = beta[l]
        if active_only and b_old == 0.0:
            continue
        col = Z[:, l]
        g = grad0[l] + float(np.dot(h * col, s)) * inv_n + mu * (b_old - beta0[l])
        hl = hdiag[l]
        if hl <= 0.0:
            if abs(g) <= lam[l]:
                continue
            return max_change, True
        z = hl * b_old - g
        if z > lam[l]:
            b_new = (z - lam[l]) / hl
        elif z < -lam[l]:
            b_new = (z + lam[l]) / hl
        else:
            b_new = 0.0
        delta = b_new - b_old
        if delta != 0.0:
            beta[l] = b_new
            s += delta * col
            max_change = max(max_change, abs(delta) * hl)
    return max_change, False


def cd_quadratic(Z, h, grad0, beta0, beta, lam, mu, tol, max_sweeps):
    """Same contract as the compiled ``cd_quadratic``."""
    n = Z.shape[0]
    inv_n = 1.0 / n
    hdiag = (h @ (Z * Z)) * inv_n + mu
    s = Z @ (beta - beta0)
    sweeps = 0
    while sweeps < max_sweeps:
        change, unbounded = _sweep(Z, h, grad0, beta0, beta, lam, hdiag, mu, inv_n, s, False)
        sweeps += 1
        if unbounded:
            return sweeps, 2
        if change < tol:
            return sweeps, 0
        while sweeps < max_sweeps:
            change, unbounded = _sweep(Z, h, grad0, beta0, beta, lam, hdiag, mu, inv_n, s, True)
            sweeps += 1
            if unbounded:
                return sweeps, 2
            if change < tol:
                break
    return sweeps, 1
