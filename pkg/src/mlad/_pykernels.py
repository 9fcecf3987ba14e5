"""Pure numpy fallbacks for the compiled kernels in ``_kernels.pyx``."""
import numpy as np

LOG_2PI = 1.8378770664093453


def jacobi_eigh(a, tol, max_sweeps):
    """Cyclic Jacobi on a C-contiguous float64 copy; ``a`` is overwritten."""
    n = a.shape[0]
    v = np.eye(n)
    sweeps = 0
    converged = False
    iu = np.triu_indices(n, 1)
    while True:
        off = np.sqrt(2.0 * np.sum(a[iu] ** 2))
        if off < tol:
            converged = True
            break
        if sweeps >= max_sweeps:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta < 0.0:
                    t = -t
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                x = a[:, p].copy()
                y = a[:, q].copy()
                a[:, p] = c * x - s * y
                a[:, q] = s * x + c * y
                x = a[p, :].copy()
                y = a[q, :].copy()
                a[p, :] = c * x - s * y
                a[q, :] = s * x + c * y
                a[p, q] = 0.0
                a[q, p] = 0.0
                x = v[:, p].copy()
                y = v[:, q].copy()
                v[:, p] = c * x - s * y
                v[:, q] = s * x + c * y
        sweeps += 1
    return np.diag(a).copy(), v, sweeps, converged


def _loglik(h, w1, m1, s1, w2, m2, s2):
    l1 = np.log(w1) - 0.5 * ((h - m1) / s1) ** 2 - np.log(s1) - 0.5 * LOG_2PI
    l2 = np.log(w2) - 0.5 * ((h - m2) / s2) ** 2 - np.log(s2) - 0.5 * LOG_2PI
    return float(np.mean(np.logaddexp(l1, l2)))


def em_gmm_1d(h, m1, m2, s1, s2, max_iter, tol, sd_floor, w_floor):
    n = h.shape[0]
    w1 = w2 = 0.5
    prev = cur = _loglik(h, w1, m1, s1, w2, m2, s2)
    it = 0
    converged = False
    while it < max_iter:
        l1 = np.log(w1) - 0.5 * ((h - m1) / s1) ** 2 - np.log(s1)
        l2 = np.log(w2) - 0.5 * ((h - m2) / s2) ** 2 - np.log(s2)
        mx = np.maximum(l1, l2)
        e1 = np.exp(l1 - mx)
        r = e1 / (e1 + np.exp(l2 - mx))
        r1s = r.sum()
        r2s = n - r1s
        w1 = min(max(r1s / n, w_floor), 1.0 - w_floor)
        w2 = 1.0 - w1
        if r1s > 0.0:
            m1 = (r * h).sum() / r1s
        if r2s > 0.0:
            m2 = ((1.0 - r) * h).sum() / r2s
        s1 = np.sqrt((r * (h - m1) ** 2).sum() / r1s) if r1s > 0.0 else sd_floor
        s2 = np.sqrt(((1.0 - r) * (h - m2) ** 2).sum() / r2s) if r2s > 0.0 else sd_floor
        s1 = max(s1, sd_floor)
        s2 = max(s2, sd_floor)
        it += 1
        cur = _loglik(h, w1, m1, s1, w2, m2, s2)
        if abs(cur - prev) < tol:
            converged = True
            break
        prev = cur
    return float(w1), float(w2), float(m1), float(m2), float(s1), float(s2), it, cur, converged
