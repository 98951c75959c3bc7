"""Independent brute-force reference implementations used only by the tests.

These deliberately avoid the library's code paths: explicit centering
matrices, double loops, one-sided Jacobi rotations, and constrained
alternating ascent instead of vectorized products and LAPACK-first
factorizations.
"""
import numpy as np


def centering_matrix(n: int) -> np.ndarray:
    return np.eye(n) - np.ones((n, n)) / n


def gram_by_dots(x: np.ndarray) -> np.ndarray:
    """O(n^2 p) entry-wise dot products."""
    n = x.shape[0]
    k = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            k[i, j] = float(np.dot(x[i], x[j]))
    return k


def cka_direct(x: np.ndarray, y: np.ndarray) -> float:
    """Feature-space CKA evaluated with explicit centering and explicit norms."""
    h = centering_matrix(x.shape[0])
    xc = h @ x
    yc = h @ y
    num = 0.0
    for a in range(x.shape[1]):
        for b in range(y.shape[1]):
            num += float(np.dot(yc[:, b], xc[:, a])) ** 2
    dx = np.sqrt(sum(float(np.dot(xc[:, a], xc[:, b])) ** 2
                     for a in range(x.shape[1]) for b in range(x.shape[1])))
    dy = np.sqrt(sum(float(np.dot(yc[:, a], yc[:, b])) ** 2
                     for a in range(y.shape[1]) for b in range(y.shape[1])))
    if dx == 0.0 or dy == 0.0:
        return 0.0
    return num / (dx * dy)


def cka_trace_form(k: np.ndarray, l: np.ndarray) -> float:
    """Gram-space CKA via the trace formula with explicit H products."""
    h = centering_matrix(k.shape[0])
    num = np.trace(k @ h @ l @ h)
    dk = np.trace(k @ h @ k @ h)
    dl = np.trace(l @ h @ l @ h)
    return float(num / np.sqrt(dk * dl))


def class_components(x: np.ndarray, y: np.ndarray, labels) -> tuple:
    """Double-loop intra/inter sums over the centered Grams."""
    h = centering_matrix(x.shape[0])
    xc = h @ x
    yc = h @ y
    k = xc @ xc.T
    l = yc @ yc.T
    d = np.linalg.norm(xc.T @ xc) * np.linalg.norm(yc.T @ yc)
    intra = inter = 0.0
    n = x.shape[0]
    for i in range(n):
        for j in range(n):
            term = k[i, j] * l[i, j]
            if labels[i] == labels[j]:
                intra += term
            else:
                inter += term
    return intra / d, inter / d


def jacobi_singular_values(m: np.ndarray, sweeps: int = 60) -> np.ndarray:
    """One-sided Jacobi SVD: rotate column pairs until A^T A is diagonal."""
    a = np.array(m, dtype=np.float64)
    if a.shape[0] < a.shape[1]:
        a = a.T
    n = a.shape[1]
    for _ in range(sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = float(np.dot(a[:, p], a[:, q]))
                app = float(np.dot(a[:, p], a[:, p]))
                aqq = float(np.dot(a[:, q], a[:, q]))
                off = max(off, abs(apq))
                if abs(apq) < 1e-15 * max(1.0, np.sqrt(app * aqq)):
                    continue
                tau = (aqq - app) / (2.0 * apq)
                sign = 1.0 if tau >= 0 else -1.0
                t = sign / (abs(tau) + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                ap = a[:, p].copy()
                a[:, p] = c * ap - s * a[:, q]
                a[:, q] = s * ap + c * a[:, q]
        if off < 1e-14:
            break
    sv = np.sqrt((a * a).sum(axis=0))
    return np.sort(sv)[::-1]


def nuclear_norm_jacobi(m: np.ndarray) -> float:
    return float(jacobi_singular_values(m).sum())


def _project_out(w: np.ndarray, constraints: list) -> np.ndarray:
    """Remove components of w along the given constraint vectors."""
    for c in constraints:
        denom = float(np.dot(c, c))
        if denom > 0:
            w = w - c * (float(np.dot(c, w)) / denom)
    return w


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def cca_ascent(x: np.ndarray, y: np.ndarray, iters: int = 2000,
               tol: float = 1e-15) -> np.ndarray:
    """Canonical correlations by constrained alternating ascent.

    For each component, alternately fit one side's weights by least squares
    to the other side's current projection, projecting out the previously
    accepted projections (the orthogonality constraints), until the
    correlation stops improving. No cross-product SVD is involved.
    """
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    k = min(x.shape[1], y.shape[1])
    rng = np.random.default_rng(12345)
    us = []  # accepted unit projections X w_j
    vs = []  # accepted unit projections Y v_j
    rhos = []
    for _ in range(k):
        t = _unit(_project_out(yc @ rng.normal(size=y.shape[1]), vs))
        u = np.zeros(x.shape[0])
        rho_prev = -1.0
        rho = 0.0
        for _ in range(iters):
            w, *_ = np.linalg.lstsq(xc, t, rcond=None)
            u = _unit(_project_out(xc @ w, us))
            vcoef, *_ = np.linalg.lstsq(yc, u, rcond=None)
            t = _unit(_project_out(yc @ vcoef, vs))
            rho = abs(float(np.dot(u, t)))
            if abs(rho - rho_prev) < tol:
                break
            rho_prev = rho
        us.append(u)
        vs.append(t)
        rhos.append(max(0.0, min(1.0, rho)))
    return np.array(rhos)


def block_mean_with_loops(values: np.ndarray, min_lag: int) -> float:
    total = 0.0
    count = 0
    size = values.shape[0]
    for i in range(size):
        for j in range(size):
            if abs(i - j) >= min_lag:
                total += values[i, j]
                count += 1
    return total / count
