"""Row-wise numeric kernels with a numba path and a pure-numpy path.

The backend is chosen once at import from ``FOMO_BACKEND`` (``numba`` or
``numpy``; default ``numba`` when it imports) and can be switched at runtime
with :func:`set_backend`. Both paths compute the same quantities; results agree
to rounding but are not bit-identical across backends, so a run should stick
to one backend.

Matrix products are left to numpy (BLAS) on both paths.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

_BACKENDS = ("numba", "numpy")


def _initial_backend() -> str:
    want = os.environ.get("FOMO_BACKEND", "numba").strip().lower()
    if want not in _BACKENDS:
        raise ValueError(f"FOMO_BACKEND must be one of {_BACKENDS}, got {want!r}")
    if want == "numba" and not HAVE_NUMBA:
        return "numpy"
    return want


_backend = _initial_backend()


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in _BACKENDS:
        raise ValueError(f"backend must be one of {_BACKENDS}, got {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not importable")
    _backend = name


# ---------------------------------------------------------------------------
# numpy reference path


def _np_log_softmax(z):
    m = z.max(axis=1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def _np_xent(logits, labels):
    logp = _np_log_softmax(logits)
    rows = np.arange(logits.shape[0])
    loss = -logp[rows, labels]
    grad = np.exp(logp)
    grad[rows, labels] -= 1
    return loss, grad


def _np_kl(p_logits, q_logits):
    logp = _np_log_softmax(p_logits)
    logq = _np_log_softmax(q_logits)
    p = np.exp(logp)
    a = logp - logq
    kl = (p * a).sum(axis=1)
    grad = p * (a - kl[:, None])
    return kl, grad


def _np_project_l2(delta, eps):
    norms = np.sqrt((delta.astype(np.float64) ** 2).sum(axis=1))
    factor = np.ones_like(norms)
    over = norms > eps
    factor[over] = eps / norms[over]
    return (delta * factor[:, None].astype(delta.dtype)).astype(delta.dtype)


def _np_normalize_rows(g):
    norms = np.sqrt((g.astype(np.float64) ** 2).sum(axis=1))
    out = np.zeros_like(g)
    nz = norms > 0
    out[nz] = (g[nz] / norms[nz, None]).astype(g.dtype)
    return out


def _np_sgd_update(param, grad, vel, lr, momentum, weight_decay):
    vel *= momentum
    vel += grad
    if weight_decay:
        vel += weight_decay * param
    param -= lr * vel


def _np_box_blur(images, k):
    # images: (B, H, W); zero padding, divisor k*k
    if k <= 1:
        return images.copy()
    r = k // 2
    b, h, w = images.shape
    padded = np.zeros((b, h + 2 * r, w + 2 * r), dtype=np.float64)
    padded[:, r : r + h, r : r + w] = images
    out = np.zeros((b, h, w), dtype=np.float64)
    for di in range(k):
        for dj in range(k):
            out += padded[:, di : di + h, dj : dj + w]
    return (out / (k * k)).astype(images.dtype)


# ---------------------------------------------------------------------------
# numba path

if HAVE_NUMBA:

    @njit(cache=True)
    def _nb_xent(logits, labels):
        b, k = logits.shape
        loss = np.empty(b, dtype=logits.dtype)
        grad = np.empty_like(logits)
        for i in range(b):
            m = logits[i, 0]
            for j in range(1, k):
                if logits[i, j] > m:
                    m = logits[i, j]
            s = 0.0
            for j in range(k):
                e = np.exp(logits[i, j] - m)
                grad[i, j] = e
                s += e
            lse = np.log(s)
            for j in range(k):
                grad[i, j] = grad[i, j] / s
            y = labels[i]
            loss[i] = lse - (logits[i, y] - m)
            grad[i, y] -= 1.0
        return loss, grad

    @njit(cache=True)
    def _nb_kl(p_logits, q_logits):
        b, k = p_logits.shape
        kl = np.empty(b, dtype=p_logits.dtype)
        grad = np.empty_like(p_logits)
        a = np.empty(k, dtype=np.float64)
        for i in range(b):
            mp = p_logits[i, 0]
            mq = q_logits[i, 0]
            for j in range(1, k):
                if p_logits[i, j] > mp:
                    mp = p_logits[i, j]
                if q_logits[i, j] > mq:
                    mq = q_logits[i, j]
            sp = 0.0
            sq = 0.0
            for j in range(k):
                sp += np.exp(p_logits[i, j] - mp)
                sq += np.exp(q_logits[i, j] - mq)
            lsp = np.log(sp)
            lsq = np.log(sq)
            total = 0.0
            for j in range(k):
                logp = p_logits[i, j] - mp - lsp
                logq = q_logits[i, j] - mq - lsq
                a[j] = logp - logq
                pj = np.exp(logp)
                grad[i, j] = pj
                total += pj * a[j]
            kl[i] = total
            for j in range(k):
                grad[i, j] = grad[i, j] * (a[j] - total)
        return kl, grad

    @njit(cache=True)
    def _nb_project_l2(delta, eps):
        b, d = delta.shape
        out = np.empty_like(delta)
        for i in range(b):
            s = 0.0
            for j in range(d):
                s += float(delta[i, j]) * float(delta[i, j])
            n = np.sqrt(s)
            f = 1.0
            if n > eps:
                f = eps / n
            for j in range(d):
                out[i, j] = delta[i, j] * f
        return out

    @njit(cache=True)
    def _nb_normalize_rows(g):
        b, d = g.shape
        out = np.zeros_like(g)
        for i in range(b):
            s = 0.0
            for j in range(d):
                s += float(g[i, j]) * float(g[i, j])
            if s > 0.0:
                n = np.sqrt(s)
                for j in range(d):
                    out[i, j] = g[i, j] / n
        return out

    @njit(cache=True)
    def _nb_sgd_update(param, grad, vel, lr, momentum, weight_decay):
        p = param.ravel()
        g = grad.ravel()
        v = vel.ravel()
        for i in range(p.size):
            vi = momentum * v[i] + g[i] + weight_decay * p[i]
            v[i] = vi
            p[i] = p[i] - lr * vi

    @njit(cache=True)
    def _nb_box_blur(images, k):
        b, h, w = images.shape
        out = np.empty_like(images)
        r = k // 2
        inv = 1.0 / (k * k)
        for n in range(b):
            for i in range(h):
                for j in range(w):
                    s = 0.0
                    for di in range(-r, r + 1):
                        ii = i + di
                        if ii < 0 or ii >= h:
                            continue
                        for dj in range(-r, r + 1):
                            jj = j + dj
                            if 0 <= jj < w:
                                s += images[n, ii, jj]
                    out[n, i, j] = s * inv
        return out


# ---------------------------------------------------------------------------
# dispatch


def xent_rows(logits: np.ndarray, labels: np.ndarray):
    """Per-row cross-entropy and d(row loss)/d(logits) = softmax - onehot."""
    if _backend == "numba":
        return _nb_xent(np.ascontiguousarray(logits), np.ascontiguousarray(labels, dtype=np.int64))
    return _np_xent(logits, labels)


def kl_rows(p_logits: np.ndarray, q_logits: np.ndarray):
    """Per-row KL(softmax(p) || softmax(q)) and its gradient w.r.t. the p logits."""
    if _backend == "numba":
        return _nb_kl(np.ascontiguousarray(p_logits), np.ascontiguousarray(q_logits))
    return _np_kl(p_logits, q_logits)


def project_l2_rows(delta: np.ndarray, eps: float) -> np.ndarray:
    if _backend == "numba":
        return _nb_project_l2(np.ascontiguousarray(delta), float(eps))
    return _np_project_l2(delta, eps)


def normalize_rows(g: np.ndarray) -> np.ndarray:
    """Scale every row to unit l2 norm; all-zero rows stay zero."""
    if _backend == "numba":
        return _nb_normalize_rows(np.ascontiguousarray(g))
    return _np_normalize_rows(g)


def sgd_update(param, grad, vel, lr, momentum, weight_decay) -> None:
    """In place: vel = momentum*vel + grad + wd*param; param -= lr*vel."""
    if _backend == "numba":
        dt = param.dtype.type
        _nb_sgd_update(param, grad, vel, dt(lr), dt(momentum), dt(weight_decay))
    else:
        dt = param.dtype.type
        _np_sgd_update(param, grad, vel, dt(lr), dt(momentum), dt(weight_decay))


def box_blur(images: np.ndarray, k: int) -> np.ndarray:
    """k x k mean filter over (B, H, W) with zero padding."""
    if k <= 1:
        return images.copy()
    if _backend == "numba":
        return _nb_box_blur(np.ascontiguousarray(images), int(k))
    return _np_box_blur(images, int(k))
