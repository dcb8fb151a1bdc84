"""Independent reference implementations used to cross-check the package.

Everything here is deliberately written against the most literal
definition available (scaling-and-squaring for the matrix exponential,
central differences for derivatives, textbook update equations for the
optimizer) rather than sharing any code with the package under test.
"""

import numpy as np


def expm_squaring(X: np.ndarray) -> np.ndarray:
    """Matrix exponential by scaling and squaring.

    Scales X down by a power of two until its 1-norm is below 1/4,
    runs the Taylor series until terms vanish in float64, then squares
    the result back up.  Slow and simple on purpose.
    """
    X = np.asarray(X, dtype=np.float64)
    norm = np.linalg.norm(X, 1)
    j = max(0, int(np.ceil(np.log2(max(norm, 1e-300) / 0.25))))
    Y = X / (2.0**j)
    E = np.eye(X.shape[0])
    term = np.eye(X.shape[0])
    for k in range(1, 60):
        term = term @ Y / k
        E = E + term
        if np.max(np.abs(term)) < 1e-300:
            break
    for _ in range(j):
        E = E @ E
    return E


def numeric_jacobian(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of f: R^n -> R^m, shape (m, n)."""
    x = np.asarray(x, dtype=np.float64)
    y0 = np.asarray(f(x), dtype=np.float64)
    J = np.zeros((y0.size, x.size))
    for i in range(x.size):
        xp = x.copy().ravel()
        xm = x.copy().ravel()
        xp[i] += eps
        xm[i] -= eps
        yp = np.asarray(f(xp.reshape(x.shape)), dtype=np.float64)
        ym = np.asarray(f(xm.reshape(x.shape)), dtype=np.float64)
        J[:, i] = (yp - ym).ravel() / (2.0 * eps)
    return J


def numeric_grad(f, x: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of a scalar function, evaluated in float64.

    eps defaults large-ish because callers probe float32 pipelines where
    the function itself carries ~1e-7 relative noise.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x).ravel()
    flat = x.ravel()
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (float(f(xp.reshape(x.shape))) - float(f(xm.reshape(x.shape)))) / (
            2.0 * eps
        )
    return g.reshape(x.shape)


def adam_reference(grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Run textbook Adam over a recorded gradient sequence for one scalar.

    grads: list of floats (gradient at each step, starting at t=1).
    Returns the sequence of parameter values starting from 0.
    """
    m = 0.0
    v = 0.0
    x = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        x = x - lr * mhat / (np.sqrt(vhat) + eps)
        out.append(x)
    return out


def gd_ridge_reference(features, targets, lam, lr=None, tol=1e-12, max_iters=200_000):
    """Minimize sum ||y - W f - b||^2 + lam ||W||_F^2 by full-batch
    gradient descent until the gradient is numerically zero.

    Independent of any closed-form solve; used to cross-check the
    normal-equation path. Step size defaults to 1/L with L from the
    largest eigenvalue of the quadratic form.
    """
    F = np.asarray(features, dtype=np.float64)
    Y = np.asarray(targets, dtype=np.float64)
    m, nf = F.shape
    k = Y.shape[1]
    aug = np.concatenate([F, np.ones((m, 1))], axis=1)
    H = 2.0 * (aug.T @ aug)
    H[np.diag_indices(nf)] += 2.0 * lam
    if lr is None:
        lr = 1.0 / float(np.linalg.eigvalsh(H).max())
    Wb = np.zeros((nf + 1, k))
    rhs = 2.0 * (aug.T @ Y)
    for _ in range(max_iters):
        g = H @ Wb - rhs
        Wb -= lr * g
        if float(np.abs(g).max()) < tol:
            break
    return Wb[:nf].T, Wb[nf]
