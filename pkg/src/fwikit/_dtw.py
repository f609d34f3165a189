"""Compiled soft-DTW kernels (forward value and gradient of the cost matrix)."""
import numba
import numpy as np


@numba.njit(cache=True)
def _forward(x, y, gamma, R, arg):
    N, M = x.shape[0], y.shape[0]
    inf = np.inf
    for i in range(N + 1):
        for j in range(M + 1):
            R[i, j] = inf
    R[0, 0] = 0.0
    for i in range(1, N + 1):
        for j in range(1, M + 1):
            d = (x[i - 1] - y[j - 1]) ** 2
            a = R[i - 1, j]
            b = R[i, j - 1]
            c = R[i - 1, j - 1]
            if gamma == 0.0:
                # ties prefer the diagonal, then vertical, then horizontal
                m, k = c, 2
                if a < m:
                    m, k = a, 0
                if b < m:
                    m, k = b, 1
                arg[i, j] = k
                R[i, j] = d + m
            else:
                m = min(a, min(b, c))
                if m == inf:
                    R[i, j] = inf
                    continue
                s = np.exp(-(a - m) / gamma) + np.exp(-(b - m) / gamma) + np.exp(-(c - m) / gamma)
                R[i, j] = d + m - gamma * np.log(s)
    return R[N, M]


@numba.njit(cache=True)
def _backward(x, y, gamma, R, arg, E):
    """E[i, j] = dR[N, M] / dD[i-1, j-1] (1-based interior)."""
    N, M = x.shape[0], y.shape[0]
    for i in range(N + 2):
        for j in range(M + 2):
            E[i, j] = 0.0
    E[N, M] = 1.0
    for i in range(N, 0, -1):
        for j in range(M, 0, -1):
            if i == N and j == M:
                continue
            acc = 0.0
            if gamma == 0.0:
                if i + 1 <= N and arg[i + 1, j] == 0:
                    acc += E[i + 1, j]
                if j + 1 <= M and arg[i, j + 1] == 1:
                    acc += E[i, j + 1]
                if i + 1 <= N and j + 1 <= M and arg[i + 1, j + 1] == 2:
                    acc += E[i + 1, j + 1]
            else:
                r = R[i, j]
                if i + 1 <= N:
                    d = (x[i] - y[j - 1]) ** 2
                    acc += E[i + 1, j] * np.exp((R[i + 1, j] - r - d) / gamma)
                if j + 1 <= M:
                    d = (x[i - 1] - y[j]) ** 2
                    acc += E[i, j + 1] * np.exp((R[i, j + 1] - r - d) / gamma)
                if i + 1 <= N and j + 1 <= M:
                    d = (x[i] - y[j]) ** 2
                    acc += E[i + 1, j + 1] * np.exp((R[i + 1, j + 1] - r - d) / gamma)
            E[i, j] = acc


@numba.njit(cache=True)
def soft_dtw_batch(X, Y, gamma):
    """Row-wise soft-DTW values for (ntr, N) and (ntr, M) arrays."""
    ntr, N = X.shape
    M = Y.shape[1]
    out = np.empty(ntr)
    R = np.empty((N + 1, M + 1))
    arg = np.zeros((N + 1, M + 1), dtype=np.int8)
    for k in range(ntr):
        out[k] = _forward(X[k], Y[k], gamma, R, arg)
    return out


@numba.njit(cache=True)
def soft_dtw_batch_grad(X, Y, gamma, w):
    """Gradients of sum_k w[k] * sdtw(X[k], Y[k]) with respect to X and Y."""
    ntr, N = X.shape
    M = Y.shape[1]
    gX = np.zeros((ntr, N))
    gY = np.zeros((ntr, M))
    R = np.empty((N + 1, M + 1))
    arg = np.zeros((N + 1, M + 1), dtype=np.int8)
    E = np.empty((N + 2, M + 2))
    for k in range(ntr):
        if w[k] == 0.0:
            continue
        _forward(X[k], Y[k], gamma, R, arg)
        _backward(X[k], Y[k], gamma, R, arg, E)
        for i in range(N):
            for j in range(M):
                e = E[i + 1, j + 1]
                if e != 0.0:
                    g = 2.0 * (X[k, i] - Y[k, j]) * e * w[k]
                    gX[k, i] += g
                    gY[k, j] -= g
    return gX, gY
