"""Independent reference solvers used by the tests."""

import itertools
import math

import numpy as np


def g1(alpha, y, V):
    r = y - V @ alpha
    return 0.5 * float(r @ r) + float(np.sum(alpha - 1.0))


def support_minimizer(y, V, max_support):
    """Exhaustive minimizer of g_1 over non-negative vectors with at most
    ``max_support`` nonzeros.

    For every candidate support T the restricted problem is a convex QP; its
    minimizer with all entries strictly positive solves V_T^T V_T a = V_T^T y - 1.
    Enumerating every T (and hence every active set) gives the exact minimum.
    """
    N = V.shape[1]
    best_a, best_g = np.zeros(N), g1(np.zeros(N), y, V)
    for k in range(1, max_support + 1):
        for T in itertools.combinations(range(N), k):
            T = list(T)
            VT = V[:, T]
            G = VT.T @ VT
            if np.linalg.cond(G) > 1e12:
                continue
            x = np.linalg.solve(G, VT.T @ y - 1.0)
            if np.all(x > 0):
                a = np.zeros(N)
                a[T] = x
                g = g1(a, y, V)
                if g < best_g - 1e-13 * max(1.0, abs(best_g)):
                    best_a, best_g = a, g
    return best_a, best_g


def grid_minimizer_2(y, V, T, steps=201, span=None):
    """Brute-force grid over the 2-D non-negative quadrant of support T,
    refined three times around the best cell."""
    i, j = T
    a_hi = span or 2.0 * max(1.0, float(np.abs(np.linalg.lstsq(V[:, T], y, rcond=None)[0]).max()))
    lo = np.zeros(2)
    hi = np.full(2, a_hi)
    best = None
    for _ in range(4):
        u = np.linspace(lo[0], hi[0], steps)
        v = np.linspace(lo[1], hi[1], steps)
        A, B = np.meshgrid(u, v, indexing="ij")
        R = y[None, None, :] - A[..., None] * V[:, i] - B[..., None] * V[:, j]
        G = 0.5 * np.einsum("abk,abk->ab", R, R) + A + B
        k = np.unravel_index(np.argmin(G), G.shape)
        best = np.array([u[k[0]], v[k[1]]])
        du, dv = u[1] - u[0], v[1] - v[0]
        lo = np.maximum(best - 2 * np.array([du, dv]), 0.0)
        hi = best + 2 * np.array([du, dv])
    return best


def slim_reference_step(alpha, y, V, q):
    """Literal evaluation: P V^T (V P V^T + I)^-1 y, negatives set to zero."""
    P = np.diag(alpha ** (2.0 - q))
    A = V @ P @ V.T + np.eye(V.shape[0])
    out = P @ V.T @ np.linalg.inv(A) @ y
    return np.where(out < 0, 0.0, out)


def objective_reference(alpha, y, V, q):
    total = 0.0
    for i in range(len(y)):
        r = y[i] - sum(V[i, n] * alpha[n] for n in range(len(alpha)))
        total += 0.5 * r * r
    for a in alpha:
        total += (math.pow(a, q) - 1.0) / q
    return total
