"""Margin losses, the 1-D population curve phi(r) + beta*r, and objectives.

The population curve phi(r) = E V(r + sigma_eps * sqrt(r) * Z) with
Z ~ N(0,1) is evaluated by Gauss-Hermite quadrature.  Its penalized form
h_pop(r) = phi(r) + beta*r has a unique positive minimizer r_star under
the parameter constraints enforced by ``check_curve_assumptions``.
"""

import math

import numpy as np

HINGE = "hinge"
LOGISTIC = "logistic"

_GH_CACHE = {}


class MarginLoss:
    """Hinge (1-x)_+ or logistic log(1+e^-x).

    Both are convex, nonincreasing, bounded below by 0, and 1-Lipschitz.
    """

    def __init__(self, kind):
        if kind not in (HINGE, LOGISTIC):
            raise ValueError(f"unknown loss kind {kind!r}")
        self.kind = kind

    @property
    def lipschitz(self):
        return 1.0

    def value_at_zero(self):
        return 1.0 if self.kind == HINGE else math.log(2.0)

    def inf_value(self):
        return 0.0

    def value(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.kind == HINGE:
            out = np.maximum(1.0 - t, 0.0)
        else:
            # softplus(-t), stable for large |t|
            out = np.logaddexp(0.0, -t)
        return out if out.ndim else float(out)

    def subgradient(self, t):
        """An element of the subdifferential, always in [-1, 0].

        Hinge returns -1 at the kink t = 1 (any subgradient element is
        valid for subgradient descent).
        """
        t = np.asarray(t, dtype=np.float64)
        if self.kind == HINGE:
            out = np.where(t <= 1.0, -1.0, 0.0)
        else:
            out = -1.0 / (1.0 + np.exp(np.minimum(t, 700.0)))
        return out if out.ndim else float(out)


def _gauss_hermite(n):
    """Nodes/weights for E f(Z), Z standard normal."""
    if n not in _GH_CACHE:
        x, w = np.polynomial.hermite.hermgauss(n)
        _GH_CACHE[n] = (x * math.sqrt(2.0), w / math.sqrt(math.pi))
    return _GH_CACHE[n]


class PopulationCurve:
    """phi(r) and h_pop(r) = phi(r) + beta*r for a given (V, sigma_eps, beta)."""

    def __init__(self, loss, sigma_eps, beta):
        if beta <= 0:
            raise ValueError("beta must be positive")
        if sigma_eps < 0:
            raise ValueError("sigma_eps must be nonnegative")
        self.loss = loss
        self.sigma_eps = float(sigma_eps)
        self.beta = float(beta)

    def phi(self, r, quadrature_points=200):
        if np.any(np.asarray(r) < 0):
            raise ValueError("r must be nonnegative")
        if self.sigma_eps == 0.0:
            return self.loss.value(r)
        r = np.asarray(r, dtype=np.float64)
        nodes, weights = _gauss_hermite(quadrature_points)
        t = r[..., None] + self.sigma_eps * np.sqrt(r)[..., None] * nodes
        out = self.loss.value(t) @ weights
        return out if out.ndim else float(out)

    def h_pop(self, r, quadrature_points=200):
        return self.phi(r, quadrature_points) + self.beta * np.asarray(r)


def check_curve_assumptions(curve):
    """Raise unless the (loss, sigma_eps, beta) combination guarantees a
    unique positive minimizer of h_pop; the message names the violated
    inequality."""
    s2 = curve.sigma_eps**2
    if curve.loss.kind == HINGE:
        if s2 >= 4.0:
            raise ValueError(f"hinge loss requires sigma_eps^2 < 4, got {s2:g}")
        if curve.beta >= 1.0:
            raise ValueError(f"hinge loss requires beta < 1, got {curve.beta:g}")
    else:
        lim = -4.0 + 2.0 * math.sqrt(6.0)
        if s2 >= lim:
            raise ValueError(
                f"logistic loss requires sigma_eps^2 < -4+2*sqrt(6) ~= {lim:.4f}, "
                f"got {s2:g}"
            )
        blim = 0.5 - s2 / 8.0
        if curve.beta >= blim:
            raise ValueError(
                f"logistic loss requires beta < 1/2 - sigma_eps^2/8 = {blim:.4f}, "
                f"got {curve.beta:g}"
            )


def solve_r_star(curve, quadrature_points=200, tol=1e-6):
    """Minimize h_pop over [0, r_max] by coarse grid + golden-section.

    Returns (r_star, h_min).  r_max = max(20, 4/beta) bounds the search:
    h_pop(r) >= beta*r, so minimizers cannot exceed level-set slack.
    """
    check_curve_assumptions(curve)
    r_max = max(20.0, 4.0 / curve.beta)
    grid = np.linspace(0.0, r_max, 4001)
    h = curve.h_pop(grid, quadrature_points)
    i = int(np.argmin(h))
    lo = grid[max(i - 1, 0)]
    hi = grid[min(i + 1, grid.size - 1)]

    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc = float(curve.h_pop(c, quadrature_points))
    fd = float(curve.h_pop(d, quadrature_points))
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = float(curve.h_pop(c, quadrature_points))
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = float(curve.h_pop(d, quadrature_points))
    r_star = 0.5 * (a + b)
    return r_star, float(curve.h_pop(r_star, quadrature_points))


EXHAUSTIVE_K_MAX = 12
MC_MESSAGES = 256


def objective_finite(vectors, data, loss, beta, rng=None, exhaustive=None):
    """Finite-sample objective L_n for fixed watermark vectors.

    ``vectors`` is K x D, ``data`` is n x D (identity distortion channel).
    The inner expectation over messages is exact (all 2^K sign patterns)
    when K <= 12 or ``exhaustive=True``; otherwise 256 Monte-Carlo
    messages per datum drawn from ``rng``.
    """
    W = np.asarray(vectors, dtype=np.float64)
    X = np.atleast_2d(np.asarray(data, dtype=np.float64))
    K = W.shape[0]
    if X.shape[1] != W.shape[1]:
        raise ValueError("data dimension does not match watermark dimension")
    if exhaustive is None:
        exhaustive = K <= EXHAUSTIVE_K_MAX

    G = W @ W.T  # K x K Gram matrix
    gamma = X @ W.T  # n x K

    if exhaustive:
        M = np.array(
            [[1 if (i >> k) & 1 else -1 for k in range(K)] for i in range(2**K)],
            dtype=np.float64,
        )
    else:
        if rng is None:
            raise ValueError("rng required for Monte-Carlo message sampling")
        M = rng.generator.integers(0, 2, size=(MC_MESSAGES, K)) * 2.0 - 1.0

    # t[i, m, k] = m_k * (gamma[i, k] + (G m)_k)
    shift = M @ G.T  # n_msg x K
    t = M[None] * (gamma[:, None, :] + shift[None])
    data_term = float(np.mean(np.sum(loss.value(t), axis=2)))
    return data_term + beta * float(np.sum(W * W))
