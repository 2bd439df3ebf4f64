"""Perturbed low-dimensional Gaussian data model x = B z + eps.

The latent z ~ N(0, Sigma_Z) lives in R^d, the ambient noise eps is
isotropic N(0, sigma_eps^2 I_D), and the image subspace U is the column
space of B.  Projections onto U use an orthonormal basis obtained by
pivoted QR of B.
"""

import json

import numpy as np
from scipy.linalg import qr

from addmark.tensor import ImageTensor, read_raw_tensor, write_raw_tensor

_RANK_RTOL = 1e-8


class ModelSample:
    """One draw: x = B z + eps, with the construction held exactly."""

    __slots__ = ("x", "z", "eps")

    def __init__(self, x, z, eps):
        self.x = x
        self.z = z
        self.eps = eps


class LowDimModel:
    def __init__(self, B, sigma_Z, sigma_eps):
        B = np.asarray(B, dtype=np.float64)
        sigma_Z = np.asarray(sigma_Z, dtype=np.float64)
        if B.ndim != 2:
            raise ValueError("B must be a D x d matrix")
        D, d = B.shape
        if sigma_Z.shape != (d, d):
            raise ValueError("sigma_Z must be d x d")
        if not np.allclose(sigma_Z, sigma_Z.T):
            raise ValueError("sigma_Z must be symmetric")
        if np.linalg.eigvalsh(sigma_Z).min() <= 0:
            raise ValueError("sigma_Z must be positive definite")
        if sigma_eps < 0:
            raise ValueError("sigma_eps must be nonnegative")
        sv = np.linalg.svd(B, compute_uv=False)
        if sv.min() <= _RANK_RTOL * sv.max():
            raise ValueError("B is rank deficient")
        self.B = B
        self.sigma_Z = sigma_Z
        self.sigma_eps = float(sigma_eps)
        self.D = D
        self.d = d
        # Orthonormal basis of U via pivoted QR of B.
        Q, _, _ = qr(B, mode="economic", pivoting=True)
        self.U_basis = Q
        self._chol_Z = np.linalg.cholesky(sigma_Z)

    @classmethod
    def random(cls, D, d, sigma_Z, sigma_eps, rng):
        """B with i.i.d. standard normal columns, then orthonormalized."""
        G = rng.generator.standard_normal((D, d))
        Q, _ = np.linalg.qr(G)
        if np.isscalar(sigma_Z):
            sigma_Z = float(sigma_Z) * np.eye(d)
        return cls(Q, sigma_Z, sigma_eps)

    def sample(self, n, rng):
        """n independent draws of (x, z, eps)."""
        if n < 1:
            raise ValueError("n must be >= 1")
        g = rng.generator
        Z = g.standard_normal((n, self.d)) @ self._chol_Z.T
        eps = self.sigma_eps * g.standard_normal((n, self.D))
        X = Z @ self.B.T + eps
        return [ModelSample(X[i], Z[i], eps[i]) for i in range(n)]

    def sample_matrix(self, n, rng):
        """n x D matrix of x draws (bulk variant of sample)."""
        if n < 1:
            raise ValueError("n must be >= 1")
        g = rng.generator
        Z = g.standard_normal((n, self.d)) @ self._chol_Z.T
        eps = self.sigma_eps * g.standard_normal((n, self.D))
        return Z @ self.B.T + eps

    def project_onto_U(self, v):
        v = np.asarray(v, dtype=np.float64)
        if v.shape[-1] != self.D:
            raise ValueError(f"vector length {v.shape[-1]} != D={self.D}")
        return (v @ self.U_basis) @ self.U_basis.T

    def project_onto_U_perp(self, v):
        return np.asarray(v, dtype=np.float64) - self.project_onto_U(v)

    def covariance_Sigma_X(self):
        """Closed-form ambient covariance B Sigma_Z B^T + sigma_eps^2 I."""
        return self.B @ self.sigma_Z @ self.B.T + self.sigma_eps**2 * np.eye(self.D)

    def trace_Sigma_X(self):
        return float(
            np.sum(self.sigma_Z * (self.B.T @ self.B)) + self.D * self.sigma_eps**2
        )

    def save(self, prefix):
        """Write <prefix>.json sidecar plus <prefix>.B.addt / .sigmaZ.addt."""
        write_raw_tensor(
            f"{prefix}.B.addt",
            ImageTensor(1, self.D, self.d, self.B, value_range="unbounded"),
        )
        write_raw_tensor(
            f"{prefix}.sigmaZ.addt",
            ImageTensor(1, self.d, self.d, self.sigma_Z, value_range="unbounded"),
        )
        with open(f"{prefix}.json", "w") as fh:
            json.dump({"D": self.D, "d": self.d, "sigma_eps": self.sigma_eps}, fh)

    @classmethod
    def load(cls, prefix):
        with open(f"{prefix}.json") as fh:
            head = json.load(fh)
        B = read_raw_tensor(f"{prefix}.B.addt").as_array()[0]
        sigma_Z = read_raw_tensor(f"{prefix}.sigmaZ.addt").as_array()[0]
        # f32 round-trip can break exact symmetry; resymmetrize.
        sigma_Z = 0.5 * (sigma_Z + sigma_Z.T)
        model = cls(B, sigma_Z, head["sigma_eps"])
        if model.D != head["D"] or model.d != head["d"]:
            raise ValueError(f"{prefix}: sidecar disagrees with tensor shapes")
        return model


def default_harness_model(rng, D=128, d=8, latent_scale=4.0, sigma_eps=0.3):
    """The synthetic model used throughout the verification harness."""
    return LowDimModel.random(D, d, latent_scale, sigma_eps, rng)
