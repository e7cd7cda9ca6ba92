"""Discrete eigenpairs of the fractional Laplacian and modal transforms."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from .errors import ConfigError, EigenSolverError
from .mesh_fem import BandedMatrix, Mesh1D, SymmetricToeplitzMatrix


@dataclass(frozen=True)
class SpectralBasis:
    """First ``n_star`` generalized eigenpairs of (A_h, M_h), M-orthonormal.

    ``modes[:, n-1]`` holds the nodal values of phi_n at the interior nodes.
    """

    s: float
    lambdas: np.ndarray = field(repr=False)
    modes: np.ndarray = field(repr=False)
    mesh: Mesh1D
    mass: BandedMatrix = field(repr=False)

    @property
    def n_star(self) -> int:
        return len(self.lambdas)

    def truncated(self, n: int) -> "SpectralBasis":
        if n > self.n_star:
            raise ConfigError(f"cannot truncate {self.n_star} modes to {n}")
        return SpectralBasis(self.s, self.lambdas[:n], self.modes[:, :n], self.mesh, self.mass)


def asymptotic_eigenvalue(n, s: float):
    """(n pi / 2 - (1 - s) pi / 4)^(2s)."""
    n = np.asarray(n, dtype=float)
    return (n * math.pi / 2 - (1 - s) * math.pi / 4) ** (2 * s)


def asymptotic_eigenfunction(n: int, s: float, x):
    """sin(mu_n x + n pi / 2) with mu_n = n pi / 2 - (1 - s) pi / 4, the 2s-th root of the eigenvalue."""
    mu = n * math.pi / 2 - (1 - s) * math.pi / 4
    return np.sin(mu * np.asarray(x, dtype=float) + n * math.pi / 2)


def default_n_star(N: int) -> int:
    return max(1, N // 5)


def solve_eigenbasis(mass: BandedMatrix, stiffness: SymmetricToeplitzMatrix, n_star: int | None = None,
                     *, mesh: Mesh1D | None = None, s: float | None = None) -> SpectralBasis:
    N = mass.order
    if stiffness.order != N:
        raise ConfigError(f"mass ({N}) and stiffness ({stiffness.order}) orders differ")
    mesh = mesh or Mesh1D(N)
    if n_star is None:
        n_star = default_n_star(N)
    if not 1 <= n_star <= N:
        raise ConfigError(f"need 1 <= n* <= N={N}, got n*={n_star}")
    try:
        lam, vec = sla.eigh(stiffness.to_dense(), mass.to_dense(), subset_by_index=[0, n_star - 1])
    except (sla.LinAlgError, ValueError) as exc:
        raise EigenSolverError(f"generalized eigensolve failed for N={N}: {exc}") from exc
    if lam[0] <= 0 or not np.all(np.isfinite(lam)):
        raise EigenSolverError(f"pencil is not positive definite: lambda_1 = {lam[0]!r}")
    # eigh already returns M-orthonormal vectors; renormalise against round-off
    Mv = mass.matvec(vec)
    vec = vec / np.sqrt(np.einsum("ij,ij->j", vec, Mv))
    if s is not None:
        x = mesh.interior
        for j in range(n_star):
            ref = asymptotic_eigenfunction(j + 1, s, x)
            c = vec[:, j] @ mass.matvec(ref)
            if abs(c) < 1e-12:
                c = vec[np.argmax(np.abs(vec[:, j])), j]
            if c < 0:
                vec[:, j] = -vec[:, j]
    return SpectralBasis(float(s) if s is not None else float("nan"), lam, vec, mesh, mass)


def project(f: np.ndarray, basis: SpectralBasis, upto: int | None = None) -> np.ndarray:
    """Modal coefficients f_n = f^T M_h phi_n, n = 1..upto."""
    upto = basis.n_star if upto is None else upto
    if upto > basis.n_star:
        raise ConfigError(f"requested {upto} coefficients but the basis holds {basis.n_star}")
    return basis.modes[:, :upto].T @ basis.mass.matvec(np.asarray(f, dtype=float))


def synthesize(coeffs: np.ndarray, basis: SpectralBasis) -> np.ndarray:
    c = np.asarray(coeffs, dtype=float)
    if c.shape[0] > basis.n_star:
        raise ConfigError(f"{c.shape[0]} coefficients exceed the basis size {basis.n_star}")
    return basis.modes[:, : c.shape[0]] @ c


def save_basis(path, basis: SpectralBasis) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, s=basis.s, N=basis.mesh.N, lambdas=basis.lambdas, modes=np.asfortranarray(basis.modes))
    tmp.replace(path)
    return path


def load_basis(path, mass: BandedMatrix | None = None) -> SpectralBasis:
    from .mesh_fem import assemble_mass

    with np.load(path) as data:
        mesh = Mesh1D(int(data["N"]))
        return SpectralBasis(float(data["s"]), data["lambdas"].copy(), np.ascontiguousarray(data["modes"]),
                             mesh, mass or assemble_mass(mesh))
