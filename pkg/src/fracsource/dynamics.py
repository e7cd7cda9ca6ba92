"""Forward/backward implicit Euler, spectral partial sums and the Duhamel operator."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla
from scipy.signal import fftconvolve, lfilter
from scipy.special import roots_legendre

from .errors import ConfigError, NumericalError
from .mesh_fem import BandedMatrix, Mesh1D, SubdomainMask, SymmetricToeplitzMatrix
from .spectral import SpectralBasis


@dataclass(frozen=True)
class TimeGrid:
    """Fine grid t_j = j k (k = T/M) and coarse horizons tau_l = l kappa (kappa = T/f_M)."""

    T: float
    M: int
    f_M: int

    def __post_init__(self):
        if not self.T > 0:
            raise ConfigError(f"horizon T must be positive, got {self.T}")
        if self.M < 1 or self.f_M < 1:
            raise ConfigError("M and f_M must be positive")
        if self.M % self.f_M:
            raise ConfigError(f"f_M={self.f_M} must divide M={self.M} so the horizons lie on the fine grid")

    @property
    def k(self) -> float:
        return self.T / self.M

    @property
    def kappa(self) -> float:
        return self.T / self.f_M

    @property
    def t(self) -> np.ndarray:
        return self.k * np.arange(self.M + 1)

    @property
    def taus(self) -> np.ndarray:
        return self.kappa * np.arange(self.f_M + 1)

    @property
    def stride(self) -> int:
        return self.M // self.f_M

    def fine_index(self, tau: float) -> int:
        j = int(round(tau / self.k))
        if j < 0 or j > self.M or abs(j * self.k - tau) > 1e-9 * max(1.0, self.T):
            raise ConfigError(f"horizon {tau} is not a point of the fine time grid (k={self.k})")
        return j


@dataclass(frozen=True)
class SigmaProfile:
    """Temporal factor sigma and its derivative, vectorised over t.

    ``mp_value``/``mp_derivative`` are optional mpmath versions used where a
    formula suffers cancellation in double precision.
    """

    name: str
    value: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    derivative: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    mp_value: Optional[Callable] = field(default=None, repr=False, compare=False)
    mp_derivative: Optional[Callable] = field(default=None, repr=False, compare=False)

    def __call__(self, t):
        return np.asarray(self.value(np.asarray(t, dtype=float)), dtype=float) * np.ones_like(t, dtype=float)

    def d(self, t):
        return np.asarray(self.derivative(np.asarray(t, dtype=float)), dtype=float) * np.ones_like(t, dtype=float)

    @property
    def at_zero(self) -> float:
        return float(self(0.0))

    def at(self, T: float) -> float:
        return float(self(T))


@dataclass(frozen=True)
class Trajectory:
    """Nodal values on the fine grid, ``values[:, j]`` = U^j; optional time derivative."""

    values: np.ndarray = field(repr=False)
    t: np.ndarray = field(repr=False)
    derivative: Optional[np.ndarray] = field(default=None, repr=False)
    modal: Optional[np.ndarray] = field(default=None, repr=False)
    modal_derivative: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class ObservationData:
    """u and u_t at the omega nodes, ``u[i, j]`` = u(x_{mask[i]}, t_j)."""

    u: np.ndarray = field(repr=False)
    ut: np.ndarray = field(repr=False)
    mask: SubdomainMask
    t: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.u.shape != self.ut.shape:
            raise ConfigError(f"u {self.u.shape} and u_t {self.ut.shape} shapes differ")
        if self.u.shape[0] != self.mask.size:
            raise ConfigError("observations must be restricted to the mask nodes")

    def scaled(self, alpha: float) -> "ObservationData":
        return ObservationData(alpha * self.u, alpha * self.ut, self.mask, self.t)


def _nodal_source(source, mesh: Mesh1D, t: np.ndarray, ncols: int) -> np.ndarray:
    if source is None:
        return np.zeros((mesh.N, ncols))
    if callable(source):
        x = mesh.interior
        return np.column_stack([np.broadcast_to(source(x, tj), x.shape) for tj in t])
    F = np.asarray(source, dtype=float)
    if F.shape[0] != mesh.N or F.shape[1] < ncols:
        raise ConfigError(f"source array of shape {F.shape} does not cover {mesh.N} nodes x {ncols} times")
    return F[:, :ncols]


def _step_factor(mass: BandedMatrix, stiffness: SymmetricToeplitzMatrix, k: float):
    try:
        return sla.cho_factor(mass.to_dense() + k * stiffness.to_dense())
    except sla.LinAlgError as exc:
        raise NumericalError(f"implicit Euler matrix M + kA is not positive definite: {exc}") from exc


def solve_forward(mesh: Mesh1D, mass: BandedMatrix, stiffness: SymmetricToeplitzMatrix, source,
                  u0, grid: TimeGrid) -> Trajectory:
    """(M + kA) U^{j+1} = M U^j + k M F^{j+1}, U^0 = u0."""
    k, t = grid.k, grid.t
    F = _nodal_source(source, mesh, t, grid.M + 1)
    U = np.zeros((mesh.N, grid.M + 1))
    U[:, 0] = 0.0 if u0 is None else u0
    fac = _step_factor(mass, stiffness, k)
    MF = mass.matvec(F)
    for j in range(grid.M):
        U[:, j + 1] = sla.cho_solve(fac, mass.matvec(U[:, j]) + k * MF[:, j + 1])
    return Trajectory(U, t)


def solve_backward(mesh: Mesh1D, mass: BandedMatrix, stiffness: SymmetricToeplitzMatrix, source,
                   terminal, grid: TimeGrid, tau: float) -> Trajectory:
    """-phi_t + A phi = source on (0, tau), phi(tau) = terminal, marched from tau down to 0.

    (M + kA) P^j = M P^{j+1} + k M G^j, with G^j the source at t_j.
    """
    J = grid.fine_index(tau)
    k = grid.k
    t = grid.t[: J + 1]
    G = _nodal_source(source, mesh, t, J + 1)
    P = np.zeros((mesh.N, J + 1))
    P[:, J] = terminal
    if J == 0:
        return Trajectory(P, t)
    fac = _step_factor(mass, stiffness, k)
    MG = mass.matvec(G)
    for j in range(J - 1, -1, -1):
        P[:, j] = sla.cho_solve(fac, mass.matvec(P[:, j + 1]) + k * MG[:, j])
    return Trajectory(P, t)


def unit_convolutions(lambdas: np.ndarray, sigma: SigmaProfile, grid: TimeGrid, order: int = 8) -> np.ndarray:
    """c_k(t_j) = int_0^{t_j} exp(-lambda_k (t_j - s)) sigma(s) ds for every mode and fine time.

    Stepwise recursion c(t_{j+1}) = e^{-lambda k} c(t_j) + local integral, the local
    integral by Gauss-Legendre so stiff modes stay exact to quadrature accuracy.
    """
    lam = np.asarray(lambdas, dtype=float)
    k, M = grid.k, grid.M
    xg, wg = roots_legendre(order)
    # s = t_j + k (1 + xi) / 2 ; weight exp(-lambda (t_{j+1} - s)) = exp(-lambda k (1 - xi) / 2)
    s_nodes = grid.t[:-1, None] + 0.5 * k * (1.0 + xg)[None, :]
    sig = sigma(s_nodes)
    kern = np.exp(-np.outer(lam, 0.5 * k * (1.0 - xg))) * (0.5 * k * wg)
    local = kern @ sig.T
    decay = np.exp(-lam * k)
    out = np.zeros((lam.size, M + 1))
    for i, d in enumerate(decay):
        out[i, 1:] = lfilter([1.0], [1.0, -d], local[i])
    return out


def spectral_forward(fcoeffs: np.ndarray, sigma: SigmaProfile, basis: SpectralBasis, grid: TimeGrid,
                     nodal: bool = True) -> Trajectory:
    """u = sum_k f_k (int_0^t e^{-lambda_k (t-s)} sigma(s) ds) phi_k and its exact time derivative."""
    f = np.asarray(fcoeffs, dtype=float)
    n = f.size
    if n > basis.n_star:
        raise ConfigError(f"{n} coefficients exceed n*={basis.n_star}")
    lam = basis.lambdas[:n]
    conv = unit_convolutions(lam, sigma, grid)
    modal = f[:, None] * conv
    modal_t = f[:, None] * (sigma(grid.t)[None, :] - lam[:, None] * conv)
    if not nodal:
        return Trajectory(modal, grid.t, modal_t, modal, modal_t)
    phi = basis.modes[:, :n]
    return Trajectory(phi @ modal, grid.t, phi @ modal_t, modal, modal_t)


def _trapezoid_convolution(kernel: np.ndarray, w: np.ndarray, k: float) -> np.ndarray:
    """k * trapezoid of sum_{i=0}^{j} kernel_i w_{j-i} for every j (rows of w are independent)."""
    n = w.shape[-1]
    full = fftconvolve(w, kernel[None, :], axes=-1)[..., :n]
    corr = 0.5 * (kernel[0] * w + kernel[None, :n] * w[..., :1])
    out = k * (full - corr)
    out[..., 0] = 0.0
    return out


def duhamel_K(w, sigma: SigmaProfile, grid: TimeGrid, with_derivative: bool = False):
    """(Kw)(t) = int_0^t sigma(tau) w(t - tau) dtau by the trapezoidal rule on the fine grid.

    With ``with_derivative`` also returns d/dt Kw = sigma(0) w(t) + int_0^t sigma'(t - tau) w(tau) dtau.
    """
    W = w.values if isinstance(w, Trajectory) else np.asarray(w, dtype=float)
    squeeze = W.ndim == 1
    W = np.atleast_2d(W)
    t = grid.t[: W.shape[1]]
    Kw = _trapezoid_convolution(sigma(t), W, grid.k)
    if squeeze:
        Kw = Kw[0]
    if not with_derivative:
        return Trajectory(Kw, t) if isinstance(w, Trajectory) else Kw
    dK = sigma.at_zero * W + _trapezoid_convolution(sigma.d(t), W, grid.k)
    if squeeze:
        dK = dK[0]
    if isinstance(w, Trajectory):
        return Trajectory(Kw, t, dK)
    return Kw, dK


def apply_K_star(theta, theta_t, sigma: SigmaProfile, grid: TimeGrid) -> np.ndarray:
    """(K* theta)(t) = sigma(0) theta_t(t) + int_t^T (sigma(tau - t) theta(tau) + sigma'(tau - t) theta_t(tau)) dtau."""
    th = np.atleast_2d(np.asarray(theta, dtype=float))
    tht = np.atleast_2d(np.asarray(theta_t, dtype=float))
    t = grid.t[: th.shape[1]]
    # reversing time turns the tail integral into a causal convolution
    tail = _trapezoid_convolution(sigma(t), th[:, ::-1], grid.k) + _trapezoid_convolution(sigma.d(t), tht[:, ::-1], grid.k)
    out = sigma.at_zero * tht + tail[:, ::-1]
    return out[0] if np.ndim(theta) == 1 else out


def observe(traj: Trajectory, mask: SubdomainMask, grid: TimeGrid, noise: float = 0.0,
            rng: np.random.Generator | None = None) -> ObservationData:
    """Restrict a trajectory to omega; u_t from the stored derivative or backward differences.

    ``noise`` adds Gaussian perturbations with standard deviation noise * max|.| to u and u_t.
    """
    U = traj.values[mask.indices]
    if traj.derivative is not None:
        Ut = traj.derivative[mask.indices]
    else:
        Ut = np.empty_like(U)
        Ut[:, 1:] = np.diff(U, axis=1) / grid.k
        Ut[:, 0] = Ut[:, 1] if U.shape[1] > 1 else 0.0
    if noise:
        rng = rng or np.random.default_rng(0)
        U = U + noise * np.max(np.abs(U)) * rng.standard_normal(U.shape)
        Ut = Ut + noise * np.max(np.abs(Ut)) * rng.standard_normal(Ut.shape)
    return ObservationData(np.array(U), np.array(Ut), mask, traj.t.copy())


def write_trajectory_csv(path, values: np.ndarray, t: np.ndarray, x: np.ndarray, **params) -> Path:
    """One row per time, one column per node, preceded by a ``# key=value`` header line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write("# " + ",".join(f"{k}={v}" for k, v in params.items()) + "\n")
        wr = csv.writer(fh)
        wr.writerow(["t"] + [f"{xi:.10g}" for xi in x])
        for j, tj in enumerate(t):
            wr.writerow([f"{tj:.10g}"] + [f"{v:.12g}" for v in values[:, j]])
    return path


def read_trajectory_csv(path):
    with open(path, newline="") as fh:
        head = fh.readline().lstrip("# ").strip()
        params = dict(item.split("=", 1) for item in head.split(",") if item)
        rows = list(csv.reader(fh))
    x = np.array(rows[0][1:], dtype=float)
    data = np.array(rows[1:], dtype=float)
    return data[:, 1:].T, data[:, 0], x, params
