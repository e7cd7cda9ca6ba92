"""Penalized HUM null controls through the modal Gramian, with FEM verification and epsilon selection."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as sla

from .dynamics import TimeGrid, solve_backward, solve_forward
from .errors import ConfigError, EpsilonSelectionError, NumericalError, ValidityWarning
from .mesh_fem import SubdomainMask, SymmetricToeplitzMatrix, hat_moment_matrix, mass_norm
from .spectral import SpectralBasis

log = logging.getLogger(__name__)

# h = CONTROL_SIGN * sum_m (w0)_m e^{-lambda_m t} phi_m on omega. With the opposite sign the
# controlled state at t = 0 grows instead of vanishing (see verify_null_control).
CONTROL_SIGN = -1.0

COND_WARN = 1e12


@dataclass(frozen=True)
class ModeGramian:
    """G_nm = <phi_n, phi_m>_omega (1 - exp(-(lambda_n + lambda_m) tau)) / (lambda_n + lambda_m)."""

    tau: float
    G: np.ndarray = field(repr=False)
    overlaps: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class HUMSolution:
    eps: float
    tau: float
    w0: np.ndarray = field(repr=False)
    modal: np.ndarray = field(repr=False)
    residual: float
    condition: float

    @property
    def final_state(self) -> np.ndarray:
        """Predicted controlled state phi_eps(., 0) = w0 / eps."""
        return self.w0 / self.eps


@dataclass(frozen=True)
class ControlFamily:
    """Controls h^{(tau_l)} for every coarse horizon and requested mode.

    ``coeffs[l, i, m]`` multiplies e^{-lambda_m t} phi_m(x) in the control steering mode
    ``modes[i]`` at horizon ``taus[l]``; row l = 0 is the empty window and stays zero.
    """

    eps: float
    taus: np.ndarray = field(repr=False)
    modes: tuple
    coeffs: np.ndarray = field(repr=False)
    lambdas: np.ndarray = field(repr=False)
    mask: SubdomainMask
    residuals: np.ndarray = field(repr=False)

    def mode_position(self, n: int) -> int:
        try:
            return self.modes.index(n)
        except ValueError:
            raise ConfigError(f"mode {n} is not part of this control family {self.modes}") from None

    def values(self, basis: SpectralBasis, ell: int, n: int, t: np.ndarray, on_mask: bool = True) -> np.ndarray:
        """Control values, rows = omega nodes (or all nodes), columns = times; zero for t > tau_l."""
        c = self.coeffs[ell, self.mode_position(n)]
        t = np.asarray(t, dtype=float)
        time = np.exp(-np.outer(self.lambdas, t)) * (t <= self.taus[ell] + 1e-12)
        phi = basis.modes[self.mask.indices] if on_mask else basis.modes
        out = (phi * c) @ time
        if not on_mask:
            outside = np.ones(basis.mesh.N, dtype=bool)
            outside[self.mask.indices] = False
            out[outside] = 0.0
        return out


def omega_overlaps(basis: SpectralBasis, mask: SubdomainMask) -> np.ndarray:
    """<phi_n, phi_m>_{L2(omega)} by the trapezoidal rule on the mask nodes."""
    phi = basis.modes[mask.indices]
    return phi.T @ (mask.weights[:, None] * phi)


def assemble_gramian(basis: SpectralBasis, mask: SubdomainMask, tau: float, overlaps: np.ndarray | None = None) -> ModeGramian:
    if tau < 0:
        raise ConfigError(f"horizon must be non-negative, got {tau}")
    O = omega_overlaps(basis, mask) if overlaps is None else overlaps
    lam_sum = basis.lambdas[:, None] + basis.lambdas[None, :]
    window = -np.expm1(-lam_sum * tau) / lam_sum
    return ModeGramian(float(tau), O * window, O)


def projection_matrix(basis: SpectralBasis) -> np.ndarray:
    """P[j, m] = (h/12)(phi_m(x_{j-1}) + 10 phi_m(x_j) + phi_m(x_{j+1})), the hat moments of each mode."""
    return hat_moment_matrix(basis.modes, basis.mesh.h)


def assemble_lambda(basis: SpectralBasis, gramian: ModeGramian, P: np.ndarray | None = None) -> np.ndarray:
    """Nodal Lambda_N whose column j is Phi_j(., 0) = sum_n [sum_m (phi_j)_m G_nm] phi_n."""
    P = projection_matrix(basis) if P is None else P
    return basis.modes @ (gramian.G @ P.T)


def terminal_dataset(n: int, tau: float, basis: SpectralBasis) -> np.ndarray:
    """Phi_0(., 0) = e^{-lambda_n tau} phi_n."""
    if not 1 <= n <= basis.n_star:
        raise ConfigError(f"mode {n} outside 1..{basis.n_star}")
    return math.exp(-basis.lambdas[n - 1] * tau) * basis.modes[:, n - 1]


def _condition_estimate(lu, anorm: float) -> float:
    gecon, = sla.get_lapack_funcs(("gecon",), (lu,))
    rcond, info = gecon(lu, anorm, norm="1")
    return math.inf if rcond == 0 or info else 1.0 / rcond


def solve_hum(lambda_op: np.ndarray, eps: float, phi0: np.ndarray, basis: SpectralBasis | None = None,
              tau: float = float("nan")) -> HUMSolution:
    """Solve (eps^{-1} I + Lambda_N) w0 = Phi_0; ``phi0`` may hold several right-hand sides as columns."""
    if not eps > 0:
        raise ConfigError(f"penalty eps must be positive, got {eps}")
    A = lambda_op + np.eye(lambda_op.shape[0]) / eps
    try:
        lu = sla.lu_factor(A, check_finite=True)
    except (ValueError, sla.LinAlgError) as exc:
        raise NumericalError(f"HUM system could not be factorized: {exc}") from exc
    cond = _condition_estimate(lu[0], np.abs(A).sum(axis=0).max())
    if cond > COND_WARN:
        warnings.warn(f"HUM system is ill-conditioned (condition estimate {cond:.2e}, eps={eps:g})", RuntimeWarning)
    w0 = sla.lu_solve(lu, phi0)
    rhs_norm = np.linalg.norm(phi0, axis=0)
    res = np.linalg.norm(A @ w0 - phi0, axis=0) / np.where(rhs_norm > 0, rhs_norm, 1.0)
    if not np.all(np.isfinite(w0)):
        raise NumericalError("HUM solve produced non-finite values")
    modal = basis.modes.T @ basis.mass.matvec(w0) if basis is not None else np.empty(0)
    return HUMSolution(float(eps), float(tau), w0, modal, float(np.max(res)), cond)


def warn_if_uncontrollable(s: float) -> bool:
    if s <= 0.5:
        warnings.warn(f"s={s} <= 1/2: the equation is not null controllable, controls and reconstructions "
                      "are computed but carry no guarantee", ValidityWarning, stacklevel=2)
        return True
    return False


def build_control_family(basis: SpectralBasis, mask: SubdomainMask, grid: TimeGrid, eps: float,
                         modes: int | Sequence[int]) -> ControlFamily:
    """One HUM solve per horizon tau_l (l >= 1), all requested modes sharing the factorization."""
    modes = (modes,) if isinstance(modes, (int, np.integer)) else tuple(int(n) for n in modes)
    if not modes or min(modes) < 1 or max(modes) > basis.n_star:
        raise ConfigError(f"modes must lie in 1..{basis.n_star}, got {modes}")
    warn_if_uncontrollable(basis.s)
    taus = grid.taus
    O = omega_overlaps(basis, mask)
    P = projection_matrix(basis)
    idx = np.array(modes) - 1
    coeffs = np.zeros((taus.size, len(modes), basis.n_star))
    residuals = np.zeros(taus.size)
    for ell in range(1, taus.size):
        tau = float(taus[ell])
        try:
            lam_op = assemble_lambda(basis, assemble_gramian(basis, mask, tau, O), P)
            rhs = basis.modes[:, idx] * np.exp(-basis.lambdas[idx] * tau)
            sol = solve_hum(lam_op, eps, rhs, basis, tau)
        except NumericalError as exc:
            raise NumericalError(f"control at horizon l={ell} (tau={tau:g}) failed: {exc}") from exc
        coeffs[ell] = CONTROL_SIGN * sol.modal.T
        residuals[ell] = sol.residual
    return ControlFamily(float(eps), taus, modes, coeffs, basis.lambdas.copy(), mask, residuals)


def spectral_final_state(coeffs: np.ndarray, n: int, tau: float, basis: SpectralBasis, mask: SubdomainMask) -> np.ndarray:
    """Modal coefficients of the controlled backward state at t = 0: e^{-lambda_n tau} e_n + G c."""
    G = assemble_gramian(basis, mask, tau).G
    out = G @ coeffs
    out[n - 1] += math.exp(-basis.lambdas[n - 1] * tau)
    return out


def verify_null_control(coeffs: np.ndarray, n: int, tau: float, basis: SpectralBasis, mask: SubdomainMask,
                        stiffness: SymmetricToeplitzMatrix | None = None, steps: int = 2000,
                        method: str = "fem") -> float:
    """L2 norm of the controlled backward state at t = 0 for terminal data phi_n.

    ``coeffs`` are the modal control coefficients (one row of ``ControlFamily.coeffs``).
    ``method="fem"`` re-simulates with implicit Euler on ``steps`` uniform steps of [0, tau],
    ``"spectral"`` uses the truncated modal solution.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    if method == "spectral":
        return float(np.linalg.norm(spectral_final_state(coeffs, n, tau, basis, mask)))
    if method != "fem":
        raise ConfigError(f"unknown verification method {method!r}")
    if stiffness is None:
        raise ConfigError("FEM verification needs the stiffness matrix")
    sub = TimeGrid(tau, steps, 1)
    inside = np.zeros(basis.mesh.N)
    inside[mask.indices] = 1.0
    shape = (basis.modes * coeffs) @ np.exp(-np.outer(basis.lambdas, sub.t))
    source = inside[:, None] * shape
    traj = solve_backward(basis.mesh, basis.mass, stiffness, source, basis.modes[:, n - 1], sub, tau)
    return mass_norm(traj.values[:, 0], basis.mass)


def lambda_column_fem(j: int, basis: SpectralBasis, mask: SubdomainMask, tau: float,
                      stiffness: SymmetricToeplitzMatrix, steps: int = 2000) -> np.ndarray:
    """Column j of Lambda_N by time stepping: free evolution of the hat phi_j, restricted to omega,
    drives a backward problem with zero terminal data; its value at t = 0 is returned."""
    sub = TimeGrid(tau, steps, 1)
    N = basis.mesh.N
    hat = np.zeros(N)
    hat[j] = 1.0
    free = solve_forward(basis.mesh, basis.mass, stiffness, None, hat, sub)
    inside = np.zeros(N)
    inside[mask.indices] = 1.0
    back = solve_backward(basis.mesh, basis.mass, stiffness, inside[:, None] * free.values, np.zeros(N), sub, tau)
    return back.values[:, 0]


def predicted_residuals(basis: SpectralBasis, mask: SubdomainMask, tau: float, eps: float,
                        n_tilde: int) -> np.ndarray:
    """||eps^{-1} w0||_{L2(omega)} for modes 1..n_tilde at horizon tau."""
    lam_op = assemble_lambda(basis, assemble_gramian(basis, mask, tau))
    rhs = basis.modes[:, :n_tilde] * np.exp(-basis.lambdas[:n_tilde] * tau)
    sol = solve_hum(lam_op, eps, rhs, None, tau)
    final = sol.final_state[mask.indices]
    return np.sqrt(np.einsum("i,ij->j", mask.weights, final ** 2))


@dataclass(frozen=True)
class EpsilonChoice:
    eps: float
    exponent: float
    threshold: float
    achieved: float
    history: tuple


def select_epsilon(basis: SpectralBasis, mask: SubdomainMask, grid: TimeGrid, n_tilde: int,
                   lo_exp: int = 1, hi_exp: int = 8, fraction: float = 0.01) -> EpsilonChoice:
    """Smallest eps on the 10^{0.1 k} grid with max_{n <= n_tilde} ||phi_eps,n(., 0)||_omega < fraction * m(omega) at tau_1."""
    if not 1 <= n_tilde <= basis.n_star:
        raise ConfigError(f"need 1 <= n_tilde <= {basis.n_star}, got {n_tilde}")
    tau = float(grid.taus[1])
    threshold = fraction * mask.measure
    history = []

    def worst(e10: int) -> float:
        val = float(np.max(predicted_residuals(basis, mask, tau, 10.0 ** (e10 / 10), n_tilde)))
        history.append((e10 / 10, val))
        return val

    # tenths of a decade as integers to keep the grid exact
    lo, hi = None, None
    for d in range(lo_exp, hi_exp + 1):
        if worst(10 * d) < threshold:
            hi = 10 * d
            break
        lo = 10 * d
    if hi is None:
        best = min(v for _, v in history)
        raise EpsilonSelectionError(f"no eps <= 1e{hi_exp} reaches the threshold {threshold:.3g}; "
                                    f"smallest residual {best:.3g}")
    if lo is not None:
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if worst(mid) < threshold:
                hi = mid
            else:
                lo = mid
    achieved = next(v for e, v in reversed(history) if e == hi / 10)
    log.info("selected eps = 10^%.1f (residual %.3g < %.3g)", hi / 10, achieved, threshold)
    return EpsilonChoice(10.0 ** (hi / 10), hi / 10, threshold, achieved, tuple(history))
