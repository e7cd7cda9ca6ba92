"""Fourier coefficients of the spatial source factor from observations and the Volterra family."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import mpmath
import numpy as np
from scipy import integrate

from .dynamics import ObservationData, SigmaProfile, TimeGrid
from .errors import ConfigError, PreconditionError
from .mesh_fem import SubdomainMask
from .spectral import SpectralBasis, project, synthesize
from .volterra import VolterraFamily, VolterraSolution

CN_MIN = 1e-8
SIGMA_T_MIN = 1e-10


def _time_weights(n_points: int, J: int, k: float) -> np.ndarray:
    """Trapezoid on t_0..t_J, zero beyond."""
    w = np.zeros(n_points)
    if J > 0:
        w[: J + 1] = k
        w[0] = w[J] = k / 2
    return w


def h1_omega_pairing(obs: ObservationData, theta: VolterraSolution, mask: SubdomainMask, grid: TimeGrid) -> float:
    """int_0^T int_omega (u theta + u_t theta_t) dx dt.

    Space by the mask trapezoid weights; time by the trapezoid on [0, tau]: theta_t jumps to zero
    after the horizon, so the last node of the window gets half weight.
    """
    if obs.u.shape[0] != mask.size or theta.theta.shape[0] != mask.size:
        raise ConfigError("observations and theta must both live on the mask nodes")
    n = min(obs.u.shape[1], theta.theta.shape[1])
    J = grid.fine_index(theta.tau)
    wt = _time_weights(n, J, grid.k)
    integrand = obs.u[:, :n] * theta.theta[:, :n] + obs.ut[:, :n] * theta.theta_t[:, :n]
    return float(mask.weights @ integrand @ wt)


def modal_observations(obs: ObservationData, basis: SpectralBasis) -> tuple[np.ndarray, np.ndarray]:
    """U_m(t) = int_omega u phi_m dx and the same for u_t, shape (n*, times)."""
    phi = basis.modes[obs.mask.indices] * obs.mask.weights[:, None]
    return phi.T @ obs.u, phi.T @ obs.ut


def pairing_family(obs: ObservationData, family: VolterraFamily, basis: SpectralBasis,
                   modes: Sequence[int] | None = None) -> np.ndarray:
    """P[l, i] = <u, theta^{(tau_l)}>_{H1(0,T;L2(omega))} for control modes ``modes[i]``; row 0 is zero."""
    modes = family.controls.modes if modes is None else tuple(modes)
    U, Ut = modal_observations(obs, basis)
    L = len(family.taus) - 1
    P = np.zeros((L + 1, len(modes)))
    for ell in range(1, L + 1):
        th, tht = family.theta[ell], family.theta_t[ell]
        J = th.shape[0] - 1
        wt = _time_weights(J + 1, J, family.k)
        # per basis forcing m: int_0^tau (U_m theta_m + U^t_m theta_t,m) dt
        resp = (U[:, : J + 1] * th.T + Ut[:, : J + 1] * tht.T) @ wt
        for i, n in enumerate(modes):
            P[ell, i] = family.controls.coeffs[ell, family.controls.mode_position(n)] @ resp
    return P


def outer_weights(L: int, kappa: float, rule: str = "extrapolate") -> np.ndarray:
    """Quadrature weights over tau_0..tau_L for int_0^T g(tau) P(tau) dtau.

    ``"trapezoid"`` is the plain rule with the zero-window value P(0) = 0. The pairing jumps at
    tau = 0 (its limit from the right is -f_n, not 0), so the default ``"extrapolate"`` uses the
    trapezoid on [tau_1, T] and closes the first panel with the line through tau_1, tau_2.
    Either way the tau_0 row has weight 0.
    """
    if L < 1:
        raise ConfigError("need at least one horizon")
    w = np.full(L + 1, kappa)
    w[0] = 0.0
    w[L] = kappa / 2
    if rule == "trapezoid":
        return w
    if rule != "extrapolate":
        raise ConfigError(f"unknown outer quadrature {rule!r}")
    if L == 1:
        w[1] = kappa
        return w
    # first panel: kappa/2 (2 P_1 - P_2 + P_1)
    w[1] = 2 * kappa
    w[2] -= kappa / 2
    return w


def reconstruct_thm1(P: np.ndarray, sigma: SigmaProfile, lam: float, grid: TimeGrid,
                     outer: str = "extrapolate") -> float:
    """f_n = sigma(T)^{-1} (-sigma(0) P(T) - int sigma'(T - tau) P dtau - lambda_n int sigma(T - tau) P dtau)."""
    sT = sigma.at(grid.T)
    if abs(sT) < SIGMA_T_MIN:
        raise PreconditionError(f"sigma(T) = {sT:.3g} vanishes for sigma '{sigma.name}'; "
                                "the first formula needs sigma(T) != 0, use the second (theorem = 2)")
    w = outer_weights(grid.f_M, grid.kappa, outer)
    lagged = grid.T - grid.taus
    I_d = w @ (sigma.d(lagged) * P)
    I_s = w @ (sigma(lagged) * P)
    return float((-sigma.at_zero * P[-1] - I_d - lam * I_s) / sT)


def reconstruct_thm2(P: np.ndarray, sigma: SigmaProfile, cn: float, grid: TimeGrid,
                     outer: str = "extrapolate") -> float:
    """f_n = c_n^{-1} (-sigma(0) P(T) - int sigma'(T - tau) P dtau); NaN when c_n is below threshold."""
    if abs(cn) < CN_MIN:
        return math.nan
    w = outer_weights(grid.f_M, grid.kappa, outer)
    I_d = w @ (sigma.d(grid.T - grid.taus) * P)
    return float((-sigma.at_zero * P[-1] - I_d) / cn)


def compute_cn(lam: float, sigma: SigmaProfile, T: float) -> tuple[float, float]:
    """(primary, alternate) forms of c_n.

    primary   = sigma(T) - lambda int_0^T e^{lambda (s - T)} sigma(s) ds
    alternate = e^{-lambda T} sigma(0) + int_0^T e^{lambda (s - T)} sigma'(s) ds

    The primary form cancels to roughly e^{-lambda T} relative size, so it is evaluated in
    extended precision when the profile provides mpmath evaluators.
    """
    lam = float(lam)
    # break points resolve the boundary layer of width 1/lambda at s = T
    pts = sorted({0.0, T} | {T - c / lam for c in (1.0, 10.0, 40.0) if T - c / lam > 0})
    if sigma.mp_value is not None:
        # cancellation costs about lambda T / ln 10 digits; past ~330 the result underflows anyway
        dps = 30 + min(int(lam * T / math.log(10)), 330)
        with mpmath.workdps(dps):
            lam_mp, T_mp = mpmath.mpf(lam), mpmath.mpf(T)
            integral = mpmath.quad(lambda s: mpmath.exp(lam_mp * (s - T_mp)) * sigma.mp_value(s),
                                   [mpmath.mpf(p) for p in pts])
            primary = float(sigma.mp_value(T_mp) - lam_mp * integral)
    else:
        warnings.warn(f"sigma '{sigma.name}' has no extended-precision evaluator; primary c_n may lose digits",
                      RuntimeWarning)
        integral = sum(integrate.quad(lambda s: math.exp(lam * (s - T)) * float(sigma(s)), a, b,
                                      epsabs=0, epsrel=1e-13, limit=200)[0] for a, b in zip(pts[:-1], pts[1:]))
        primary = sigma.at(T) - lam * integral
    alt_integral = sum(integrate.quad(lambda s: math.exp(lam * (s - T)) * float(sigma.d(s)), a, b,
                                      epsabs=0, epsrel=1e-13, limit=200)[0] for a, b in zip(pts[:-1], pts[1:]))
    alternate = math.exp(-lam * T) * sigma.at_zero + alt_integral
    return primary, alternate


@dataclass(frozen=True)
class ReconstructionReport:
    theorem: int
    modes: np.ndarray = field(repr=False)
    lambdas: np.ndarray = field(repr=False)
    coeffs: np.ndarray = field(repr=False)
    cn: np.ndarray | None = field(repr=False)
    reference: np.ndarray | None = field(repr=False)
    f_recovered: np.ndarray = field(repr=False)
    f_projected: np.ndarray | None = field(repr=False)
    f_true: np.ndarray | None = field(repr=False)
    rel_error: float | None
    sign_match: np.ndarray | None = field(repr=False)

    @property
    def gaps(self) -> list[int]:
        return [int(n) for n, c in zip(self.modes, self.coeffs) if not np.isfinite(c)]

    @property
    def sign_flips(self) -> list[int]:
        if self.sign_match is None:
            return []
        return [int(n) for n, ok, c in zip(self.modes, self.sign_match, self.coeffs) if np.isfinite(c) and not ok]


def recover_coefficients(obs: ObservationData, family: VolterraFamily, basis: SpectralBasis,
                         sigma: SigmaProfile, grid: TimeGrid, theorem: int = 1,
                         modes: Sequence[int] | None = None, outer: str = "extrapolate") -> tuple[np.ndarray, np.ndarray | None]:
    """Coefficients f_n for each control mode of the family; also c_n for the second formula."""
    if theorem not in (1, 2):
        raise ConfigError(f"theorem must be 1 or 2, got {theorem}")
    modes = family.controls.modes if modes is None else tuple(modes)
    P = pairing_family(obs, family, basis, modes)
    lam = basis.lambdas[np.array(modes) - 1]
    if theorem == 1:
        return np.array([reconstruct_thm1(P[:, i], sigma, lam[i], grid, outer) for i in range(len(modes))]), None
    cn = np.array([compute_cn(l, sigma, grid.T)[1] for l in lam])
    return np.array([reconstruct_thm2(P[:, i], sigma, cn[i], grid, outer) for i in range(len(modes))]), cn


def reconstruct_source(coeffs: np.ndarray, basis: SpectralBasis, reference: np.ndarray | None = None,
                       theorem: int = 1, cn: np.ndarray | None = None) -> ReconstructionReport:
    """Partial sum of the recovered coefficients and, with a nodal reference, errors against its projection.

    Coefficients that could not be recovered (NaN) are left out of the sum.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    e_n = coeffs.size
    if e_n > basis.n_star:
        raise ConfigError(f"{e_n} coefficients exceed n*={basis.n_star}")
    f_rec = synthesize(np.nan_to_num(coeffs, nan=0.0), basis)
    ref = f_proj = f_true = err = signs = None
    if reference is not None:
        f_true = np.asarray(reference, dtype=float)
        ref = project(f_true, basis, e_n)
        f_proj = synthesize(ref, basis)
        denom = np.linalg.norm(ref)
        err = float(np.linalg.norm(np.nan_to_num(coeffs, nan=0.0) - ref) / denom) if denom > 0 else math.nan
        # coefficients that vanish by symmetry carry round-off signs only
        negligible = np.abs(ref) <= 1e-8 * np.max(np.abs(ref), initial=0.0)
        signs = (np.sign(coeffs) == np.sign(ref)) | negligible
    return ReconstructionReport(theorem, np.arange(1, e_n + 1), basis.lambdas[:e_n].copy(), coeffs,
                                None if cn is None else np.asarray(cn), ref, f_rec, f_proj, f_true, err, signs)
