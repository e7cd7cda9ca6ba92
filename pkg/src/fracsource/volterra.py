"""Second-kind Volterra system for (theta, theta_t) driven by a null control.

For a horizon tau the pair solves

    theta(t) + int_t^tau theta_t(s) ds = 0
    sigma(0) theta_t(t) + int_t^tau (sigma(s - t) theta(s) + sigma'(s - t) theta_t(s)) ds = h(t)

with theta(tau) = 0 and theta_t(tau) = h(tau) / sigma(0). The kernel only depends on s - t, so in
reversed time r = tau - t every horizon becomes the same causal problem; ``march`` solves it once
for many right-hand sides with the trapezoidal rule on the fine step.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .control import ControlFamily
from .dynamics import SigmaProfile, TimeGrid
from .errors import ConfigError, VolterraError
from .spectral import SpectralBasis

SIGMA0_MIN = 1e-12


@dataclass(frozen=True)
class VolterraSystem:
    """Trapezoidal discretization on t_0..t_J with step k.

    L0 = [[1, 0], [0, sigma(0)]], kernel M(t, s) = [[0, 1], [sigma(s - t), sigma'(s - t)]].
    """

    k: float
    J: int
    sig: np.ndarray = field(repr=False)
    dsig: np.ndarray = field(repr=False)

    @property
    def L0(self) -> np.ndarray:
        return np.array([[1.0, 0.0], [0.0, self.sig[0]]])

    def kernel(self, lag: int) -> np.ndarray:
        return np.array([[0.0, 1.0], [self.sig[lag], self.dsig[lag]]])

    def matrix(self, terminal: str = "equation") -> np.ndarray:
        """Dense block matrix on unknowns (theta_0, theta_t0, ..., theta_J, theta_tJ).

        Rows 2j, 2j+1 for j < J are the trapezoidal equations; the last two rows fix the terminal values.
        """
        J, k = self.J, self.k
        A = np.zeros((2 * J + 2, 2 * J + 2))
        for j in range(J):
            A[2 * j: 2 * j + 2, 2 * j: 2 * j + 2] += self.L0
            for i in range(j, J + 1):
                w = k / 2 if i in (j, J) else k
                A[2 * j: 2 * j + 2, 2 * i: 2 * i + 2] += w * self.kernel(i - j)
        A[2 * J, 2 * J] = 1.0
        A[2 * J + 1, 2 * J + 1] = self.sig[0] if terminal == "equation" else 1.0
        return A

    def rhs(self, h: np.ndarray, terminal: str = "equation") -> np.ndarray:
        h = np.asarray(h, dtype=float)
        b = np.zeros(2 * self.J + 2)
        b[1::2] = h
        b[-2] = 0.0
        b[-1] = h[-1] if terminal == "equation" else 1.0 / self.sig[0]
        return b


def build_block_system(sigma: SigmaProfile, J: int, k: float) -> VolterraSystem:
    """Volterra system on J steps of size k; sigma(0) must not vanish."""
    if J < 0 or not k > 0:
        raise ConfigError(f"invalid Volterra grid J={J}, k={k}")
    lags = k * np.arange(J + 1)
    sig, dsig = sigma(lags), sigma.d(lags)
    if abs(sig[0]) < SIGMA0_MIN:
        raise VolterraError("sigma(0) = 0 makes the Volterra system singular; neither reconstruction "
                            "formula can be used (both need theta)")
    return VolterraSystem(float(k), int(J), sig, dsig)


def march(system: VolterraSystem, g: np.ndarray, terminal: str = "equation"):
    """Causal solve in reversed time r_q = q k for right-hand sides ``g[q, c]`` (q = 0..Q).

    Returns theta and theta_t in reversed time, same shape as ``g``. ``terminal="constant"``
    uses theta_t = 1/sigma(0) at r = 0 instead of g(0)/sigma(0).
    """
    g = np.asarray(g, dtype=float)
    squeeze = g.ndim == 1
    g = g.reshape(g.shape[0], -1)
    Q = g.shape[0] - 1
    if Q > system.J:
        raise ConfigError(f"right-hand side spans {Q} steps, system only {system.J}")
    k, sig, dsig = system.k, system.sig, system.dsig
    s0, ds0 = sig[0], dsig[0]
    th = np.zeros_like(g)
    tht = np.zeros_like(g)
    tht[0] = g[0] / s0 if terminal == "equation" else 1.0 / s0
    # local 2x2 block [[1, k/2], [k s0 / 2, s0 + k ds0 / 2]]
    a11, a12, a21, a22 = 1.0, k / 2, k * s0 / 2, s0 + k * ds0 / 2
    det = a11 * a22 - a12 * a21
    if abs(det) < SIGMA0_MIN:
        raise VolterraError(f"local Volterra block is singular (det={det:.3e}); refine the time step")
    run0 = 0.5 * k * tht[0]
    for q in range(1, Q + 1):
        hist1 = 0.5 * k * (sig[q] * th[0] + dsig[q] * tht[0])
        if q > 1:
            hist1 = hist1 + k * (sig[q - 1:0:-1] @ th[1:q] + dsig[q - 1:0:-1] @ tht[1:q])
        r0 = -run0
        r1 = g[q] - hist1
        th[q] = (a22 * r0 - a12 * r1) / det
        tht[q] = (a11 * r1 - a21 * r0) / det
        run0 = run0 + k * tht[q]
    if not (np.all(np.isfinite(th)) and np.all(np.isfinite(tht))):
        raise VolterraError("Volterra march produced non-finite values")
    if squeeze:
        return th[:, 0], tht[:, 0]
    return th, tht


@dataclass(frozen=True)
class VolterraSolution:
    """theta and theta_t on omega nodes x fine grid, zero beyond the horizon."""

    tau: float
    theta: np.ndarray = field(repr=False)
    theta_t: np.ndarray = field(repr=False)
    t: np.ndarray = field(repr=False)


def solve_volterra(h: np.ndarray, sigma: SigmaProfile, k: float, terminal: str = "equation"):
    """(theta, theta_t) on t_0..t_J from control samples h(t_j), j = 0..J (columns: nodes)."""
    h = np.asarray(h, dtype=float)
    J = h.shape[0] - 1
    system = build_block_system(sigma, J, k)
    th, tht = march(system, h[::-1], terminal)
    return th[::-1], tht[::-1]


def extend(theta: np.ndarray, theta_t: np.ndarray, total: int):
    """Zero-extend time-major arrays (J+1, ...) to ``total`` time points."""
    pad = [(0, total - theta.shape[0])] + [(0, 0)] * (theta.ndim - 1)
    return np.pad(theta, pad), np.pad(theta_t, pad)


@dataclass(frozen=True)
class VolterraFamily:
    """Modal Volterra responses for all horizons.

    ``theta[l][j, m]`` (and ``theta_t``) answer the forcing e^{-lambda_m t} at horizon tau_l,
    sampled at t_j, j = 0..J_l. The field for control (l, n) is sum_m coeffs[l, n, m] phi_m(x) theta[l][:, m].
    """

    taus: np.ndarray = field(repr=False)
    stride: int
    k: float
    theta: tuple = field(repr=False)
    theta_t: tuple = field(repr=False)
    controls: ControlFamily

    def nodal(self, basis: SpectralBasis, ell: int, n: int, total: int | None = None) -> VolterraSolution:
        """theta^{(tau_l)} for mode n on the omega nodes, zero-extended to ``total`` time points."""
        c = self.controls.coeffs[ell, self.controls.mode_position(n)]
        phi = basis.modes[self.controls.mask.indices] * c
        th, tht = phi @ self.theta[ell].T, phi @ self.theta_t[ell].T
        J = th.shape[1] - 1
        total = total or J + 1
        th, tht = extend(th.T, tht.T, total)
        return VolterraSolution(float(self.taus[ell]), th.T, tht.T, self.k * np.arange(total))


def solve_family(controls: ControlFamily, sigma: SigmaProfile, grid: TimeGrid,
                 terminal: str = "equation") -> VolterraFamily:
    """Modal responses for every horizon tau_l on the fine grid, all in one reversed-time march.

    Row l = 0 (empty window) is the single point t = 0 with theta = theta_t = 0.
    """
    lam = controls.lambdas
    L = grid.f_M
    stride = grid.stride
    system = build_block_system(sigma, grid.M, grid.k)
    r = grid.t
    # column (l, m) carries e^{-lambda_m (tau_l - r)} for r <= tau_l; values beyond are never read
    taus = grid.taus[1:]
    expo = np.minimum(r[:, None] - taus[None, :], 0.0)
    g = np.exp(expo[:, :, None] * lam[None, None, :]).reshape(r.size, -1)
    th, tht = march(system, g, terminal)
    th = th.reshape(r.size, L, lam.size)
    tht = tht.reshape(r.size, L, lam.size)
    thetas = [np.zeros((1, lam.size))]
    thetas_t = [np.zeros((1, lam.size))]
    for ell in range(1, L + 1):
        J = ell * stride
        thetas.append(th[J::-1, ell - 1].copy())
        thetas_t.append(tht[J::-1, ell - 1].copy())
    return VolterraFamily(grid.taus, stride, grid.k, tuple(thetas), tuple(thetas_t), controls)


def block_residual(system: VolterraSystem, theta: np.ndarray, theta_t: np.ndarray, h: np.ndarray,
                   terminal: str = "equation") -> float:
    """Max-norm residual of the dense block equations at a candidate solution."""
    x = np.empty(2 * theta.size)
    x[0::2], x[1::2] = theta, theta_t
    b = system.rhs(h, terminal)
    return float(np.max(np.abs(system.matrix(terminal) @ x - b)))


def stability_ratio(theta: np.ndarray, theta_t: np.ndarray, h: np.ndarray, k: float) -> float:
    """||theta||_{H1} / ||h||_{L2} on the solved window (trapezoidal norms)."""
    def sq(v):
        return k * (np.sum(v ** 2) - 0.5 * (v[0] ** 2 + v[-1] ** 2))

    return float(np.sqrt(sq(theta) + sq(theta_t)) / np.sqrt(sq(h)))

