"""PNG figures for pipeline and CLI outputs (matplotlib, Agg backend)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .spectral import SpectralBasis, asymptotic_eigenvalue  # noqa: E402


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def eigenvalue_figure(basis: SpectralBasis, path) -> Path:
    n = np.arange(1, basis.n_star + 1)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.loglog(n, basis.lambdas, "o", ms=3, label="finite elements")
    ax.loglog(n, asymptotic_eigenvalue(n, basis.s), "-", label="asymptotic formula")
    ax.set_xlabel("n")
    ax.set_ylabel(r"$\lambda_n$")
    ax.set_title(f"eigenvalues, s = {basis.s:g}, N = {basis.mesh.N}")
    ax.legend()
    return _save(fig, path)


def control_heatmap(values: np.ndarray, x: np.ndarray, t: np.ndarray, omega, path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    lim = np.max(np.abs(values)) or 1.0
    mesh = ax.pcolormesh(x, t, values.T, shading="auto", cmap="RdBu_r", vmin=-lim, vmax=lim)
    for edge in omega:
        ax.axvline(edge, color="k", ls="--", lw=0.8)
    fig.colorbar(mesh, ax=ax, label="h(x, t)")
    ax.set_xlabel("x")
    ax.set_ylabel("t")
    ax.set_title(title)
    return _save(fig, path)


def coefficient_bars(modes, recovered, reference, path, title: str = "") -> Path:
    modes = np.asarray(modes)
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.4
    if reference is not None:
        ax.bar(modes - width / 2, reference, width, label="projection of f")
    ax.bar(modes + width / 2 if reference is not None else modes, np.nan_to_num(recovered), width, label="recovered")
    ax.axhline(0, color="k", lw=0.6)
    ax.set_xlabel("n")
    ax.set_ylabel(r"$f_n$")
    ax.set_title(title)
    ax.legend()
    return _save(fig, path)


def reconstruction_overlay(x, f_true, f_projected, f_recovered, omega, path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    if f_true is not None:
        ax.plot(x, f_true, color="0.6", lw=1, label="f")
    if f_projected is not None:
        ax.plot(x, f_projected, "--", label="partial sum of f")
    ax.plot(x, f_recovered, label="recovered")
    for edge in omega:
        ax.axvline(edge, color="k", ls=":", lw=0.8)
    ax.set_xlabel("x")
    ax.set_title(title)
    ax.legend()
    return _save(fig, path)


def norm_trend(eps, state_norms, control_l2=None, control_linf=None, path="norm_trend.png", title: str = "") -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    axes[0].loglog(eps, state_norms, "o-")
    axes[0].set_xlabel(r"$\varepsilon$")
    axes[0].set_ylabel(r"$\|\phi_\varepsilon(\cdot,0)\|$")
    if control_l2 is not None:
        axes[1].loglog(eps, control_l2, "o-", label=r"$L^2$")
    if control_linf is not None:
        axes[1].loglog(eps, control_linf, "s-", label=r"$L^\infty$")
    axes[1].set_xlabel(r"$\varepsilon$")
    axes[1].set_ylabel("control norm")
    axes[1].legend()
    fig.suptitle(title)
    return _save(fig, path)


def volterra_figure(t, theta, theta_t, path, title: str = "") -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(9, 4), sharex=True)
    axes[0].plot(t, theta.T, lw=0.8)
    axes[0].set_ylabel(r"$\theta$")
    axes[1].plot(t, theta_t.T, lw=0.8)
    axes[1].set_ylabel(r"$\theta_t$")
    for ax in axes:
        ax.set_xlabel("t")
    fig.suptitle(title)
    return _save(fig, path)


def pipeline_figures(result, out: Path) -> list[Path]:
    cfg = result.config
    basis, grid, controls = result.basis, result.grid, result.controls
    rep = result.primary
    paths = [eigenvalue_figure(basis, out / "eigenvalues.png")]
    n = min(6, cfg.e_n)
    ell = int(np.argmin(np.abs(grid.taus - 0.5 * cfg.T))) or 1
    J = ell * grid.stride
    t = grid.t[: J + 1]
    h = controls.values(basis, ell, n, t, on_mask=False)
    paths.append(control_heatmap(h, basis.mesh.interior, t, cfg.omega, out / "control.png",
                                 f"control for mode {n}, tau = {grid.taus[ell]:g}"))
    paths.append(coefficient_bars(rep.modes, rep.coeffs, rep.reference, out / "coefficients.png",
                                  f"Fourier coefficients (formula {rep.theorem})"))
    paths.append(reconstruction_overlay(basis.mesh.interior, rep.f_true, rep.f_projected, rep.f_recovered,
                                        cfg.omega, out / "reconstruction.png",
                                        f"{cfg.source}, {cfg.e_n} terms"))
    return paths
