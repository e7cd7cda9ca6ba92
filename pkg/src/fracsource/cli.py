"""Command line entry point: ``fracsource <subcommand> [options]``."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import control, plotting
from .catalogue import catalogue_sigma
from .config import RunConfig, load_config, make_config
from .dynamics import TimeGrid, observe, solve_forward, spectral_forward, write_trajectory_csv
from .errors import FracSourceError, NumericalError
from .mesh_fem import make_mask, save_matrix
from .pipeline import Cache, basis_stage, emit_outputs, load_source, matrices_stage, run_pipeline
from .spectral import asymptotic_eigenvalue
from .volterra import solve_volterra

log = logging.getLogger("fracsource")

_OVERRIDES = [
    ("--s", float, "fractional order"),
    ("--N", int, "interior nodes"),
    ("--M", int, "fine time steps"),
    ("--f-M", int, "coarse horizons"),
    ("--T", float, "final time"),
    ("--eps", str, "penalty (number or 'auto')"),
    ("--e-n", int, "number of recovered coefficients"),
    ("--n-star", int, "modal truncation"),
    ("--sigma", str, "temporal factor: exp, one, cos10, quad"),
    ("--source", str, "f1..f4, modes:1=1,3=0.5, coeffs:<file> or nodal:<file>"),
    ("--theorem", str, "1, 2 or both"),
    ("--noise", float, "relative Gaussian noise on the observations"),
    ("--seed", int, "noise seed"),
    ("--outer", str, "outer quadrature: extrapolate or trapezoid"),
    ("--cache-dir", str, "cache root (default: $FRACSOURCE_CACHE or ~/.cache/fracsource)"),
]


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="TOML file of key = value settings")
    p.add_argument("--profile", choices=["full", "desk"], help="named parameter set")
    p.add_argument("--omega", type=float, nargs=2, metavar=("LO", "HI"), help="observation window")
    p.add_argument("--out", type=Path, default=None, help="output directory")
    p.add_argument("--no-cache", action="store_true", help="recompute every stage")
    p.add_argument("--strict", action="store_true", help="refuse s <= 1/2")
    p.add_argument("--no-figures", action="store_true")
    for flag, typ, help_ in _OVERRIDES:
        p.add_argument(flag, type=typ, default=None, help=help_)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fracsource", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        _common(p)
        return p

    p = add("assemble", "assemble mass and stiffness matrices and write them as CSV")
    p = add("eigs", "eigenpairs and comparison with the asymptotic eigenvalues")
    p = add("forward", "simulate the forward problem and write u and the omega observations")
    p.add_argument("--method", choices=["spectral", "fem"], default="spectral")
    for name, help_ in [("control", "null control for one mode and horizon"),
                        ("verify", "re-simulate controlled states over a sweep of penalties"),
                        ("volterra", "Volterra solution (theta, theta_t) for one control")]:
        p = add(name, help_)
        p.add_argument("--tau", type=float, default=0.5)
        p.add_argument("--mode", type=int, default=6)
        p.add_argument("--epsilon", type=float, nargs="+", default=None,
                       help="penalty values (verify accepts several)")
        p.add_argument("--steps", type=int, default=None, help="time steps on [0, tau] for FEM verification")
    add("reconstruct", "recover the Fourier coefficients (CSV output only)")
    add("pipeline", "full run with CSV, figures and manifest")
    p = add("epsilon", "select the penalty by the 1%%-of-m(omega) rule")
    p.add_argument("--n-tilde", type=int, default=None, help="mode cap (default e_n)")
    return parser


def config_from_args(args) -> RunConfig:
    overrides = {flag.lstrip("-").replace("-", "_"): getattr(args, flag.lstrip("-").replace("-", "_"))
                 for flag, _, _ in _OVERRIDES}
    if args.omega:
        overrides["omega"] = tuple(args.omega)
    if args.out:
        overrides["output_dir"] = str(args.out)
    if args.strict:
        overrides["strict"] = True
    if args.no_figures:
        overrides["figures"] = False
    if args.config:
        return load_config(args.config, args.profile, **overrides)
    return make_config(args.profile, **overrides)


def _write_rows(path: Path, header, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        wr.writerows(rows)
    return path


def _setup(cfg: RunConfig, args):
    cache = Cache(cfg.cache_path, enabled=not args.no_cache)
    mesh, mass, stiffness = matrices_stage(cfg, cache)
    basis = basis_stage(cfg, cache, mesh, mass, stiffness)
    return cache, basis, stiffness


def cmd_assemble(cfg, args, out: Path) -> int:
    cache = Cache(cfg.cache_path, enabled=not args.no_cache)
    mesh, mass, stiffness = matrices_stage(cfg, cache)
    save_matrix(out / "stiffness.csv", stiffness, cfg.s, mesh)
    save_matrix(out / "mass.csv", mass, cfg.s, mesh)
    print(f"N={mesh.N} h={mesh.h:.6g} a(0)={stiffness.first_row[0]:.10g} a(1)={stiffness.first_row[1]:.10g}")
    return 0


def cmd_eigs(cfg, args, out: Path) -> int:
    _, basis, _ = _setup(cfg, args)
    n = np.arange(1, basis.n_star + 1)
    approx = asymptotic_eigenvalue(n, cfg.s)
    _write_rows(out / "eigenvalues.csv", ["n", "lambda_n", "lambda_asymptotic", "rel_diff"],
                [[int(i), f"{l:.12g}", f"{a:.12g}", f"{(l - a) / a:.6g}"] for i, l, a in zip(n, basis.lambdas, approx)])
    if cfg.figures:
        plotting.eigenvalue_figure(basis, out / "eigenvalues.png")
    print(f"lambda_1..5 = {np.array2string(basis.lambdas[:5], precision=6)}")
    return 0


def cmd_forward(cfg, args, out: Path) -> int:
    _, basis, stiffness = _setup(cfg, args)
    grid = TimeGrid(cfg.T, cfg.M, cfg.f_M)
    sigma = catalogue_sigma(cfg.sigma)
    fcoeffs, f_nodal = load_source(cfg, basis)
    if args.method == "spectral":
        traj = spectral_forward(fcoeffs, sigma, basis, grid)
    else:
        nodal = f_nodal if f_nodal is not None else basis.modes @ fcoeffs
        traj = solve_forward(basis.mesh, basis.mass, stiffness, nodal[:, None] * sigma(grid.t)[None, :], None, grid)
    mask = make_mask(basis.mesh, *cfg.omega)
    obs = observe(traj, mask, grid, cfg.noise, np.random.default_rng(cfg.seed))
    params = dict(s=cfg.s, N=cfg.N, M=cfg.M, T=cfg.T, sigma=cfg.sigma, source=cfg.source, method=args.method)
    write_trajectory_csv(out / "u.csv", traj.values, grid.t, basis.mesh.interior, **params)
    xw = basis.mesh.interior[mask.indices]
    write_trajectory_csv(out / "obs_u.csv", obs.u, grid.t, xw, **params)
    write_trajectory_csv(out / "obs_ut.csv", obs.ut, grid.t, xw, **params)
    print(f"max|u| = {np.abs(traj.values).max():.6g} at T: ||u(T)||_M = {np.sqrt(traj.values[:, -1] @ basis.mass.matvec(traj.values[:, -1])):.6g}")
    return 0


def _single_control(cfg, args, basis, eps):
    mask = make_mask(basis.mesh, *cfg.omega)
    lam = control.assemble_lambda(basis, control.assemble_gramian(basis, mask, args.tau))
    sol = control.solve_hum(lam, eps, control.terminal_dataset(args.mode, args.tau, basis), basis, args.tau)
    return mask, sol, control.CONTROL_SIGN * sol.modal


def _control_values(basis, mask, coeffs, t):
    inside = np.zeros(basis.mesh.N)
    inside[mask.indices] = 1.0
    return inside[:, None] * ((basis.modes * coeffs) @ np.exp(-np.outer(basis.lambdas, t)))


def _eps_list(cfg, args):
    if args.epsilon:
        return list(args.epsilon)
    if cfg.eps == "auto":
        return [1e4]
    return [float(cfg.eps)]


def cmd_control(cfg, args, out: Path) -> int:
    _, basis, _ = _setup(cfg, args)
    control.warn_if_uncontrollable(cfg.s)
    eps = _eps_list(cfg, args)[0]
    mask, sol, coeffs = _single_control(cfg, args, basis, eps)
    t = np.linspace(0, args.tau, 201)
    h = _control_values(basis, mask, coeffs, t)
    write_trajectory_csv(out / "control.csv", h, t, basis.mesh.interior, s=cfg.s, N=cfg.N, tau=args.tau,
                         mode=args.mode, eps=eps)
    _write_rows(out / "control_modal.csv", ["m", "lambda_m", "coefficient"],
                [[m + 1, f"{basis.lambdas[m]:.12g}", f"{c:.12g}"] for m, c in enumerate(coeffs)])
    if cfg.figures:
        plotting.control_heatmap(h, basis.mesh.interior, t, cfg.omega, out / "control.png",
                                 f"mode {args.mode}, tau = {args.tau:g}, eps = {eps:g}")
    print(f"HUM residual {sol.residual:.3e}, condition {sol.condition:.3e}, "
          f"predicted ||phi(0)|| = {np.sqrt(sol.final_state @ basis.mass.matvec(sol.final_state)):.6g}")
    return 0


def cmd_verify(cfg, args, out: Path) -> int:
    _, basis, stiffness = _setup(cfg, args)
    control.warn_if_uncontrollable(cfg.s)
    eps_values = sorted(_eps_list(cfg, args) if args.epsilon else [1e2, 1e3, 1e4])
    steps = args.steps or max(2000, int(round(args.tau * cfg.M / cfg.T)))
    rows, fem, l2, linf = [], [], [], []
    t = np.linspace(0, args.tau, 401)
    for eps in eps_values:
        mask, sol, coeffs = _single_control(cfg, args, basis, eps)
        r_fem = control.verify_null_control(coeffs, args.mode, args.tau, basis, mask, stiffness, steps)
        r_spec = control.verify_null_control(coeffs, args.mode, args.tau, basis, mask, method="spectral")
        h = _control_values(basis, mask, coeffs, t)[mask.indices]
        wt = np.full(t.size, t[1] - t[0])
        wt[[0, -1]] /= 2
        n_l2 = float(np.sqrt(mask.weights @ (h ** 2) @ wt))
        n_inf = float(np.abs(h).max())
        rows.append([f"{eps:.6g}", f"{r_fem:.6e}", f"{r_spec:.6e}", f"{n_l2:.6e}", f"{n_inf:.6e}"])
        fem.append(r_fem)
        l2.append(n_l2)
        linf.append(n_inf)
    _write_rows(out / "verify.csv", ["eps", "state_norm_fem", "state_norm_spectral", "control_l2", "control_linf"], rows)
    if cfg.figures:
        plotting.norm_trend(eps_values, fem, l2, linf, out / "norm_trend.png",
                            f"mode {args.mode}, tau = {args.tau:g}")
    for r in rows:
        print("  ".join(r))
    if len(eps_values) > 1:
        slope = np.polyfit(np.log10(eps_values), np.log10(np.square(fem)), 1)[0]
        print(f"log-log slope of ||phi_eps(0)||^2: {slope:.3f}")
    return 0


def cmd_volterra(cfg, args, out: Path) -> int:
    _, basis, _ = _setup(cfg, args)
    grid = TimeGrid(cfg.T, cfg.M, cfg.f_M)
    J = grid.fine_index(args.tau)
    eps = _eps_list(cfg, args)[0]
    mask, _, coeffs = _single_control(cfg, args, basis, eps)
    t = grid.t[: J + 1]
    h = _control_values(basis, mask, coeffs, t)[mask.indices]
    th, tht = solve_volterra(h.T, catalogue_sigma(cfg.sigma), grid.k)
    xw = basis.mesh.interior[mask.indices]
    params = dict(s=cfg.s, N=cfg.N, tau=args.tau, mode=args.mode, eps=eps, sigma=cfg.sigma)
    write_trajectory_csv(out / "theta.csv", th.T, t, xw, **params)
    write_trajectory_csv(out / "theta_t.csv", tht.T, t, xw, **params)
    if cfg.figures:
        plotting.volterra_figure(t, th.T, tht.T, out / "volterra.png", f"tau = {args.tau:g}, mode {args.mode}")
    print(f"max|theta| = {np.abs(th).max():.6g}, max|theta_t| = {np.abs(tht).max():.6g}")
    return 0


def _run(cfg, args, out: Path, figures: bool) -> int:
    cfg = cfg.replace(figures=figures and cfg.figures, output_dir=str(out))
    result = run_pipeline(cfg, Cache(cfg.cache_path, enabled=not args.no_cache))
    emit_outputs(result, out)
    for th, rep in sorted(result.reports.items()):
        err = "n/a" if rep.rel_error is None else f"{rep.rel_error:.4f}"
        print(f"formula {th}: relative error {err}, gaps {rep.gaps}, sign flips {rep.sign_flips}")
    for w in result.manifest.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return 0


def cmd_reconstruct(cfg, args, out: Path) -> int:
    return _run(cfg, args, out, figures=False)


def cmd_pipeline(cfg, args, out: Path) -> int:
    return _run(cfg, args, out, figures=True)


def cmd_epsilon(cfg, args, out: Path) -> int:
    _, basis, _ = _setup(cfg, args)
    grid = TimeGrid(cfg.T, cfg.M, cfg.f_M)
    mask = make_mask(basis.mesh, *cfg.omega)
    choice = control.select_epsilon(basis, mask, grid, args.n_tilde or cfg.e_n)
    _write_rows(out / "epsilon.csv", ["log10_eps", "max_state_norm_omega"],
                [[f"{e:.1f}", f"{v:.6e}"] for e, v in choice.history])
    print(f"eps = 10^{choice.exponent:.1f} = {choice.eps:.6g} (max norm {choice.achieved:.4g} < {choice.threshold:.4g})")
    return 0


COMMANDS = {
    "assemble": cmd_assemble, "eigs": cmd_eigs, "forward": cmd_forward, "control": cmd_control,
    "verify": cmd_verify, "volterra": cmd_volterra, "reconstruct": cmd_reconstruct,
    "pipeline": cmd_pipeline, "epsilon": cmd_epsilon,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return COMMANDS[args.command](cfg, args, out)
    except FracSourceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return NumericalError.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
