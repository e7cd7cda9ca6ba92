"""Cached end-to-end run: matrices, eigenbasis, controls, Volterra family, reconstruction, outputs."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import tempfile
import time
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import control, plotting
from .catalogue import catalogue_f, catalogue_sigma
from .config import RunConfig, parse_modes
from .dynamics import TimeGrid, observe, spectral_forward
from .errors import ConfigError, FracSourceError, PreconditionError, ValidityWarning
from .mesh_fem import (FractionalOrder, SymmetricToeplitzMatrix, assemble_mass, assemble_stiffness,
                       build_mesh, make_mask)
from .reconstruction import ReconstructionReport, recover_coefficients, reconstruct_source
from .spectral import SpectralBasis, project, solve_eigenbasis
from .volterra import VolterraFamily, solve_family

log = logging.getLogger(__name__)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_save_npz(path: Path, **arrays) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".npz")
    os.close(fd)
    try:
        np.savez(tmp, **arrays)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


class Cache:
    """Content-keyed store of npz artifacts under ``root/<stage>/<key>.npz``.

    Keys hash the canonical JSON of the parameters an artifact depends on. ``events`` records
    hit/compute per stage for the manifest and for tests.
    """

    def __init__(self, root, enabled: bool = True):
        self.root = Path(root)
        self.enabled = enabled
        self.events: list[tuple[str, str, str]] = []

    @staticmethod
    def key(params: dict) -> str:
        blob = json.dumps(params, sort_keys=True, default=float).encode()
        return hashlib.sha256(blob).hexdigest()[:24]

    def path(self, stage: str, params: dict) -> Path:
        return self.root / stage / f"{self.key(params)}.npz"

    def fetch(self, stage: str, params: dict, compute: Callable[[], dict]) -> tuple[dict, Path | None]:
        path = self.path(stage, params)
        if self.enabled and path.exists():
            try:
                with np.load(path) as data:
                    arrays = {k: data[k] for k in data.files}
                self.events.append((stage, "hit", str(path)))
                return arrays, path
            except (OSError, ValueError) as exc:
                log.warning("discarding unreadable cache entry %s: %s", path, exc)
        arrays = compute()
        if not self.enabled:
            self.events.append((stage, "compute", ""))
            return arrays, None
        atomic_save_npz(path, **arrays)
        self.events.append((stage, "compute", str(path)))
        return arrays, path

    def computed(self, stage: str) -> int:
        return sum(1 for s, kind, _ in self.events if s == stage and kind == "compute")


@dataclass
class Manifest:
    config: dict
    artifacts: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    outputs: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True, default=str)


@dataclass
class PipelineResult:
    config: RunConfig
    manifest: Manifest
    basis: SpectralBasis
    grid: TimeGrid
    controls: control.ControlFamily
    volterra: VolterraFamily
    reports: dict
    f_true: np.ndarray | None
    stiffness: SymmetricToeplitzMatrix

    @property
    def primary(self) -> ReconstructionReport:
        return self.reports[min(self.reports)]


@contextmanager
def _stage(manifest: Manifest, name: str):
    t0 = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            yield
        except FracSourceError as exc:
            raise type(exc)(f"stage '{name}' failed: {exc}") from exc
        finally:
            manifest.timings[name] = round(time.perf_counter() - t0, 4)
            for w in caught:
                msg = f"{name}: {w.message}"
                if msg not in manifest.warnings:
                    manifest.warnings.append(msg)
                    log.warning(msg)


def _record(manifest: Manifest, stage: str, path: Path | None) -> None:
    if path is not None:
        manifest.artifacts[f"{stage}/{path.name}"] = sha256_file(path)


def load_source(cfg: RunConfig, basis: SpectralBasis) -> tuple[np.ndarray, np.ndarray | None]:
    """Modal coefficients of the source and, when available, its nodal samples."""
    x = basis.mesh.interior
    src = cfg.source
    kind, _, rest = src.partition(":")
    if kind == "modes":
        coeffs = np.zeros(basis.n_star)
        for n, v in parse_modes(rest).items():
            if n > basis.n_star:
                raise ConfigError(f"source mode {n} exceeds n*={basis.n_star}")
            coeffs[n - 1] = v
        return coeffs, basis.modes @ coeffs
    if kind in ("coeffs", "nodal"):
        try:
            data = np.loadtxt(rest, delimiter=",", ndmin=1, comments="#")
        except OSError as exc:
            raise ConfigError(f"cannot read source file {rest}: {exc}") from None
        if kind == "coeffs":
            data = np.ravel(data)
            if data.size > basis.n_star:
                raise ConfigError(f"{data.size} source coefficients exceed n*={basis.n_star}")
            coeffs = np.zeros(basis.n_star)
            coeffs[: data.size] = data
            return coeffs, basis.modes @ coeffs
        nodal = np.ravel(data)
        if nodal.size != basis.mesh.N:
            raise ConfigError(f"nodal source has {nodal.size} values, mesh has {basis.mesh.N} interior nodes")
        return project(nodal, basis), nodal
    f = catalogue_f(src, x)
    return project(f, basis), f


def matrices_stage(cfg: RunConfig, cache: Cache, manifest: Manifest | None = None):
    mesh = build_mesh(cfg.N)
    params = {"s": cfg.s, "N": cfg.N}
    arrays, path = cache.fetch("matrices", params, lambda: {
        "first_row": assemble_stiffness(mesh, FractionalOrder(cfg.s)).first_row})
    if manifest is not None:
        _record(manifest, "matrices", path)
    return mesh, assemble_mass(mesh), SymmetricToeplitzMatrix(arrays["first_row"])


def basis_stage(cfg: RunConfig, cache: Cache, mesh, mass, stiffness, manifest: Manifest | None = None) -> SpectralBasis:
    params = {"s": cfg.s, "N": cfg.N, "n_star": cfg.n_star_effective}

    def compute():
        b = solve_eigenbasis(mass, stiffness, cfg.n_star_effective, mesh=mesh, s=cfg.s)
        return {"lambdas": b.lambdas, "modes": b.modes}

    arrays, path = cache.fetch("eigenbasis", params, compute)
    if manifest is not None:
        _record(manifest, "eigenbasis", path)
    return SpectralBasis(cfg.s, arrays["lambdas"], arrays["modes"], mesh, mass)


def run_pipeline(cfg: RunConfig, cache: Cache | None = None) -> PipelineResult:
    """Matrices -> eigenbasis -> (controls, observations) -> Volterra family -> reconstruction."""
    cache = cache or Cache(cfg.cache_path)
    manifest = Manifest(config=cfg.as_dict())
    sigma = catalogue_sigma(cfg.sigma)
    grid = TimeGrid(cfg.T, cfg.M, cfg.f_M)
    theorems = cfg.theorems
    if abs(sigma.at(cfg.T)) < 1e-10 and 1 in theorems:
        if theorems == (1,):
            raise PreconditionError(f"sigma '{cfg.sigma}' vanishes at T={cfg.T}; the first reconstruction "
                                    "formula does not apply, run with theorem = 2")
        theorems = (2,)
        manifest.warnings.append(f"sigma '{cfg.sigma}' vanishes at T: only the second formula was evaluated")
    if cfg.s <= 0.5:
        if cfg.strict:
            raise PreconditionError(f"s={cfg.s} <= 1/2: null controllability fails and the reconstruction "
                                    "formulas do not apply (strict mode)")

    with _stage(manifest, "matrices"):
        mesh, mass, stiffness = matrices_stage(cfg, cache, manifest)
    with _stage(manifest, "eigenbasis"):
        basis = basis_stage(cfg, cache, mesh, mass, stiffness, manifest)
    mask = make_mask(mesh, *cfg.omega)

    eps = cfg.eps
    if eps == "auto":
        with _stage(manifest, "epsilon"):
            choice = control.select_epsilon(basis, mask, grid, cfg.e_n)
            eps = choice.eps
            manifest.summary["eps_selected"] = eps

    modes = tuple(range(1, cfg.e_n + 1))
    ctrl_params = {"s": cfg.s, "N": cfg.N, "n_star": cfg.n_star_effective, "omega": list(cfg.omega),
                   "eps": eps, "T": cfg.T, "M": cfg.M, "f_M": cfg.f_M, "modes": list(modes)}
    with _stage(manifest, "controls"):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ValidityWarning)
            arrays, path = cache.fetch("controls", ctrl_params, lambda: _controls_arrays(
                control.build_control_family(basis, mask, grid, eps, modes)))
        _record(manifest, "controls", path)
        controls = control.ControlFamily(eps, grid.taus, modes, arrays["coeffs"], basis.lambdas.copy(), mask,
                                         arrays["residuals"])
        if cfg.s <= 0.5:
            warnings.warn(f"s={cfg.s} <= 1/2: the equation is not null controllable and the reconstruction "
                          "formulas are not valid; results are for observation only", ValidityWarning)

    vol_params = dict(ctrl_params, sigma=cfg.sigma)
    with _stage(manifest, "volterra"):
        arrays, path = cache.fetch("volterra", vol_params,
                                   lambda: _volterra_arrays(solve_family(controls, sigma, grid)))
        _record(manifest, "volterra", path)
        family = _volterra_from_arrays(arrays, controls, grid)

    with _stage(manifest, "observations"):
        fcoeffs, f_true = load_source(cfg, basis)
        traj = spectral_forward(fcoeffs, sigma, basis, grid)
        obs = observe(traj, mask, grid, cfg.noise, np.random.default_rng(cfg.seed))

    reports = {}
    with _stage(manifest, "reconstruction"):
        for th in theorems:
            coeffs, cn = recover_coefficients(obs, family, basis, sigma, grid, th, outer=cfg.outer)
            reports[th] = reconstruct_source(coeffs, basis, f_true, th, cn)
            rep = reports[th]
            manifest.summary[f"theorem{th}"] = {
                "rel_error": rep.rel_error, "gaps": rep.gaps, "sign_flips": rep.sign_flips}
            if rep.gaps:
                warnings.warn(f"theorem {th}: c_n below threshold for modes {rep.gaps}; reported as gaps")
        if len(reports) == 2:
            c1, c2 = reports[1].coeffs, reports[2].coeffs
            ok = np.isfinite(c2)
            manifest.summary["theorem_agreement"] = float(np.linalg.norm(c1[ok] - c2[ok]) / np.linalg.norm(c1[ok]))
    manifest.summary["eps"] = eps
    manifest.summary["cache"] = [list(e) for e in cache.events]
    return PipelineResult(cfg, manifest, basis, grid, controls, family, reports, f_true, stiffness)


def _controls_arrays(fam: control.ControlFamily) -> dict:
    return {"coeffs": fam.coeffs, "residuals": fam.residuals}


def _volterra_arrays(fam: VolterraFamily) -> dict:
    return {"theta": np.concatenate(fam.theta), "theta_t": np.concatenate(fam.theta_t)}


def _volterra_from_arrays(arrays: dict, controls, grid: TimeGrid) -> VolterraFamily:
    sizes = [1] + [ell * grid.stride + 1 for ell in range(1, grid.f_M + 1)]
    cuts = np.cumsum(sizes)[:-1]
    th = tuple(np.split(arrays["theta"], cuts))
    tht = tuple(np.split(arrays["theta_t"], cuts))
    return VolterraFamily(grid.taus, grid.stride, grid.k, th, tht, controls)


def _write_csv(path: Path, header: list, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        wr.writerows(rows)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    v = float(v)
    return "nan" if not np.isfinite(v) else f"{v:.12g}"


def emit_outputs(result: PipelineResult, out_dir=None) -> dict:
    """coefficients.csv, reconstruction.csv, figures and manifest.json; returns {name: sha256}."""
    cfg = result.config
    out = Path(out_dir or cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    rep = result.primary
    files = []
    header = ["n", "lambda_n", "c_n", "f_n_recovered", "f_n_true", "sign_match"]
    both = len(result.reports) == 2
    if both:
        header += ["f_n_thm1", "f_n_thm2"]
    cn = rep.cn if rep.cn is not None else result.reports.get(2, rep).cn
    rows = []
    for i, n in enumerate(rep.modes):
        row = [int(n), _fmt(rep.lambdas[i]), _fmt(None if cn is None else cn[i]), _fmt(rep.coeffs[i]),
               _fmt(None if rep.reference is None else rep.reference[i]),
               _fmt(None if rep.sign_match is None else rep.sign_match[i])]
        if both:
            row += [_fmt(result.reports[1].coeffs[i]), _fmt(result.reports[2].coeffs[i])]
        rows.append(row)
    _write_csv(out / "coefficients.csv", header, rows)
    files.append(out / "coefficients.csv")

    x = result.basis.mesh.interior
    rec_rows = [[_fmt(x[i]), _fmt(None if rep.f_true is None else rep.f_true[i]),
                 _fmt(None if rep.f_projected is None else rep.f_projected[i]), _fmt(rep.f_recovered[i])]
                for i in range(x.size)]
    _write_csv(out / "reconstruction.csv", ["x", "f_true", "f_projected", "f_recovered"], rec_rows)
    files.append(out / "reconstruction.csv")

    if cfg.figures:
        t0 = time.perf_counter()
        files += plotting.pipeline_figures(result, out)
        result.manifest.timings["figures"] = round(time.perf_counter() - t0, 4)

    result.manifest.outputs = {p.name: sha256_file(p) for p in files}
    manifest_path = out / "manifest.json"
    manifest_path.write_text(result.manifest.to_json())
    return dict(result.manifest.outputs, **{"manifest.json": sha256_file(manifest_path)})
