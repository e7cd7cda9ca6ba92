"""Uniform P1 finite elements for the Dirichlet fractional Laplacian on (-1, 1).

Stiffness entries a(phi_i, phi_j) of the form

    a(u, v) = C_s / 2 * int_R int_R (u(x) - u(y)) (v(x) - v(y)) / |x - y|^(1 + 2s) dx dy

depend only on k = |i - j| and scale as h^(1 - 2s).  They are evaluated in
closed form: a hat function is the second difference of a ramp, and the
kernel -C_s |z|^(-1-2s) is the fourth derivative of
-C_s |z|^(3-2s) / ((-2s)(1-2s)(2-2s)(3-2s)), so each entry is a fourth
difference of |k + r|^(3-2s).  ``stiffness_entry_oracle`` recomputes the same
numbers by brute-force quadrature of the double integral.
"""
from __future__ import annotations

import csv
import math
import os
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import matmul_toeplitz, toeplitz
from scipy.special import gamma, roots_jacobi, roots_legendre

from .errors import AssemblyError, ConfigError

_FOURTH_DIFF = np.array([1.0, -4.0, 6.0, -4.0, 1.0])
_OFFSETS = np.arange(-2, 3)
# beyond this offset the fourth difference is summed as a series in 1/k
_FAR_FIELD_K = 12


@dataclass(frozen=True)
class FractionalOrder:
    s: float

    def __post_init__(self):
        if not 0.0 < self.s < 1.0:
            raise ConfigError(f"fractional order must lie in (0, 1), got s={self.s}")

    @property
    def C_s(self) -> float:
        s = self.s
        return s * 2 ** (2 * s) * gamma((2 * s + 1) / 2) / (math.sqrt(math.pi) * gamma(1 - s))


@dataclass(frozen=True)
class Mesh1D:
    """Uniform mesh x_i = -1 + i h, i = 0..N+1; the N interior nodes carry unknowns."""

    N: int

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 2:
            raise ConfigError(f"mesh needs N >= 2 interior nodes, got N={self.N}")

    @property
    def h(self) -> float:
        return 2.0 / (self.N + 1)

    @property
    def nodes(self) -> np.ndarray:
        return -1.0 + self.h * np.arange(self.N + 2)

    @property
    def interior(self) -> np.ndarray:
        return self.nodes[1:-1]


def build_mesh(N: int) -> Mesh1D:
    return Mesh1D(int(N) if float(N).is_integer() else N)


@dataclass(frozen=True)
class SubdomainMask:
    """Observation window omega = (lo, hi) and the interior nodes strictly inside it.

    ``indices`` are 0-based positions in the interior-node vector (node x_{i+1}).
    ``weights`` integrate a nodal function over omega: h at inner nodes, and at
    the two end nodes h/2 plus the partial cell up to lo or hi.
    """

    lo: float
    hi: float
    indices: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)

    @property
    def measure(self) -> float:
        return self.hi - self.lo

    @property
    def size(self) -> int:
        return len(self.indices)


def make_mask(mesh: Mesh1D, lo: float, hi: float) -> SubdomainMask:
    if not (-1.0 <= lo < hi <= 1.0):
        raise ConfigError(f"observation window must satisfy -1 <= lo < hi <= 1, got ({lo}, {hi})")
    x = mesh.interior
    idx = np.flatnonzero((x > lo) & (x < hi))
    if idx.size == 0:
        raise ConfigError(f"no mesh node lies inside ({lo}, {hi}) at N={mesh.N}")
    h = mesh.h
    w = np.full(idx.size, h)
    if idx.size == 1:
        w[0] = hi - lo
    else:
        w[0] = h / 2 + (x[idx[0]] - lo)
        w[-1] = h / 2 + (hi - x[idx[-1]])
    return SubdomainMask(float(lo), float(hi), idx, w)


@dataclass(frozen=True)
class BandedMatrix:
    """Square matrix stored by diagonals; ``diagonals[d]`` holds offset ``offsets[d]``."""

    order: int
    offsets: tuple
    diagonals: tuple
    symmetric: bool = False

    def entry(self, i: int, j: int) -> float:
        off = j - i
        for o, d in zip(self.offsets, self.diagonals):
            if o == off:
                return float(d[min(i, j)])
        return 0.0

    def to_dense(self) -> np.ndarray:
        A = np.zeros((self.order, self.order))
        for o, d in zip(self.offsets, self.diagonals):
            A += np.diag(d, o)
        return A

    def matvec(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        out = np.zeros_like(v)
        n = self.order
        for o, d in zip(self.offsets, self.diagonals):
            if o >= 0:
                out[: n - o] += (d * v[o:].T).T if v.ndim > 1 else d * v[o:]
            else:
                out[-o:] += (d * v[: n + o].T).T if v.ndim > 1 else d * v[: n + o]
        return out

    def __matmul__(self, v):
        return self.matvec(v)


@dataclass(frozen=True)
class SymmetricToeplitzMatrix:
    """Symmetric Toeplitz matrix with entry (i, j) = first_row[|i - j|]."""

    first_row: np.ndarray = field(repr=False)

    @property
    def order(self) -> int:
        return len(self.first_row)

    def entry(self, i: int, j: int) -> float:
        return float(self.first_row[abs(i - j)])

    def to_dense(self) -> np.ndarray:
        return toeplitz(self.first_row)

    def matvec(self, v: np.ndarray) -> np.ndarray:
        return matmul_toeplitz(self.first_row, np.asarray(v, dtype=float))

    def __matmul__(self, v):
        return self.matvec(v)


def assemble_mass(mesh: Mesh1D) -> BandedMatrix:
    N, h = mesh.N, mesh.h
    off = np.full(N - 1, h / 6)
    return BandedMatrix(N, (-1, 0, 1), (off, np.full(N, 2 * h / 3), off), symmetric=True)


def _fourth_difference_over_eps(k: np.ndarray, s: float) -> np.ndarray:
    """sum_r w_r |k + r|^(3 - 2s) / (1 - 2s), stable near s = 1/2 and for large k."""
    eps = 1.0 - 2.0 * s
    p = 3.0 - 2.0 * s
    out = np.empty(k.shape)
    near = k < _FAR_FIELD_K
    if near.any():
        z = np.abs(k[near, None] + _OFFSETS).astype(float)
        if abs(eps) > 1e-3:
            out[near] = (z ** p) @ _FOURTH_DIFF / eps
        else:
            # |z|^(2+eps)/eps = z^2/eps + z^2 sum_j eps^(j-1) log(z)^j / j!; the 1/eps part
            # is annihilated by the fourth difference
            with np.errstate(divide="ignore", invalid="ignore"):
                lz = np.where(z > 0, np.log(z), 0.0)
            acc = np.zeros_like(z)
            term = np.ones_like(z)
            for j in range(1, 8):
                term = term * lz / j
                acc += eps ** (j - 1) * term
            out[near] = (z ** 2 * acc) @ _FOURTH_DIFF
    far = ~near
    if far.any():
        kf = k[far].astype(float)
        acc = np.zeros_like(kf)
        for j in range(4, 26, 2):
            # binom(p, j) always contains the factor (p - 2) = eps
            c = np.prod([p - i for i in range(j) if i != 2]) / math.factorial(j)
            acc += c * (2.0 ** (j + 1) - 8.0) * kf ** (-j)
        out[far] = kf ** p * acc
    return out


def stiffness_entries(k, h: float, order: FractionalOrder) -> np.ndarray:
    """Closed-form a(phi_i, phi_{i+k}) for uniform spacing h."""
    s = order.s
    k = np.abs(np.atleast_1d(np.asarray(k))).astype(np.int64)
    denom = (-2 * s) * (2 - 2 * s) * (3 - 2 * s)
    return -order.C_s * h ** (1 - 2 * s) * _fourth_difference_over_eps(k, s) / denom


def assemble_stiffness(mesh: Mesh1D, order: FractionalOrder) -> SymmetricToeplitzMatrix:
    row = stiffness_entries(np.arange(mesh.N), mesh.h, order)
    if not np.all(np.isfinite(row)):
        bad = np.flatnonzero(~np.isfinite(row))
        raise AssemblyError(f"non-finite stiffness entries at offsets {bad[:5].tolist()} (s={order.s}, N={mesh.N})")
    if row[0] <= 0:
        raise AssemblyError(f"stiffness diagonal must be positive, got {row[0]!r}")
    return SymmetricToeplitzMatrix(row)


def _hat(x, center, h):
    return np.maximum(0.0, 1.0 - np.abs(x - center) / h)


def _shift_energy(z: float, k: int, h: float, xg, wg) -> float:
    # int_R (u(x) - u(x+z)) (v(x) - v(x+z)) dx, u and v hats centred at 0 and k h
    kinks = np.array([-1.0, 0.0, 1.0, k - 1.0, k, k + 1.0]) * h
    bps = np.unique(np.concatenate([kinks, kinks - z]))
    a, b = bps[:-1], bps[1:]
    x = 0.5 * (a + b)[:, None] + 0.5 * (b - a)[:, None] * xg
    w = 0.5 * (b - a)[:, None] * wg
    du = _hat(x, 0.0, h) - _hat(x + z, 0.0, h)
    dv = _hat(x, k * h, h) - _hat(x + z, k * h, h)
    return float(np.sum(w * du * dv))


def stiffness_entry_oracle(k: int, h: float, order: FractionalOrder, n_gauss: int = 24) -> float:
    """a(phi_i, phi_{i+k}) by direct quadrature of the double integral.

    With z = y - x the form is C_s int_0^inf z^(-1-2s) I(z) dz where I(z) is the
    x-integral of the product of shifted differences.  I(z) is integrated by
    Gauss-Legendre between all kinks; the z-integral uses Gauss-Jacobi with weight
    z^(1-2s) on the first cell (absorbing the diagonal singularity), Gauss-Legendre
    on the following cells, and the exact tail beyond the support overlap.
    """
    s = order.s
    k = abs(int(k))
    if h <= 0:
        raise ConfigError("spacing must be positive")
    if s > 0.95 and n_gauss < 32:
        warnings.warn(f"oracle accuracy degrades for s={s} near 1 with n_gauss={n_gauss}", RuntimeWarning)
    xg, wg = roots_legendre(4)
    xj, wj = roots_jacobi(n_gauss, 0.0, 1.0 - 2 * s)
    # map [-1, 1] -> [0, h]; weight z^(1-2s) = (h/2)^(1-2s) (1 + t)^(1-2s)
    z = 0.5 * h * (xj + 1.0)
    w = wj * (0.5 * h) ** (2.0 - 2.0 * s)
    total = sum(wi * _shift_energy(zi, k, h, xg, wg) / zi ** 2 for zi, wi in zip(z, w))
    zl, wl = roots_legendre(n_gauss)
    reach = k + 2
    for cell in range(1, reach):
        zz = h * (cell + 0.5 * (zl + 1.0))
        ww = 0.5 * h * wl
        total += sum(wi * zi ** (-1 - 2 * s) * _shift_energy(zi, k, h, xg, wg) for zi, wi in zip(zz, ww))
    # past z = (k+2) h the shifted hats no longer overlap: I(z) = 2 (u, v)
    uv = {0: 2 * h / 3, 1: h / 6}.get(k, 0.0)
    Z = reach * h
    total += 2 * uv * Z ** (-2 * s) / (2 * s)
    return order.C_s * total


def hat_moment_rule(values: np.ndarray, j: int, h: float) -> float:
    """(h/12)(v_{j-1} + 10 v_j + v_{j+1}) ~ int phi_j v; ``values`` includes both boundary nodes."""
    v = np.asarray(values, dtype=float)
    if not 1 <= j <= len(v) - 2:
        raise ConfigError(f"node index {j} outside 1..{len(v) - 2}")
    return h / 12.0 * (v[j - 1] + 10.0 * v[j] + v[j + 1])


def vh_product_rule(values: np.ndarray, j: int, h: float) -> float:
    """(h/6)(v_{j-1} + 4 v_j + v_{j+1}) = int phi_j v exactly for v in V_h."""
    v = np.asarray(values, dtype=float)
    if not 1 <= j <= len(v) - 2:
        raise ConfigError(f"node index {j} outside 1..{len(v) - 2}")
    return h / 6.0 * (v[j - 1] + 4.0 * v[j] + v[j + 1])


def hat_moment_matrix(interior_values: np.ndarray, h: float) -> np.ndarray:
    """Apply the hat-moment rule to every column, zero exterior values implied."""
    V = np.asarray(interior_values, dtype=float)
    pad = np.zeros((V.shape[0] + 2,) + V.shape[1:])
    pad[1:-1] = V
    return h / 12.0 * (pad[:-2] + 10.0 * pad[1:-1] + pad[2:])


def subdomain_l2_inner(u: np.ndarray, v: np.ndarray, mask: SubdomainMask, mesh: Mesh1D | None = None) -> float:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if mask.size == 0:
        raise ConfigError("empty observation mask")
    if mesh is not None and (u.shape[0] != mesh.N or v.shape[0] != mesh.N):
        raise ConfigError("nodal vectors must have one value per interior node")
    return float(np.sum(mask.weights * u[mask.indices] * v[mask.indices]))


def mass_norm(v: np.ndarray, mass: BandedMatrix) -> float:
    v = np.asarray(v, dtype=float)
    if v.shape[0] != mass.order:
        raise ConfigError(f"vector length {v.shape[0]} does not match matrix order {mass.order}")
    return float(math.sqrt(max(float(v @ mass.matvec(v)), 0.0)))


# -- cache files --------------------------------------------------------------

def _atomic_write_text(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def save_matrix(path, matrix, s: float, mesh: Mesh1D) -> Path:
    """CSV cache: header line ``s,N,h,kind`` then the first row or the three diagonals."""
    path = Path(path)
    if isinstance(matrix, SymmetricToeplitzMatrix):
        kind, rows = "stiffness", [[f"{x:.17g}"] for x in matrix.first_row]
    elif isinstance(matrix, BandedMatrix):
        kind = "mass"
        lower, diag, upper = (np.append(d, np.nan) if len(d) < matrix.order else d for d in matrix.diagonals)
        rows = [[f"{a:.17g}", f"{b:.17g}", f"{c:.17g}"] for a, b, c in zip(lower, diag, upper)]
    else:
        raise TypeError(f"cannot serialise {type(matrix).__name__}")
    lines = [f"# s={s:.17g},N={mesh.N},h={mesh.h:.17g},kind={kind}"]
    lines += [",".join(r) for r in rows]
    _atomic_write_text(path, "\n".join(lines) + "\n")
    return path


def load_matrix(path):
    """Inverse of :func:`save_matrix`; returns (matrix, header dict)."""
    path = Path(path)
    with open(path, newline="") as fh:
        head = fh.readline().lstrip("# ").strip()
        header = dict(item.split("=") for item in head.split(","))
        rows = [list(map(float, r)) for r in csv.reader(fh) if r]
    N = int(header["N"])
    if header["kind"] == "stiffness":
        return SymmetricToeplitzMatrix(np.array([r[0] for r in rows])), header
    arr = np.array(rows)
    return BandedMatrix(N, (-1, 0, 1), (arr[:-1, 0], arr[:, 1], arr[:-1, 2]), symmetric=True), header
