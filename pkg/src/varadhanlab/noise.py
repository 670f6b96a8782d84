"""Discrete cylindrical Wiener process on a periodic space-time grid.

The spatial domain is the torus [-L, L)^d sampled at nx points per axis.
Retained spectral modes (integer frequency vectors m with max|m_i| <= nk)
are paired into cosine/sine coordinates; each coordinate carries one
independent Brownian motion, so a noise path is an (nt x ncoords) array of
N(0, dt) increments.  The same coordinate system hosts deterministic
controls h with the L^2([0,T]; H) norm ||h||^2 = sum_i dt sum_k h(i,k)^2.

Coordinates are ordered by increasing |xi| with lexicographic tie-breaks,
which gives "the first n modes" a concrete, refinement-stable meaning for
the piecewise-constant smoothing v^n and its localization event.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .covkernel import CovarianceSpec, spectral_density
from .errors import GridError, ShapeError


@dataclass(frozen=True)
class GridSpec:
    """Periodic space-time discretization of [0,T] x [-L,L)^d."""

    L: float
    nx: int
    nt: int
    T: float
    nk: int
    seed: int = 0

    def __post_init__(self):
        if self.L <= 0 or self.T <= 0:
            raise GridError("L and T must be positive")
        if self.nx < 4 or self.nx % 2 != 0:
            raise GridError("nx must be an even integer >= 4")
        if not 1 <= self.nk <= self.nx // 2:
            raise GridError("need 1 <= nk <= nx/2 (no aliasing of retained modes)")
        if self.nt < 1:
            raise GridError("nt must be >= 1")
        if self.seed < 0:
            raise GridError("seed must be nonnegative")

    @property
    def dt(self) -> float:
        return self.T / self.nt

    @property
    def dx(self) -> float:
        return 2.0 * self.L / self.nx

    def time_index(self, t: float) -> int:
        """Snap a time in (0, T] to its grid index."""
        j = int(round(t / self.dt))
        if not 1 <= j <= self.nt:
            raise GridError(f"time {t} outside (0, {self.T}]")
        return j

    def refined(self, factor: int = 2) -> "GridSpec":
        return GridSpec(self.L, self.nx * factor, self.nt * factor,
                        self.T, self.nk * factor, self.seed)


class Lattice:
    """Realized spectral lattice for a (CovarianceSpec, GridSpec) pair.

    Holds the retained-mode weights mu(cell) and the index machinery that
    converts between coordinate arrays (..., ncoords) and real fields
    (..., nx, ..., nx) via rfftn.  Immutable after construction.
    """

    def __init__(self, cov: CovarianceSpec, grid: GridSpec):
        self.cov = cov
        self.grid = grid
        d = cov.d
        nx, nk, L = grid.nx, grid.nk, grid.L
        self.d = d
        self.spatial_shape = (nx,) * d
        self.spec_shape = (nx,) * (d - 1) + (nx // 2 + 1,)
        self.nspec = int(np.prod(self.spec_shape))
        nxd = float(nx ** d)
        dxd = grid.dx ** d

        axes = [np.fft.fftfreq(nx, d=1.0 / nx).astype(int) for _ in range(d - 1)]
        axes.append(np.arange(nx // 2 + 1))
        mesh = np.meshgrid(*axes, indexing="ij") if d > 1 else [axes[0]]
        m = np.stack([g.reshape(-1) for g in mesh], axis=-1)  # (nspec, d)
        self._m = m
        radius = np.sqrt((m.astype(float) ** 2).sum(axis=-1)) / (2.0 * L)
        self.xi_radius = radius.reshape(self.spec_shape)

        max_abs = np.abs(m).max(axis=-1)
        retained = (max_abs <= min(nk, nx // 2 - 1))
        dens = np.zeros(self.nspec)
        pos = radius > 0
        if cov.kind == "white":
            dens[retained] = 1.0
        else:
            keep = retained & pos  # zero-mode policy: drop the constant mode
            dens[keep] = radius[keep] ** (cov.beta - d)
        cell = (2.0 * L) ** (-d)
        weight = dens * cell                      # mu(cell around xi_m)
        self.mu_weight = weight.reshape(self.spec_shape)

        # multiplicity of each stored rfftn entry in full-lattice sums
        mult = np.ones(self.nspec)
        last = m[:, -1]
        mult[(last > 0) & (last < nx // 2)] = 2.0
        self.mu_mult = mult.reshape(self.spec_shape)

        # enumerate coordinates: one (cos, sin) pair per representative
        # entry with weight > 0, one single coordinate for the zero mode
        pair_flat, mirror_flat, self_flat = [], [], []
        order_keys = []
        for idx in np.nonzero(weight > 0)[0]:
            mm = m[idx]
            if mm[-1] == 0:
                lead = mm[:-1]
                if np.all(lead == 0):
                    self_flat.append(idx)
                    order_keys.append((0.0, tuple(mm), idx, "self"))
                    continue
                nz = lead[lead != 0]
                if nz[0] < 0:
                    continue  # conjugate mirror of a representative
                mir = np.zeros(d, dtype=int)
                mir[:-1] = -lead
                mirror_flat.append(self._flat_index(mir))
            else:
                mirror_flat.append(-1)
            pair_flat.append(idx)
            order_keys.append((radius[idx], tuple(mm), idx, "pair"))

        order_keys.sort(key=lambda k: (k[0], k[1]))
        pair_pos = {idx: n for n, idx in enumerate(pair_flat)}
        cols, coord_r, coord_label = {}, [], []
        col = 0
        for r, mm, idx, kind in order_keys:
            if kind == "self":
                cols[("self", idx)] = col
                coord_r.append(r)
                coord_label.append(f"{mm}:const")
                col += 1
            else:
                cols[("cos", idx)] = col
                cols[("sin", idx)] = col + 1
                coord_r.extend([r, r])
                coord_label.extend([f"{mm}:cos", f"{mm}:sin"])
                col += 2
        self.ncoords = col
        self.coord_radius = np.array(coord_r)
        self.coord_label = coord_label

        self._pair_flat = np.array(pair_flat, dtype=np.intp)
        self._pair_mirror = np.array(mirror_flat, dtype=np.intp)
        self._pair_cos = np.array([cols[("cos", i)] for i in pair_flat], dtype=np.intp)
        self._pair_sin = np.array([cols[("sin", i)] for i in pair_flat], dtype=np.intp)
        self._self_flat = np.array(self_flat, dtype=np.intp)
        self._self_col = np.array([cols[("self", i)] for i in self_flat], dtype=np.intp)

        wp = weight[self._pair_flat] if len(pair_flat) else np.zeros(0)
        ws = weight[self._self_flat] if len(self_flat) else np.zeros(0)
        self._synth_pair = nxd * np.sqrt(wp / 2.0)
        self._synth_self = nxd * np.sqrt(ws)
        self._extract_pair = np.sqrt(2.0 * wp) * dxd
        self._extract_self = np.sqrt(ws) * dxd
        has_mirror = self._pair_mirror >= 0
        self._mirror_src = np.nonzero(has_mirror)[0]
        self._mirror_dst = self._pair_mirror[has_mirror]

    def _flat_index(self, m: np.ndarray) -> int:
        nx = self.grid.nx
        idx = 0
        for a in range(self.d - 1):
            idx = idx * nx + (int(m[a]) % nx)
        return idx * (nx // 2 + 1) + int(m[-1])

    # -- transforms ---------------------------------------------------------

    def synthesize(self, coeffs: np.ndarray) -> np.ndarray:
        """Coordinate array (..., ncoords) -> real field (..., *spatial)."""
        coeffs = np.asarray(coeffs, dtype=float)
        lead = coeffs.shape[:-1]
        spec = np.zeros(lead + (self.nspec,), dtype=np.complex128)
        if len(self._pair_flat):
            a = coeffs[..., self._pair_cos]
            b = coeffs[..., self._pair_sin]
            spec[..., self._pair_flat] = self._synth_pair * (a - 1j * b)
            if len(self._mirror_src):
                spec[..., self._mirror_dst] = np.conj(spec[..., self._pair_flat[self._mirror_src]])
        if len(self._self_flat):
            spec[..., self._self_flat] = self._synth_self * coeffs[..., self._self_col]
        spec = spec.reshape(lead + self.spec_shape)
        return np.fft.irfftn(spec, s=self.spatial_shape,
                             axes=tuple(range(-self.d, 0)))

    def extract(self, fields: np.ndarray) -> np.ndarray:
        """Real field (..., *spatial) -> H-projection coordinates (..., ncoords)."""
        fields = np.asarray(fields, dtype=float)
        lead = fields.shape[:-self.d]
        spec = np.fft.rfftn(fields, axes=tuple(range(-self.d, 0))).reshape(lead + (self.nspec,))
        out = np.zeros(lead + (self.ncoords,))
        if len(self._pair_flat):
            vals = spec[..., self._pair_flat]
            out[..., self._pair_cos] = self._extract_pair * vals.real
            out[..., self._pair_sin] = -self._extract_pair * vals.imag
        if len(self._self_flat):
            out[..., self._self_col] = self._extract_self * spec[..., self._self_flat].real
        return out

    def lattice_h_normsq(self, spec_flat: np.ndarray) -> np.ndarray:
        """||.||_H^2 of fields given by flattened rfftn data (continuum FT units)."""
        w = (self.mu_weight * self.mu_mult).reshape(-1)
        return np.tensordot(np.abs(spec_flat) ** 2, w, axes=([-1], [0]))

    def correlation(self, lag) -> float:
        """Truncated-lattice spatial correlation Gamma(lag) = sum mu(cell) e^{2pi i xi.lag}."""
        lag = np.atleast_1d(np.asarray(lag, dtype=float))
        xi = self._m / (2.0 * self.L_total)
        phase = 2.0 * math.pi * (xi @ lag)
        w = (self.mu_weight * self.mu_mult).reshape(-1)
        # stored entries with mult 2 represent +/- m: cos covers both
        return float(np.sum(w * np.cos(phase)))

    @property
    def L_total(self) -> float:
        return self.grid.L

    def point_index(self, x) -> tuple[int, ...]:
        """Snap a spatial point in [-L, L)^d to grid indices."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if x.shape != (self.d,):
            raise GridError(f"point must have {self.d} component(s)")
        if np.any(np.abs(x) > self.grid.L):
            raise GridError("observation point outside the torus")
        return tuple(int(round(v / self.grid.dx)) % self.grid.nx for v in x)

    def coords(self) -> np.ndarray:
        """Wrapped spatial coordinates along one axis, in [-L, L)."""
        nx, dx = self.grid.nx, self.grid.dx
        p = np.arange(nx)
        return ((p + nx // 2) % nx - nx // 2) * dx


@lru_cache(maxsize=32)
def lattice(cov: CovarianceSpec, grid: GridSpec) -> Lattice:
    """Cached lattice factory; Lattice construction is deterministic."""
    return Lattice(cov, grid)


# ---------------------------------------------------------------------------
# noise paths

@dataclass(eq=False)
class NoisePath:
    """Per-mode Brownian increments W_k(Delta_i), entry (i, k) ~ N(0, dt)."""

    lattice: Lattice
    increments: np.ndarray
    stream: int = 0

    @property
    def nt(self) -> int:
        return self.increments.shape[0]

    def shifted(self, h: "ControlH", scale: float = 1.0) -> "NoisePath":
        """Path translated by scale * h (Cameron-Martin shift of the increments)."""
        if h.lattice is not self.lattice:
            raise ShapeError("control and path live on different lattices")
        dt = self.lattice.grid.dt
        return NoisePath(self.lattice,
                         self.increments + scale * dt * h.coeffs,
                         stream=self.stream)


def sample_path(lat: Lattice, stream: int) -> NoisePath:
    """Draw the counter-based noise path for (grid.seed, stream).

    Each (seed, stream) pair keys an independent Philox generator, so
    ensembles are reproducible independently of scheduling.
    """
    if stream < 0:
        raise ValueError("stream must be nonnegative")
    rng = np.random.Generator(np.random.Philox(key=np.array(
        [lat.grid.seed, stream], dtype=np.uint64)))
    inc = rng.standard_normal((lat.grid.nt, lat.ncoords)) * math.sqrt(lat.grid.dt)
    return NoisePath(lat, inc, stream=stream)


def sample_increments(lat: Lattice, streams) -> np.ndarray:
    """Stack increments for many streams: (n_streams, nt, ncoords)."""
    out = np.empty((len(streams), lat.grid.nt, lat.ncoords))
    for row, s in enumerate(streams):
        out[row] = sample_path(lat, int(s)).increments
    return out


# ---------------------------------------------------------------------------
# controls

@dataclass(eq=False)
class ControlH:
    """Discrete element of L^2([0,T]; H): coefficients per (time slab, mode)."""

    lattice: Lattice
    coeffs: np.ndarray
    norm_sq: float = field(init=False)

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        expect = (self.lattice.grid.nt, self.lattice.ncoords)
        if self.coeffs.shape != expect:
            raise ShapeError(f"control coefficients must have shape {expect}, "
                             f"got {self.coeffs.shape}")
        self.norm_sq = self._compute_normsq()

    def _compute_normsq(self) -> float:
        return float(self.lattice.grid.dt * np.sum(self.coeffs ** 2))

    @property
    def norm(self) -> float:
        return math.sqrt(self.norm_sq)

    def check_norm(self, tol: float = 1e-12) -> bool:
        return abs(self.norm_sq - self._compute_normsq()) <= tol * max(1.0, self.norm_sq)

    @classmethod
    def zeros(cls, lat: Lattice) -> "ControlH":
        return cls(lat, np.zeros((lat.grid.nt, lat.ncoords)))

    def copy(self) -> "ControlH":
        return ControlH(self.lattice, self.coeffs.copy())

    def __add__(self, other: "ControlH") -> "ControlH":
        _check_same(self, other)
        return ControlH(self.lattice, self.coeffs + other.coeffs)

    def __sub__(self, other: "ControlH") -> "ControlH":
        _check_same(self, other)
        return ControlH(self.lattice, self.coeffs - other.coeffs)

    def __mul__(self, c: float) -> "ControlH":
        return ControlH(self.lattice, self.coeffs * float(c))

    __rmul__ = __mul__

    def __neg__(self) -> "ControlH":
        return ControlH(self.lattice, -self.coeffs)

    def slab_fields(self) -> np.ndarray:
        """Spatial field of each slab: (nt, *spatial)."""
        return self.lattice.synthesize(self.coeffs)


def _check_same(a: ControlH, b: ControlH):
    if a.lattice is not b.lattice and (
            a.coeffs.shape != b.coeffs.shape
            or a.lattice.grid.dt != b.lattice.grid.dt):
        raise ShapeError("controls live on incompatible grids")


def ht_inner(a: ControlH, b: ControlH) -> float:
    """Inner product on L^2([0,T]; H): sum_i dt sum_k a(i,k) b(i,k)."""
    _check_same(a, b)
    return float(a.lattice.grid.dt * np.sum(a.coeffs * b.coeffs))


# ---------------------------------------------------------------------------
# smoothing and localization

def dyadic_increments(path: NoisePath, n: int) -> np.ndarray:
    """W_k(Delta_i) on the dyadic partition into 2^n slabs: (2^n, ncoords)."""
    nt = path.nt
    if n < 0 or (1 << n) > nt or nt % (1 << n) != 0:
        raise GridError(f"2^{n} must divide nt = {nt}")
    per = nt // (1 << n)
    return path.increments.reshape(1 << n, per, -1).sum(axis=1)


def smooth_vn(path: NoisePath, n: int) -> ControlH:
    """Piecewise-constant smoothed noise v^n as a control.

    On each dyadic slab Delta_{i+1} (i >= 0) the first n coordinates carry
    the delayed increment 2^n T^{-1} W_k(Delta_i); everything vanishes on
    [0, 2^{-n} T) and for coordinates beyond the first n.
    """
    lat = path.lattice
    if n > lat.ncoords:
        raise GridError(f"smoothing level {n} exceeds available modes {lat.ncoords}")
    blocks = dyadic_increments(path, n)      # (2^n, ncoords)
    nslab = 1 << n
    per = lat.grid.nt // nslab
    coeffs = np.zeros((lat.grid.nt, lat.ncoords))
    scale = nslab / lat.grid.T
    vals = np.zeros_like(blocks)
    vals[1:, :n] = scale * blocks[:-1, :n]
    coeffs[:] = np.repeat(vals, per, axis=0)
    return ControlH(lat, coeffs)


def localization_holds(path: NoisePath, n: int, theta: float, t: float) -> bool:
    """Whether all early dyadic increments of the first n modes stay small.

    True iff sup over modes j <= n and slabs i <= floor(2^n t/T - 1) of
    |W_j(Delta_i)| is at most 2^{n(theta-1)}.
    """
    if theta <= 0.5:
        raise ValueError("localization requires theta > 1/2")
    i_max = math.floor((1 << n) * t / path.lattice.grid.T - 1.0)
    if i_max < 0:
        return True
    blocks = dyadic_increments(path, n)
    window = np.abs(blocks[: i_max + 1, :n])
    return bool(window.size == 0 or window.max() <= 2.0 ** (n * (theta - 1.0)))


# ---------------------------------------------------------------------------
# serialization: flat binary (header nt, ncoords, dt) + CSV for debugging

_MAGIC = {"path": b"VLNPATH1", "control": b"VLCTRL01"}


def _save_array(path, magic: bytes, arr: np.ndarray, dt: float):
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<QQd", arr.shape[0], arr.shape[1], dt))
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _load_array(path, magic: bytes) -> tuple[np.ndarray, float]:
    with open(path, "rb") as fh:
        head = fh.read(8)
        if head != magic:
            raise ShapeError(f"bad magic in {path}")
        nt, nc, dt = struct.unpack("<QQd", fh.read(24))
        data = np.frombuffer(fh.read(), dtype="<f8").reshape(nt, nc)
    return data.copy(), dt


def save_path(path: NoisePath, filename):
    _save_array(filename, _MAGIC["path"], path.increments, path.lattice.grid.dt)


def load_path(lat: Lattice, filename) -> NoisePath:
    data, dt = _load_array(filename, _MAGIC["path"])
    if data.shape != (lat.grid.nt, lat.ncoords) or abs(dt - lat.grid.dt) > 1e-15:
        raise ShapeError("stored path does not match the lattice")
    return NoisePath(lat, data)


def save_control(h: ControlH, filename):
    _save_array(filename, _MAGIC["control"], h.coeffs, h.lattice.grid.dt)


def load_control(lat: Lattice, filename) -> ControlH:
    data, dt = _load_array(filename, _MAGIC["control"])
    if data.shape != (lat.grid.nt, lat.ncoords) or abs(dt - lat.grid.dt) > 1e-15:
        raise ShapeError("stored control does not match the lattice")
    return ControlH(lat, data)


def to_csv(arr: np.ndarray, filename):
    with open(filename, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"k{j}" for j in range(arr.shape[1])])
        for row in arr:
            writer.writerow([format(v, ".17g") for v in row])
