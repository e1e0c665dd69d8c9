"""2D TMz finite-difference time-domain solver on a staggered Yee grid.

Ez lives at integer nodes (m, n), Hx at (m, n+1/2), Hy at (m+1/2, n);
arrays are indexed [x, y]. The physical domain is padded on every side by
``pml_cells`` cells of convolutional PML and the outermost node ring is a
perfect electric conductor. Node (m, n) sits at physical position
((m - pml_cells) * dx, (n - pml_cells) * dy), so domain coordinates start
at (0, 0).

Update scheme per leapfrog step (H first, then E, both explicit):

    Hx[m,n+1/2] -= dt/(mu0*dy) * (Ez[m,n+1] - Ez[m,n])
    Hy[m+1/2,n] += dt/(mu0*dx) * (Ez[m+1,n] - Ez[m,n])
    Ez[m,n]     += dt/(eps*dx) * (Hy[m+1/2,n] - Hy[m-1/2,n])
                 - dt/(eps*dy) * (Hx[m,n+1/2] - Hx[m,n-1/2])

with eps = eps0 * eps_zz at the Ez node. Only eps_zz enters the TMz
update; eps_xx and eps_yy never touch the fields.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .constants import C0, EPS0, ETA0, MU0

DEFAULT_COURANT = 1.0 / math.sqrt(2.0)
CELLS_PER_WAVELENGTH = 10

# CPML grading: cubic conductivity profile sized for 1e-5 design reflection,
# with a small linear alpha ramp for late-time stability.
_PML_ORDER = 3
_PML_R0 = 1e-5
_PML_ALPHA_MAX = 0.05


class SimulationDiverged(RuntimeError):
    """A field array stopped being finite during time stepping."""

    def __init__(self, step_index: int):
        super().__init__(f"non-finite field values detected at step {step_index}")
        self.step_index = step_index


@dataclass(frozen=True)
class GridSpec:
    """Uniform square-cell grid with PML padding and a stable time step."""

    nx: int
    ny: int
    dx: float
    dy: float
    dt: float
    courant: float
    pml_cells: int

    @property
    def n_nodes_x(self) -> int:
        return self.nx + 2 * self.pml_cells

    @property
    def n_nodes_y(self) -> int:
        return self.ny + 2 * self.pml_cells

    @property
    def shape_ez(self) -> tuple[int, int]:
        return (self.n_nodes_x, self.n_nodes_y)

    @property
    def shape_hx(self) -> tuple[int, int]:
        return (self.n_nodes_x, self.n_nodes_y - 1)

    @property
    def shape_hy(self) -> tuple[int, int]:
        return (self.n_nodes_x - 1, self.n_nodes_y)

    def x_index(self, x_m: float) -> int:
        return self.pml_cells + int(round(x_m / self.dx))

    def y_index(self, y_m: float) -> int:
        return self.pml_cells + int(round(y_m / self.dy))

    def x_coords(self) -> np.ndarray:
        return (np.arange(self.n_nodes_x) - self.pml_cells) * self.dx

    def y_coords(self) -> np.ndarray:
        return (np.arange(self.n_nodes_y) - self.pml_cells) * self.dy

    def in_interior(self, x_m: float, y_m: float) -> bool:
        """True if (x, y) maps to a node outside the PML padding."""
        ix = self.x_index(x_m) - self.pml_cells
        iy = self.y_index(y_m) - self.pml_cells
        return 0 <= ix < self.nx and 0 <= iy < self.ny


@dataclass
class FieldState:
    """Ez/Hx/Hy arrays plus the number of completed leapfrog steps."""

    ez: np.ndarray
    hx: np.ndarray
    hy: np.ndarray
    step_index: int = 0

    @classmethod
    def zeros(cls, grid: GridSpec) -> "FieldState":
        return cls(
            ez=np.zeros(grid.shape_ez),
            hx=np.zeros(grid.shape_hx),
            hy=np.zeros(grid.shape_hy),
            step_index=0,
        )

    def copy(self) -> "FieldState":
        return FieldState(self.ez.copy(), self.hx.copy(), self.hy.copy(), self.step_index)


@dataclass(frozen=True)
class SourceSpec:
    """Soft additive sinusoidal line source spanning a full Ez grid row.

    The injected value at time t is amplitude * w(t) * sin(2*pi*f*t) where
    w ramps linearly from 0 to 1 over ``ramp_periods`` source periods.
    """

    frequency_hz: float
    row_y: float
    amplitude: float = 1.0
    ramp_periods: float = 2.0

    def value(self, t: float) -> float:
        if self.frequency_hz <= 0:
            raise ValueError("frequency_hz must be positive")
        if self.ramp_periods < 0:
            raise ValueError("ramp_periods must be >= 0")
        ramp_t = self.ramp_periods / self.frequency_hz
        w = 1.0 if ramp_t == 0 else min(t / ramp_t, 1.0)
        return self.amplitude * w * math.sin(2.0 * math.pi * self.frequency_hz * t)


@dataclass
class ProbeRecord:
    """Decimated Ez/Hx/Hy time series at a single detector cell."""

    ez_series: np.ndarray
    hx_series: np.ndarray
    hy_series: np.ndarray
    sample_stride: int

    def __post_init__(self):
        if not (len(self.ez_series) == len(self.hx_series) == len(self.hy_series)):
            raise ValueError("probe series must have equal lengths")

    def __len__(self) -> int:
        return len(self.ez_series)


def make_grid(domain_size_m: float, frequency_hz: float,
              courant: float = DEFAULT_COURANT, pml_cells: int = 10) -> GridSpec:
    """Size a square grid at lambda/10 for the source frequency.

    dx = dy = (C0/frequency)/10, nx = ny = round(domain/dx), and
    dt = courant / (C0 * sqrt(1/dx^2 + 1/dy^2)).
    """
    if domain_size_m <= 0:
        raise ValueError("domain_size_m must be positive")
    if frequency_hz <= 0:
        raise ValueError("frequency_hz must be positive")
    if not 0 < courant <= 1:
        raise ValueError("courant must be in (0, 1]")
    if pml_cells < 1:
        raise ValueError("pml_cells must be >= 1")
    dx = (C0 / frequency_hz) / CELLS_PER_WAVELENGTH
    n = int(round(domain_size_m / dx))
    if n < 2:
        raise ValueError("domain too small for the mesh size")
    dt = courant / (C0 * math.sqrt(1.0 / dx**2 + 1.0 / dx**2))
    return GridSpec(nx=n, ny=n, dx=dx, dy=dx, dt=dt, courant=courant, pml_cells=pml_cells)


def _check_state_shapes(state: FieldState, grid: GridSpec) -> None:
    if state.ez.shape != grid.shape_ez:
        raise ValueError(f"ez shape {state.ez.shape} does not match grid {grid.shape_ez}")
    if state.hx.shape != grid.shape_hx:
        raise ValueError(f"hx shape {state.hx.shape} does not match grid {grid.shape_hx}")
    if state.hy.shape != grid.shape_hy:
        raise ValueError(f"hy shape {state.hy.shape} does not match grid {grid.shape_hy}")


def _eps_zz_array(materials, grid: GridSpec) -> np.ndarray:
    eps_zz = np.asarray(materials.eps_zz, dtype=np.float64)
    if eps_zz.shape != grid.shape_ez:
        raise ValueError(f"eps_zz shape {eps_zz.shape} does not match grid {grid.shape_ez}")
    return eps_zz


def step_fields(state: FieldState, materials, grid: GridSpec) -> FieldState:
    """One plain leapfrog step (H then E), without boundary absorption.

    Pure: returns a new FieldState. ``materials`` needs only an ``eps_zz``
    array shaped like Ez.
    """
    _check_state_shapes(state, grid)
    eps_zz = _eps_zz_array(materials, grid)
    ez = state.ez.copy()
    hx = state.hx.copy()
    hy = state.hy.copy()
    chy = grid.dt / (MU0 * grid.dy)
    chx = grid.dt / (MU0 * grid.dx)
    hx -= chy * (ez[:, 1:] - ez[:, :-1])
    hy += chx * (ez[1:, :] - ez[:-1, :])
    eps = EPS0 * eps_zz[1:-1, 1:-1]
    ez[1:-1, 1:-1] += (grid.dt / (eps * grid.dx)) * (hy[1:, 1:-1] - hy[:-1, 1:-1]) \
        - (grid.dt / (eps * grid.dy)) * (hx[1:-1, 1:] - hx[1:-1, :-1])
    return FieldState(ez, hx, hy, state.step_index + 1)


def apply_source(state: FieldState, src: SourceSpec, grid: GridSpec) -> FieldState:
    """Add the source term for the state's current step to the Ez row."""
    _check_state_shapes(state, grid)
    row = grid.y_index(src.row_y)
    if not grid.pml_cells <= row < grid.n_nodes_y - grid.pml_cells:
        raise ValueError(f"source row y={src.row_y} lies inside the PML padding")
    out = state.copy()
    out.ez[:, row] += src.value(state.step_index * grid.dt)
    return out


def _cpml_coeffs(depths: np.ndarray, thickness_m: float, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Recursive-convolution coefficients (b, a) for fractional PML depths."""
    sigma_max = -(_PML_ORDER + 1) * math.log(_PML_R0) / (2.0 * ETA0 * thickness_m)
    sigma = sigma_max * depths ** _PML_ORDER
    alpha = _PML_ALPHA_MAX * (1.0 - depths)
    b = np.exp(-(sigma + alpha) * dt / EPS0)
    a = np.where(sigma + alpha > 0.0, sigma * (b - 1.0) / np.maximum(sigma + alpha, 1e-300), 0.0)
    return b, a


class _Stepper:
    """In-place leapfrog stepper with precomputed coefficients and CPML.

    The interior update is numerically identical to :func:`step_fields`;
    the CPML recursion only touches nodes inside the padding strips.
    """

    def __init__(self, grid: GridSpec, materials):
        self.grid = grid
        eps = EPS0 * _eps_zz_array(materials, grid)
        dt = grid.dt
        self.chx = dt / (MU0 * grid.dx)
        self.chy = dt / (MU0 * grid.dy)
        self.cex = dt / (eps * grid.dx)
        self.cey = dt / (eps * grid.dy)
        self.cex_int = self.cex[1:-1, 1:-1]
        self.cey_int = self.cey[1:-1, 1:-1]

        p = grid.pml_cells
        self.p = p
        n, m = grid.shape_ez
        thickness = p * grid.dx

        # sigma at integer (E) and half-integer (H) node depths, one profile
        # per strip; b/a are 1D over the strip's depth axis.
        depth_e = (p - np.arange(1, p)) / p              # E nodes 1..p-1
        depth_h = (p - np.arange(p) - 0.5) / p           # H nodes 0..p-1
        self.be_lo, self.ae_lo = _cpml_coeffs(depth_e, thickness, dt)
        self.bh_lo, self.ah_lo = _cpml_coeffs(depth_h, thickness, dt)
        self.be_hi, self.ae_hi = self.be_lo[::-1].copy(), self.ae_lo[::-1].copy()
        self.bh_hi, self.ah_hi = self.bh_lo[::-1].copy(), self.ah_lo[::-1].copy()

        self.psi_hx_lo = np.zeros((n, p))
        self.psi_hx_hi = np.zeros((n, p))
        self.psi_hy_lo = np.zeros((p, m))
        self.psi_hy_hi = np.zeros((p, m))
        self.psi_ez_xlo = np.zeros((p - 1, m - 2))
        self.psi_ez_xhi = np.zeros((p - 1, m - 2))
        self.psi_ez_ylo = np.zeros((n - 2, p - 1))
        self.psi_ez_yhi = np.zeros((n - 2, p - 1))

        # Persistent scratch: the large temporaries exceed the allocator's
        # mmap threshold, so reallocating them every step dominates runtime.
        self._dez_y = np.empty((n, m - 1))
        self._dez_x = np.empty((n - 1, m))
        self._w1 = np.empty((n - 2, m - 2))
        self._w2 = np.empty((n - 2, m - 2))
        self._sy_lo = np.empty((n, p))
        self._sy_hi = np.empty((n, p))
        self._sx_lo = np.empty((p, m))
        self._sx_hi = np.empty((p, m))
        self._se_xlo = np.empty((p - 1, m - 2))
        self._se_xhi = np.empty((p - 1, m - 2))
        self._se_ylo = np.empty((n - 2, p - 1))
        self._se_yhi = np.empty((n - 2, p - 1))

    def step(self, ez: np.ndarray, hx: np.ndarray, hy: np.ndarray) -> None:
        p = self.p
        dez_y, dez_x = self._dez_y, self._dez_x
        np.subtract(ez[:, 1:], ez[:, :-1], out=dez_y)
        np.copyto(self._sy_lo, dez_y[:, :p])
        np.copyto(self._sy_hi, dez_y[:, -p:])
        np.multiply(dez_y, self.chy, out=dez_y)
        np.subtract(hx, dez_y, out=hx)
        np.subtract(ez[1:, :], ez[:-1, :], out=dez_x)
        np.copyto(self._sx_lo, dez_x[:p, :])
        np.copyto(self._sx_hi, dez_x[-p:, :])
        np.multiply(dez_x, self.chx, out=dez_x)
        np.add(hy, dez_x, out=hy)

        self.psi_hx_lo[:] = self.bh_lo[None, :] * self.psi_hx_lo + self.ah_lo[None, :] * self._sy_lo
        hx[:, :p] -= self.chy * self.psi_hx_lo
        self.psi_hx_hi[:] = self.bh_hi[None, :] * self.psi_hx_hi + self.ah_hi[None, :] * self._sy_hi
        hx[:, -p:] -= self.chy * self.psi_hx_hi
        self.psi_hy_lo[:] = self.bh_lo[:, None] * self.psi_hy_lo + self.ah_lo[:, None] * self._sx_lo
        hy[:p, :] += self.chx * self.psi_hy_lo
        self.psi_hy_hi[:] = self.bh_hi[:, None] * self.psi_hy_hi + self.ah_hi[:, None] * self._sx_hi
        hy[-p:, :] += self.chx * self.psi_hy_hi

        w1, w2 = self._w1, self._w2
        np.subtract(hy[1:, 1:-1], hy[:-1, 1:-1], out=w1)
        np.subtract(hx[1:-1, 1:], hx[1:-1, :-1], out=w2)
        if p > 1:
            np.copyto(self._se_xlo, w1[:p - 1, :])
            np.copyto(self._se_xhi, w1[-(p - 1):, :])
            np.copyto(self._se_ylo, w2[:, :p - 1])
            np.copyto(self._se_yhi, w2[:, -(p - 1):])
        np.multiply(w1, self.cex_int, out=w1)
        np.multiply(w2, self.cey_int, out=w2)
        np.subtract(w1, w2, out=w1)
        ez_int = ez[1:-1, 1:-1]
        np.add(ez_int, w1, out=ez_int)

        if p > 1:
            self.psi_ez_xlo[:] = self.be_lo[:, None] * self.psi_ez_xlo + self.ae_lo[:, None] * self._se_xlo
            ez[1:p, 1:-1] += self.cex[1:p, 1:-1] * self.psi_ez_xlo
            self.psi_ez_xhi[:] = self.be_hi[:, None] * self.psi_ez_xhi + self.ae_hi[:, None] * self._se_xhi
            ez[-p:-1, 1:-1] += self.cex[-p:-1, 1:-1] * self.psi_ez_xhi
            self.psi_ez_ylo[:] = self.be_lo[None, :] * self.psi_ez_ylo + self.ae_lo[None, :] * self._se_ylo
            ez[1:-1, 1:p] -= self.cey[1:-1, 1:p] * self.psi_ez_ylo
            self.psi_ez_yhi[:] = self.be_hi[None, :] * self.psi_ez_yhi + self.ae_hi[None, :] * self._se_yhi
            ez[1:-1, -p:-1] -= self.cey[1:-1, -p:-1] * self.psi_ez_yhi


def _resolve_materials(scene, grid: GridSpec):
    if hasattr(scene, "eps_zz"):
        return scene
    from .scene import build_material_map
    return build_material_map(scene, grid)


def _fields_finite(ez, hx, hy) -> bool:
    # Sum-based screen: any NaN/Inf propagates into the sums; a sum that
    # overflows to Inf only happens for already-diverged field magnitudes.
    return bool(np.isfinite(ez.sum() + hx.sum() + hy.sum()))


def run_simulation(scene, grid: GridSpec, src: SourceSpec, detector_xy: tuple[float, float],
                   total_steps: int, sample_stride: int,
                   initial_state: FieldState | None = None) -> ProbeRecord:
    """Leapfrog loop with PML absorption, recording a decimated probe.

    ``scene`` may be a Scene or any object exposing an ``eps_zz`` array.
    One sample is recorded after every ``sample_stride`` completed steps,
    so each series has length total_steps // sample_stride. Raises
    :class:`SimulationDiverged` if a field stops being finite.
    """
    if sample_stride < 1:
        raise ValueError("sample_stride must be >= 1")
    if total_steps < sample_stride:
        raise ValueError("total_steps must be >= sample_stride")
    if not grid.in_interior(*detector_xy):
        raise ValueError(f"detector {detector_xy} lies outside the non-PML interior")
    row = grid.y_index(src.row_y)
    if not grid.pml_cells <= row < grid.n_nodes_y - grid.pml_cells:
        raise ValueError(f"source row y={src.row_y} lies inside the PML padding")

    materials = _resolve_materials(scene, grid)
    stepper = _Stepper(grid, materials)
    if initial_state is None:
        state = FieldState.zeros(grid)
    else:
        _check_state_shapes(initial_state, grid)
        state = initial_state.copy()
    ez, hx, hy = state.ez, state.hx, state.hy

    di = grid.x_index(detector_xy[0])
    dj = grid.y_index(detector_xy[1])
    n_rec = total_steps // sample_stride
    rec_ez = np.empty(n_rec)
    rec_hx = np.empty(n_rec)
    rec_hy = np.empty(n_rec)
    k = 0
    q0 = state.step_index
    # overflow inside an unstable run is expected right up until the
    # divergence check fires; do not warn about it
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(1, total_steps + 1):
            q = q0 + step - 1
            ez[:, row] += src.value(q * grid.dt)
            stepper.step(ez, hx, hy)
            if not _fields_finite(ez, hx, hy):
                raise SimulationDiverged(q + 1)
            if step % sample_stride == 0:
                rec_ez[k] = ez[di, dj]
                rec_hx[k] = hx[di, dj]
                rec_hy[k] = hy[di, dj]
                k += 1
    return ProbeRecord(rec_ez, rec_hx, rec_hy, sample_stride)


def simulate_fields(scene, grid: GridSpec, src: SourceSpec, total_steps: int,
                    initial_state: FieldState | None = None) -> FieldState:
    """Run the PML-absorbed loop and return the final field state."""
    if total_steps < 0:
        raise ValueError("total_steps must be >= 0")
    row = grid.y_index(src.row_y)
    if not grid.pml_cells <= row < grid.n_nodes_y - grid.pml_cells:
        raise ValueError(f"source row y={src.row_y} lies inside the PML padding")
    materials = _resolve_materials(scene, grid)
    stepper = _Stepper(grid, materials)
    if initial_state is None:
        state = FieldState.zeros(grid)
    else:
        _check_state_shapes(initial_state, grid)
        state = initial_state.copy()
    ez, hx, hy = state.ez, state.hx, state.hy
    q0 = state.step_index
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(1, total_steps + 1):
            q = q0 + step - 1
            ez[:, row] += src.value(q * grid.dt)
            stepper.step(ez, hx, hy)
            if not _fields_finite(ez, hx, hy):
                raise SimulationDiverged(q + 1)
    state.step_index = q0 + total_steps
    return state


def total_field_energy(state: FieldState, materials, grid: GridSpec) -> float:
    """Field energy per unit z-length over the non-PML interior, in J/m."""
    _check_state_shapes(state, grid)
    eps_zz = _eps_zz_array(materials, grid)
    p = grid.pml_cells
    sl_x = slice(p, p + grid.nx)
    sl_y = slice(p, p + grid.ny)
    ez = state.ez[sl_x, sl_y]
    eps = EPS0 * eps_zz[sl_x, sl_y]
    e_energy = np.sum(eps * ez * ez)
    hx = state.hx[sl_x, p:p + grid.ny - 1]
    hy = state.hy[p:p + grid.nx - 1, sl_y]
    h_energy = MU0 * (np.sum(hx * hx) + np.sum(hy * hy))
    return 0.5 * (e_energy + h_energy) * grid.dx * grid.dy


def write_field_csv(field: np.ndarray, path) -> None:
    """Write a field array indexed [x, y] as CSV, one line per y-row."""
    np.savetxt(path, np.asarray(field).T, fmt="%.17g", delimiter=",")
