"""Wall scenarios, square dielectric targets, and material-map assembly.

Scene geometry (domain coordinates, meters): a 2 m x 2 m region with the
wall band spanning the full width at y in [1.10, 1.20) (air-gap variant
[1.05, 1.20)), the source line above it at y = 1.60, the detector cell at
(1.00, 1.50), and targets below the wall. Target positions are specified
in a separate centimeter frame (x in [5, 85], y in [40, 100]) that maps
into domain coordinates through a fixed frame offset of (0.50, 0) m.

All painted regions are half-open boxes [lo, hi) sampled at Ez nodes by
cell-center containment; touching regions never contest a node.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .em_core import GridSpec

SCENARIOS = (
    "homogeneous",
    "airgap",
    "inhomogeneous",
    "anisotropic",
    "inhomogeneous_anisotropic",
)

WALL_BAND = (1.10, 1.20)
AIRGAP_WALL_BAND = (1.05, 1.20)
SOURCE_Y = 1.60
DETECTOR_XY = (1.00, 1.50)
FRAME_OFFSET = (0.50, 0.0)
DOMAIN_SIZE = 2.0

HOMOGENEOUS_EPS = 6.0
INHOMOGENEOUS_EPS_ZZ = (3.0, 6.0, 4.0, 5.0, 6.0, 3.0, 6.0, 3.0, 5.0, 2.0)
ANISOTROPIC_EPS = (6.0, 4.0, 2.0)
INHOM_ANISO_LAYERS = (
    (6.0, 3.0, 2.0),
    (5.0, 5.0, 2.0),
    (6.0, 4.0, 2.0),
    (4.0, 6.0, 2.0),
    (3.0, 4.0, 2.0),
    (2.0, 3.0, 2.0),
    (5.0, 2.0, 2.0),
    (2.0, 4.0, 2.0),
    (4.0, 3.0, 2.0),
    (3.0, 5.0, 2.0),
)

TARGET_EPS_R = 80.0
TARGET_SIZES_M = (0.10, 0.20, 0.30)

_TOL = 1e-9


class InvalidSceneError(ValueError):
    """Scene geometry violates a placement constraint."""


@dataclass(frozen=True)
class WallSpec:
    """Layered wall slab; layer 1 sits at the low-y edge of the band."""

    scenario: str
    thickness: float
    layer_eps: tuple[tuple[float, float, float], ...]
    wall_band: tuple[float, float]


@dataclass(frozen=True)
class TargetSpec:
    """Square dielectric target; center is in paper-frame centimeters."""

    center_cm: tuple[float, float]
    size: float = 0.10
    eps_r: float = TARGET_EPS_R


@dataclass(frozen=True)
class Scene:
    wall: WallSpec | None
    targets: tuple[TargetSpec, ...] = ()
    frame_offset: tuple[float, float] = FRAME_OFFSET


@dataclass
class MaterialMap:
    """Permittivity tensor diagonal sampled at every Ez node; mu=1, sigma=0."""

    eps_xx: np.ndarray
    eps_yy: np.ndarray
    eps_zz: np.ndarray
    mu: float = 1.0
    sigma: float = 0.0


def wall_for_scenario(scenario: str, homogeneous_eps: float = HOMOGENEOUS_EPS,
                      wall_band: tuple[float, float] | None = None) -> WallSpec:
    if scenario == "homogeneous":
        e = homogeneous_eps
        layers = ((e, e, e),)
        band = WALL_BAND if wall_band is None else wall_band
        return WallSpec(scenario, 0.10, layers, band)
    if scenario == "airgap":
        e = homogeneous_eps
        layers = ((e, e, e), (1.0, 1.0, 1.0), (e, e, e))
        band = AIRGAP_WALL_BAND if wall_band is None else wall_band
        return WallSpec(scenario, 0.15, layers, band)
    if scenario == "inhomogeneous":
        layers = tuple((e, e, e) for e in INHOMOGENEOUS_EPS_ZZ)
        band = WALL_BAND if wall_band is None else wall_band
        return WallSpec(scenario, 0.10, layers, band)
    if scenario == "anisotropic":
        band = WALL_BAND if wall_band is None else wall_band
        return WallSpec(scenario, 0.10, (ANISOTROPIC_EPS,), band)
    if scenario == "inhomogeneous_anisotropic":
        band = WALL_BAND if wall_band is None else wall_band
        return WallSpec(scenario, 0.10, INHOM_ANISO_LAYERS, band)
    raise ValueError(f"unknown wall scenario {scenario!r} (expected one of {SCENARIOS})")


def paper_frame_to_domain(center_cm: tuple[float, float], frame_offset: tuple[float, float],
                          size_m: float = 0.0, domain_m: float = DOMAIN_SIZE) -> tuple[float, float]:
    """Map a paper-frame center (cm) into domain coordinates (m).

    Raises InvalidSceneError if the half-open square of edge ``size_m``
    around the mapped center exits [0, domain_m) in either axis.
    """
    x = frame_offset[0] + center_cm[0] / 100.0
    y = frame_offset[1] + center_cm[1] / 100.0
    half = size_m / 2.0
    for c in (x, y):
        if c - half < -_TOL or c + half > domain_m + _TOL:
            raise InvalidSceneError(
                f"target square at ({x:.3f}, {y:.3f}) m with size {size_m} m "
                f"exits the [0, {domain_m}) m domain"
            )
    return (x, y)


def _intervals_overlap(lo1, hi1, lo2, hi2) -> bool:
    # Open-interval overlap: touching boxes do not intersect.
    return lo1 < hi2 - _TOL and lo2 < hi1 - _TOL


def _target_box(target: TargetSpec, frame_offset, domain_m) -> tuple[float, float, float, float]:
    x, y = paper_frame_to_domain(target.center_cm, frame_offset, target.size, domain_m)
    h = target.size / 2.0
    return (x - h, x + h, y - h, y + h)


def target_intersects_wall(target: TargetSpec, wall: WallSpec | None,
                           frame_offset=FRAME_OFFSET, domain_m: float = DOMAIN_SIZE) -> bool:
    if wall is None:
        return False
    _, _, ylo, yhi = _target_box(target, frame_offset, domain_m)
    return _intervals_overlap(ylo, yhi, wall.wall_band[0], wall.wall_band[1])


def valid_target_sizes(center_cm, wall: WallSpec | None, sizes=TARGET_SIZES_M,
                       frame_offset=FRAME_OFFSET, domain_m: float = DOMAIN_SIZE) -> tuple[float, ...]:
    """Subset of ``sizes`` whose square fits the domain and avoids the wall."""
    out = []
    for s in sizes:
        t = TargetSpec(tuple(center_cm), s)
        try:
            if not target_intersects_wall(t, wall, frame_offset, domain_m):
                out.append(s)
        except InvalidSceneError:
            continue
    return tuple(out)


def _half_open_mask(coords: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return (coords >= lo - _TOL) & (coords < hi - _TOL)


def build_material_map(scene: Scene, grid: GridSpec) -> MaterialMap:
    """Paint background, wall layers, then targets onto the Ez-node grid.

    The wall spans the full grid width including the PML padding so the
    slab continues seamlessly into the absorber. Pure and deterministic.
    """
    if len(scene.targets) > 2:
        raise InvalidSceneError("at most two targets are supported")
    n, m = grid.shape_ez
    eps_xx = np.ones((n, m))
    eps_yy = np.ones((n, m))
    eps_zz = np.ones((n, m))
    x = grid.x_coords()
    y = grid.y_coords()
    domain_m = grid.nx * grid.dx

    wall = scene.wall
    if wall is not None:
        y0, y1 = wall.wall_band
        h = wall.thickness / len(wall.layer_eps)
        for k, (exx, eyy, ezz) in enumerate(wall.layer_eps):
            mask = _half_open_mask(y, y0 + k * h, y0 + (k + 1) * h)
            eps_xx[:, mask] = exx
            eps_yy[:, mask] = eyy
            eps_zz[:, mask] = ezz

    boxes = []
    for target in scene.targets:
        if target.eps_r < 1:
            raise InvalidSceneError("target eps_r must be >= 1")
        box = _target_box(target, scene.frame_offset, domain_m)
        if target_intersects_wall(target, wall, scene.frame_offset, domain_m):
            raise InvalidSceneError(
                f"target at {target.center_cm} cm (size {target.size} m) intersects the wall band"
            )
        for other in boxes:
            if _intervals_overlap(box[0], box[1], other[0], other[1]) and \
                    _intervals_overlap(box[2], box[3], other[2], other[3]):
                raise InvalidSceneError("targets overlap")
        boxes.append(box)
        xmask = _half_open_mask(x, box[0], box[1])
        ymask = _half_open_mask(y, box[2], box[3])
        region = np.ix_(xmask.nonzero()[0], ymask.nonzero()[0])
        eps_xx[region] = target.eps_r
        eps_yy[region] = target.eps_r
        eps_zz[region] = target.eps_r

    return MaterialMap(eps_xx=eps_xx, eps_yy=eps_yy, eps_zz=eps_zz)


def enumerate_single_positions(x_range_cm, y_range_cm, step_cm) -> list[tuple[float, float]]:
    """Centers on the inclusive grid, x-major then y ascending."""
    if step_cm <= 0:
        raise ValueError("step_cm must be positive")
    xs = _inclusive_range(*x_range_cm, step_cm)
    ys = _inclusive_range(*y_range_cm, step_cm)
    return [(x, y) for x in xs for y in ys]


def _inclusive_range(lo, hi, step) -> list[float]:
    if hi < lo:
        return []
    count = int(np.floor((hi - lo) / step + 1e-9)) + 1
    return [lo + k * step for k in range(count)]


def enumerate_pairs(positions, count: int, seed: int,
                    min_separation_cm: float = 30.0) -> list[tuple[tuple[float, float], tuple[float, float]]]:
    """Seeded uniform sample of admissible unordered position pairs.

    A pair is admissible when the Chebyshev distance between centers is at
    least ``min_separation_cm`` (squares at the maximum target size touch
    but never overlap). Each pair is stored in canonical order (ascending
    x, then y). Raises ValueError if ``count`` exceeds capacity.
    """
    admissible = []
    for i in range(len(positions)):
        for j in range(i + 1, len(positions)):
            a, b = positions[i], positions[j]
            if max(abs(a[0] - b[0]), abs(a[1] - b[1])) >= min_separation_cm - _TOL:
                admissible.append(tuple(sorted((tuple(a), tuple(b)))))
    if count > len(admissible):
        raise ValueError(
            f"requested {count} pairs but only {len(admissible)} admissible pairs exist"
        )
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(admissible), size=count, replace=False)
    return [admissible[k] for k in idx]
