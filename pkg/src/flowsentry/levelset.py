"""Level height search, contour extraction, and typical-region geometry.

The typical region is the superlevel set of the fitted density surface at the
height z* whose enclosed probability mass is 1 - alpha. Its boundary is
extracted with marching squares on the evaluation grid, small components are
dropped, and membership / distance / exit-side queries run against the
retained polygons. Distances are measured in axis-scaled coordinates (each
axis divided by its training interquartile range) so severities are unitless
and comparable across links.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from . import kde
from .kde import DensityGrid, DensityModel

DENSIFY_DIAGONAL_FRACTION = 1.0 / 500.0


class TruncatedGridError(ValueError):
    """The grid does not hold enough mass to enclose 1 - alpha."""


class EmptyContourError(ValueError):
    """No grid cell crosses the requested level."""


@dataclass(frozen=True)
class RegionConfig:
    alpha: float = 0.05
    min_component_area_fraction: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha {self.alpha} outside (0, 1)")
        if not 0.0 <= self.min_component_area_fraction < 1.0:
            raise ValueError(f"min_component_area_fraction {self.min_component_area_fraction} outside [0, 1)")


def mass_above(grid: DensityGrid, z: float) -> float:
    """Trapezoidal integral of the grid restricted to cells at or above z."""
    if z < 0:
        raise ValueError(f"level {z} must be nonnegative")
    masked = np.where(grid.values >= z, grid.values, 0.0)
    inner = np.trapezoid(masked, grid.f_centers, axis=1)
    return float(np.trapezoid(inner, grid.rho_centers))


def find_level(grid: DensityGrid, alpha: float, *, tol: float = 1e-4, max_iter: int = 200) -> float:
    """Bisection root of 1 - alpha - mass_above(z) on [0, max grid value].

    mass_above is nonincreasing in z, so the bracket always holds a sign
    change once the grid carries at least 1 - alpha of mass.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha {alpha} outside (0, 1)")
    total = mass_above(grid, 0.0)
    target = 1.0 - alpha
    if total < target:
        raise TruncatedGridError(
            f"grid mass {total:.4f} is below 1 - alpha = {target:.4f}; widen the grid bounds"
        )
    lo, hi = 0.0, float(grid.values.max())
    z = 0.0
    for _ in range(max_iter):
        z = 0.5 * (lo + hi)
        gap = target - mass_above(grid, z)
        if abs(gap) <= tol:
            return z
        if gap < 0.0:  # still too much mass above: raise the cut
            lo = z
        else:
            hi = z
        if hi - lo <= np.finfo(float).eps * max(hi, 1.0):
            break
    return z


def extract_contour(grid: DensityGrid, z_star: float) -> list[np.ndarray]:
    """Marching-squares isolines of the grid at z_star, as closed polylines.

    Nodes of the marching lattice are the grid cell centres. Crossing points
    are linearly interpolated along lattice edges; saddle cells are resolved
    by the cell-centre value (centre >= z* joins the high regions). Each
    polyline is closed: its first and last vertices coincide.
    """
    values = grid.values
    if not 0.0 < z_star <= float(values.max()):
        raise EmptyContourError(f"level {z_star} outside (0, max grid value]")
    xs, ys = grid.rho_centers, grid.f_centers
    inside = values >= z_star
    if inside.all() or not inside.any():
        raise EmptyContourError(f"no cell crosses level {z_star}")

    # cells whose four corners disagree are the only contour carriers
    corner_sum = (
        inside[:-1, :-1].astype(np.int8)
        + inside[1:, :-1]
        + inside[:-1, 1:]
        + inside[1:, 1:]
    )
    cells = np.argwhere((corner_sum > 0) & (corner_sum < 4))

    def interp(i0, j0, i1, j1):
        a = values[i0, j0]
        b = values[i1, j1]
        t = (z_star - a) / (b - a)
        return (
            xs[i0] + t * (xs[i1] - xs[i0]),
            ys[j0] + t * (ys[j1] - ys[j0]),
        )

    # edge keys: ("r", i, j) spans nodes (i,j)-(i+1,j); ("f", i, j) spans (i,j)-(i,j+1)
    segments: list[tuple[tuple, tuple]] = []
    points: dict[tuple, tuple[float, float]] = {}

    def edge_point(kind, i, j):
        key = (kind, i, j)
        if key not in points:
            if kind == "r":
                points[key] = interp(i, j, i + 1, j)
            else:
                points[key] = interp(i, j, i, j + 1)
        return key

    for i, j in cells:
        a = inside[i, j]  # (i, j)
        b = inside[i + 1, j]  # (i+1, j)
        c = inside[i + 1, j + 1]  # (i+1, j+1)
        d = inside[i, j + 1]  # (i, j+1)
        ab = ("r", i, j) if a != b else None
        bc = ("f", i + 1, j) if b != c else None
        cd = ("r", i, j + 1) if d != c else None
        da = ("f", i, j) if a != d else None
        crossed = [e for e in (ab, bc, cd, da) if e is not None]
        if len(crossed) == 2:
            segments.append((edge_point(*crossed[0]), edge_point(*crossed[1])))
        elif len(crossed) == 4:
            center_high = 0.25 * (values[i, j] + values[i + 1, j] + values[i + 1, j + 1] + values[i, j + 1]) >= z_star
            # diagonal corners share state; cut off the two isolated corners
            isolate_b_d = center_high == bool(a)
            if isolate_b_d:
                segments.append((edge_point(*ab), edge_point(*bc)))
                segments.append((edge_point(*cd), edge_point(*da)))
            else:
                segments.append((edge_point(*ab), edge_point(*da)))
                segments.append((edge_point(*bc), edge_point(*cd)))

    if not segments:
        raise EmptyContourError(f"no cell crosses level {z_star}")
    return _stitch_loops(segments, points)


def _stitch_loops(segments, points) -> list[np.ndarray]:
    """Chain segments that share lattice-edge keys into closed polylines."""
    adjacency: dict[tuple, list[int]] = {}
    for idx, (p, q) in enumerate(segments):
        adjacency.setdefault(p, []).append(idx)
        adjacency.setdefault(q, []).append(idx)
    used = [False] * len(segments)
    loops = []
    for start in range(len(segments)):
        if used[start]:
            continue
        used[start] = True
        first, cursor = segments[start]
        chain = [first, cursor]
        while True:
            candidates = [k for k in adjacency[cursor] if not used[k]]
            if not candidates:
                break
            nxt = candidates[0]
            used[nxt] = True
            p, q = segments[nxt]
            cursor = q if p == cursor else p
            chain.append(cursor)
        coords = np.array([points[k] for k in chain])
        if chain[0] != chain[-1]:
            coords = np.vstack([coords, coords[:1]])  # open chain (grid border); close it
        loops.append(coords)
    return loops


def polygon_area(polygon: np.ndarray) -> float:
    """Absolute shoelace area of a closed polyline."""
    x = polygon[:, 0]
    y = polygon[:, 1]
    return 0.5 * abs(float(np.dot(x[:-1], y[1:]) - np.dot(x[1:], y[:-1])))


def filter_components(polylines: list[np.ndarray], min_fraction: float) -> list[np.ndarray]:
    """Drop closed components smaller than min_fraction of the total area.

    Never drops everything: if all components fall under the cut, the largest
    one is kept.
    """
    if not polylines:
        raise ValueError("no contour components to filter")
    areas = np.array([polygon_area(p) for p in polylines])
    cut = min_fraction * areas.sum()
    keep = [p for p, a in zip(polylines, areas) if a >= cut]
    if not keep:
        keep = [polylines[int(np.argmax(areas))]]
    return keep


@dataclass(frozen=True)
class TypicalRegion:
    """Retained boundary polygons plus everything needed for queries.

    ``scale_rho`` / ``scale_f`` are the training interquartile ranges used to
    make distances unitless. ``max_training_distance`` stays None until the
    severity normaliser has been calibrated against training data.
    """

    z_star: float
    alpha: float
    polygons: tuple[np.ndarray, ...]
    scale_rho: float
    scale_f: float
    max_training_distance: float | None = None
    boundary_points: np.ndarray = field(init=False, repr=False, compare=False)
    _scaled_boundary: np.ndarray = field(init=False, repr=False, compare=False)
    _tree: cKDTree = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.polygons:
            raise ValueError("region needs at least one polygon")
        if self.scale_rho <= 0 or self.scale_f <= 0:
            raise ValueError("axis scales must be positive")
        if self.max_training_distance is not None and self.max_training_distance <= 0:
            raise ValueError("max_training_distance must be positive once calibrated")
        polys = tuple(np.asarray(p, dtype=float) for p in self.polygons)
        for p in polys:
            if p.ndim != 2 or p.shape[1] != 2 or p.shape[0] < 4:
                raise ValueError("polygons must be closed (N>=4, 2 columns)")
            if not np.array_equal(p[0], p[-1]):
                raise ValueError("polygons must be explicitly closed (first row == last row)")
        object.__setattr__(self, "polygons", polys)
        raw = _densify(polys, self.scale_rho, self.scale_f)
        scaled = raw / np.array([self.scale_rho, self.scale_f])
        object.__setattr__(self, "boundary_points", raw)
        object.__setattr__(self, "_scaled_boundary", scaled)
        object.__setattr__(self, "_tree", cKDTree(scaled))

    def to_json(self) -> str:
        payload = {
            "alpha": self.alpha,
            "z_star": self.z_star,
            "scale_rho": self.scale_rho,
            "scale_f": self.scale_f,
            "max_training_distance": self.max_training_distance,
            "polygons": [p.tolist() for p in self.polygons],
        }
        return json.dumps(payload)

    @classmethod
    def from_json(cls, text: str) -> "TypicalRegion":
        payload = json.loads(text)
        return cls(
            z_star=payload["z_star"],
            alpha=payload["alpha"],
            polygons=tuple(np.array(p, dtype=float) for p in payload["polygons"]),
            scale_rho=payload["scale_rho"],
            scale_f=payload["scale_f"],
            max_training_distance=payload["max_training_distance"],
        )


def _densify(polygons, scale_rho, scale_f) -> np.ndarray:
    """Boundary points at spacing <= 1/500 of the scaled bounding-box diagonal."""
    scale = np.array([scale_rho, scale_f])
    scaled_polys = [p / scale for p in polygons]
    lo = np.min([p.min(axis=0) for p in scaled_polys], axis=0)
    hi = np.max([p.max(axis=0) for p in scaled_polys], axis=0)
    diagonal = float(np.hypot(*(hi - lo)))
    spacing = max(diagonal * DENSIFY_DIAGONAL_FRACTION, 1e-12)
    out = []
    for poly, scaled in zip(polygons, scaled_polys):
        for k in range(len(poly) - 1):
            seg_len = float(np.hypot(*(scaled[k + 1] - scaled[k])))
            pieces = max(1, int(np.ceil(seg_len / spacing)))
            t = np.arange(pieces) / pieces
            out.append(poly[k] + t[:, None] * (poly[k + 1] - poly[k]))
    return np.vstack(out)


def densification_spacing(region: TypicalRegion) -> float:
    """The scaled-coordinate spacing bound used when the boundary was densified."""
    pts = region._scaled_boundary
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    return float(np.hypot(*(hi - lo))) * DENSIFY_DIAGONAL_FRACTION


def contains(region: TypicalRegion, point) -> bool:
    """Ray-casting membership test; the boundary counts as inside."""
    return bool(contains_many(region, np.asarray(point, dtype=float).reshape(1, 2))[0])


def contains_many(region: TypicalRegion, points) -> np.ndarray:
    """Vectorised membership for many points (inside any retained polygon)."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points must have shape (M, 2)")
    result = np.zeros(pts.shape[0], dtype=bool)
    step = max(1, 2**21 // max(sum(p.shape[0] for p in region.polygons), 1))
    for lo in range(0, pts.shape[0], step):
        chunk = pts[lo : lo + step]
        px = chunk[:, 0][:, None]
        py = chunk[:, 1][:, None]
        inside = np.zeros(chunk.shape[0], dtype=bool)
        on_edge = np.zeros(chunk.shape[0], dtype=bool)
        for poly in region.polygons:
            ax, ay = poly[:-1, 0][None, :], poly[:-1, 1][None, :]
            bx, by = poly[1:, 0][None, :], poly[1:, 1][None, :]
            dx = bx - ax
            dy = by - ay
            cross = dx * (py - ay) - (px - ax) * dy
            on_seg = (
                (cross == 0.0)
                & (px >= np.minimum(ax, bx))
                & (px <= np.maximum(ax, bx))
                & (py >= np.minimum(ay, by))
                & (py <= np.maximum(ay, by))
            )
            on_edge |= on_seg.any(axis=1)
            straddles = (ay > py) != (by > py)
            with np.errstate(divide="ignore", invalid="ignore"):
                x_at_y = ax + (py - ay) * dx / dy
            hits = straddles & (px < x_at_y)
            inside |= (hits.sum(axis=1) % 2).astype(bool)
        result[lo : lo + step] = inside | on_edge
    return result


def distance_to_boundary(region: TypicalRegion, point) -> float:
    """Scaled Euclidean distance to the nearest densified boundary point."""
    p = np.asarray(point, dtype=float) / np.array([region.scale_rho, region.scale_f])
    dist, _ = region._tree.query(p)
    return float(dist)


def distances_to_boundary(region: TypicalRegion, points) -> np.ndarray:
    pts = np.asarray(points, dtype=float) / np.array([region.scale_rho, region.scale_f])
    dist, _ = region._tree.query(pts)
    return np.asarray(dist, dtype=float)


def exit_side(region: TypicalRegion, point) -> str:
    """Which side of the boundary an exterior point left through.

    "left" (density at or below, flow at or above the nearest boundary point)
    marks atypically good conditions and is never flagged downstream. The
    comparisons carry a one-spacing tolerance because the densified boundary
    only resolves positions to that accuracy.
    """
    p = np.asarray(point, dtype=float)
    if contains(region, p):
        raise ValueError("exit_side is defined only for exterior points")
    return str(exit_sides(region, p.reshape(1, 2))[0])


def exit_sides(region: TypicalRegion, points) -> np.ndarray:
    """Vectorised exit_side; callers must pass exterior points only."""
    pts = np.asarray(points, dtype=float)
    scaled = pts / np.array([region.scale_rho, region.scale_f])
    _, idx = region._tree.query(scaled)
    near = region.boundary_points[np.asarray(idx, dtype=int)]
    spacing = densification_spacing(region)
    eps_rho = spacing * region.scale_rho
    eps_f = spacing * region.scale_f
    left = (pts[:, 0] <= near[:, 0] + eps_rho) & (pts[:, 1] >= near[:, 1] - eps_f)
    return np.where(left, "left", "right")


def fit_typical_region(
    samples,
    config: RegionConfig = RegionConfig(),
    *,
    bandwidth_method: str = "normal_reference",
    resolution: tuple[int, int] = (512, 512),
    model: DensityModel | None = None,
    grid: DensityGrid | None = None,
) -> TypicalRegion:
    """Full pipeline: KDE fit, grid, level search, contour, component filter."""
    pts = np.asarray(samples, dtype=float)
    if model is None:
        model = kde.fit(pts, kde.select_bandwidth(pts, bandwidth_method), min_samples=50)
    if grid is None:
        grid = kde.evaluate_grid(model, resolution=resolution)
    z_star = find_level(grid, config.alpha)
    polygons = filter_components(extract_contour(grid, z_star), config.min_component_area_fraction)
    q25, q75 = np.percentile(pts, [25, 75], axis=0)
    iqr = q75 - q25
    if np.any(iqr <= 0):
        raise ValueError("training data has zero interquartile range on an axis")
    return TypicalRegion(
        z_star=z_star,
        alpha=config.alpha,
        polygons=tuple(polygons),
        scale_rho=float(iqr[0]),
        scale_f=float(iqr[1]),
    )


def with_normalizer(region: TypicalRegion, max_training_distance: float) -> TypicalRegion:
    return replace(region, max_training_distance=max_training_distance)


def region_overlap(region_a: TypicalRegion, region_b: TypicalRegion, resolution: int = 256) -> tuple[float, float]:
    """(symmetric-difference area, union area) via rasterised membership."""
    los = []
    his = []
    for region in (region_a, region_b):
        pts = np.vstack(region.polygons)
        los.append(pts.min(axis=0))
        his.append(pts.max(axis=0))
    lo = np.minimum(*los)
    hi = np.maximum(*his)
    dx = (hi[0] - lo[0]) / resolution
    dy = (hi[1] - lo[1]) / resolution
    x = lo[0] + (np.arange(resolution) + 0.5) * dx
    y = lo[1] + (np.arange(resolution) + 0.5) * dy
    cells = np.stack(np.meshgrid(x, y, indexing="ij"), axis=-1).reshape(-1, 2)
    in_a = contains_many(region_a, cells)
    in_b = contains_many(region_b, cells)
    cell_area = dx * dy
    return float((in_a ^ in_b).sum() * cell_area), float((in_a | in_b).sum() * cell_area)
