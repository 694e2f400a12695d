"""Synthetic top-down depth sensing and the observation model.

Two pipelines share the same pixel grid:

* the "real" one (``render_heightmap`` -> ``segment`` -> ``extract_bboxes``)
  that only sees heights, and
* ``predict_observation``, which knows object identities and is used as the
  observation model inside the planner and the particle filter.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.sparse import coo_matrix
from scipy.spatial import ConvexHull, QhullError
from scipy.sparse.csgraph import connected_components

from .world import ClutterState, ObjectState, canonical_pose, convex_hull

log = logging.getLogger(__name__)

N_THETA_BINS = 12


class DegenerateRegion(ValueError):
    pass


@dataclass(frozen=True)
class SensingParams:
    resolution: float = 2.0
    grid: float = 10.0
    h_tol: float = 3.0
    v_min: float = 0.05
    min_region_pixels: int = 4


@dataclass
class HeightMap:
    resolution: float
    cells: np.ndarray  # (rows, cols) = (y, x) top heights in mm
    workspace: Tuple[float, float]

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    def pixel_centers(self, rows: np.ndarray, cols: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        x0 = -self.workspace[0] / 2.0
        y0 = -self.workspace[1] / 2.0
        return x0 + (cols + 0.5) * self.resolution, y0 + (rows + 0.5) * self.resolution


@dataclass(frozen=True)
class ObservedBBox:
    center: Tuple[float, float]
    theta_bin: int
    size: Tuple[float, float]
    top_height: float
    object_id: Optional[int] = None
    # unquantized rectangle (cx, cy, theta, w, h); not part of the discrete observation
    raw: Optional[Tuple[float, float, float, float, float]] = field(default=None, compare=False)


@dataclass
class Observation:
    bboxes: List[ObservedBBox]
    target_occlusion: float = 0.0

    def key(self) -> tuple:
        """Canonical hashable form: (count, sorted (id, grid center, theta bin))."""
        items = sorted(
            ((-1 if b.object_id is None else b.object_id), round(b.center[0], 3),
             round(b.center[1], 3), b.theta_bin)
            for b in self.bboxes
        )
        return (len(self.bboxes), tuple(items))

    def target_bbox(self, target_id: int) -> Optional[ObservedBBox]:
        for b in self.bboxes:
            if b.object_id == target_id:
                return b
        return None


# --- quantization ----------------------------------------------------------

def quantize_center(x: float, y: float, grid: float) -> Tuple[float, float]:
    return (round(x / grid) * grid + 0.0, round(y / grid) * grid + 0.0)


def theta_bin(theta: float) -> int:
    step = math.pi / N_THETA_BINS
    return int(math.floor(theta / step + 0.5)) % N_THETA_BINS


def quantize_bbox(b: ObservedBBox, grid: float) -> ObservedBBox:
    return ObservedBBox(quantize_center(*b.center, grid), b.theta_bin % N_THETA_BINS,
                        b.size, b.top_height, b.object_id, b.raw)


# --- rasterization ---------------------------------------------------------

def _grid_shape(workspace, resolution) -> Tuple[int, int]:
    return int(round(workspace[1] / resolution)), int(round(workspace[0] / resolution))


def footprint_pixels(o: ObjectState, workspace, resolution) -> Tuple[np.ndarray, np.ndarray]:
    """Row/col indices of grid pixels whose centers fall inside the box footprint."""
    rows, cols = _grid_shape(workspace, resolution)
    x0, y0 = -workspace[0] / 2.0, -workspace[1] / 2.0
    c, s = math.cos(o.theta), math.sin(o.theta)
    ex = 0.5 * (o.w * abs(c) + o.h * abs(s))
    ey = 0.5 * (o.w * abs(s) + o.h * abs(c))
    c0 = max(0, int(math.floor((o.x - ex - x0) / resolution)))
    c1 = min(cols, int(math.ceil((o.x + ex - x0) / resolution)) + 1)
    r0 = max(0, int(math.floor((o.y - ey - y0) / resolution)))
    r1 = min(rows, int(math.ceil((o.y + ey - y0) / resolution)) + 1)
    if c0 >= c1 or r0 >= r1:
        return np.empty(0, dtype=np.intp), np.empty(0, dtype=np.intp)
    cs = np.arange(c0, c1)
    rs = np.arange(r0, r1)
    px = x0 + (cs + 0.5) * resolution - o.x
    py = y0 + (rs + 0.5) * resolution - o.y
    u = px[None, :] * c + py[:, None] * s
    v = -px[None, :] * s + py[:, None] * c
    inside = (np.abs(u) <= o.w / 2.0) & (np.abs(v) <= o.h / 2.0)
    rr, cc = np.nonzero(inside)
    return rr + r0, cc + c0


def _render_order(s: ClutterState) -> List[int]:
    return sorted(range(len(s.objects)), key=lambda i: (s.objects[i].top, i))


def render(s: ClutterState, resolution: float = 2.0) -> Tuple[HeightMap, np.ndarray]:
    """Height map plus a per-pixel index of the topmost object (-1 = table)."""
    shape = _grid_shape(s.workspace, resolution)
    cells = np.zeros(shape)
    owner = np.full(shape, -1, dtype=np.intp)
    for i in _render_order(s):
        o = s.objects[i]
        rr, cc = footprint_pixels(o, s.workspace, resolution)
        cells[rr, cc] = o.top
        owner[rr, cc] = i
    return HeightMap(resolution, cells, tuple(s.workspace)), owner


def render_heightmap(s: ClutterState, resolution: float = 2.0) -> HeightMap:
    return render(s, resolution)[0]


def _visible_mask(s: ClutterState, i: int, resolution: float):
    """Footprint pixels of object i and a boolean mask of which are topmost."""
    o = s.objects[i]
    rr, cc = footprint_pixels(o, s.workspace, resolution)
    vis = np.ones(rr.shape, dtype=bool)
    if rr.size == 0:
        return rr, cc, vis
    key_i = (o.top, i)
    x0, y0 = -s.workspace[0] / 2.0, -s.workspace[1] / 2.0
    px = x0 + (cc + 0.5) * resolution
    py = y0 + (rr + 0.5) * resolution
    for k, other in enumerate(s.objects):
        if k == i or (other.top, k) < key_i:
            continue
        if math.hypot(other.x - o.x, other.y - o.y) >= other.radius + o.radius:
            continue
        c, sn = math.cos(other.theta), math.sin(other.theta)
        dx, dy = px - other.x, py - other.y
        u = dx * c + dy * sn
        v = -dx * sn + dy * c
        vis &= ~((np.abs(u) <= other.w / 2.0) & (np.abs(v) <= other.h / 2.0))
    return rr, cc, vis


def occlusion_ratio(s: ClutterState, obj_id: int, resolution: float = 2.0) -> float:
    """Fraction of an object's footprint pixels covered by something above it."""
    i = s.index_of(obj_id)
    rr, cc, vis = _visible_mask(s, i, resolution)
    if rr.size == 0:
        return 0.0
    return float(1.0 - vis.sum() / rr.size)


# --- segmentation ----------------------------------------------------------

def segment(hm: HeightMap, h_tol: float = 3.0) -> List[np.ndarray]:
    """Region growing: 4-neighbors join when both are above the table and differ by <= h_tol.

    Returns one ``(k, 2)`` array of (row, col) pixel indices per maximal region,
    ordered by first pixel in raster order.
    """
    cells = hm.cells
    rows, cols = cells.shape
    occupied = cells > 0
    idx = np.arange(rows * cols).reshape(rows, cols)
    src, dst = [], []
    right = occupied[:, :-1] & occupied[:, 1:] & (np.abs(cells[:, :-1] - cells[:, 1:]) <= h_tol)
    src.append(idx[:, :-1][right])
    dst.append(idx[:, 1:][right])
    down = occupied[:-1, :] & occupied[1:, :] & (np.abs(cells[:-1, :] - cells[1:, :]) <= h_tol)
    src.append(idx[:-1, :][down])
    dst.append(idx[1:, :][down])
    src = np.concatenate(src)
    dst = np.concatenate(dst)
    n = rows * cols
    graph = coo_matrix((np.ones(src.size, dtype=np.int8), (src, dst)), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    flat_occ = occupied.ravel()
    lab = labels[flat_occ]
    pix = idx.ravel()[flat_occ]
    regions = []
    if pix.size == 0:
        return regions
    order = np.argsort(lab, kind="stable")
    lab_sorted = lab[order]
    pix_sorted = pix[order]
    splits = np.nonzero(np.diff(lab_sorted))[0] + 1
    for group in np.split(pix_sorted, splits):
        group = np.sort(group)
        regions.append(np.stack([group // cols, group % cols], axis=1))
    regions.sort(key=lambda g: int(g[0, 0]) * cols + int(g[0, 1]))
    return regions


# --- oriented boxes ----------------------------------------------------------

def _hull_points(points: np.ndarray) -> np.ndarray:
    try:
        hull = ConvexHull(points)
    except QhullError:
        return np.asarray(convex_hull(map(tuple, points.tolist())), dtype=float)
    return points[hull.vertices]


def min_area_rect(points: np.ndarray) -> Tuple[float, float, float, float, float]:
    """Rotating calipers over the convex hull: returns (cx, cy, theta, w, h) with w >= h."""
    points = np.asarray(points, dtype=float)
    H = _hull_points(points) if len(points) > 2 else points
    if len(H) == 1:
        return float(H[0, 0]), float(H[0, 1]), 0.0, 0.0, 0.0
    if len(H) == 2:
        (ax, ay), (bx, by) = H.tolist()
        th, w, h = canonical_pose(math.atan2(by - ay, bx - ax), math.hypot(bx - ax, by - ay), 0.0)
        return (ax + bx) / 2, (ay + by) / 2, th, w, h
    edges = np.roll(H, -1, axis=0) - H
    angles = np.arctan2(edges[:, 1], edges[:, 0])
    c, s = np.cos(angles), np.sin(angles)
    U = H[:, :1] * c + H[:, 1:] * s
    V = -H[:, :1] * s + H[:, 1:] * c
    u0, u1 = U.min(axis=0), U.max(axis=0)
    v0, v1 = V.min(axis=0), V.max(axis=0)
    areas = (u1 - u0) * (v1 - v0)
    k = int(np.argmin(areas))
    ang = float(angles[k])
    cu, cv = (u0[k] + u1[k]) / 2, (v0[k] + v1[k]) / 2
    cx, cy = cu * c[k] - cv * s[k], cu * s[k] + cv * c[k]
    th, w, h = canonical_pose(ang, float(u1[k] - u0[k]), float(v1[k] - v0[k]))
    return float(cx), float(cy), th, w, h


def _row_extremes(rr: np.ndarray, cc: np.ndarray) -> np.ndarray:
    """Leftmost and rightmost pixel per row; their hull equals the region's hull."""
    order = np.lexsort((cc, rr))
    r, c = rr[order], cc[order]
    first = np.ones(r.size, dtype=bool)
    first[1:] = r[1:] != r[:-1]
    last = np.ones(r.size, dtype=bool)
    last[:-1] = r[1:] != r[:-1]
    sel = first | last
    return np.stack([r[sel], c[sel]], axis=1)


def region_bbox(rr: np.ndarray, cc: np.ndarray, heights: np.ndarray, hm_res: float,
                workspace, params: SensingParams, object_id: Optional[int] = None) -> ObservedBBox:
    if rr.size < params.min_region_pixels:
        raise DegenerateRegion(f"region of {rr.size} pixels")
    ext = _row_extremes(rr, cc)
    x0, y0 = -workspace[0] / 2.0, -workspace[1] / 2.0
    pts = np.stack([x0 + (ext[:, 1] + 0.5) * hm_res, y0 + (ext[:, 0] + 0.5) * hm_res], axis=1)
    cx, cy, th, w, h = min_area_rect(pts)
    # Pixel centers sit up to half a pixel inside the true boundary, by an
    # amount that depends on the edge angle.  Pick the per-side margin that
    # makes the rectangle's area match the pixel area.
    area = rr.size * hm_res ** 2
    margin = (-(w + h) + math.sqrt((w + h) ** 2 - 4 * (w * h - area))) / 4.0 \
        if (w + h) ** 2 - 4 * (w * h - area) >= 0 else 0.0
    margin = min(max(margin, 0.0), hm_res / 2.0)
    w += 2 * margin
    h += 2 * margin
    top = float(np.median(heights))
    cx, cy = float(cx), float(cy)
    return ObservedBBox(quantize_center(cx, cy, params.grid), theta_bin(th), (w, h), top,
                        object_id, (cx, cy, th, w, h))


def extract_bboxes(regions: Sequence[np.ndarray], hm: HeightMap,
                   params: SensingParams = SensingParams()) -> List[ObservedBBox]:
    out = []
    for reg in regions:
        rr, cc = reg[:, 0], reg[:, 1]
        try:
            out.append(region_bbox(rr, cc, hm.cells[rr, cc], hm.resolution, hm.workspace, params))
        except DegenerateRegion as exc:
            log.debug("skipping degenerate region: %s", exc)
    out.sort(key=lambda b: -b.top_height)
    return out


def observe_heightmap(hm: HeightMap, params: SensingParams = SensingParams()) -> List[ObservedBBox]:
    return extract_bboxes(segment(hm, params.h_tol), hm, params)


def observe_scene(s: ClutterState, params: SensingParams = SensingParams()) -> Tuple[Observation, HeightMap]:
    """Real-loop observation: render, segment, extract boxes without identities.

    The one segment holding most of the target's visible pixels is labelled
    with the target id (the operator knows which box is wanted); every other
    box stays anonymous.
    """
    hm, owner = render(s, params.resolution)
    target = s.index_of(s.target_id) if any(o.is_target for o in s.objects) else -1
    regions = segment(hm, params.h_tol)
    best, best_count = -1, 0
    for k, reg in enumerate(regions):
        cnt = int((owner[reg[:, 0], reg[:, 1]] == target).sum())
        if cnt > best_count:
            best, best_count = k, cnt
    bboxes = []
    for k, reg in enumerate(regions):
        rr, cc = reg[:, 0], reg[:, 1]
        oid = s.target_id if k == best else None
        try:
            bboxes.append(region_bbox(rr, cc, hm.cells[rr, cc], hm.resolution, hm.workspace,
                                      params, oid))
        except DegenerateRegion as exc:
            log.debug("skipping degenerate region: %s", exc)
    bboxes.sort(key=lambda b: -b.top_height)
    occ = occlusion_ratio(s, s.target_id, params.resolution) if target >= 0 else 1.0
    return Observation(bboxes, occ), hm


def predict_observation(s: ClutterState, params: SensingParams = SensingParams()) -> Observation:
    """Observation model: identity-labelled boxes of every sufficiently visible object."""
    bboxes = []
    target_occ = 0.0
    for i, o in enumerate(s.objects):
        rr, cc, vis = _visible_mask(s, i, params.resolution)
        if rr.size == 0:
            continue
        frac = vis.sum() / rr.size
        if o.is_target:
            target_occ = float(1.0 - frac)
        if frac <= params.v_min:
            continue
        if frac == 1.0:
            # nothing covers it: the box is the footprint itself
            bboxes.append(ObservedBBox(quantize_center(o.x, o.y, params.grid), theta_bin(o.theta),
                                       (o.w, o.h), o.top, o.id, (o.x, o.y, o.theta, o.w, o.h)))
            continue
        vr, vc = rr[vis], cc[vis]
        try:
            b = region_bbox(vr, vc, np.full(vr.size, o.top), params.resolution, s.workspace,
                            params, o.id)
        except DegenerateRegion:
            continue
        bboxes.append(b)
    bboxes.sort(key=lambda b: (-b.top_height, b.object_id))
    return Observation(bboxes, target_occ)


def visible_pixel_counts(s: ClutterState, resolution: float = 2.0) -> List[int]:
    return [int(_visible_mask(s, i, resolution)[2].sum()) for i in range(len(s.objects))]


# --- external height maps ----------------------------------------------------

def load_heightmap_csv(path, resolution: float = 2.0) -> HeightMap:
    cells = np.loadtxt(path, delimiter=",", ndmin=2).astype(float)
    if (cells < 0).any():
        raise ValueError("height map contains negative heights")
    return HeightMap(resolution, cells, (cells.shape[1] * resolution, cells.shape[0] * resolution))


def load_heightmap_png(path, resolution: float = 2.0, mm_per_unit: float = 0.1) -> HeightMap:
    """16-bit grayscale PNG, one unit = ``mm_per_unit`` mm of height above the table."""
    from PIL import Image

    img = np.asarray(Image.open(path))
    if img.ndim != 2:
        raise ValueError("expected a single-channel height image")
    cells = img.astype(float) * mm_per_unit
    return HeightMap(resolution, cells, (cells.shape[1] * resolution, cells.shape[0] * resolution))


def save_heightmap_png(hm: HeightMap, path, mm_per_unit: float = 0.1) -> None:
    from PIL import Image

    data = np.clip(np.round(hm.cells / mm_per_unit), 0, 65535).astype(np.uint16)
    Image.fromarray(data).save(path)
