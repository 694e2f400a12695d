"""Box poses, oriented-rectangle geometry and support relations.

Coordinates are millimeters with the table centered on the origin; ``z`` is
the height of a box's bottom face above the table.  Rectangles are handled as
lists of ``(x, y)`` tuples in counter-clockwise order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

EPS_Z = 1.0
EPS_PEN = 0.5
STABILITY_TOL = 0.5
TABLE = -1

Point = Tuple[float, float]
Polygon = List[Point]


class CyclicSupport(RuntimeError):
    pass


def canonical_pose(theta: float, w: float, h: float) -> Tuple[float, float, float]:
    """Return ``(theta, w, h)`` with ``w >= h`` and theta folded into [0, pi)."""
    if h > w:
        w, h = h, w
        theta += math.pi / 2
    theta = math.fmod(theta, math.pi)
    if theta < 0:
        theta += math.pi
    if theta >= math.pi - 1e-12:
        theta = 0.0
    return theta, w, h


@dataclass(frozen=True)
class ObjectState:
    id: int
    x: float
    y: float
    z: float
    theta: float
    w: float
    h: float
    thickness: float
    is_target: bool = False

    def __post_init__(self):
        if not (self.w >= self.h > 0 and self.thickness > 0):
            raise ValueError(f"bad box extents w={self.w} h={self.h} t={self.thickness}")
        if not 0.0 <= self.theta < math.pi:
            raise ValueError(f"theta {self.theta} outside [0, pi)")
        if self.z < 0:
            raise ValueError(f"negative z {self.z}")

    @classmethod
    def create(cls, id, x, y, z, theta, w, h, thickness, is_target=False) -> "ObjectState":
        theta, w, h = canonical_pose(theta, w, h)
        return cls(int(id), float(x), float(y), max(0.0, float(z)), theta, float(w), float(h),
                   float(thickness), bool(is_target))

    @property
    def top(self) -> float:
        return self.z + self.thickness

    @property
    def area(self) -> float:
        return self.w * self.h

    @cached_property
    def polygon(self) -> Polygon:
        return footprint_polygon(self)

    @cached_property
    def radius(self) -> float:
        return 0.5 * math.hypot(self.w, self.h)

    def moved(self, x: float, y: float, z: Optional[float] = None,
              theta: Optional[float] = None) -> "ObjectState":
        th = self.theta if theta is None else theta
        th, w, h = canonical_pose(th, self.w, self.h)
        return replace(self, x=x, y=y, z=self.z if z is None else max(0.0, z),
                       theta=th, w=w, h=h)

    def to_list(self) -> List[float]:
        return [self.x, self.y, self.z, self.theta, self.w, self.h, self.thickness]


@dataclass(frozen=True)
class ClutterState:
    objects: Tuple[ObjectState, ...]
    workspace: Tuple[float, float] = (500.0, 400.0)

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        if sum(o.is_target for o in self.objects) > 1:
            raise ValueError("more than one target")
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate object ids {ids}")

    @property
    def target(self) -> ObjectState:
        for o in self.objects:
            if o.is_target:
                return o
        raise KeyError("state has no target")

    @property
    def target_id(self) -> int:
        return self.target.id

    @property
    def surrounding(self) -> List[ObjectState]:
        return [o for o in self.objects if not o.is_target]

    def index_of(self, obj_id: int) -> int:
        for i, o in enumerate(self.objects):
            if o.id == obj_id:
                return i
        raise KeyError(obj_id)

    def get(self, obj_id: int) -> ObjectState:
        return self.objects[self.index_of(obj_id)]

    def has(self, obj_id: int) -> bool:
        return any(o.id == obj_id for o in self.objects)

    def with_objects(self, objects: Iterable[ObjectState]) -> "ClutterState":
        return ClutterState(tuple(objects), self.workspace)


@dataclass
class SupportGraph:
    """Directed support edges ``supporter -> supported`` with footprint overlap ratios."""

    edges: Dict[Tuple[int, int], float] = field(default_factory=dict)

    def supporters(self, obj_id: int) -> List[int]:
        return [a for (a, b) in self.edges if b == obj_id]

    def supported_by(self, obj_id: int) -> List[int]:
        return [b for (a, b) in self.edges if a == obj_id]

    def on_table(self, obj_id: int) -> bool:
        return (TABLE, obj_id) in self.edges


# --- polygon helpers -------------------------------------------------------

def rect_polygon(x: float, y: float, theta: float, w: float, h: float) -> Polygon:
    c, s = math.cos(theta), math.sin(theta)
    hw, hh = w / 2.0, h / 2.0
    ux, uy = c * hw, s * hw
    vx, vy = -s * hh, c * hh
    return [
        (x - ux - vx, y - uy - vy),
        (x + ux - vx, y + uy - vy),
        (x + ux + vx, y + uy + vy),
        (x - ux + vx, y - uy + vy),
    ]


def footprint_polygon(o: ObjectState) -> Polygon:
    return rect_polygon(o.x, o.y, o.theta, o.w, o.h)


def polygon_area(poly: Sequence[Point]) -> float:
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        acc += x1 * y2 - x2 * y1
    return abs(acc) / 2.0


def clip_convex(subject: Sequence[Point], clip: Sequence[Point]) -> Polygon:
    """Sutherland-Hodgman intersection of two convex CCW polygons."""
    output = list(subject)
    n = len(clip)
    for i in range(n):
        if not output:
            break
        cx1, cy1 = clip[i]
        cx2, cy2 = clip[(i + 1) % n]
        ex, ey = cx2 - cx1, cy2 - cy1
        inp = output
        output = []
        m = len(inp)
        for k in range(m):
            px, py = inp[k]
            qx, qy = inp[(k + 1) % m]
            dp = ex * (py - cy1) - ey * (px - cx1)
            dq = ex * (qy - cy1) - ey * (qx - cx1)
            if dp >= 0:
                output.append((px, py))
            if (dp >= 0) != (dq >= 0):
                t = dp / (dp - dq)
                output.append((px + t * (qx - px), py + t * (qy - py)))
    return output


def _bbox_disjoint(a: Sequence[Point], b: Sequence[Point]) -> bool:
    ax = [p[0] for p in a]
    bx = [p[0] for p in b]
    if max(ax) <= min(bx) or max(bx) <= min(ax):
        return True
    ay = [p[1] for p in a]
    by = [p[1] for p in b]
    return max(ay) <= min(by) or max(by) <= min(ay)


def overlap_area(a: Sequence[Point], b: Sequence[Point]) -> float:
    if _bbox_disjoint(a, b):
        return 0.0
    return polygon_area(clip_convex(a, b))


def objects_overlap_area(a: ObjectState, b: ObjectState) -> float:
    if math.hypot(a.x - b.x, a.y - b.y) >= a.radius + b.radius:
        return 0.0
    return overlap_area(a.polygon, b.polygon)


def footprints_overlap(a: ObjectState, b: ObjectState, tol: float = 1e-6) -> bool:
    """Whether two footprints overlap by more than ``tol`` mm along every separating axis.

    A cheap yes/no test for rectangles; no clipping.
    """
    dx, dy = b.x - a.x, b.y - a.y
    if math.hypot(dx, dy) >= a.radius + b.radius:
        return False
    for th in (a.theta, b.theta):
        for nx, ny in ((math.cos(th), math.sin(th)), (-math.sin(th), math.cos(th))):
            ra = _half_extent(a, nx, ny)
            rb = _half_extent(b, nx, ny)
            if ra + rb - abs(dx * nx + dy * ny) <= tol:
                return False
    return True


def _half_extent(o: ObjectState, nx: float, ny: float) -> float:
    c, s = math.cos(o.theta), math.sin(o.theta)
    return 0.5 * (o.w * abs(c * nx + s * ny) + o.h * abs(-s * nx + c * ny))


def sat_penetration(a: Sequence[Point], b: Sequence[Point]) -> Tuple[float, Point]:
    """Planar penetration depth of two convex polygons and the unit axis pushing b away from a.

    Depth is 0 when the polygons are separated.
    """
    best = math.inf
    best_axis = (1.0, 0.0)
    for poly in (a, b):
        n = len(poly)
        for i in range(n):
            x1, y1 = poly[i]
            x2, y2 = poly[(i + 1) % n]
            nx, ny = y2 - y1, -(x2 - x1)
            ln = math.hypot(nx, ny)
            if ln == 0:
                continue
            nx, ny = nx / ln, ny / ln
            pa = [px * nx + py * ny for px, py in a]
            pb = [px * nx + py * ny for px, py in b]
            ov = min(max(pa), max(pb)) - max(min(pa), min(pb))
            if ov <= 0:
                return 0.0, (nx, ny)
            if ov < best:
                best = ov
                best_axis = (nx, ny)
    cax = sum(p[0] for p in a) / len(a)
    cay = sum(p[1] for p in a) / len(a)
    cbx = sum(p[0] for p in b) / len(b)
    cby = sum(p[1] for p in b) / len(b)
    nx, ny = best_axis
    if (cbx - cax) * nx + (cby - cay) * ny < 0:
        nx, ny = -nx, -ny
    return best, (nx, ny)


def vertical_overlap(a: ObjectState, b: ObjectState) -> float:
    return min(a.top, b.top) - max(a.z, b.z)


def penetration_depth(a: ObjectState, b: ObjectState) -> float:
    """3-D penetration: the smaller of vertical and planar overlap depths (0 if apart)."""
    vz = vertical_overlap(a, b)
    if vz <= 0:
        return 0.0
    if math.hypot(a.x - b.x, a.y - b.y) >= a.radius + b.radius:
        return 0.0
    d, _ = sat_penetration(a.polygon, b.polygon)
    return min(vz, d)


def convex_hull(points: Iterable[Point]) -> Polygon:
    """Andrew's monotone chain; returns CCW hull without repeated endpoint."""
    pts = sorted(set(points))
    if len(pts) <= 2:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: Polygon = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: Polygon = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def point_segment_distance(p: Point, a: Point, b: Point) -> float:
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    L2 = dx * dx + dy * dy
    if L2 == 0:
        return math.hypot(p[0] - ax, p[1] - ay)
    t = max(0.0, min(1.0, ((p[0] - ax) * dx + (p[1] - ay) * dy) / L2))
    return math.hypot(p[0] - (ax + t * dx), p[1] - (ay + t * dy))


def point_in_convex(p: Point, poly: Sequence[Point], tol: float = 0.0) -> bool:
    n = len(poly)
    if n == 0:
        return False
    if n < 3:
        return min(point_segment_distance(p, poly[i], poly[(i + 1) % n]) for i in range(n)) <= tol
    inside = True
    for i in range(n):
        ax, ay = poly[i]
        bx, by = poly[(i + 1) % n]
        if (bx - ax) * (p[1] - ay) - (by - ay) * (p[0] - ax) < 0:
            inside = False
            break
    if inside:
        return True
    return min(point_segment_distance(p, poly[i], poly[(i + 1) % n]) for i in range(n)) <= tol


def nearest_point_on_polygon(p: Point, poly: Sequence[Point]) -> Point:
    best, best_q = math.inf, poly[0]
    n = len(poly)
    for i in range(n):
        ax, ay = poly[i]
        bx, by = poly[(i + 1) % n]
        dx, dy = bx - ax, by - ay
        L2 = dx * dx + dy * dy
        t = 0.0 if L2 == 0 else max(0.0, min(1.0, ((p[0] - ax) * dx + (p[1] - ay) * dy) / L2))
        q = (ax + t * dx, ay + t * dy)
        d = math.hypot(p[0] - q[0], p[1] - q[1])
        if d < best:
            best, best_q = d, q
    return best_q


# --- support relations -----------------------------------------------------

MIN_CONTACT_AREA = 1e-6


def resting_contacts(objects: Sequence[ObjectState], j: int) -> List[Tuple[int, float]]:
    """Indices of objects whose top face meets the bottom of ``objects[j]``, with contact areas."""
    o = objects[j]
    out = []
    for i, s in enumerate(objects):
        if i == j or abs(s.top - o.z) > EPS_Z:
            continue
        a = objects_overlap_area(s, o)
        if a > MIN_CONTACT_AREA:
            out.append((i, a))
    return out


def compute_support_graph(s: ClutterState) -> SupportGraph:
    objs = s.objects
    edges: Dict[Tuple[int, int], float] = {}
    for j, o in enumerate(objs):
        if o.z <= EPS_Z:
            edges[(TABLE, o.id)] = 1.0
        for i, a in resting_contacts(objs, j):
            edges[(objs[i].id, o.id)] = min(1.0, a / o.area)
    _check_acyclic(edges)
    return SupportGraph(edges)


def _check_acyclic(edges: Dict[Tuple[int, int], float]) -> None:
    children: Dict[int, List[int]] = {}
    for a, b in edges:
        children.setdefault(a, []).append(b)
    state: Dict[int, int] = {}

    def visit(n):
        stack = [(n, iter(children.get(n, ())))]
        state[n] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                state[node] = 2
                stack.pop()
                continue
            st = state.get(nxt, 0)
            if st == 1:
                raise CyclicSupport(f"support cycle through object {nxt}")
            if st == 0:
                state[nxt] = 1
                stack.append((nxt, iter(children.get(nxt, ()))))

    for n in list(children):
        if state.get(n, 0) == 0:
            visit(n)


def contact_hull(objects: Sequence[ObjectState], j: int,
                 contacts: Optional[List[Tuple[int, float]]] = None) -> Polygon:
    """Convex hull of the regions where ``objects[j]`` rests on its supporters."""
    o = objects[j]
    if o.z <= EPS_Z:
        return list(o.polygon)
    if contacts is None:
        contacts = resting_contacts(objects, j)
    pts: List[Point] = []
    for i, _ in contacts:
        pts.extend(clip_convex(o.polygon, objects[i].polygon))
    return convex_hull(pts)


def stable_at(objects: Sequence[ObjectState], j: int,
              contacts: Optional[List[Tuple[int, float]]] = None) -> bool:
    o = objects[j]
    if o.z <= EPS_Z:
        return True
    if contacts is None:
        contacts = resting_contacts(objects, j)
    if not contacts:
        return False
    hull = contact_hull(objects, j, contacts)
    return point_in_convex((o.x, o.y), hull, STABILITY_TOL)


def is_stable(s: ClutterState, g: SupportGraph, obj_id: int) -> bool:
    """Centroid-over-contact-hull test for one object of a settled state."""
    o = s.get(obj_id)
    if g.on_table(obj_id):
        return True
    pts: List[Point] = []
    for sid in g.supporters(obj_id):
        if sid == TABLE:
            continue
        pts.extend(clip_convex(o.polygon, s.get(sid).polygon))
    if not pts:
        return False
    return point_in_convex((o.x, o.y), convex_hull(pts), STABILITY_TOL)


def within_workspace(o: ObjectState, workspace: Tuple[float, float], tol: float = 1e-6) -> bool:
    hx, hy = workspace[0] / 2.0, workspace[1] / 2.0
    return all(-hx - tol <= px <= hx + tol and -hy - tol <= py <= hy + tol for px, py in o.polygon)


def invariant_violations(s: ClutterState) -> List[str]:
    """Human-readable list of ClutterState/settledness violations (empty when valid)."""
    problems = []
    objs = s.objects
    if sum(o.is_target for o in objs) != 1:
        problems.append("expected exactly one target")
    for a in range(len(objs)):
        for b in range(a + 1, len(objs)):
            d = penetration_depth(objs[a], objs[b])
            if d > EPS_PEN:
                problems.append(f"objects {objs[a].id} and {objs[b].id} interpenetrate by {d:.2f} mm")
    try:
        g = compute_support_graph(s)
    except CyclicSupport as exc:
        problems.append(str(exc))
        return problems
    for o in objs:
        if not g.supporters(o.id):
            problems.append(f"object {o.id} is floating at z={o.z:.2f}")
        elif not is_stable(s, g, o.id):
            problems.append(f"object {o.id} is unstable")
    return problems
