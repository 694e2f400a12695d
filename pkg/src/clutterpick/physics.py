"""Quasi-static stacking simulator used as ground truth and as the data source
for the learned transition model.

Slides push the target in small substeps.  Boxes resting on a moving box are
dragged along by friction, boxes in the same height layer are pushed out of
the way, and the supported box stays put.  After the motion every box that
is no longer stable slips off its support and drops flat.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .world import (
    EPS_PEN,
    EPS_Z,
    ClutterState,
    ObjectState,
    canonical_pose,
    clip_convex,
    contact_hull,
    convex_hull,
    nearest_point_on_polygon,
    objects_overlap_area,
    penetration_depth,
    resting_contacts,
    sat_penetration,
    stable_at,
    vertical_overlap,
    within_workspace,
)

SLIDE_DISTANCE = 30.0
DATASET_DIRECTIONS = 12
MAX_PUSH_ITERATIONS = 25
SETTLE_SHIFT_STEP = 2.0
SETTLE_MAX_SHIFT = 300.0


class OutOfWorkspace(RuntimeError):
    pass


class UnknownObject(KeyError):
    pass


class PlacementFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class PhysicsParams:
    slide_substep: float = 2.0
    drag_coefficient: float = 0.9
    push_slack: float = 0.5
    noise_sigma_translation: float = 1.5
    noise_sigma_rotation: float = 0.02
    rng_seed: int = 0

    def __post_init__(self):
        if self.slide_substep <= 0 or self.push_slack < 0:
            raise ValueError("slide_substep must be positive and push_slack non-negative")
        if not 0.0 <= self.drag_coefficient <= 1.0:
            raise ValueError("drag_coefficient must lie in [0, 1]")
        if self.noise_sigma_translation < 0 or self.noise_sigma_rotation < 0:
            raise ValueError("noise sigmas must be non-negative")


@dataclass
class StepOutcome:
    next_state: ClutterState
    collapsed: bool
    fallen_ids: List[int]
    total_surrounding_translation: float
    target_displacement: Tuple[float, float]
    out_of_workspace: bool = False
    blocked: bool = False


class _Scene:
    """Mutable working copy of a state; poses are edited in place during a step."""

    def __init__(self, state: ClutterState):
        self.workspace = state.workspace
        self.objs: List[ObjectState] = list(state.objects)

    def set_pose(self, i: int, x: float, y: float, z: Optional[float] = None,
                 theta: Optional[float] = None) -> None:
        self.objs[i] = self.objs[i].moved(x, y, z, theta)

    def shift(self, i: int, dx: float, dy: float) -> None:
        o = self.objs[i]
        self.objs[i] = o.moved(o.x + dx, o.y + dy)

    def state(self) -> ClutterState:
        return ClutterState(tuple(self.objs), self.workspace)


def _rest_graph(objs: Sequence[ObjectState]) -> Dict[int, List[Tuple[int, float]]]:
    return {j: resting_contacts(objs, j) for j in range(len(objs))}


def _carry(scene: _Scene, contacts: Dict[int, List[Tuple[int, float]]],
           disp: Dict[int, Tuple[float, float]], fixed: Optional[int], drag: float,
           order: Sequence[int]) -> None:
    """Drag boxes resting on moving boxes, bottom-up, by the contact-area weighted mover motion."""
    for j in order:
        if j in disp or j == fixed:
            continue
        sup = contacts.get(j, [])
        if not sup or any(i == fixed for i, _ in sup):
            continue
        total = sum(a for _, a in sup)
        mx = my = 0.0
        moving = False
        for i, a in sup:
            if i in disp:
                moving = True
                mx += a * disp[i][0]
                my += a * disp[i][1]
        if moving and total > 0:
            disp[j] = (drag * mx / total, drag * my / total)


def _resolve_pushes(scene: _Scene, movers: set, target: int, fixed: Optional[int],
                    slack: float, contacts, drag: float, order) -> bool:
    """Push boxes out of the movers' way; False when the target is blocked."""
    objs = scene.objs
    n = len(objs)
    for _ in range(MAX_PUSH_ITERATIONS):
        found = False
        for a in sorted(movers):
            for b in range(n):
                if b == a:
                    continue
                oa, ob = objs[a], objs[b]
                if vertical_overlap(oa, ob) <= EPS_PEN:
                    continue
                if math.hypot(oa.x - ob.x, oa.y - ob.y) >= oa.radius + ob.radius:
                    continue
                depth, (nx, ny) = sat_penetration(oa.polygon, ob.polygon)
                if depth <= slack:
                    continue
                found = True
                if b == fixed or b == target:
                    if a == target or a == fixed:
                        return False
                    scene.shift(a, -nx * depth, -ny * depth)
                    continue
                scene.shift(b, nx * depth, ny * depth)
                pushed = {b: (nx * depth, ny * depth)}
                _carry(scene, contacts, pushed, fixed, drag, order)
                for k, (dx, dy) in pushed.items():
                    if k != b and k not in movers:
                        scene.shift(k, dx, dy)
                movers.update(pushed)
                objs = scene.objs
        if not found:
            return True
    return False


def _settle(scene: _Scene) -> set:
    """Drop or slip every unstable box until the pile is at rest; returns indices that fell."""
    fallen: set = set()
    n = len(scene.objs)
    for _ in range(4 * n + 4):
        changed = False
        order = sorted(range(n), key=lambda k: (scene.objs[k].z, k))
        for j in order:
            objs = scene.objs
            o = objs[j]
            rest = 0.0
            for i, s in enumerate(objs):
                if i == j or s.top > o.z + EPS_Z:
                    continue
                if objects_overlap_area(s, o) > 1e-6:
                    rest = max(rest, s.top)
            if rest < o.z - EPS_Z:
                scene.set_pose(j, o.x, o.y, rest)
                fallen.add(j)
                changed = True
                o = scene.objs[j]
            if o.z <= EPS_Z:
                continue
            contacts = resting_contacts(scene.objs, j)
            if contacts and stable_at(scene.objs, j, contacts):
                continue
            if not contacts:
                continue
            before = scene.objs[j]
            _slip_off(scene, j, contacts)
            if scene.objs[j] is not before:
                fallen.add(j)
                changed = True
        if not changed:
            break
    return fallen


def _slip_off(scene: _Scene, j: int, contacts: List[Tuple[int, float]]) -> None:
    """Translate a tipping box away from its support until it clears it, ready to drop."""
    objs = scene.objs
    o = objs[j]
    tipping = [i for i, _ in contacts]
    if len(tipping) == 1:
        # shortest way off a single support
        _, (nx, ny) = sat_penetration(objs[tipping[0]].polygon, o.polygon)
        dirs = [(nx, ny)]
    else:
        hull = contact_hull(objs, j, contacts)
        q = nearest_point_on_polygon((o.x, o.y), hull)
        dx, dy = o.x - q[0], o.y - q[1]
        d = math.hypot(dx, dy)
        if d < 1e-9:
            cx = sum(p[0] for p in hull) / len(hull)
            cy = sum(p[1] for p in hull) / len(hull)
            dx, dy = o.x - cx, o.y - cy
            d = math.hypot(dx, dy) or 1.0
        dirs = [(dx / d, dy / d)]
    ux, uy = dirs[0]
    dirs += [(-uy, ux), (uy, -ux), (-ux, -uy)]
    steps = int(SETTLE_MAX_SHIFT / SETTLE_SHIFT_STEP)
    for ux, uy in dirs:
        for k in range(1, steps + 1):
            cand = o.moved(o.x + ux * k * SETTLE_SHIFT_STEP, o.y + uy * k * SETTLE_SHIFT_STEP)
            if _clear_to_drop(objs, j, cand, tipping):
                scene.objs[j] = cand
                return


def _clear_to_drop(objs, j, cand, tipping) -> bool:
    """True when nothing at or above the box's resting level sits under or beside ``cand``."""
    for i, s in enumerate(objs):
        if i == j:
            continue
        if i in tipping or (s.top > cand.z - EPS_Z and s.z < cand.top - EPS_PEN):
            if objects_overlap_area(s, cand) > 1e-6:
                return False
    return True


def _pile_is_valid(objs: Sequence[ObjectState], idx: Iterable[int]) -> bool:
    for j in idx:
        for i in range(len(objs)):
            if i != j and penetration_depth(objs[i], objs[j]) > EPS_PEN:
                return False
    for j in range(len(objs)):
        if objs[j].z > EPS_Z and not stable_at(objs, j):
            return False
    return True


def _apply_noise(scene: _Scene, moved: Sequence[int], p: PhysicsParams,
                 rng: np.random.Generator, tries: int = 5) -> None:
    if p.noise_sigma_translation == 0 and p.noise_sigma_rotation == 0:
        return
    for j in moved:
        base = scene.objs[j]
        for _ in range(tries):
            nx, ny = rng.normal(0.0, p.noise_sigma_translation, 2) if p.noise_sigma_translation > 0 else (0.0, 0.0)
            nt = rng.normal(0.0, p.noise_sigma_rotation) if p.noise_sigma_rotation > 0 else 0.0
            scene.objs[j] = base.moved(base.x + nx, base.y + ny, None, base.theta + nt)
            if _pile_is_valid(scene.objs, [j]):
                break
            scene.objs[j] = base


def _outcome(before: ClutterState, scene: _Scene, fallen_idx: Iterable[int],
             out_of_workspace=False, blocked=False) -> StepOutcome:
    after = scene.state()
    prev = {o.id: o for o in before.objects}
    total = 0.0
    tdisp = (0.0, 0.0)
    for o in after.objects:
        p0 = prev.get(o.id)
        if p0 is None:
            continue
        if o.is_target:
            tdisp = (o.x - p0.x, o.y - p0.y)
        else:
            total += math.hypot(o.x - p0.x, o.y - p0.y)
    fallen_ids = sorted(scene.objs[i].id for i in fallen_idx)
    return StepOutcome(after, bool(fallen_ids), fallen_ids, total, tdisp,
                       out_of_workspace, blocked)


def _rng(p: PhysicsParams, rng: Optional[np.random.Generator]) -> np.random.Generator:
    return rng if rng is not None else np.random.default_rng(p.rng_seed)


def apply_slide(s: ClutterState, direction: float, distance: float,
                support_id: Optional[int] = None, p: PhysicsParams = PhysicsParams(),
                rng: Optional[np.random.Generator] = None) -> StepOutcome:
    """Slide the target ``distance`` mm along ``direction`` (radians) while holding ``support_id``."""
    if distance <= 0:
        raise ValueError("slide distance must be positive")
    target = s.index_of(s.target_id)
    fixed = None
    if support_id is not None:
        if support_id == s.target_id:
            raise ValueError("the target cannot be the supported object")
        if not s.has(support_id):
            raise UnknownObject(support_id)
        fixed = s.index_of(support_id)
    rng = _rng(p, rng)
    scene = _Scene(s)
    n_sub = max(1, int(math.ceil(distance / p.slide_substep - 1e-9)))
    step = distance / n_sub
    sx, sy = math.cos(direction) * step, math.sin(direction) * step
    moved: set = set()
    out_of_ws = blocked = False
    for _ in range(n_sub):
        saved = list(scene.objs)
        contacts = _rest_graph(scene.objs)
        order = sorted(range(len(scene.objs)), key=lambda k: (scene.objs[k].z, k))
        disp = {target: (sx, sy)}
        _carry(scene, contacts, disp, fixed, p.drag_coefficient, order)
        for k, (dx, dy) in disp.items():
            scene.shift(k, dx, dy)
        if not within_workspace(scene.objs[target], s.workspace):
            scene.objs = saved
            out_of_ws = True
            break
        movers = set(disp)
        if not _resolve_pushes(scene, movers, target, fixed, p.push_slack,
                               contacts, p.drag_coefficient, order):
            scene.objs = saved
            blocked = True
            break
        moved.update(movers)
    fallen = _settle(scene)
    moved |= fallen
    moved = {j for j in moved if scene.objs[j] != s.objects[j]}
    _apply_noise(scene, sorted(moved), p, rng)
    return _outcome(s, scene, fallen, out_of_ws, blocked)


def apply_remove(s: ClutterState, obj_id: int, p: PhysicsParams = PhysicsParams(),
                 rng: Optional[np.random.Generator] = None) -> StepOutcome:
    if not s.has(obj_id):
        raise UnknownObject(obj_id)
    if obj_id == s.target_id:
        raise ValueError("the target cannot be removed")
    rng = _rng(p, rng)
    scene = _Scene(s.with_objects(o for o in s.objects if o.id != obj_id))
    before = [o for o in scene.objs]
    fallen = _settle(scene)
    fallen = {j for j in fallen if before[j].z - scene.objs[j].z > EPS_Z
              or math.hypot(before[j].x - scene.objs[j].x, before[j].y - scene.objs[j].y) > 1e-9}
    _apply_noise(scene, sorted(fallen), p, rng)
    return _outcome(s, scene, fallen)


def settle_state(s: ClutterState) -> Tuple[ClutterState, List[int]]:
    scene = _Scene(s)
    fallen = _settle(scene)
    return scene.state(), sorted(scene.objs[i].id for i in fallen)


# --- pile generation -------------------------------------------------------

def generate_pile(n_objects: int, size_range: Tuple[float, float] = (40.0, 120.0),
                  workspace: Tuple[float, float] = (500.0, 400.0), seed: int = 0,
                  thickness_range: Tuple[float, float] = (20.0, 50.0),
                  spread: float = 90.0, max_rejections: int = 1000) -> ClutterState:
    """Sequentially drop random boxes around the table center, rejecting unstable placements.

    The target is picked uniformly among the placed boxes and moved to index 0.
    """
    if n_objects < 1:
        raise ValueError("n_objects must be >= 1")
    rng = np.random.default_rng(seed)
    placed: List[ObjectState] = []
    for k in range(n_objects):
        for _ in range(max_rejections):
            w, h = sorted(rng.uniform(*size_range, 2), reverse=True)
            t = float(rng.uniform(*thickness_range))
            theta = float(rng.uniform(0.0, math.pi))
            x, y = rng.uniform(-spread, spread, 2)
            cand = ObjectState.create(k, x, y, 0.0, theta, w, h, t)
            if not within_workspace(cand, workspace):
                continue
            z = 0.0
            for o in placed:
                if objects_overlap_area(o, cand) > 1e-6:
                    z = max(z, o.top)
            cand = cand.moved(cand.x, cand.y, z)
            objs = placed + [cand]
            if z > EPS_Z and not stable_at(objs, len(objs) - 1):
                continue
            placed.append(cand)
            break
        else:
            raise PlacementFailure(f"could not place object {k} after {max_rejections} attempts")
    t_idx = int(rng.integers(len(placed)))
    order = [t_idx] + [i for i in range(len(placed)) if i != t_idx]
    objs = []
    for new_id, i in enumerate(order):
        o = placed[i]
        objs.append(ObjectState(new_id, o.x, o.y, o.z, o.theta, o.w, o.h, o.thickness, new_id == 0))
    return ClutterState(tuple(objs), workspace)


# --- transition dataset ----------------------------------------------------

SLIDE, REMOVE = 0, 1


def state_to_flat(s: ClutterState) -> List[float]:
    out: List[float] = []
    for o in s.objects:
        out.extend(o.to_list())
    return out


def state_from_flat(flat: Sequence[float], target_index: int = 0,
                    workspace=(500.0, 400.0), ids: Optional[Sequence[int]] = None) -> ClutterState:
    n = len(flat) // 7
    objs = []
    for k in range(n):
        x, y, z, th, w, h, t = flat[7 * k: 7 * k + 7]
        oid = k if ids is None else ids[k]
        objs.append(ObjectState.create(oid, x, y, z, th, w, h, t, k == target_index))
    return ClutterState(tuple(objs), tuple(workspace))


@dataclass
class TransitionRecord:
    """One simulator transition.

    ``prior``/``posterior`` are flat lists of ``[x, y, z, theta, w, h, thickness]``
    per object in slot order (slot 0 is the target).  ``action`` is
    ``[kind, direction_rad, distance_mm, support_slot, removed_slot]`` with
    ``kind`` 0 = slide, 1 = remove and -1 for unused slots.  For removals the
    posterior omits the removed slot.
    """

    prior: List[float]
    action: List[float]
    posterior: List[float]
    n_objects: int

    def to_json(self) -> str:
        return json.dumps({"prior": self.prior, "action": self.action,
                           "posterior": self.posterior, "n_objects": self.n_objects})

    @classmethod
    def from_dict(cls, d) -> "TransitionRecord":
        return cls(list(d["prior"]), list(d["action"]), list(d["posterior"]), int(d["n_objects"]))


def generate_transition_dataset(n_samples: int, params: PhysicsParams = PhysicsParams(),
                                seed: int = 0, n_range: Tuple[int, int] = (3, 8),
                                n_max: int = 8, distance: float = SLIDE_DISTANCE,
                                unsupported_fraction: float = 0.25,
                                remove_fraction: float = 0.1,
                                workspace: Tuple[float, float] = (500.0, 400.0)) -> List[TransitionRecord]:
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    hi = min(n_range[1], n_max + 1)
    records = []
    while len(records) < n_samples:
        n = int(rng.integers(n_range[0], hi + 1))
        pile = generate_pile(n, workspace=workspace, seed=int(rng.integers(2**31)))
        step_rng = np.random.default_rng(int(rng.integers(2**31)))
        prior = state_to_flat(pile)
        if n > 1 and rng.random() < remove_fraction:
            victim = int(rng.integers(1, n))
            out = apply_remove(pile, victim, params, step_rng)
            action = [REMOVE, 0.0, 0.0, -1, victim]
        else:
            k = int(rng.integers(DATASET_DIRECTIONS))
            direction = 2 * math.pi * k / DATASET_DIRECTIONS
            support = None
            if n > 1 and rng.random() >= unsupported_fraction:
                support = int(rng.integers(1, n))
            out = apply_slide(pile, direction, distance, support, params, step_rng)
            action = [SLIDE, direction, distance, -1 if support is None else support, -1]
        # ids equal slot indices in generated piles
        post = {o.id: o for o in out.next_state.objects}
        posterior = []
        for o in pile.objects:
            if o.id in post:
                posterior.extend(post[o.id].to_list())
        records.append(TransitionRecord(prior, action, posterior, n))
    return records


def augment_records(records: Sequence[TransitionRecord], factor: int = 10, seed: int = 0,
                    max_shift: float = 50.0) -> List[TransitionRecord]:
    """Multiply records by rigid rotations of k*30 degrees plus a random planar shift.

    Relative geometry inside each record is preserved exactly; copy 0 of each
    record is the original.
    """
    rng = np.random.default_rng(seed)
    out = []
    for rec in records:
        out.append(rec)
        for _ in range(factor - 1):
            k = int(rng.integers(1, DATASET_DIRECTIONS))
            ang = 2 * math.pi * k / DATASET_DIRECTIONS
            dx, dy = rng.uniform(-max_shift, max_shift, 2)
            out.append(_transform_record(rec, ang, float(dx), float(dy)))
    return out


def _transform_flat(flat: Sequence[float], ang: float, dx: float, dy: float) -> List[float]:
    c, s = math.cos(ang), math.sin(ang)
    res = []
    for k in range(len(flat) // 7):
        x, y, z, th, w, h, t = flat[7 * k: 7 * k + 7]
        th2, w2, h2 = canonical_pose(th + ang, w, h)
        res.extend([c * x - s * y + dx, s * x + c * y + dy, z, th2, w2, h2, t])
    return res


def _transform_record(rec: TransitionRecord, ang: float, dx: float, dy: float) -> TransitionRecord:
    action = list(rec.action)
    if action[0] == SLIDE:
        action[1] = math.fmod(action[1] + ang, 2 * math.pi)
    return TransitionRecord(_transform_flat(rec.prior, ang, dx, dy), action,
                            _transform_flat(rec.posterior, ang, dx, dy), rec.n_objects)


def perturbed_params(base: PhysicsParams = PhysicsParams()) -> PhysicsParams:
    """Physics variant standing in for real-robot data (different friction and noise)."""
    return PhysicsParams(base.slide_substep, max(0.0, base.drag_coefficient - 0.15),
                         base.push_slack, base.noise_sigma_translation * 1.6,
                         base.noise_sigma_rotation * 1.5, base.rng_seed + 1)


def emulated_real_dataset(n_real: int = 100, factor: int = 10, seed: int = 0,
                          base: PhysicsParams = PhysicsParams()) -> List[TransitionRecord]:
    raw = generate_transition_dataset(n_real, perturbed_params(base), seed=seed)
    return augment_records(raw, factor, seed=seed + 1)


def write_dataset(records: Iterable[TransitionRecord], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_dataset(path) -> List[TransitionRecord]:
    with open(path) as fh:
        return [TransitionRecord.from_dict(json.loads(line)) for line in fh if line.strip()]
