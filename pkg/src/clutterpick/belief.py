"""Belief over full clutter states.

Hypotheses are built from one observation: every observed box may extend
under taller neighbours, so its visible rectangle is grown side by side as
long as the growth stays hidden.  Per-object candidates are combined
bottom-up, keeping only physically consistent piles.  The belief is then
tracked with a hard-threshold particle filter.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .sensing import (HeightMap, Observation, ObservedBBox, SensingParams, footprint_pixels,
                      observe_scene, predict_observation)
from .world import (EPS_PEN, ClutterState, ObjectState, objects_overlap_area,
                    penetration_depth, stable_at, within_workspace)

log = logging.getLogger(__name__)

Rect = Tuple[float, float, float, float, float]  # cx, cy, theta, w, h


class NoHypothesis(RuntimeError):
    pass


class NoSurvivors(RuntimeError):
    pass


class EmptyBelief(ValueError):
    pass


@dataclass(frozen=True)
class BeliefParams:
    growth_step: float = 10.0
    max_growth: float = 60.0
    candidates_per_object: int = 5
    max_particles: int = 200
    # newly exposed area a hypothesis may add (2 cells of the 10 mm grid)
    exposed_area_tol: float = 200.0
    h_tol: float = 3.0
    error_thresh: float = 15.0
    min_thickness: float = 5.0
    # beyond this many consistent combinations, sample instead of enumerating
    enumeration_cap: int = 20000
    # a hypothesis must re-observe to the same boxes, centers within one grid cell
    reobserve_tol: float = 10.0
    # re-observation checks allowed per kept particle before giving up
    reobserve_budget: int = 4
    # share of a box's area on a same-height placed object that marks it a fragment
    fragment_overlap: float = 0.5
    seed: int = 0


@dataclass(frozen=True)
class TargetSize:
    w: float
    h: float
    thickness: float

    @classmethod
    def of(cls, o: ObjectState) -> "TargetSize":
        return cls(o.w, o.h, o.thickness)


@dataclass
class BeliefParticle:
    state: ClutterState
    weight: float


@dataclass
class Belief:
    particles: List[BeliefParticle]
    source_observation: Optional[Observation] = None

    def __post_init__(self):
        if not self.particles:
            raise EmptyBelief("a belief needs at least one particle")
        total = sum(p.weight for p in self.particles)
        if total <= 0:
            raise ValueError("particle weights must not all be zero")
        for p in self.particles:
            p.weight /= total

    def __len__(self) -> int:
        return len(self.particles)

    @property
    def states(self) -> List[ClutterState]:
        return [p.state for p in self.particles]

    @classmethod
    def uniform(cls, states: Sequence[ClutterState], obs: Optional[Observation] = None) -> "Belief":
        return cls([BeliefParticle(s, 1.0) for s in states], obs)


# --- pixel bookkeeping --------------------------------------------------------

def _rect_object(rect: Rect, oid: int = 0, z: float = 0.0, thickness: float = 1.0) -> ObjectState:
    cx, cy, th, w, h = rect
    return ObjectState.create(oid, cx, cy, z, th, max(w, 1e-3), max(h, 1e-3), thickness)


def _rect_pixels(rect: Rect, hm: HeightMap) -> Tuple[np.ndarray, np.ndarray]:
    return footprint_pixels(_rect_object(rect), hm.workspace, hm.resolution)


def _exposed_area(rect: Rect, base: Rect, top: float, hm: HeightMap, h_tol: float) -> float:
    """Area of ``rect`` outside ``base`` where the height map is not clearly above ``top``.

    Such pixels would show the object, so a hypothesis covering them
    contradicts the observation.
    """
    rr, cc = _rect_pixels(rect, hm)
    if rr.size == 0:
        return 0.0
    x, y = hm.pixel_centers(rr, cc)
    bx, by, bth, bw, bh = base
    c, s = math.cos(bth), math.sin(bth)
    u = (x - bx) * c + (y - by) * s
    v = -(x - bx) * s + (y - by) * c
    outside = (np.abs(u) > bw / 2.0) | (np.abs(v) > bh / 2.0)
    exposed = outside & (hm.cells[rr, cc] < top + h_tol)
    return float(exposed.sum()) * hm.resolution ** 2


def _split_exposure(rect: Rect, base: Rect, top: float, hm: HeightMap, h_tol: float) -> Tuple[float, float]:
    """(area below ``top``, area level with ``top``) of ``rect`` outside ``base``.

    Level pixels may be other visible pieces of the same object.
    """
    rr, cc = _rect_pixels(rect, hm)
    if rr.size == 0:
        return 0.0, 0.0
    x, y = hm.pixel_centers(rr, cc)
    bx, by, bth, bw, bh = base
    c, s = math.cos(bth), math.sin(bth)
    u = (x - bx) * c + (y - by) * s
    v = -(x - bx) * s + (y - by) * c
    outside = (np.abs(u) > bw / 2.0) | (np.abs(v) > bh / 2.0)
    cells = hm.cells[rr, cc]
    below = outside & (cells < top - h_tol)
    level = outside & (np.abs(cells - top) <= h_tol)
    px = hm.resolution ** 2
    return float(below.sum()) * px, float(level.sum()) * px


def _grown(base: Rect, gu0: float, gu1: float, gv0: float, gv1: float) -> Rect:
    cx, cy, th, w, h = base
    du, dv = (gu1 - gu0) / 2.0, (gv1 - gv0) / 2.0
    c, s = math.cos(th), math.sin(th)
    return (cx + du * c - dv * s, cy + du * s + dv * c, th, w + gu0 + gu1, h + gv0 + gv1)


def _inside_workspace(rect: Rect, workspace) -> bool:
    return within_workspace(_rect_object(rect), workspace, tol=1e-6)


# --- per-object candidates ------------------------------------------------------

def _visible_rect(b: ObservedBBox) -> Rect:
    if b.raw is not None:
        return b.raw
    th = b.theta_bin * math.pi / 12.0
    return (b.center[0], b.center[1], th, b.size[0], b.size[1])


def growth_candidates(b: ObservedBBox, hm: HeightMap, params: BeliefParams) -> List[Rect]:
    """Up to K extents for a surrounding object, fewest grown sides first.

    The observed rectangle itself always comes first.  Each side grows in
    steps of ``growth_step`` for as long as the growth stays hidden under
    taller objects.  Candidates then grow every subset of the growable sides
    to that limit, so one hypothesis covers a whole hidden side instead of a
    sliver of it.
    """
    base = _visible_rect(b)
    steps = int(round(params.max_growth / params.growth_step))
    tol = params.exposed_area_tol
    side_max = []
    for side in range(4):
        best = 0
        for k in range(1, steps + 1):
            g = [0.0] * 4
            g[side] = k * params.growth_step
            rect = _grown(base, *g)
            if not _inside_workspace(rect, hm.workspace) or \
                    _exposed_area(rect, base, b.top_height, hm, params.h_tol) > tol:
                break
            best = k
        side_max.append(best * params.growth_step)
    growable = [k for k in range(4) if side_max[k] > 0]
    w, h = base[3], base[4]
    subsets = []
    for r in range(1, len(growable) + 1):
        for sub in itertools.combinations(growable, r):
            g = [side_max[k] if k in sub else 0.0 for k in range(4)]
            area = (w + g[0] + g[1]) * (h + g[2] + g[3]) - w * h
            subsets.append((r, area, sub, g))
    subsets.sort(key=lambda t: t[:3])
    out = [base]
    for _, _, _, g in subsets:
        if len(out) >= params.candidates_per_object:
            break
        rect = _grown(base, *g)
        if _exposed_area(rect, base, b.top_height, hm, params.h_tol) <= tol:
            out.append(rect)
    return out


def target_candidates(b: ObservedBBox, size: TargetSize, hm: HeightMap,
                      params: BeliefParams) -> List[Rect]:
    """Placements of the known target footprint that contain its visible part."""
    base = _visible_rect(b)
    cx, cy, th, vw, vh = base
    slack_tol = 2.0 * hm.resolution
    scored = []
    for turn, (A, B) in enumerate(((size.w, size.h), (size.h, size.w))):
        if vw > A + slack_tol or vh > B + slack_tol:
            continue
        su, sv = max(0.0, A - vw), max(0.0, B - vh)
        us = _offsets(su / 2.0, params.growth_step)
        vs = _offsets(sv / 2.0, params.growth_step)
        c, s = math.cos(th), math.sin(th)
        for du in us:
            for dv in vs:
                rect = (cx + du * c - dv * s, cy + du * s + dv * c, th, A, B)
                if not _inside_workspace(rect, hm.workspace):
                    continue
                exp, level = _split_exposure(rect, base, b.top_height, hm, params.h_tol)
                if exp <= params.exposed_area_tol:
                    scored.append((exp - level, abs(du) + abs(dv), turn, du, dv, rect))
    if not scored:
        # visible part disagrees with the known size (e.g. merged segment)
        return [(cx, cy, th, size.w, size.h)]
    scored.sort(key=lambda t: t[:5])
    return [t[-1] for t in scored[: params.candidates_per_object]]


def hidden_target_candidates(obs: Observation, size: TargetSize, hm: HeightMap,
                             params: BeliefParams) -> List[Rect]:
    """Target placements fully covered by observed boxes (target not seen at all)."""
    scored = []
    for k, b in enumerate(obs.bboxes):
        if b.top_height < size.thickness + params.h_tol:
            continue
        cx, cy, th, _, _ = _visible_rect(b)
        for turn in (0.0, math.pi / 2):
            rect = (cx, cy, th + turn, size.w, size.h)
            if not _inside_workspace(rect, hm.workspace):
                continue
            rr, cc = _rect_pixels(rect, hm)
            exposed = float((hm.cells[rr, cc] < size.thickness + params.h_tol).sum()) * hm.resolution ** 2
            if exposed <= params.exposed_area_tol:
                scored.append((exposed, k, turn, rect))
    scored.sort(key=lambda t: t[:3])
    return [t[-1] for t in scored[: params.candidates_per_object]]


def _offsets(half: float, step: float) -> List[float]:
    """0, then +-step, +-2 step ... up to +-half (ends included)."""
    out = [0.0]
    k = 1
    while k * step < half - 1e-9:
        out += [k * step, -k * step]
        k += 1
    if half > 1e-9:
        out += [half, -half]
    return out


# --- combination ---------------------------------------------------------------

@dataclass
class _Slot:
    oid: int
    is_target: bool
    top: Optional[float]        # None = derived from support (hidden target)
    thickness: Optional[float]  # known for the target
    rects: List[Rect]


FRAGMENT = "fragment"


def _fragment_of(slot: _Slot, placed: List[ObjectState], params: BeliefParams) -> bool:
    """Whether the box is a stray piece of an already placed top surface.

    An object split by something lying across it shows up as several boxes
    at the same height.  A box that mostly sits on a placed object with that
    same top cannot be a separate object: the two would interpenetrate.
    """
    if slot.is_target or slot.top is None:
        return False
    probe = _rect_object(slot.rects[0], slot.oid)
    area = probe.w * probe.h
    return any(abs(o.top - slot.top) <= params.h_tol
               and objects_overlap_area(o, probe) >= params.fragment_overlap * area
               for o in placed)


def _place(slot: _Slot, rect: Rect, placed: List[ObjectState], params: BeliefParams) -> Optional[ObjectState]:
    """Put one candidate on top of the already placed (lower) objects, or None."""
    probe = _rect_object(rect, slot.oid)
    if slot.is_target and slot.top is not None:
        z = max(0.0, slot.top - slot.thickness)
        thick = slot.thickness
    else:
        limit = math.inf if slot.top is None else slot.top - params.min_thickness
        z = 0.0
        for o in placed:
            if o.top <= limit and o.top > z and objects_overlap_area(o, probe) > 1e-6:
                z = o.top
        thick = slot.thickness if slot.top is None else slot.top - z
        if thick <= 0:
            return None
    cand = ObjectState.create(slot.oid, rect[0], rect[1], z, rect[2], rect[3], rect[4], thick,
                              slot.is_target)
    for o in placed:
        if penetration_depth(o, cand) > EPS_PEN:
            return None
    if cand.z > 0 and not stable_at(placed + [cand], len(placed)):
        return None
    return cand


def _search(slots: List[_Slot], params: BeliefParams, rng: np.random.Generator,
            cap: int) -> Tuple[List[List[ObjectState]], bool]:
    """Depth-first enumeration of consistent piles; stops after ``cap`` results."""
    found: List[List[ObjectState]] = []

    def dfs(i: int, placed: List[ObjectState]) -> bool:
        if i == len(slots):
            found.append(list(placed))
            return len(found) >= cap
        if _fragment_of(slots[i], placed, params):
            return dfs(i + 1, placed)
        for rect in slots[i].rects:
            o = _place(slots[i], rect, placed, params)
            if o is None:
                continue
            placed.append(o)
            stop = dfs(i + 1, placed)
            placed.pop()
            if stop:
                return True
        return False

    complete = not dfs(0, [])
    return found, complete


def _sample(slots: List[_Slot], params: BeliefParams, rng: np.random.Generator,
            n: int, attempts: int) -> List[List[ObjectState]]:
    """Random descents (candidate order shuffled per level) for large hypothesis spaces."""
    seen = set()
    out = []
    for _ in range(attempts):
        placed: List[ObjectState] = []
        choice = []
        ok = True
        for slot in slots:
            if _fragment_of(slot, placed, params):
                choice.append(-1)
                continue
            order = rng.permutation(len(slot.rects))
            for k in order:
                o = _place(slot, slot.rects[k], placed, params)
                if o is not None:
                    placed.append(o)
                    choice.append(int(k))
                    break
            else:
                ok = False
                break
        if ok and tuple(choice) not in seen:
            seen.add(tuple(choice))
            out.append(placed)
            if len(out) >= n:
                break
    return out


def _slots_for(obs: Observation, hm: HeightMap, size: TargetSize, target_id: int,
               params: BeliefParams) -> List[_Slot]:
    ids = _assign_ids(obs, target_id)
    tb = obs.target_bbox(target_id)
    slots = []
    if tb is None:
        rects = hidden_target_candidates(obs, size, hm, params)
        slots.append(_Slot(target_id, True, None, size.thickness, rects))
    for b, oid in zip(obs.bboxes, ids):
        if b is tb:
            rects = target_candidates(b, size, hm, params)
            slots.append(_Slot(target_id, True, b.top_height, size.thickness, rects))
        else:
            slots.append(_Slot(oid, False, b.top_height, None, growth_candidates(b, hm, params)))
    # bottom-up: a hidden target first, then by observed top height; at equal
    # height the target and larger boxes go first so fragments find their owner
    slots.sort(key=lambda s: (-math.inf if s.top is None else s.top, not s.is_target,
                              -s.rects[0][3] * s.rects[0][4] if s.rects else 0.0, s.oid))
    return slots


def _assign_ids(obs: Observation, target_id: int) -> List[int]:
    """Object ids for the boxes: labelled boxes keep theirs, the rest count up from 0."""
    used = {b.object_id for b in obs.bboxes if b.object_id is not None} | {target_id}
    nxt = 0
    out = []
    for b in obs.bboxes:
        if b.object_id is not None:
            out.append(b.object_id)
            continue
        while nxt in used:
            nxt += 1
        out.append(nxt)
        used.add(nxt)
    return out


def _to_state(objs: List[ObjectState], workspace) -> ClutterState:
    target = [o for o in objs if o.is_target]
    rest = sorted((o for o in objs if not o.is_target), key=lambda o: o.id)
    return ClutterState(tuple(target + rest), tuple(workspace))


def enumerate_hypotheses(obs: Observation, hm: HeightMap, target_size: TargetSize,
                         target_id: int = 0, params: BeliefParams = BeliefParams()) -> Belief:
    """Consistent full-state hypotheses for one observation, uniformly weighted."""
    if not obs.bboxes:
        raise NoHypothesis("empty observation")
    rng = np.random.default_rng(params.seed)
    slots = _slots_for(obs, hm, target_size, target_id, params)
    if any(not s.rects for s in slots):
        raise NoHypothesis("an object has no admissible extent")
    piles, complete = _search(slots, params, rng, params.enumeration_cap)
    if not complete:
        log.info("hypothesis space exceeds %d piles; sampling", params.enumeration_cap)
        piles = _sample(slots, params, rng, params.max_particles, 50 * params.max_particles)
    if not piles:
        raise NoHypothesis("no combination of candidate extents is physically consistent")
    states = _reobserved(piles, obs, hm, params, rng)
    if not states:
        raise NoHypothesis("no consistent pile reproduces the observation")
    return Belief.uniform(states, obs)


def reproduces(o_new: Observation, o_ref: Observation, center_tol: float, h_tol: float) -> bool:
    """Same box count and a pairing with raw centers within ``center_tol`` and tops within ``h_tol``."""
    a, b = o_new.bboxes, o_ref.bboxes
    if len(a) != len(b):
        return False
    if not a:
        return True
    ca = np.array([x.raw[:2] for x in a])
    cb = np.array([x.raw[:2] for x in b])
    ta = np.array([x.top_height for x in a])
    tb = np.array([x.top_height for x in b])
    d = np.hypot(ca[:, None, 0] - cb[None, :, 0], ca[:, None, 1] - cb[None, :, 1])
    bad = ((d > center_tol) | (np.abs(ta[:, None] - tb[None, :]) > h_tol)).astype(float)
    rows, cols = linear_sum_assignment(bad)
    return bool(bad[rows, cols].sum() == 0)


def _reobserved(piles: List[List[ObjectState]], obs: Observation, hm: HeightMap,
                params: BeliefParams, rng: np.random.Generator) -> List[ClutterState]:
    """Up to ``max_particles`` piles (random order, seeded) whose rendering reproduces ``obs``."""
    sensing = SensingParams(resolution=hm.resolution, h_tol=params.h_tol)
    order = rng.permutation(len(piles)) if len(piles) > params.max_particles else range(len(piles))
    budget = params.reobserve_budget * params.max_particles
    kept = []
    for checked, k in enumerate(order):
        if checked >= budget or len(kept) >= params.max_particles:
            break
        state = _to_state(piles[k], hm.workspace)
        again, _ = observe_scene(state, sensing)
        if reproduces(again, obs, params.reobserve_tol, params.h_tol):
            kept.append((k, state))
    kept.sort(key=lambda t: t[0])
    return [s for _, s in kept]


def verbatim_belief(obs: Observation, target_size: TargetSize, target_id: int = 0,
                    workspace=(500.0, 400.0), min_thickness: float = 5.0) -> Belief:
    """Single particle taking every observed box at face value (fallback)."""
    ids = _assign_ids(obs, target_id)
    tb = obs.target_bbox(target_id)
    placed: List[ObjectState] = []
    items = sorted(zip(obs.bboxes, ids), key=lambda t: t[0].top_height)
    if tb is None:
        if obs.bboxes:
            b = max(obs.bboxes, key=lambda b: b.top_height)
            cx, cy, th, _, _ = _visible_rect(b)
        else:
            cx, cy, th = 0.0, 0.0, 0.0
        placed.append(ObjectState.create(target_id, cx, cy, 0.0, th, target_size.w, target_size.h,
                                         target_size.thickness, True))
    for b, oid in items:
        cx, cy, th, w, h = _visible_rect(b)
        if b is tb:
            z = max(0.0, b.top_height - target_size.thickness)
            placed.append(ObjectState.create(target_id, cx, cy, z, th, target_size.w,
                                             target_size.h, target_size.thickness, True))
            continue
        probe = _rect_object((cx, cy, th, w, h))
        z = 0.0
        for o in placed:
            if o.top <= b.top_height - min_thickness and o.top > z and objects_overlap_area(o, probe) > 1e-6:
                z = o.top
        placed.append(ObjectState.create(oid, cx, cy, z, th, max(w, 1.0), max(h, 1.0),
                                         max(b.top_height - z, min_thickness)))
    return Belief.uniform([_to_state(placed, workspace)], obs)


def greedy_belief(obs: Observation, hm: HeightMap, target_size: TargetSize, target_id: int = 0,
                  params: BeliefParams = BeliefParams()) -> Belief:
    """Single particle built bottom-up from each box's first usable extent.

    Where no extent is consistent the preferred one is forced into place, so
    hidden parts of the target still count as covered.
    """
    placed: List[ObjectState] = []
    for slot in _slots_for(obs, hm, target_size, target_id, params):
        if _fragment_of(slot, placed, params):
            continue
        if not slot.rects:
            raise NoHypothesis(f"object {slot.oid} has no admissible extent")
        o = next((c for c in (_place(slot, r, placed, params) for r in slot.rects) if c is not None), None)
        if o is None:
            o = _forced(slot, slot.rects[0], placed, params)
        placed.append(o)
    return Belief.uniform([_to_state(placed, hm.workspace)], obs)


def _forced(slot: _Slot, rect: Rect, placed: List[ObjectState], params: BeliefParams) -> ObjectState:
    """Place ``rect`` at the height the observation implies, ignoring contacts."""
    if slot.is_target and slot.top is not None:
        z, thick = max(0.0, slot.top - slot.thickness), slot.thickness
    else:
        probe = _rect_object(rect)
        limit = math.inf if slot.top is None else slot.top - params.min_thickness
        z = max([o.top for o in placed if o.top <= limit and objects_overlap_area(o, probe) > 1e-6],
                default=0.0)
        thick = slot.thickness if slot.top is None else max(slot.top - z, params.min_thickness)
    return ObjectState.create(slot.oid, rect[0], rect[1], z, rect[2], rect[3], rect[4], thick,
                              slot.is_target)


def estimate_belief(obs: Observation, hm: HeightMap, target_size: TargetSize, target_id: int = 0,
                    params: BeliefParams = BeliefParams()) -> Tuple[Belief, bool]:
    """Enumerate hypotheses, falling back to one greedy particle.  Returns (belief, fell_back)."""
    try:
        return enumerate_hypotheses(obs, hm, target_size, target_id, params), False
    except NoHypothesis as exc:
        log.info("falling back to a greedy belief: %s", exc)
    try:
        return greedy_belief(obs, hm, target_size, target_id, params), True
    except NoHypothesis as exc:
        log.info("falling back to verbatim belief: %s", exc)
        return verbatim_belief(obs, target_size, target_id, hm.workspace, params.min_thickness), True


# --- particle filter ---------------------------------------------------------------

def observations_match(o_pred: Observation, o_real: Observation, error_thresh: float) -> bool:
    """Equal box counts and a one-to-one pairing with every center distance <= threshold."""
    a, b = o_pred.bboxes, o_real.bboxes
    if len(a) != len(b):
        return False
    if not a:
        return True
    pa = np.array([x.center for x in a], dtype=float)
    pb = np.array([x.center for x in b], dtype=float)
    d = np.hypot(pa[:, None, 0] - pb[None, :, 0], pa[:, None, 1] - pb[None, :, 1])
    too_far = (d > error_thresh).astype(float)
    rows, cols = linear_sum_assignment(too_far)
    return bool(too_far[rows, cols].sum() == 0)


def filter_particles(b: Belief, executed, o_real: Observation, trans, error_thresh: float = 15.0,
                     seed: int = 0) -> Belief:
    """Propagate every particle through ``trans`` and keep those consistent with ``o_real``.

    ``trans.step(state, action, rng)`` must return an object with a
    ``next_state`` attribute.  Particle k uses the generator seeded with
    ``(seed, k)`` so the result does not depend on evaluation order.
    """
    if not b.particles:
        raise EmptyBelief("cannot filter an empty belief")
    survivors = []
    for k, p in enumerate(b.particles):
        rng = np.random.default_rng((seed, k))
        nxt = trans.step(p.state, executed, rng).next_state
        if observations_match(predict_observation(nxt), o_real, error_thresh):
            survivors.append(nxt)
    if not survivors:
        raise NoSurvivors(f"none of {len(b.particles)} particles explains the observation")
    return Belief.uniform(survivors, o_real)
