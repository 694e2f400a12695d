"""Scenario files: named piles with an optional per-seed pose jitter."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .world import ClutterState, ObjectState, invariant_violations, objects_overlap_area

SCHEMA_VERSION = 1


class ScenarioError(ValueError):
    pass


@dataclass
class Randomization:
    position_jitter_mm: float = 0.0
    rotation_jitter_rad: float = 0.0
    seed: int = 0
    max_attempts: int = 100


@dataclass
class Scenario:
    name: str
    objects: List[dict]
    target_index: int
    workspace: tuple = (500.0, 400.0)
    randomization: Optional[Randomization] = None
    description: str = ""

    def base_state(self) -> ClutterState:
        objs = []
        for i, d in enumerate(self.objects):
            objs.append(ObjectState.create(i, d["x"], d["y"], d["z"], d["theta"], d["w"], d["h"],
                                           d["thickness"], i == self.target_index))
        return ClutterState(tuple(objs), tuple(self.workspace))

    def state(self, seed: Optional[int] = None) -> ClutterState:
        """The pile, jittered for ``seed`` when the scenario asks for it.

        A jitter that leaves the pile unsettled is redrawn; after
        ``max_attempts`` failures the unjittered pile is used.
        """
        base = self.base_state()
        rnd = self.randomization
        if seed is None or rnd is None or (rnd.position_jitter_mm <= 0 and rnd.rotation_jitter_rad <= 0):
            return base
        rng = np.random.default_rng((rnd.seed, seed))
        for _ in range(rnd.max_attempts):
            cand = jittered(base, rng, rnd.position_jitter_mm, rnd.rotation_jitter_rad)
            if cand is not None:
                return cand
        return base

    def to_dict(self) -> dict:
        d = {"schema_version": SCHEMA_VERSION, "name": self.name, "description": self.description,
             "workspace": list(self.workspace), "target_index": self.target_index,
             "objects": self.objects}
        if self.randomization is not None:
            r = self.randomization
            d["randomization"] = {"position_jitter_mm": r.position_jitter_mm,
                                  "rotation_jitter_rad": r.rotation_jitter_rad, "seed": r.seed,
                                  "max_attempts": r.max_attempts}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        try:
            if d.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
                raise ScenarioError(f"unsupported schema_version {d.get('schema_version')}")
            objects = [{k: float(o[k]) for k in ("x", "y", "z", "theta", "w", "h", "thickness")}
                       for o in d["objects"]]
            ti = int(d["target_index"])
            if not 0 <= ti < len(objects):
                raise ScenarioError(f"target_index {ti} out of range")
            rnd = d.get("randomization")
            sc = cls(str(d["name"]), objects, ti, tuple(float(v) for v in d.get("workspace", (500, 400))),
                     Randomization(**rnd) if rnd else None, str(d.get("description", "")))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ScenarioError):
                raise
            raise ScenarioError(f"malformed scenario: {exc}") from exc
        try:
            problems = invariant_violations(sc.base_state())
        except ValueError as exc:
            raise ScenarioError(str(exc)) from exc
        if problems:
            raise ScenarioError(f"scenario {sc.name!r} is not a settled pile: {problems[0]}")
        return sc


def object_dict(o: ObjectState) -> dict:
    return {"x": o.x, "y": o.y, "z": o.z, "theta": o.theta, "w": o.w, "h": o.h,
            "thickness": o.thickness}


def from_state(name: str, s: ClutterState, description: str = "",
               randomization: Optional[Randomization] = None) -> Scenario:
    ordered = sorted(s.objects, key=lambda o: o.id)
    ti = next(k for k, o in enumerate(ordered) if o.is_target)
    return Scenario(name, [object_dict(o) for o in ordered], ti, tuple(s.workspace), randomization,
                    description)


def load_scenario(path) -> Scenario:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from exc
    return Scenario.from_dict(d)


def save_scenario(sc: Scenario, path) -> None:
    Path(path).write_text(json.dumps(sc.to_dict(), indent=2) + "\n")


def restack(objs: Sequence[ObjectState]) -> List[ObjectState]:
    """Drop boxes in the given order; each lands on the highest box under it."""
    placed: List[ObjectState] = []
    for o in objs:
        z = 0.0
        for p in placed:
            if objects_overlap_area(p, o) > 1e-6:
                z = max(z, p.top)
        placed.append(o.moved(o.x, o.y, z))
    return placed


def jittered(s: ClutterState, rng: np.random.Generator, pos: float, rot: float) -> Optional[ClutterState]:
    """Shift every box by a random offset and re-drop bottom-up; None if the pile is not settled."""
    order = sorted(s.objects, key=lambda o: (o.z, o.id))
    moved = []
    for o in order:
        dx, dy = rng.uniform(-pos, pos, 2)
        dth = rng.uniform(-rot, rot)
        moved.append(o.moved(o.x + dx, o.y + dy, o.z, math.fmod(o.theta + dth + math.pi, math.pi)))
    placed = restack(moved)
    cand = s.with_objects(sorted(placed, key=lambda o: o.id))
    # the same boxes must keep resting on the same boxes
    if [round(a.z, 6) == 0 for a in sorted(placed, key=lambda o: o.id)] != \
            [round(a.z, 6) == 0 for a in sorted(s.objects, key=lambda o: o.id)]:
        return None
    if invariant_violations(cand):
        return None
    return cand


def pattern_names() -> List[str]:
    root = resources.files("clutterpick") / "patterns"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_pattern(name: str) -> Scenario:
    root = resources.files("clutterpick") / "patterns"
    return Scenario.from_dict(json.loads((root / f"{name}.json").read_text()))
