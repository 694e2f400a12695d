"""Rebuild the ten shipped pile patterns.

Each pattern is an approximate re-creation of a qualitative layout.  Boxes are listed in
drop order as (x, y, theta, w, h, thickness) and each lands on the highest
box below it.  Run from the repository root:

    python scripts/make_patterns.py
"""

import math
import sys
from pathlib import Path

from clutterpick.scenario import Randomization, from_state, restack, save_scenario
from clutterpick.world import ClutterState, ObjectState, invariant_violations

T = "target"
D = math.radians

# name -> (description, [(x, y, theta, w, h, thickness, tag)])
PATTERNS = {
    "pattern01": (
        "Target on the table; a plank resting mostly on a neighbouring block covers its "
        "right edge, and a small box sits on the plank.",
        [(0, 0, 0, 70, 50, 30, T), (80, 0, 0, 60, 60, 30, None),
         (62, 0, 0, 110, 60, 15, None), (78, 0, D(30), 50, 40, 20, None)]),
    "pattern02": (
        "Target on the table between two blocks; a plank from each block covers one end "
        "of the target and a box rests on the left plank.",
        [(0, 0, 0, 70, 50, 30, T), (-80, 0, 0, 60, 60, 30, None), (80, 0, 0, 60, 60, 30, None),
         (-62, 0, 0, 100, 60, 15, None), (62, 0, 0, 100, 60, 15, None),
         (-78, 0, D(60), 45, 40, 20, None)]),
    "pattern03": (
        "Target stacked on a wide base box with a small box resting on the target alone.",
        [(0, 0, 0, 120, 90, 30, None), (0, 0, D(15), 70, 50, 25, T),
         (5, 5, D(40), 55, 45, 20, None)]),
    "pattern04": (
        "Target bridging two base boxes; a plank from a tall pillar covers part of it "
        "and carries another box.",
        [(-35, 0, 0, 60, 80, 30, None), (35, 0, 0, 60, 80, 30, None),
         (0, 0, D(90), 70, 50, 25, T), (0, 80, 0, 70, 60, 55, None),
         (0, 55, D(90), 90, 60, 15, None), (0, 75, D(20), 45, 40, 20, None)]),
    "pattern05": (
        "Target on a base box with a single obstacle box right on top of it.",
        [(0, 0, 0, 110, 80, 25, None), (0, 0, 0, 70, 50, 30, T),
         (0, 0, D(20), 60, 45, 25, None)]),
    "pattern06": (
        "Target on the table; a box resting on the target and a block covers half of it, "
        "with a second box stacked above.",
        [(0, 0, 0, 70, 50, 30, T), (70, 0, 0, 60, 70, 30, None),
         (52, 0, 0, 90, 65, 20, None), (60, 0, D(45), 50, 45, 20, None)]),
    "pattern07": (
        "Target on the table covered from two sides: a plank from a block on its right "
        "and a plank from a block behind it, plus a box on the right plank.",
        [(0, 0, 0, 70, 50, 30, T), (85, 0, 0, 60, 60, 30, None), (0, 75, D(90), 60, 80, 30, None),
         (65, 0, 0, 110, 60, 15, None), (-15, 55, D(90), 100, 30, 15, None),
         (85, 0, D(20), 50, 40, 20, None)]),
    "pattern08": (
        "Target on the table flanked by blocks on two sides; a flat box resting on a "
        "block covers one corner and a small box sits on top.",
        [(0, 0, 0, 70, 50, 30, T), (0, 60, 0, 80, 50, 35, None),
         (-70, 0, D(90), 120, 50, 35, None), (-40, 40, D(45), 70, 60, 15, None),
         (-50, 45, 0, 40, 40, 20, None)]),
    "pattern09": (
        "Target on the table under a wide box resting on it and a block; the wide box can "
        "only be gripped across its short side.",
        [(0, 0, 0, 70, 50, 30, T), (130, 0, 0, 60, 80, 30, None),
         (65, 0, 0, 160, 90, 20, None)]),
    "pattern10": (
        "Target on the table under a large box too wide to grip in either direction.",
        [(0, 0, 0, 70, 50, 30, T), (-140, 0, 0, 60, 80, 30, None),
         (-65, 0, 0, 160, 150, 15, None)]),
}


def build(layout):
    objs = []
    for k, (x, y, th, w, h, t, tag) in enumerate(layout):
        objs.append(ObjectState.create(k, x, y, 0.0, th % math.pi, w, h, t, tag == T))
    placed = restack(objs)
    # the target gets id 0 so scenarios and traces read the same way
    order = sorted(placed, key=lambda o: (not o.is_target, o.id))
    renum = [ObjectState.create(i, o.x, o.y, o.z, o.theta, o.w, o.h, o.thickness, o.is_target)
             for i, o in enumerate(order)]
    return ClutterState(tuple(renum))


def main(out_dir="src/clutterpick/patterns"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ok = True
    for name, (desc, layout) in PATTERNS.items():
        s = build(layout)
        problems = invariant_violations(s)
        if problems:
            print(f"{name}: {problems}", file=sys.stderr)
            ok = False
            continue
        sc = from_state(name, s, desc, Randomization(3.0, 0.03, seed=int(name[-2:])))
        save_scenario(sc, out / f"{name}.json")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main(*sys.argv[1:]))
