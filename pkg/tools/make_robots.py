#!/usr/bin/env python3
"""Generate the bundled robot definition files.

Six-bar: expanded-octahedron layout (icosahedron vertices, struts on the
six "short" edges, the remaining 24 edges as cables).  Three-bar: a
standard 3-strut prism with a 150 degree twist; only the three saddle
cables are actuated.
"""

import json
import math
import os

import numpy as np

OUT = os.path.join(os.path.dirname(__file__), "..", "src", "tenseg", "robots")

ROD_LENGTH = 1.684
ROD_MASS = 10.0
ROD_RADIUS = 0.02
REST_LENGTH = 0.95
STIFFNESS = 10000.0
DAMPING = 1000.0


def quat_from_z_to(axis):
    """Quaternion rotating body z onto the given world axis."""
    z = np.array([0.0, 0.0, 1.0])
    a = np.asarray(axis) / np.linalg.norm(axis)
    c = float(np.dot(z, a))
    if c > 1.0 - 1e-12:
        return [1.0, 0.0, 0.0, 0.0]
    if c < -1.0 + 1e-12:
        return [0.0, 1.0, 0.0, 0.0]  # 180 deg about x
    ax = np.cross(z, a)
    ax /= np.linalg.norm(ax)
    half = 0.5 * math.acos(c)
    s = math.sin(half)
    return [math.cos(half), ax[0] * s, ax[1] * s, ax[2] * s]


def rods_from_segments(segments):
    rods, anchors = [], []
    for p0, p1 in segments:
        p0, p1 = np.asarray(p0), np.asarray(p1)
        center = 0.5 * (p0 + p1)
        axis = p1 - p0
        L = float(np.linalg.norm(axis))
        assert abs(L - ROD_LENGTH) < 1e-9, L
        rods.append({
            "mass": ROD_MASS, "length": ROD_LENGTH, "radius": ROD_RADIUS,
            "position": [round(x, 12) for x in center],
            "quaternion": [round(x, 12) for x in quat_from_z_to(axis)],
        })
        anchors.append((p0, p1))
    return rods, anchors


def cable_entries(vertex_pairs, anchors, actuated):
    """Map world-space vertex pairs to (rod, body-frame offset) anchors."""
    h = 0.5 * ROD_LENGTH
    entries = []
    for idx, (va, vb) in enumerate(vertex_pairs):
        ends = []
        for v in (va, vb):
            v = np.asarray(v)
            hit = None
            for r, (p0, p1) in enumerate(anchors):
                if np.linalg.norm(v - p0) < 1e-9:
                    hit = (r, [0.0, 0.0, -h])
                elif np.linalg.norm(v - p1) < 1e-9:
                    hit = (r, [0.0, 0.0, h])
                if hit:
                    break
            assert hit is not None, v
            ends.append(hit)
        (ra, oa), (rb, ob) = ends
        assert ra != rb
        entries.append({
            "rod_a": ra, "offset_a": oa, "rod_b": rb, "offset_b": ob,
            "stiffness": STIFFNESS, "damping": DAMPING,
            "rest_length": REST_LENGTH,
            "actuated": bool(actuated(idx)),
        })
    return entries


def make_sixbar():
    # Expanded octahedron: three orthogonal pairs of parallel struts,
    # each pair offset by d from its axis plane.  Uniform cable tension
    # balances every strut exactly when d = h/2 (strut:cable = 1.633).
    h = ROD_LENGTH / 2.0
    d = h / 2.0
    struts = []
    for sign in (1.0, -1.0):
        struts.append(((-h, sign * d, 0.0), (h, sign * d, 0.0)))
        struts.append(((0.0, -h, sign * d), (0.0, h, sign * d)))
        struts.append(((sign * d, 0.0, -h), (sign * d, 0.0, h)))
    verts = [np.asarray(p) for seg in struts for p in seg]
    cable_len = h * math.sqrt(1.5)
    cables = []
    for i in range(len(verts)):
        for j in range(i + 1, len(verts)):
            if abs(np.linalg.norm(verts[i] - verts[j]) - cable_len) < 1e-9:
                cables.append((verts[i], verts[j]))
    assert len(cables) == 24
    rods, anchors = rods_from_segments(struts)
    entries = cable_entries(cables, anchors, actuated=lambda _i: True)
    return {"name": "sixbar", "gravity": [0.0, 0.0, -9.81],
            "rods": rods, "cables": entries}


def make_threebar():
    R = 0.7
    twist = math.radians(150.0)
    chord = 2.0 * R * math.sin(0.5 * twist)
    h = math.sqrt(ROD_LENGTH ** 2 - chord ** 2)
    bottom = [np.array([R * math.cos(2 * math.pi * i / 3),
                        R * math.sin(2 * math.pi * i / 3), 0.0])
              for i in range(3)]
    top = [np.array([R * math.cos(2 * math.pi * i / 3 + twist),
                     R * math.sin(2 * math.pi * i / 3 + twist), h])
           for i in range(3)]
    segments = [(bottom[i], top[i]) for i in range(3)]
    rods, anchors = rods_from_segments(segments)
    vertex_pairs = []
    for i in range(3):  # bottom triangle
        vertex_pairs.append((bottom[i], bottom[(i + 1) % 3]))
    for i in range(3):  # top triangle
        vertex_pairs.append((top[i], top[(i + 1) % 3]))
    for i in range(3):  # saddle cables (the actuated ones)
        vertex_pairs.append((top[i], bottom[(i + 1) % 3]))
    entries = cable_entries(vertex_pairs, anchors,
                            actuated=lambda i: i >= 6)
    return {"name": "threebar", "gravity": [0.0, 0.0, -9.81],
            "rods": rods, "cables": entries}


def main():
    os.makedirs(OUT, exist_ok=True)
    for spec in (make_sixbar(), make_threebar()):
        path = os.path.join(OUT, spec["name"] + ".json")
        with open(path, "w") as fh:
            json.dump(spec, fh, indent=1)
            fh.write("\n")
        print("wrote", path, f"({len(spec['rods'])} rods,",
              f"{len(spec['cables'])} cables)")


if __name__ == "__main__":
    main()
