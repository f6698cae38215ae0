"""Static robot topology (rods + cables), cable forces and the reel motor.

Robot definitions are JSON data files (see ``tenseg/robots/``); nothing
about a specific robot is hard-coded here.
"""

import json
from dataclasses import dataclass, field
from importlib import resources
from typing import List, Tuple

import numpy as np

from . import autodiff as ad
from .dynamics import RobotState, RodBody, RodState, Wrench
from .errors import DegenerateCable, ModelError
from .vecmath import Quat, Vec3

MIN_REST_LENGTH = 1e-6


@dataclass(frozen=True)
class Cable:
    """One spring-damper cable anchored to two rods."""

    rod_a: int
    offset_a: Tuple[float, float, float]
    rod_b: int
    offset_b: Tuple[float, float, float]
    stiffness: float
    damping: float
    rest_length: float
    actuated: bool = True


@dataclass
class ActuatorParams:
    """Reel motor: per-step rate ``speed`` in (0,1) and meters of
    rest-length change per motor unit ``scale``."""

    speed: float = 0.001
    scale: float = 0.1


@dataclass
class RobotModel:
    """Immutable topology graph: rods, cables, anchors, gravity."""

    name: str
    bodies: List[RodBody]
    cables: List[Cable]
    gravity: Tuple[float, float, float]
    initial_poses: List[Tuple[Tuple[float, ...], Tuple[float, ...]]] \
        = field(default_factory=list)

    def __post_init__(self):
        n = len(self.bodies)
        for c in self.cables:
            if not (0 <= c.rod_a < n and 0 <= c.rod_b < n):
                raise ModelError("cable anchor references a missing rod")
            if c.rod_a == c.rod_b:
                raise ModelError("cable connects a rod to itself")

    @property
    def n_rods(self):
        return len(self.bodies)

    @property
    def n_cables(self):
        return len(self.cables)

    @property
    def actuated_indices(self):
        return [i for i, c in enumerate(self.cables) if c.actuated]

    @property
    def control_dim(self):
        return len(self.actuated_indices)

    @property
    def state_dim(self):
        return self.n_rods * 13 + self.n_cables

    def initial_state(self):
        rods = []
        for p, q in self.initial_poses:
            rods.append(RodState(Vec3(*p), Quat(*q),
                                 Vec3.zero(), Vec3.zero()))
        return RobotState(rods, [0.0] * self.n_cables)

    def gravity_vec(self, scale=1.0):
        gx, gy, gz = self.gravity
        return Vec3(gx * scale, gy * scale, gz * scale)


def load_robot(name_or_path):
    """Load a robot definition from a bundled name or a JSON path."""
    if str(name_or_path).endswith(".json"):
        with open(name_or_path) as fh:
            raw = json.load(fh)
    else:
        ref = resources.files("tenseg").joinpath(
            f"robots/{name_or_path}.json")
        raw = json.loads(ref.read_text())
    bodies = [RodBody(r["mass"], r["length"], r.get("radius", 0.02))
              for r in raw["rods"]]
    cables = [Cable(c["rod_a"], tuple(c["offset_a"]),
                    c["rod_b"], tuple(c["offset_b"]),
                    c["stiffness"], c["damping"], c["rest_length"],
                    bool(c.get("actuated", True)))
              for c in raw["cables"]]
    poses = [(tuple(r["position"]), tuple(r["quaternion"]))
             for r in raw["rods"]]
    return RobotModel(raw["name"], bodies, cables,
                      tuple(raw.get("gravity", (0.0, 0.0, -9.81))), poses)


# ---------------------------------------------------------------------
# actuator
# ---------------------------------------------------------------------

def step_motor(w_prev, u, speed):
    """w' = w + a (u - w); fixed point at w = u, contraction rate 1-a."""
    return w_prev + speed * (u - w_prev)


def effective_rest_length(w, rest_length, scale):
    """l_rest + b w, floored at MIN_REST_LENGTH."""
    return ad.maximum(rest_length + scale * w, MIN_REST_LENGTH)


def rest_length_degenerate(w, rest_length, scale):
    """True where the floor in :func:`effective_rest_length` engages."""
    raw = ad.value_of(rest_length) + ad.value_of(scale) * ad.value_of(w)
    return np.any(np.asarray(raw) <= MIN_REST_LENGTH)


# ---------------------------------------------------------------------
# cable forces
# ---------------------------------------------------------------------

def anchor_kinematics(rod_state, offset):
    """World position, velocity and torque arm of a body-frame anchor."""
    arm = rod_state.q.rotate(Vec3(*offset) if not isinstance(offset, Vec3)
                             else offset)
    pos = rod_state.p + arm
    vel = rod_state.v + rod_state.w.cross(arm)
    return pos, vel, arm


def cable_wrenches(model, state, rest_lengths, stiffness=None, damping=None):
    """Per-rod wrench contributions of all cables.

    Taut cables (l > l_rest) pull with T = k (l - l_rest) + c dl/dt,
    clamped at T >= 0; slack cables contribute nothing.  ``stiffness`` /
    ``damping`` override the per-cable file values (used when k, c are
    learnable scalars shared across cables).
    """
    wrenches = [Wrench() for _ in model.bodies]
    for i, cab in enumerate(model.cables):
        k = cab.stiffness if stiffness is None else stiffness
        c = cab.damping if damping is None else damping
        ra, rb = state.rods[cab.rod_a], state.rods[cab.rod_b]
        pa, va, arm_a = anchor_kinematics(ra, cab.offset_a)
        pb, vb, arm_b = anchor_kinematics(rb, cab.offset_b)
        d = pb - pa
        length = d.norm(eps=1e-18)
        if np.any(np.asarray(ad.value_of(length)) <= 1e-9):
            raise DegenerateCable(f"cable {i} collapsed to zero length")
        direction = d * (1.0 / length)
        ldot = (vb - va).dot(direction)
        l0 = rest_lengths[i]
        tension = ad.maximum(k * (length - l0) + c * ldot, 0.0)
        tension = ad.where(ad.value_of(length) > ad.value_of(l0),
                           tension, 0.0)
        f = direction * tension
        wrenches[cab.rod_a].add_force_at(f, arm_a)
        wrenches[cab.rod_b].add_force_at(-f, arm_b)
    return wrenches
