"""Rigid-rod state, force accumulation and semi-implicit Euler stepping.

A rod is a solid capsule: cylinder of length L plus hemispherical end
caps of radius r, axis along body z.  All functions are pure and generic
over scalar type (float / batched array / tape scalar).
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import FormatError, ModelError
from .vecmath import Quat, Vec3

ROD_SCALARS = 13  # p(3) + q(4) + v(3) + omega(3)


@dataclass(frozen=True)
class RodBody:
    """Geometry and mass of one rod; inertia derives from these."""

    mass: float
    length: float
    radius: float = 0.02

    def __post_init__(self):
        if self.mass <= 0 or self.length <= 0 or self.radius <= 0:
            raise ModelError("rod mass/length/radius must be positive")

    def inertia_coefficients(self):
        """(Ixx/m, Izz/m) of the solid capsule about its center."""
        L, r = self.length, self.radius
        vc = np.pi * r * r * L
        vs = (4.0 / 3.0) * np.pi * r ** 3
        fc = vc / (vc + vs)
        fs = vs / (vc + vs)
        czz = fc * 0.5 * r * r + fs * 0.4 * r * r
        cxx = (fc * (L * L / 12.0 + r * r / 4.0)
               + fs * (0.4 * r * r + L * L / 4.0 + 0.375 * L * r))
        return cxx, czz

    def endpoint_offsets(self):
        """Body-frame centers of the two cap spheres."""
        h = 0.5 * self.length
        return Vec3(0.0, 0.0, -h), Vec3(0.0, 0.0, h)


class RodState:
    """Pose and twist of one rod (world frame)."""

    __slots__ = ("p", "q", "v", "w")

    def __init__(self, p, q, v, w):
        self.p = p
        self.q = q
        self.v = v
        self.w = w

    @staticmethod
    def rest(p=None, q=None):
        return RodState(p or Vec3.zero(), q or Quat.identity(),
                        Vec3.zero(), Vec3.zero())


class Wrench:
    """Force and torque about a rod's center of mass, world frame."""

    __slots__ = ("f", "tau")

    def __init__(self, f=None, tau=None):
        self.f = f if f is not None else Vec3.zero()
        self.tau = tau if tau is not None else Vec3.zero()

    def add(self, f=None, tau=None):
        if f is not None:
            self.f = self.f + f
        if tau is not None:
            self.tau = self.tau + tau

    def add_force_at(self, f, arm):
        """Accumulate a force applied at CoM + arm."""
        self.f = self.f + f
        self.tau = self.tau + arm.cross(f)


class RobotState:
    """Ordered rod states plus one motor position per cable."""

    __slots__ = ("rods", "motors")

    def __init__(self, rods, motors):
        self.rods = list(rods)
        self.motors = list(motors)


def inertia_apply(body, mass, q, u, inverse=False):
    """I_world u (or its inverse) via body-frame diagonal inertia.

    ``mass`` may differ from ``body.mass`` when the rod mass is a
    learnable parameter.
    """
    if bool(np.any(np.asarray(ad.value_of(mass)) <= 0.0)):
        raise ModelError("singular inertia: non-positive mass")
    cxx, czz = body.inertia_coefficients()
    b = q.rotate_inv(u)
    if inverse:
        b = Vec3(b.x / (mass * cxx), b.y / (mass * cxx), b.z / (mass * czz))
    else:
        b = Vec3(b.x * (mass * cxx), b.y * (mass * cxx), b.z * (mass * czz))
    return q.rotate(b)


def accelerations(body, state, total, gravity, mass=None):
    """Linear and angular acceleration of one rod.

    a = f/m + g;  alpha = I_w^-1 (tau - omega x I_w omega).
    """
    m = body.mass if mass is None else mass
    inv_m = 1.0 / m
    a = total.f * inv_m + gravity
    iw = inertia_apply(body, m, state.q, state.w)
    gyro = state.w.cross(iw)
    alpha = inertia_apply(body, m, state.q, total.tau - gyro, inverse=True)
    return a, alpha


def integrate_semi_implicit(state, accel, alpha, dt):
    """Velocity first, then position with the new velocity."""
    v = state.v + accel * dt
    p = state.p + v * dt
    w = state.w + alpha * dt
    q = state.q.integrate(w, dt)
    return RodState(p, q, v, w)


# ---------------------------------------------------------------------
# flat packing (fixed layout: per rod p, q, v, omega; then motors)
# ---------------------------------------------------------------------

def state_dim(n_rods, n_cables):
    return n_rods * ROD_SCALARS + n_cables


def state_scalars(robot):
    """Flat list of the state's scalar components (tape nodes kept)."""
    out = []
    for r in robot.rods:
        out.extend((r.p.x, r.p.y, r.p.z, r.q.w, r.q.x, r.q.y, r.q.z,
                    r.v.x, r.v.y, r.v.z, r.w.x, r.w.y, r.w.z))
    out.extend(robot.motors)
    return out


def pack_state(robot):
    """Flatten to (..., D); batched components stack along the last axis."""
    cols = []
    for r in robot.rods:
        cols.extend(r.p.values())
        cols.extend(r.q.values())
        cols.extend(r.v.values())
        cols.extend(r.w.values())
    cols.extend(ad.value_of(m) for m in robot.motors)
    return np.stack([np.asarray(c, dtype=float) for c in cols], axis=-1)


def state_from_scalars(scalars, n_rods, n_cables):
    """Build a RobotState from a flat sequence of scalar-likes (used to
    seed tape leaves when differentiating through the state itself)."""
    if len(scalars) != state_dim(n_rods, n_cables):
        raise FormatError(
            f"got {len(scalars)} scalars, expected "
            f"{state_dim(n_rods, n_cables)}")
    rods = []
    for r in range(n_rods):
        o = r * ROD_SCALARS
        rods.append(RodState(
            Vec3(scalars[o], scalars[o + 1], scalars[o + 2]),
            Quat(scalars[o + 3], scalars[o + 4], scalars[o + 5],
                 scalars[o + 6]),
            Vec3(scalars[o + 7], scalars[o + 8], scalars[o + 9]),
            Vec3(scalars[o + 10], scalars[o + 11], scalars[o + 12]),
        ))
    base = n_rods * ROD_SCALARS
    return RobotState(rods, list(scalars[base:base + n_cables]))


def unpack_state(vec, n_rods, n_cables):
    """Inverse of :func:`pack_state`; accepts (D,) or (B, D)."""
    vec = np.asarray(vec, dtype=float)
    if vec.shape[-1] != state_dim(n_rods, n_cables):
        raise FormatError(
            f"state vector has {vec.shape[-1]} scalars, expected "
            f"{state_dim(n_rods, n_cables)}")

    def col(i):
        c = vec[..., i]
        return float(c) if c.ndim == 0 else c

    rods = []
    for r in range(n_rods):
        o = r * ROD_SCALARS
        rods.append(RodState(
            Vec3(col(o), col(o + 1), col(o + 2)),
            Quat(col(o + 3), col(o + 4), col(o + 5), col(o + 6)),
            Vec3(col(o + 7), col(o + 8), col(o + 9)),
            Vec3(col(o + 10), col(o + 11), col(o + 12)),
        ))
    base = n_rods * ROD_SCALARS
    motors = [col(base + i) for i in range(n_cables)]
    return RobotState(rods, motors)
