"""Collision detection and the learnable collision response.

The response is three linear models with five learnable scalars (bias,
restitution, slide damping, friction coefficient, twist damping), plus
an optional residual MLP operating on 29 contact-frame features.

Detection produces a fixed list of candidate contact slots (two cap
spheres per rod against the ground plane, one slot per rod pair); each
slot carries an ``active`` mask so the same code path works for single
states and batches.  Inactive slots contribute exactly zero force and
zero gradient.
"""

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from . import autodiff as ad
from .dynamics import Wrench, inertia_apply
from .errors import NumericalFault
from .vecmath import Vec3

GROUND = -1


class ContactState:
    """One candidate contact between body_a and body_b (-1 = ground)."""

    __slots__ = ("key", "body_a", "body_b", "point", "depth", "normal",
                 "vel", "arm_a", "arm_b", "active", "steps_in_contact")

    def __init__(self, key, body_a, body_b, point, depth, normal, vel,
                 arm_a, arm_b, active, steps_in_contact=0):
        self.key = key
        self.body_a = body_a
        self.body_b = body_b
        self.point = point
        self.depth = depth          # >= 0 when penetrating
        self.normal = normal        # unit, from body_b toward body_a
        self.vel = vel              # relative velocity of a w.r.t. b at point
        self.arm_a = arm_a
        self.arm_b = arm_b
        self.active = active        # raw bool / bool array
        self.steps_in_contact = steps_in_contact

    @property
    def any_active(self):
        return bool(np.any(self.active))


class InteractionGraph:
    """Per-rollout dynamic contact bookkeeping.

    Tracks, per contact slot, how many consecutive steps the pair has
    stayed in contact; the counter resets on separation.
    """

    def __init__(self):
        self.counters: Dict[tuple, object] = {}

    def advance(self, contacts):
        """Update counters from this step's active masks (call once per
        simulation step, after detection)."""
        for c in contacts:
            prev = self.counters.get(c.key, 0)
            self.counters[c.key] = np.where(c.active, prev + 1, 0) \
                if isinstance(c.active, np.ndarray) \
                else (prev + 1 if c.active else 0)

    def steps_in_contact(self, key):
        return self.counters.get(key, 0)


@dataclass
class ContactConfig:
    """Response-model wiring: pure linear, linear+residual or MLP-only."""

    mode: str = "linear"  # linear | residual | mlp_only
    mlp: Optional["ResidualMlp"] = None


# ---------------------------------------------------------------------
# detection
# ---------------------------------------------------------------------

def _segment_closest(p1, d1, p2, d2):
    """Closest-point parameters (s, t) in [0,1] of two segments
    p1 + s d1 and p2 + t d2 (Ericson-style, branch-free via masks)."""
    r = p1 - p2
    a = d1.dot(d1)
    e = d2.dot(d2)
    b = d1.dot(d2)
    c = d1.dot(r)
    f = d2.dot(r)
    denom = a * e - b * b
    parallel = ad.value_of(denom) < 1e-12
    denom_safe = ad.maximum(denom, 1e-12)
    s = ad.clip(ad.where(parallel, 0.0, (b * f - c * e) / denom_safe),
                0.0, 1.0)
    t = ad.clip((b * s + f) / e, 0.0, 1.0)
    s = ad.clip((b * t - c) / a, 0.0, 1.0)
    return s, t


def _rod_endpoint(body, rod, sign):
    off = Vec3(0.0, 0.0, sign * 0.5 * body.length)
    arm = rod.q.rotate(off)
    return rod.p + arm


def point_velocity(rod, arm):
    return rod.v + rod.w.cross(arm)


def detect(model, state, ground=True, rod_pairs=True):
    """All candidate contacts of the robot: cap spheres vs ground plane
    (z=0) and capsule-capsule per rod pair."""
    contacts = []
    up = Vec3(0.0, 0.0, 1.0)
    if ground:
        for i, body in enumerate(model.bodies):
            rod = state.rods[i]
            for sign in (-1.0, 1.0):
                center = _rod_endpoint(body, rod, sign)
                depth = body.radius - center.z
                point = center - up * body.radius
                arm = point - rod.p
                contacts.append(ContactState(
                    key=("ground", i, int(sign > 0)),
                    body_a=i, body_b=GROUND,
                    point=point, depth=depth, normal=up,
                    vel=point_velocity(rod, arm),
                    arm_a=arm, arm_b=point,
                    active=ad.value_of(depth) > 0.0))
    if rod_pairs:
        n = len(model.bodies)
        for i in range(n):
            for j in range(i + 1, n):
                bi, bj = model.bodies[i], model.bodies[j]
                ri, rj = state.rods[i], state.rods[j]
                # broad phase on raw values: bounding spheres apart
                reach = (0.5 * (bi.length + bj.length)
                         + bi.radius + bj.radius)
                gap2 = sum((np.asarray(ad.value_of(a)) -
                            np.asarray(ad.value_of(b))) ** 2
                           for a, b in zip((ri.p.x, ri.p.y, ri.p.z),
                                           (rj.p.x, rj.p.y, rj.p.z)))
                if not np.any(gap2 < reach * reach):
                    continue
                ai = _rod_endpoint(bi, ri, -1.0)
                di = _rod_endpoint(bi, ri, 1.0) - ai
                aj = _rod_endpoint(bj, rj, -1.0)
                dj = _rod_endpoint(bj, rj, 1.0) - aj
                s, t = _segment_closest(ai, di, aj, dj)
                ci = ai + di * s
                cj = aj + dj * t
                delta = ci - cj
                dist = delta.norm(eps=1e-18)
                depth = (bi.radius + bj.radius) - dist
                normal = delta * (1.0 / ad.maximum(dist, 1e-9))
                point = cj + delta * 0.5
                arm_i = point - ri.p
                arm_j = point - rj.p
                vel = point_velocity(ri, arm_i) - point_velocity(rj, arm_j)
                contacts.append(ContactState(
                    key=("pair", i, j),
                    body_a=i, body_b=j,
                    point=point, depth=depth, normal=normal,
                    vel=vel, arm_a=arm_i, arm_b=arm_j,
                    active=ad.value_of(depth) > 0.0))
    return contacts


# ---------------------------------------------------------------------
# linear response models
# ---------------------------------------------------------------------

def _angular_denominator(body, rod, mass, arm, direction):
    """((I^-1 (arm x dir)) x arm) . dir for one finite body."""
    axis = arm.cross(direction)
    return inertia_apply(body, mass, rod.q, axis, inverse=True) \
        .cross(arm).dot(direction)


def _denominator(c, model, state, mass, direction):
    inv = 0.0
    if c.body_a != GROUND:
        inv = inv + 1.0 / mass + _angular_denominator(
            model.bodies[c.body_a], state.rods[c.body_a], mass,
            c.arm_a, direction)
    if c.body_b != GROUND:
        inv = inv + 1.0 / mass + _angular_denominator(
            model.bodies[c.body_b], state.rods[c.body_b], mass,
            c.arm_b, direction)
    return inv


def reaction_force(c, model, state, mass, bias, restitution, dt):
    """Normal reaction magnitude (force units), clamped non-negative.

    Bias pushes out a ``bias`` fraction of the penetration per step
    (Baumgarte-style); restitution in (-1, 1) sets the post-step normal
    velocity to -e times the pre-step one.
    """
    vn = c.vel.dot(c.normal)
    denom = _denominator(c, model, state, mass, c.normal)
    if np.any(np.asarray(ad.value_of(denom)) <= 1e-12):
        raise NumericalFault("contact denominator collapsed")
    j = (bias * c.depth / (dt * dt)
         - (1.0 + restitution) * vn / dt) / denom
    return ad.where(c.active, ad.maximum(j, 0.0), 0.0)


def sliding_force(c, model, state, mass, slide_damping, friction,
                  reaction, dt):
    """Tangential friction force vector (Coulomb-clamped)."""
    vn = c.vel.dot(c.normal)
    v_tan = c.vel - c.normal * vn
    speed = v_tan.norm(eps=1e-18)
    moving = np.asarray(ad.value_of(speed)) > 1e-9
    t_dir = v_tan * (-1.0 / ad.maximum(speed, 1e-9))
    denom = _denominator(c, model, state, mass, t_dir)
    k = (1.0 - slide_damping) * speed / dt / ad.maximum(denom, 1e-12)
    mag = ad.minimum(k, friction * reaction)
    mag = ad.where(np.logical_and(moving, c.active), mag, 0.0)
    return t_dir * mag


def twist_torque(body, rod, mass, twist_damping, dt):
    """Torque about the rod's own axis so that the post-step axial spin
    is ``twist_damping`` times the pre-step one."""
    z = rod.q.rotate(Vec3(0.0, 0.0, 1.0))
    spin = rod.w.dot(z)
    target = z * spin
    return inertia_apply(body, mass, rod.q, target) \
        * ((twist_damping - 1.0) / dt)


# ---------------------------------------------------------------------
# contact frame & residual MLP
# ---------------------------------------------------------------------

def tangent_basis(normal):
    """Right-handed orthonormal (t1, t2, n); t1 built from the world
    axis most orthogonal to n (deterministic, non-differentiated pick)."""
    nx, ny, nz = (np.abs(np.asarray(v)) for v in normal.values())
    use_x = np.logical_and(nx <= ny, nx <= nz)
    use_y = np.logical_and(~use_x, ny <= nz)
    ax = use_x.astype(float)
    ay = use_y.astype(float)
    az = 1.0 - ax - ay
    helper = Vec3(ax if ax.ndim else float(ax),
                  ay if ay.ndim else float(ay),
                  az if az.ndim else float(az))
    t1 = helper.cross(normal)
    t1 = t1 * (1.0 / t1.norm(eps=1e-18))
    t2 = normal.cross(t1)
    return t1, t2


def _to_frame(v, t1, t2, n):
    return (v.dot(t1), v.dot(t2), v.dot(n))


def mlp_features(c, state):
    """29 contact-frame features: steps-in-contact, depth, then nine
    3-vectors (relative velocity, both torque arms, their crosses with
    the normal, both rod axes, both angular velocities)."""
    t1, t2 = tangent_basis(c.normal)
    n = c.normal
    rod_a = state.rods[c.body_a]
    z_a = rod_a.q.rotate(Vec3(0.0, 0.0, 1.0))
    w_a = rod_a.w
    if c.body_b == GROUND:
        z_b = Vec3(0.0, 0.0, 1.0)
        w_b = Vec3.zero()
    else:
        rod_b = state.rods[c.body_b]
        z_b = rod_b.q.rotate(Vec3(0.0, 0.0, 1.0))
        w_b = rod_b.w
    feats = [c.steps_in_contact * 1.0, c.depth]
    for vec in (c.vel, c.arm_a, c.arm_b, c.arm_a.cross(n),
                c.arm_b.cross(n), z_a, z_b, w_a, w_b):
        feats.extend(_to_frame(vec, t1, t2, n))
    return feats, (t1, t2, n)


class ResidualMlp:
    """29 -> 100 -> 100 -> 9 network predicting contact-frame residual
    force (3) and per-body torques (3 + 3); output layer starts at zero
    so the residual vanishes before training."""

    N_IN = 29
    N_HIDDEN = 100
    N_OUT = 9

    def __init__(self, seed=0, output_scale=100.0):
        rng = np.random.default_rng(seed)
        self.output_scale = output_scale
        self.weights = [
            rng.normal(0.0, 1.0 / np.sqrt(self.N_IN),
                       (self.N_HIDDEN, self.N_IN)),
            rng.normal(0.0, 1.0 / np.sqrt(self.N_HIDDEN),
                       (self.N_HIDDEN, self.N_HIDDEN)),
            np.zeros((self.N_OUT, self.N_HIDDEN)),
        ]
        self.biases = [np.zeros(self.N_HIDDEN), np.zeros(self.N_HIDDEN),
                       np.zeros(self.N_OUT)]
        self.zero_grads()

    def zero_grads(self):
        self.weight_grads = [np.zeros_like(w) for w in self.weights]
        self.bias_grads = [np.zeros_like(b) for b in self.biases]

    def parameters(self):
        return list(self.weights) + list(self.biases)

    def gradients(self):
        return list(self.weight_grads) + list(self.bias_grads)

    def forward(self, features, train=False, tape=None):
        """Nine output scalars; ``train`` wires gradient accumulation."""
        h = features
        for layer in range(3):
            wg = self.weight_grads[layer] if train else None
            bg = self.bias_grads[layer] if train else None
            h = ad.affine(h, self.weights[layer], self.biases[layer],
                          wg, bg, tape=tape if train else None)
            if layer < 2:
                h = [ad.tanh(x) for x in h]
        return [x * self.output_scale for x in h]

    def state_dict(self):
        return {"output_scale": self.output_scale,
                "weights": [w.tolist() for w in self.weights],
                "biases": [b.tolist() for b in self.biases]}

    @classmethod
    def from_state_dict(cls, d):
        mlp = cls(output_scale=d.get("output_scale", 100.0))
        mlp.weights = [np.asarray(w, dtype=float) for w in d["weights"]]
        mlp.biases = [np.asarray(b, dtype=float) for b in d["biases"]]
        mlp.zero_grads()
        return mlp


# ---------------------------------------------------------------------
# full response
# ---------------------------------------------------------------------

def respond(contacts, model, state, mass, params, dt,
            config=None, train_mlp=False, tape=None):
    """Sum reaction, sliding and twist contributions (plus the optional
    MLP residual) into per-rod wrenches.  Each contact is resolved
    independently; twist damping applies once per rod in contact."""
    config = config or ContactConfig()
    wrenches = [Wrench() for _ in model.bodies]
    rod_in_contact = [None] * len(model.bodies)

    for c in contacts:
        if not c.any_active:
            continue
        if config.mode != "mlp_only":
            j = reaction_force(c, model, state, mass,
                               params["contact_bias"],
                               params["restitution"], dt)
            f_s = sliding_force(c, model, state, mass,
                                params["slide_damping"],
                                params["friction"], j, dt)
            f = c.normal * j + f_s
            wrenches[c.body_a].add_force_at(f, c.arm_a)
            if c.body_b != GROUND:
                wrenches[c.body_b].add_force_at(-f, c.arm_b)
        if config.mode in ("residual", "mlp_only") and config.mlp is not None:
            feats, (t1, t2, n) = mlp_features(c, state)
            out = config.mlp.forward(feats, train=train_mlp, tape=tape)

            def world(triple):
                return (t1 * triple[0] + t2 * triple[1] + n * triple[2])

            mask = c.active
            f_res = world(out[0:3])
            tau_a = world(out[3:6])
            tau_b = world(out[6:9])
            f_res = Vec3(*(ad.where(mask, comp, 0.0)
                           for comp in (f_res.x, f_res.y, f_res.z)))
            wrenches[c.body_a].add(f=f_res,
                                   tau=Vec3(*(ad.where(mask, t, 0.0)
                                              for t in (tau_a.x, tau_a.y,
                                                        tau_a.z))))
            if c.body_b != GROUND:
                wrenches[c.body_b].add(
                    f=-f_res,
                    tau=Vec3(*(ad.where(mask, t, 0.0)
                               for t in (tau_b.x, tau_b.y, tau_b.z))))
        for b in (c.body_a, c.body_b):
            if b != GROUND:
                prev = rod_in_contact[b]
                rod_in_contact[b] = c.active if prev is None \
                    else np.logical_or(prev, c.active)

    if config.mode != "mlp_only":
        for i, active in enumerate(rod_in_contact):
            if active is None or not np.any(active):
                continue
            tau = twist_torque(model.bodies[i], state.rods[i], mass,
                               params["twist_damping"], dt)
            wrenches[i].add(tau=Vec3(
                ad.where(active, tau.x, 0.0),
                ad.where(active, tau.y, 0.0),
                ad.where(active, tau.z, 0.0)))
    return wrenches
