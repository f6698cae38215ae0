"""Hidden-parameter reference simulator used only through sampling.

Deliberately different physics from the learnable engine: contact is a
Kelvin-Voigt penalty with smooth regularized Coulomb friction (plus
torsional/rolling analogs), the reel motor is a continuous first-order
low-pass, and contact-heavy scenarios integrate with 4 substeps per
1 ms step.  Non-contact code paths (rods, cables) are shared with the
learnable engine; contact code here is intentionally disjoint from
:mod:`tenseg.contact`.

The contact coefficients are sealed: experiment code gets trajectories,
never parameters.  Test code may call :meth:`unseal_for_testing`.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (RobotState, RodState, Wrench, accelerations,
                       integrate_semi_implicit, pack_state, unpack_state)
from .engine import DIVERGENCE_LIMIT, com_velocity
from .errors import DegenerateCable, DivergenceFault, UsageError
from .robot import cable_wrenches, load_robot
from .trajectory import Trajectory
from .vecmath import Vec3


@dataclass(frozen=True)
class _HiddenContactParams:
    """Sealed coefficients of the reference contact model."""

    penalty_stiffness: float = 1.0e5
    penalty_damping: float = 1.0e6
    friction: float = 0.9
    friction_smoothing: float = 1e-3    # m/s, tanh regularization knee
    normal_margin: float = 1.0          # slope caps: one explicit substep
                                        # may remove at most this fraction
                                        # of the velocity it damps


@dataclass
class GroundTruthConfig:
    """Public knobs of the reference simulator."""

    robot: str = "sixbar"
    dt: float = 0.001
    control_interval: int = 100         # steps per control update
    control_range: tuple = (-100.0, 100.0)
    gravity_scale: float = 1.0
    substeps: int = 4                   # used on contact-capable scenarios
    motor_time_constant: float = 1.0    # s, activation low-pass
    motor_scale: float = 0.001          # m of rest length per unit activation
    hang_height: float = 4.0            # extra CoM height for hang scenario
    hang_fixed_rod: int = 0


def penalty_normal_force(depth, normal_velocity, hidden, damping=None):
    """Kelvin-Voigt penalty magnitude, clamped non-adhesive (>= 0).

    ``damping`` overrides the nominal coefficient (the engine caps it
    per contact so the viscous substep stays contractive).
    """
    b = hidden.penalty_damping if damping is None else damping
    return np.maximum(hidden.penalty_stiffness * depth
                      - b * normal_velocity, 0.0)


_SETTLE_CACHE = {}


class GroundTruthEngine:
    """Reference simulator for one robot; pure given (config, seed)."""

    def __init__(self, config=None):
        self.config = config or GroundTruthConfig()
        self.model = load_robot(self.config.robot)
        self._hidden = _HiddenContactParams()
        cfg = self.config
        self.motor_rate = 1.0 - math.exp(-cfg.dt / cfg.motor_time_constant)
        self._fast = _FastTopology(self.model)
        self.step_log = {}              # purpose -> ground-truth steps taken
        self._settled = {}              # gravity_scale -> RobotState packed
        self._settle_charged = set()    # cache keys already in step_log

    def unseal_for_testing(self):
        """Hidden contact coefficients; for this module's tests only."""
        return self._hidden

    def _count(self, purpose, n):
        self.step_log[purpose] = self.step_log.get(purpose, 0) + int(n)

    def total_steps(self):
        return sum(self.step_log.values())

    # -----------------------------------------------------------------
    # contact forces (penalty model, numpy-generic)
    # -----------------------------------------------------------------

    def _contact_wrenches(self, state, h):
        model = self.model
        wrenches = [Wrench() for _ in model.bodies]
        for i, body in enumerate(model.bodies):
            rod = state.rods[i]
            for sign in (-1.0, 1.0):
                arm = rod.q.rotate(Vec3(0.0, 0.0, sign * 0.5 * body.length))
                center = rod.p + arm
                depth = body.radius - center.z
                self._apply_penalty(wrenches, state, i, None,
                                    depth, Vec3(0.0, 0.0, 1.0),
                                    arm + Vec3(0.0, 0.0, -body.radius),
                                    None, h)
        n = len(model.bodies)
        for i in range(n):
            for j in range(i + 1, n):
                bi, bj = model.bodies[i], model.bodies[j]
                ri, rj = state.rods[i], state.rods[j]
                reach = 0.5 * (bi.length + bj.length) + bi.radius + bj.radius
                gap2 = sum((np.asarray(a) - np.asarray(b)) ** 2
                           for a, b in zip(ri.p.values(), rj.p.values()))
                if not np.any(gap2 < reach * reach):
                    continue
                ai = ri.p + ri.q.rotate(Vec3(0, 0, -0.5 * bi.length))
                di = ri.q.rotate(Vec3(0, 0, bi.length))
                aj = rj.p + rj.q.rotate(Vec3(0, 0, -0.5 * bj.length))
                dj = rj.q.rotate(Vec3(0, 0, bj.length))
                s, t = _segment_closest_np(ai, di, aj, dj)
                ci = ai + di * s
                cj = aj + dj * t
                delta = ci - cj
                dist = np.sqrt(np.maximum(delta.dot(delta), 1e-18))
                depth = (bi.radius + bj.radius) - dist
                normal = delta * (1.0 / np.maximum(dist, 1e-9))
                point = cj + delta * 0.5
                self._apply_penalty(wrenches, state, i, j,
                                    depth, normal,
                                    point - ri.p, point - rj.p, h)
        return wrenches

    def _apply_penalty(self, wrenches, state, a, b, depth, normal,
                       arm_a, arm_b, h):
        hid = self._hidden
        active = np.asarray(depth) > 0.0
        if not np.any(active):
            return
        body_a = self.model.bodies[a]
        rod_a = state.rods[a]
        v_a = rod_a.v + rod_a.w.cross(arm_a)
        if b is None:
            vel = v_a
        else:
            rod_b = state.rods[b]
            vel = v_a - (rod_b.v + rod_b.w.cross(arm_b))
        vn = vel.dot(normal)
        # cap the viscous slope with the contact point's effective mass
        # along the normal, so one substep removes at most
        # ``normal_margin`` of the approach velocity (contractive)
        inv_meff = _point_inverse_mass(body_a, rod_a, arm_a, normal)
        if b is not None:
            inv_meff = inv_meff + _point_inverse_mass(
                self.model.bodies[b], state.rods[b], arm_b, normal)
        b_eff = np.minimum(hid.penalty_damping,
                           hid.normal_margin / (h * inv_meff))
        fn = np.where(active,
                      penalty_normal_force(depth, vn, hid, damping=b_eff),
                      0.0)

        # regularized Coulomb friction, capped at the slip-stop limit
        # along the slide direction (one substep may remove at most the
        # whole slip velocity), so the explicit substep stays
        # contractive at creep velocities and impacts arrest the slip
        # instead of reversing it.  Because the contact point sits on
        # the cap sphere (radius below the rod axis), this same force
        # also supplies torsional and rolling resistance; no separate
        # spin damper is applied.
        v_tan = vel - normal * vn
        speed = np.sqrt(np.maximum(v_tan.dot(v_tan), 1e-18))
        t_dir = v_tan * (1.0 / np.maximum(speed, 1e-12))
        inv_mt = _point_inverse_mass(body_a, rod_a, arm_a, t_dir)
        if b is not None:
            inv_mt = inv_mt + _point_inverse_mass(
                self.model.bodies[b], state.rods[b], arm_b, t_dir)
        visc = hid.friction * fn * np.tanh(speed / hid.friction_smoothing) \
            / np.maximum(speed, 1e-12)
        visc = np.minimum(visc, hid.normal_margin / (h * inv_mt))
        f = normal * fn - v_tan * visc

        wrenches[a].add_force_at(f, arm_a)
        if b is not None:
            wrenches[b].add_force_at(-f, arm_b)

    # -----------------------------------------------------------------
    # vectorized stepping (array twin of the formulation above)
    # -----------------------------------------------------------------

    def _step_fast(self, x, u, substeps, fixed_rods):
        """Advance packed states (..., D) by one 1 ms transition."""
        cfg, hid, ft = self.config, self._hidden, self._fast
        nr = ft.n
        lo, hi = cfg.control_range
        u = np.clip(u, lo, hi)
        bshape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        x = np.broadcast_to(x, bshape + x.shape[-1:])
        u = np.broadcast_to(u, bshape + u.shape[-1:])
        rod = x[..., :nr * 13].reshape(x.shape[:-1] + (nr, 13))
        p = rod[..., 0:3].copy()
        q = rod[..., 3:7].copy()
        v = rod[..., 7:10].copy()
        w = rod[..., 10:13].copy()
        motors = x[..., nr * 13:].copy()
        motors[..., ft.act_idx] = (motors[..., ft.act_idx]
                                   + self.motor_rate
                                   * (u - motors[..., ft.act_idx]))
        rest = np.maximum(ft.l0 + cfg.motor_scale * motors, 1e-6)
        g = np.asarray(self.model.gravity) * cfg.gravity_scale
        h = cfg.dt / substeps
        fixed = np.zeros(nr, dtype=bool)
        for i in fixed_rods:
            fixed[i] = True
        ez = np.array([0.0, 0.0, 1.0])

        for _ in range(substeps):
            force = np.zeros_like(p)
            torque = np.zeros_like(p)

            # --- cables ---
            qa, qb = q[..., ft.ia, :], q[..., ft.ib, :]
            arma = _qrot(qa, ft.offa)
            armb = _qrot(qb, ft.offb)
            pa = p[..., ft.ia, :] + arma
            pb = p[..., ft.ib, :] + armb
            va = v[..., ft.ia, :] + np.cross(w[..., ft.ia, :], arma)
            vb = v[..., ft.ib, :] + np.cross(w[..., ft.ib, :], armb)
            d = pb - pa
            length = np.sqrt(np.maximum(np.sum(d * d, axis=-1), 1e-18))
            if np.any(length < 1e-9):
                raise DegenerateCable("a cable collapsed to zero length")
            direction = d / length[..., None]
            ldot = np.sum((vb - va) * direction, axis=-1)
            tension = np.maximum(ft.k * (length - rest)
                                 + ft.c * ldot, 0.0)
            tension = np.where(length > rest, tension, 0.0)
            f = direction * tension[..., None]
            force += (np.einsum("rc,...cd->...rd", ft.gather_a, f)
                      - np.einsum("rc,...cd->...rd", ft.gather_b, f))
            torque += (np.einsum("rc,...cd->...rd", ft.gather_a,
                                 np.cross(arma, f))
                       - np.einsum("rc,...cd->...rd", ft.gather_b,
                                   np.cross(armb, f)))

            # --- ground contacts (two cap spheres per rod) ---
            axis = _qrot(q, ez)
            for sign in (-1.0, 1.0):
                arm = axis * (sign * 0.5 * ft.length)[:, None]
                depth = ft.radius - (p[..., 2] + arm[..., 2])
                armc = arm.copy()
                armc[..., 2] = armc[..., 2] - ft.radius
                vel = v + np.cross(w, armc)
                inv_meff = _inverse_mass_arrays(
                    armc, ez, axis, ft.mass, ft.cxx, ft.czz)
                fc = _penalty_arrays(
                    hid, h, depth, ez, vel, inv_meff,
                    lambda tdir, armc=armc, axis=axis:
                        _inverse_mass_arrays(armc, tdir, axis, ft.mass,
                                             ft.cxx, ft.czz))
                force += fc
                torque += np.cross(armc, fc)

            # --- rod-rod contacts ---
            if ft.pi.size:
                pi, pj = ft.pi, ft.pj
                qi, qj = q[..., pi, :], q[..., pj, :]
                axi, axj = axis[..., pi, :], axis[..., pj, :]
                ai = p[..., pi, :] - axi * (0.5 * ft.length[pi])[:, None]
                di = axi * ft.length[pi][:, None]
                aj = p[..., pj, :] - axj * (0.5 * ft.length[pj])[:, None]
                dj = axj * ft.length[pj][:, None]
                s, t = _segment_closest_arrays(ai, di, aj, dj)
                ci = ai + di * s[..., None]
                cj = aj + dj * t[..., None]
                delta = ci - cj
                dist = np.sqrt(np.maximum(np.sum(delta * delta, axis=-1),
                                          1e-18))
                depth = (ft.radius[pi] + ft.radius[pj]) - dist
                normal = delta / np.maximum(dist, 1e-9)[..., None]
                point = cj + delta * 0.5
                arm_i = point - p[..., pi, :]
                arm_j = point - p[..., pj, :]
                vel = ((v[..., pi, :] + np.cross(w[..., pi, :], arm_i))
                       - (v[..., pj, :] + np.cross(w[..., pj, :], arm_j)))
                inv_meff = (_inverse_mass_arrays(
                                arm_i, normal, axi,
                                ft.mass[pi], ft.cxx[pi], ft.czz[pi])
                            + _inverse_mass_arrays(
                                arm_j, normal, axj,
                                ft.mass[pj], ft.cxx[pj], ft.czz[pj]))
                fc = _penalty_arrays(
                    hid, h, depth, normal, vel, inv_meff,
                    lambda tdir, ai=arm_i, aj=arm_j, xi=axi, xj=axj:
                        _inverse_mass_arrays(ai, tdir, xi, ft.mass[pi],
                                             ft.cxx[pi], ft.czz[pi])
                        + _inverse_mass_arrays(aj, tdir, xj, ft.mass[pj],
                                               ft.cxx[pj], ft.czz[pj]))
                force += (np.einsum("rc,...cd->...rd", ft.gather_pi, fc)
                          - np.einsum("rc,...cd->...rd", ft.gather_pj, fc))
                torque += (np.einsum("rc,...cd->...rd", ft.gather_pi,
                                     np.cross(arm_i, fc))
                           - np.einsum("rc,...cd->...rd", ft.gather_pj,
                                       np.cross(arm_j, fc)))

            # --- accelerations and semi-implicit integration ---
            accel = force / ft.mass[:, None] + g
            iw = _qrot(q, ft.inertia * _qrot_inv(q, w))
            gyro = np.cross(w, iw)
            alpha = _qrot(q, _qrot_inv(q, torque - gyro) / ft.inertia)
            v_new = v + accel * h
            w_new = w + alpha * h
            if np.any(fixed):
                v_new[..., fixed, :] = 0.0
                w_new[..., fixed, :] = 0.0
            p = p + v_new * h
            q_new = _quat_integrate(q, w_new, h)
            if np.any(fixed):     # pinned rods keep their exact pose
                q_new[..., fixed, :] = q[..., fixed, :]
            q = q_new
            v, w = v_new, w_new

        out = np.empty(bshape + (x.shape[-1],), dtype=float)
        rod_out = out[..., :nr * 13].reshape(out.shape[:-1] + (nr, 13))
        rod_out[..., 0:3] = p
        rod_out[..., 3:7] = q
        rod_out[..., 7:10] = v
        rod_out[..., 10:13] = w
        out[..., nr * 13:] = motors
        return out

    # -----------------------------------------------------------------
    # stepping
    # -----------------------------------------------------------------

    def step(self, state, controls, substeps=1, fixed_rods=()):
        """One 1 ms transition (optionally integrated in substeps).

        Runs the vectorized array path; `_step_reference` keeps the
        scalar-object formulation the tests compare against.
        """
        model = self.model
        u = np.asarray(controls, dtype=float)
        if u.shape[-1] != model.control_dim:
            raise UsageError(
                f"got {u.shape[-1]} controls for {model.control_dim} "
                "actuated cables")
        x = pack_state(state)
        y = self._step_fast(x, u, substeps, tuple(fixed_rods))
        return unpack_state(y, model.n_rods, model.n_cables)

    def _step_reference(self, state, controls, substeps=1, fixed_rods=()):
        """One 1 ms transition (scalar-object reference formulation)."""
        cfg, model = self.config, self.model
        lo, hi = cfg.control_range
        u = np.clip(np.asarray(controls, dtype=float), lo, hi)
        acts = model.actuated_indices
        if u.shape[-1] != len(acts):
            raise UsageError(
                f"got {u.shape[-1]} controls for {len(acts)} "
                "actuated cables")
        u_map = dict(zip(acts, np.moveaxis(u, -1, 0)))
        motors, rest = [], []
        for i, cab in enumerate(model.cables):
            m = state.motors[i]
            if cab.actuated:
                m = m + self.motor_rate * (u_map[i] - m)
            motors.append(m)
            rest.append(np.maximum(cab.rest_length
                                   + cfg.motor_scale * m, 1e-6))
        g = model.gravity_vec(cfg.gravity_scale)
        h = cfg.dt / substeps
        rods = state.rods
        for _ in range(substeps):
            wrenches = cable_wrenches(model, RobotState(rods, motors), rest)
            cw = self._contact_wrenches(RobotState(rods, motors), h)
            new_rods = []
            for i, (body, rod) in enumerate(zip(model.bodies, rods)):
                if i in fixed_rods:
                    new_rods.append(RodState(rod.p, rod.q,
                                             Vec3.zero(), Vec3.zero()))
                    continue
                wrenches[i].add(f=cw[i].f, tau=cw[i].tau)
                acc, alpha = accelerations(body, rod, wrenches[i], g)
                new_rods.append(integrate_semi_implicit(rod, acc, alpha, h))
            rods = new_rods
        return RobotState(rods, motors)

    def _run(self, state, controls_at, n_steps, substeps, fixed_rods,
             purpose):
        """Roll forward; returns packed states (.., T+1, D) and controls."""
        states = [pack_state(state)]
        applied = []
        for t in range(n_steps):
            u = controls_at(t)
            applied.append(np.asarray(u, dtype=float))
            state = self.step(state, u, substeps=substeps,
                              fixed_rods=fixed_rods)
            packed = pack_state(state)
            if not np.all(np.abs(packed) < DIVERGENCE_LIMIT):
                raise DivergenceFault(
                    "reference simulation left the +-1e6 trust region",
                    step=t + 1)
            states.append(packed)
        self._count(purpose, n_steps)
        return np.stack(states, axis=-2), np.stack(applied, axis=-2), state

    # -----------------------------------------------------------------
    # scenarios
    # -----------------------------------------------------------------

    def settled_state(self):
        """Robot resting on the ground, computed once and cached.

        The settle steps are charged to this engine's log exactly once
        even on a cache hit, so budget fragments do not depend on
        whether another engine instance already ran the settle.
        """
        key = (self.config.robot, self.config.gravity_scale,
               self.config.substeps)
        if key in _SETTLE_CACHE and key not in self._settle_charged:
            self._count("settle", _SETTLE_CACHE[key][1])
            self._settle_charged.add(key)
        if key not in _SETTLE_CACHE:
            model = self.model
            state = model.initial_state()
            drop = min(r.p.z - 0.5 * b.length - b.radius
                       for r, b in zip(state.rods, model.bodies))
            for r in state.rods:
                r.p = r.p + Vec3(0.0, 0.0, -drop + 0.001)
            zeros = np.zeros(model.control_dim)
            steps = 0
            while steps < 15000:
                _, _, state = self._run(
                    state, lambda t: zeros, 500,
                    self.config.substeps, (), "settle")
                steps += 500
                ke = sum(r.v.dot(r.v) + r.w.dot(r.w) for r in state.rods)
                if float(ke) < 1e-7:
                    break
            for r in state.rods:          # freeze residual creep
                r.v, r.w = Vec3.zero(), Vec3.zero()
            _SETTLE_CACHE[key] = (pack_state(state), steps)
            self._settle_charged.add(key)
        return unpack_state(_SETTLE_CACHE[key][0], self.model.n_rods,
                            self.model.n_cables)

    def sample(self, scenario, steps, seed, policy=None):
        """Draw one trajectory; deterministic in (config, seed)."""
        cfg, model = self.config, self.model
        rng = np.random.default_rng(seed)
        meta = {}
        fixed = ()
        if scenario == "hang":
            state = model.initial_state()
            for r in state.rods:
                r.p = r.p + Vec3(0.0, 0.0, cfg.hang_height)
            fixed = (cfg.hang_fixed_rod,)
            meta["fixed_rod"] = cfg.hang_fixed_rod
            substeps = 1               # scenario never touches the ground
            n_int = -(-steps // cfg.control_interval)
            lo, hi = cfg.control_range
            table = rng.uniform(lo, hi, (n_int, model.control_dim))
            controls_at = lambda t: table[t // cfg.control_interval]  # noqa
        elif scenario in ("throw", "rest"):
            state = self.settled_state()
            substeps = cfg.substeps
            if scenario == "throw":
                # released slightly above ground so the trajectory
                # contains real flight, impact and rolling phases
                speed = rng.uniform(0.5, 3.0)
                azimuth = rng.uniform(0.0, 2.0 * math.pi)
                elevation = rng.uniform(0.0, math.radians(60.0))
                height = rng.uniform(0.2, 0.6)
                v0 = Vec3(speed * math.cos(elevation) * math.cos(azimuth),
                          speed * math.cos(elevation) * math.sin(azimuth),
                          speed * math.sin(elevation))
                for r in state.rods:
                    r.v = r.v + v0
                    r.p = r.p + Vec3(0.0, 0.0, height)
                meta["throw_speed"] = speed
                meta["throw_azimuth"] = azimuth
                meta["throw_elevation"] = elevation
                meta["throw_height"] = height
            zeros = np.zeros(model.control_dim)
            controls_at = lambda t: zeros  # noqa: E731
        elif scenario == "policy-rollout":
            if policy is None:
                raise UsageError("policy-rollout scenario needs a policy")
            state = self.settled_state()
        else:
            raise UsageError(f"unknown scenario '{scenario}'")

        if scenario == "policy-rollout":
            states, applied = self._run_policy(state, policy, steps)
        else:
            states, applied, _ = self._run(state, controls_at, steps,
                                           substeps, fixed, scenario)
        return Trajectory(robot=model.name, dt=cfg.dt, states=states,
                          controls=applied, seed=int(seed),
                          scenario=scenario,
                          control_interval=cfg.control_interval,
                          extra=meta)

    def _run_policy(self, state, policy, steps):
        """Closed-loop rollout: policy sees the packed state at every
        control interval."""
        cfg = self.config
        states = [pack_state(state)]
        applied = []
        u = np.zeros(self.model.control_dim)
        for t in range(steps):
            if t % cfg.control_interval == 0:
                u = np.asarray(policy(t // cfg.control_interval,
                                      pack_state(state)), dtype=float)
            applied.append(u)
            state = self.step(state, u, substeps=cfg.substeps)
            packed = pack_state(state)
            if not np.all(np.abs(packed) < DIVERGENCE_LIMIT):
                raise DivergenceFault(
                    "reference simulation left the +-1e6 trust region",
                    step=t + 1)
            states.append(packed)
        self._count("policy-rollout", steps)
        return np.stack(states, axis=-2), np.stack(applied, axis=-2)


class _FastTopology:
    """Constant index/geometry arrays for the vectorized step."""

    def __init__(self, model):
        n = model.n_rods
        nc = model.n_cables
        self.n = n
        self.mass = np.array([b.mass for b in model.bodies])
        self.length = np.array([b.length for b in model.bodies])
        self.radius = np.array([b.radius for b in model.bodies])
        coeffs = np.array([b.inertia_coefficients()
                           for b in model.bodies])
        self.cxx, self.czz = coeffs[:, 0], coeffs[:, 1]
        self.inertia = (self.mass[:, None]
                        * np.stack([self.cxx, self.cxx, self.czz],
                                   axis=-1))
        self.ia = np.array([c.rod_a for c in model.cables], dtype=int)
        self.ib = np.array([c.rod_b for c in model.cables], dtype=int)
        self.offa = np.array([c.offset_a for c in model.cables])
        self.offb = np.array([c.offset_b for c in model.cables])
        self.k = np.array([c.stiffness for c in model.cables])
        self.c = np.array([c.damping for c in model.cables])
        self.l0 = np.array([c.rest_length for c in model.cables])
        self.act_idx = np.array(model.actuated_indices, dtype=int)
        self.gather_a = np.zeros((n, nc))
        self.gather_a[self.ia, np.arange(nc)] = 1.0
        self.gather_b = np.zeros((n, nc))
        self.gather_b[self.ib, np.arange(nc)] = 1.0
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
        self.pi = np.array([a for a, _ in pairs], dtype=int)
        self.pj = np.array([b for _, b in pairs], dtype=int)
        self.gather_pi = np.zeros((n, len(pairs)))
        self.gather_pi[self.pi, np.arange(len(pairs))] = 1.0
        self.gather_pj = np.zeros((n, len(pairs)))
        self.gather_pj[self.pj, np.arange(len(pairs))] = 1.0


def _qrot(q, v):
    """Rotate (..., 3) vectors by (..., 4) unit quaternions."""
    qv = q[..., 1:4]
    t = 2.0 * np.cross(qv, v)
    return v + q[..., 0:1] * t + np.cross(qv, t)


def _qrot_inv(q, v):
    qv = -q[..., 1:4]
    t = 2.0 * np.cross(qv, v)
    return v + q[..., 0:1] * t + np.cross(qv, t)


def _quat_integrate(q, omega, dt):
    """First-order quaternion update, renormalized (array twin)."""
    qw, qx = q[..., 0], q[..., 1]
    qy, qz = q[..., 2], q[..., 3]
    wx, wy, wz = omega[..., 0], omega[..., 1], omega[..., 2]
    nw = qw - 0.5 * dt * (wx * qx + wy * qy + wz * qz)
    nx = qx + 0.5 * dt * (wx * qw + wy * qz - wz * qy)
    ny = qy + 0.5 * dt * (wy * qw + wz * qx - wx * qz)
    nz = qz + 0.5 * dt * (wz * qw + wx * qy - wy * qx)
    out = np.stack([nw, nx, ny, nz], axis=-1)
    return out / np.sqrt(np.sum(out * out, axis=-1))[..., None]


def _segment_closest_arrays(p1, d1, p2, d2):
    """Array twin of :func:`_segment_closest_np` over (..., 3) stacks."""
    r = p1 - p2
    a = np.sum(d1 * d1, axis=-1)
    e = np.sum(d2 * d2, axis=-1)
    b = np.sum(d1 * d2, axis=-1)
    c = np.sum(d1 * r, axis=-1)
    f = np.sum(d2 * r, axis=-1)
    denom = a * e - b * b
    s = np.where(denom < 1e-12, 0.0,
                 (b * f - c * e) / np.maximum(denom, 1e-12))
    s = np.clip(s, 0.0, 1.0)
    t = np.clip((b * s + f) / e, 0.0, 1.0)
    s = np.clip((b * t - c) / a, 0.0, 1.0)
    return s, t


def _inverse_mass_arrays(arm, normal, axis, mass, cxx, czz):
    """Array twin of :func:`_point_inverse_mass`."""
    lever = np.cross(arm, normal)
    par = np.sum(lever * axis, axis=-1)
    lev2 = np.sum(lever * lever, axis=-1)
    rot = (lev2 - par * par) / cxx + par * par / czz
    return (1.0 + rot) / mass


def _penalty_arrays(hid, h, depth, normal, vel, inv_meff, inv_mass_dir):
    """Array twin of :meth:`GroundTruthEngine._apply_penalty`.
    ``inv_mass_dir`` maps a unit direction to the contact point's
    inverse effective mass along it (slip-stop friction cap)."""
    active = depth > 0.0
    vn = np.sum(vel * normal, axis=-1)
    b_eff = np.minimum(hid.penalty_damping,
                       hid.normal_margin / (h * inv_meff))
    fn = np.where(active,
                  np.maximum(hid.penalty_stiffness * depth
                             - b_eff * vn, 0.0),
                  0.0)

    v_tan = vel - normal * vn[..., None]
    speed = np.sqrt(np.maximum(np.sum(v_tan * v_tan, axis=-1), 1e-18))
    t_dir = v_tan / np.maximum(speed, 1e-12)[..., None]
    visc = hid.friction * fn * np.tanh(speed / hid.friction_smoothing) \
        / np.maximum(speed, 1e-12)
    visc = np.minimum(visc,
                      hid.normal_margin / (h * inv_mass_dir(t_dir)))
    f = normal * fn[..., None] - v_tan * visc[..., None]
    return f


def _point_inverse_mass(body, rod, arm, normal):
    """Inverse effective mass of a contact point along ``normal`` for a
    thin-rod body (diagonal body-frame inertia approximation)."""
    cxx, czz = body.inertia_coefficients()
    axis = rod.q.rotate(Vec3(0.0, 0.0, 1.0))
    lever = arm.cross(normal)
    par = lever.dot(axis)
    lev2 = lever.dot(lever)
    rot = (lev2 - par * par) / cxx + par * par / czz
    return (1.0 + rot) / body.mass


def _segment_closest_np(p1, d1, p2, d2):
    """Closest-point parameters of two segments (numpy-only twin of the
    learnable engine's routine; kept separate on purpose)."""
    r = p1 - p2
    a = d1.dot(d1)
    e = d2.dot(d2)
    b = d1.dot(d2)
    c = d1.dot(r)
    f = d2.dot(r)
    denom = a * e - b * b
    s = np.where(np.asarray(denom) < 1e-12, 0.0,
                 (b * f - c * e) / np.maximum(denom, 1e-12))
    s = np.clip(s, 0.0, 1.0)
    t = np.clip((b * s + f) / e, 0.0, 1.0)
    s = np.clip((b * t - c) / a, 0.0, 1.0)
    return s, t
