"""The learnable simulation engine: one transition step plus rollouts.

A step is: reel motors filter the controls, cables pull, contacts
respond, semi-implicit Euler integrates.  The same code path runs in
three modes depending on what the state/parameter scalars are: plain
floats (single rollout), (B,)-shaped numpy arrays (batched rollouts),
or tape scalars (training / linearization).
"""

import numpy as np

from . import autodiff as ad
from . import params as params_mod
from .contact import ContactConfig, InteractionGraph, detect, respond
from .dynamics import (RobotState, RodState, accelerations,
                       integrate_semi_implicit, pack_state)
from .errors import DivergenceFault, UsageError
from .robot import cable_wrenches, effective_rest_length, step_motor
from .vecmath import Vec3

DIVERGENCE_LIMIT = 1e6


class LearnableEngine:
    """Differentiable engine for one robot with learnable parameters.

    ``raw_params`` holds the ten unconstrained scalars (see
    :mod:`tenseg.params`); pass squashed overrides to :meth:`step` when
    the parameters live on a tape.
    """

    def __init__(self, model, raw_params=None, dt=0.001,
                 contact_config=None, gravity_scale=1.0):
        self.model = model
        self.dt = dt
        self.raw_params = dict(raw_params) if raw_params is not None \
            else params_mod.default_raw()
        self.contact_config = contact_config or ContactConfig()
        self.gravity_scale = gravity_scale

    def physical_params(self, raw=None):
        """Squash raw parameters into their physical ranges."""
        return params_mod.squash_all(
            self.raw_params if raw is None else raw)

    # -----------------------------------------------------------------
    # single transition
    # -----------------------------------------------------------------

    def step(self, state, controls, phys=None, fixed_rods=(),
             graph=None, tc_overrides=None, train_mlp=False,
             contact_enabled=True, tape=None):
        """Advance one time step; returns the next RobotState.

        ``controls`` has one entry per actuated cable.  ``graph`` keeps
        consecutive-contact counters across a rollout; ``tc_overrides``
        injects precomputed counters for dataset training.  Rods listed
        in ``fixed_rods`` are pinned (pose kept, twist zeroed).
        """
        model = self.model
        if phys is None:
            phys = self.physical_params()
        acts = model.actuated_indices
        if len(controls) != len(acts):
            raise UsageError(
                f"got {len(controls)} controls for {len(acts)} "
                "actuated cables")
        u_map = dict(zip(acts, controls))

        motors = []
        rest = []
        for i, cab in enumerate(model.cables):
            m = state.motors[i]
            if cab.actuated:
                m = step_motor(m, u_map[i], phys["motor_speed"])
            motors.append(m)
            rest.append(effective_rest_length(m, cab.rest_length,
                                              phys["motor_scale"]))

        wrenches = cable_wrenches(model, state, rest,
                                  stiffness=phys["cable_stiffness"],
                                  damping=phys["cable_damping"])

        if contact_enabled:
            contacts = detect(model, state)
            if tc_overrides is not None:
                for c in contacts:
                    c.steps_in_contact = tc_overrides.get(c.key, 0)
            elif graph is not None:
                for c in contacts:
                    c.steps_in_contact = graph.steps_in_contact(c.key)
                graph.advance(contacts)
            cw = respond(contacts, model, state, phys["rod_mass"], phys,
                         self.dt, self.contact_config, train_mlp,
                         tape=tape)
            for w, extra in zip(wrenches, cw):
                w.add(f=extra.f, tau=extra.tau)

        g = model.gravity_vec(self.gravity_scale)
        rods = []
        for i, (body, rod) in enumerate(zip(model.bodies, state.rods)):
            if i in fixed_rods:
                rods.append(RodState(rod.p, rod.q,
                                     Vec3.zero(), Vec3.zero()))
                continue
            a, alpha = accelerations(body, rod, wrenches[i], g,
                                     mass=phys["rod_mass"])
            rods.append(integrate_semi_implicit(rod, a, alpha, self.dt))
        return RobotState(rods, motors)

    # -----------------------------------------------------------------
    # rollouts (value mode, possibly batched)
    # -----------------------------------------------------------------

    def rollout(self, state, controls, n_steps, fixed_rods=(),
                record_every=1):
        """Run ``n_steps`` steps; returns (states, controls_applied).

        ``controls`` is None (zeros), a (T, control_dim) array, or a
        callable ``(step, state) -> control vector``.  States are packed
        to (T//record_every + 1, D) (leading batch axes pass through).
        Raises DivergenceFault when any component leaves +-1e6.
        """
        dim = self.model.control_dim
        if controls is None:
            controls_at = lambda t, s: np.zeros(dim)  # noqa: E731
        elif callable(controls):
            controls_at = controls
        else:
            arr = np.asarray(controls, dtype=float)
            controls_at = lambda t, s: arr[t]  # noqa: E731
        graph = InteractionGraph()
        states = [pack_state(state)]
        applied = []
        for t in range(n_steps):
            u = controls_at(t, state)
            applied.append(np.asarray(u, dtype=float))
            state = self.step(state, u, fixed_rods=fixed_rods,
                              graph=graph)
            packed = pack_state(state)
            if not np.all(np.abs(packed) < DIVERGENCE_LIMIT):
                raise DivergenceFault(
                    "state component left the +-1e6 trust region",
                    step=t + 1)
            if (t + 1) % record_every == 0:
                states.append(packed)
        return np.stack(states, axis=-2), np.stack(applied, axis=-2)


# ---------------------------------------------------------------------
# convenience observables
# ---------------------------------------------------------------------

def com_position(state):
    """Center of mass of the robot (rods share one mass)."""
    return _mean_vec(r.p for r in state.rods)


def com_velocity(state):
    return _mean_vec(r.v for r in state.rods)


def _mean_vec(vecs):
    vecs = list(vecs)
    total = vecs[0]
    for v in vecs[1:]:
        total = total + v
    return total * (1.0 / len(vecs))


def com_curve(model, packed_states):
    """CoM positions (..., T, 3) from packed states (..., T, D)."""
    n = model.n_rods
    pts = [packed_states[..., r * 13:r * 13 + 3] for r in range(n)]
    return np.mean(np.stack(pts, axis=0), axis=0)
