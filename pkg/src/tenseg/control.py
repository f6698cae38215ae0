"""Trajectory optimization: KL-regularized iLQG over linear-Gaussian
time-varying policies.

The policy holds, per 100 ms control interval, a feedforward control, a
feedback gain about a reference state, and a diagonal exploration
covariance.  Dynamics are linearized either by least-squares regression
over sampled rollouts (works for any engine, including the sealed
reference simulator) or analytically through the differentiable
engine's tape.  The backward pass is a standard Riccati recursion with
a quadratic KL penalty toward the previous policy and a Levenberg-style
regularization schedule.
"""

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .contact import InteractionGraph
from .dynamics import (pack_state, state_from_scalars, state_scalars,
                       unpack_state)
from .engine import DIVERGENCE_LIMIT
from .errors import DivergenceFault, NumericalFault, UsageError


# ---------------------------------------------------------------------
# cost
# ---------------------------------------------------------------------

@dataclass
class CostSpec:
    """Velocity-tracking weights for the locomotion task."""

    target: tuple = (10.0, 0.0, 0.0)
    weights: tuple = (1.0, 0.5, 0.1)
    control_penalty: float = 1e-6
    kl_weight: float = 0.005

    def __post_init__(self):
        if min(self.weights) < 0:
            raise UsageError("cost weights must be non-negative")


class QuadraticCost:
    """State cost x'Qx + q.x + const plus a control penalty.

    ``state_cost`` accepts (D,) or (N, D) arrays; the quadratic pieces
    feed the Riccati backward pass exactly (no numeric expansion).
    """

    def __init__(self, Q, q, const=0.0, control_penalty=1e-6,
                 kl_weight=0.005):
        self.Q = np.asarray(Q, dtype=float)
        self.q = np.asarray(q, dtype=float)
        self.const = float(const)
        self.control_penalty = control_penalty
        self.kl_weight = kl_weight

    def state_cost(self, x):
        x = np.asarray(x, dtype=float)
        return (np.einsum("...i,ij,...j->...", x, self.Q, x)
                + x @ self.q + self.const)

    def control_cost(self, u):
        u = np.asarray(u, dtype=float)
        return self.control_penalty * np.sum(u * u, axis=-1)


def com_velocity_matrix(model):
    """Linear map from a packed state to the CoM velocity (3, D)."""
    D = model.state_dim
    M = np.zeros((3, D))
    for r in range(model.n_rods):
        for axis in range(3):
            M[axis, r * 13 + 7 + axis] = 1.0 / model.n_rods
    return M


def com_velocity_cost(model, spec):
    """CostSpec -> exact quadratic in the packed state."""
    M = com_velocity_matrix(model)
    W = np.diag(spec.weights)
    t = np.asarray(spec.target, dtype=float)
    return QuadraticCost(M.T @ W @ M, -2.0 * M.T @ W @ t, t @ W @ t,
                         spec.control_penalty, spec.kl_weight)


def step_cost(packed_state, control, cost):
    """Cost charged per control interval."""
    return float(cost.state_cost(packed_state)
                 + cost.control_cost(control))


# ---------------------------------------------------------------------
# policy
# ---------------------------------------------------------------------

@dataclass
class Policy:
    """Time-varying linear-Gaussian controller."""

    u: np.ndarray                  # (H, U) feedforward
    K: np.ndarray                  # (H, U, D) feedback gains
    x_ref: np.ndarray              # (H, D) reference states
    sigma: np.ndarray              # (H, U) exploration std-devs
    clamp: tuple = (-100.0, 100.0)
    meta: dict = field(default_factory=dict)

    @property
    def horizon(self):
        return self.u.shape[0]

    @classmethod
    def zeros(cls, horizon, control_dim, state_dim, sigma0=5.0,
              clamp=(-100.0, 100.0)):
        return cls(np.zeros((horizon, control_dim)),
                   np.zeros((horizon, control_dim, state_dim)),
                   np.zeros((horizon, state_dim)),
                   np.full((horizon, control_dim), float(sigma0)),
                   clamp)

    def mean_action(self, k, x):
        """Clamped feedforward + feedback action; x is (D,) or (N, D)."""
        u = self.u[k] + (np.asarray(x) - self.x_ref[k]) @ self.K[k].T
        return np.clip(u, *self.clamp)

    def sample_action(self, k, x, rng, noise_scale=1.0):
        u = self.u[k] + (np.asarray(x) - self.x_ref[k]) @ self.K[k].T
        u = u + rng.standard_normal(u.shape) * (self.sigma[k]
                                                * noise_scale)
        return np.clip(u, *self.clamp)

    def save(self, path):
        doc = {"u": self.u.tolist(), "K": self.K.tolist(),
               "x_ref": self.x_ref.tolist(),
               "sigma": self.sigma.tolist(),
               "clamp": list(self.clamp), "meta": self.meta}
        with open(path, "w") as fh:
            json.dump(doc, fh)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            doc = json.load(fh)
        return cls(np.asarray(doc["u"]), np.asarray(doc["K"]),
                   np.asarray(doc["x_ref"]), np.asarray(doc["sigma"]),
                   tuple(doc["clamp"]), doc.get("meta", {}))


# ---------------------------------------------------------------------
# interval steppers (uniform rollout interface over both engines)
# ---------------------------------------------------------------------

class LearnableStepper:
    """Advances the differentiable engine one control interval at a
    time; rollouts batch across samples for free."""

    def __init__(self, engine, x0, interval=100):
        self.engine = engine
        self.model = engine.model
        self.x0 = np.asarray(x0, dtype=float)
        self.interval = interval
        self.supports_analytic = True

    def rollouts(self, policy, n, rng=None, noise_scale=1.0):
        model = self.model
        state = unpack_state(np.repeat(self.x0[None, :], n, axis=0),
                             model.n_rods, model.n_cables)
        graph = InteractionGraph()
        xs = [np.repeat(self.x0[None, :], n, axis=0)]
        us = []
        for k in range(policy.horizon):
            x = xs[-1]
            u = policy.mean_action(k, x) if rng is None else \
                policy.sample_action(k, x, rng, noise_scale)
            us.append(u)
            for _ in range(self.interval):
                state = self.engine.step(state, list(u.T), graph=graph)
            packed = pack_state(state)
            if packed.ndim == 1:
                packed = packed[None, :]
            if not np.all(np.abs(packed) < DIVERGENCE_LIMIT):
                raise DivergenceFault(
                    "rollout left the +-1e6 trust region", step=k + 1)
            xs.append(packed)
        return np.stack(xs, axis=1), np.stack(us, axis=1)

    def interval_jacobian(self, x_bar, u_bar):
        """Exact (A, B) of one control interval via the tape."""
        model = self.model
        tape = ad.Tape()
        x_leaves = [tape.input(float(v)) for v in x_bar]
        u_leaves = [tape.input(float(v)) for v in u_bar]
        state = state_from_scalars(x_leaves, model.n_rods,
                                   model.n_cables)
        graph = InteractionGraph()
        for _ in range(self.interval):
            state = self.engine.step(state, u_leaves, graph=graph)
        outs = state_scalars(state)
        D, U = len(x_leaves), len(u_leaves)
        A = np.zeros((D, D))
        B = np.zeros((D, U))
        for i, out in enumerate(outs):
            if not isinstance(out, ad.DualScalar):
                A[i, i] = 1.0 if outs[i] is x_leaves[i] else 0.0
                continue
            g = tape.backward(out)
            A[i] = [g.wrt(xl) for xl in x_leaves]
            B[i] = [g.wrt(ul) for ul in u_leaves]
        return A, B


class GroundTruthStepper:
    """Same interface against the sealed reference simulator; every
    simulated step is tallied in the engine's ledger."""

    def __init__(self, gt_engine, x0=None, interval=None,
                 purpose="policy-training"):
        self.gt = gt_engine
        self.model = gt_engine.model
        self.interval = interval or gt_engine.config.control_interval
        self.x0 = np.asarray(
            pack_state(gt_engine.settled_state()) if x0 is None else x0,
            dtype=float)
        self.purpose = purpose
        self.supports_analytic = False

    def rollouts(self, policy, n, rng=None, noise_scale=1.0):
        model = self.model
        state = unpack_state(np.repeat(self.x0[None, :], n, axis=0),
                             model.n_rods, model.n_cables)
        xs = [np.repeat(self.x0[None, :], n, axis=0)]
        us = []
        substeps = self.gt.config.substeps
        for k in range(policy.horizon):
            x = xs[-1]
            u = policy.mean_action(k, x) if rng is None else \
                policy.sample_action(k, x, rng, noise_scale)
            us.append(u)
            for _ in range(self.interval):
                state = self.gt.step(state, u, substeps=substeps)
            packed = pack_state(state)
            if packed.ndim == 1:
                packed = packed[None, :]
            if not np.all(np.abs(packed) < DIVERGENCE_LIMIT):
                raise DivergenceFault(
                    "rollout left the +-1e6 trust region", step=k + 1)
            xs.append(packed)
        self.gt._count(self.purpose, n * policy.horizon * self.interval)
        return np.stack(xs, axis=1), np.stack(us, axis=1)


# ---------------------------------------------------------------------
# linearization
# ---------------------------------------------------------------------

def fit_linear_dynamics(xs, us, ridge=1e-6):
    """Per-interval affine fit x' ~ A x + B u + c from sampled rollouts.

    Ridge regression toward the identity prior (A = I, B = 0) keeps the
    fit sane when samples are fewer than state dimensions.  Raises
    NumericalFault when the controls carry no excitation.
    """
    xs = np.asarray(xs, dtype=float)
    us = np.asarray(us, dtype=float)
    N, H = us.shape[0], us.shape[1]
    D, U = xs.shape[2], us.shape[2]
    if N < 2:
        raise NumericalFault("regression needs at least two rollouts")
    A = np.zeros((H, D, D))
    B = np.zeros((H, D, U))
    c = np.zeros((H, D))
    for k in range(H):
        X, Un, Y = xs[:, k], us[:, k], xs[:, k + 1]
        if float(np.max(np.std(Un, axis=0))) < 1e-10:
            raise NumericalFault(
                "rank-deficient regression: controls carry no noise")
        xm, um = X.mean(axis=0), Un.mean(axis=0)
        Phi = np.concatenate([X - xm, Un - um], axis=1)
        scale = Phi.std(axis=0) + 1e-9
        Phi_n = Phi / scale
        target = Y - X                      # identity prior on A
        tm = target.mean(axis=0)
        G = Phi_n.T @ Phi_n + ridge * N * np.eye(D + U)
        theta = np.linalg.solve(G, Phi_n.T @ (target - tm)) / \
            scale[:, None]
        A[k] = np.eye(D) + theta[:D].T
        B[k] = theta[D:].T
        c[k] = tm + xm - A[k] @ xm - B[k] @ um
    return A, B, c


def linearize(stepper, policy, samples, rng, ridge=1e-6,
              backend="regression"):
    """Time-varying (A, B, c) plus the sampled rollouts used.

    Regression draws ``samples`` noisy rollouts; a rank fault retries
    once with boosted exploration noise before giving up.  The analytic
    backend differentiates the engine directly along the policy's mean
    trajectory.
    """
    if backend == "analytic":
        if not getattr(stepper, "supports_analytic", False):
            raise UsageError("engine has no analytic linearization")
        xs, us = stepper.rollouts(policy, 1)
        H, D = policy.horizon, xs.shape[2]
        A = np.zeros((H, D, D))
        B = np.zeros((H, D, us.shape[2]))
        c = np.zeros((H, D))
        for k in range(H):
            A[k], B[k] = stepper.interval_jacobian(xs[0, k], us[0, k])
            c[k] = xs[0, k + 1] - A[k] @ xs[0, k] - B[k] @ us[0, k]
        return (A, B, c), (xs, us)
    if backend != "regression":
        raise UsageError(f"unknown linearization backend '{backend}'")
    xs, us = stepper.rollouts(policy, samples, rng)
    try:
        return fit_linear_dynamics(xs, us, ridge), (xs, us)
    except NumericalFault:
        boosted = copy.deepcopy(policy)
        boosted.sigma = np.maximum(boosted.sigma, 1.0)
        xs, us = stepper.rollouts(boosted, samples, rng)
        return fit_linear_dynamics(xs, us, ridge), (xs, us)


# ---------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------

class _NotPositiveDefinite(Exception):
    pass


def _backward_pass(dyn, x_bar, u_bar, cost, prev_sigma, reg,
                   kl_weight):
    """Riccati recursion; returns feedforward deltas, gains and the new
    exploration covariances."""
    A, B, c = dyn
    H, D, U = A.shape[0], A.shape[1], B.shape[2]
    Qs = 2.0 * cost.Q
    Ru = 2.0 * cost.control_penalty * np.eye(U)
    k_ff = np.zeros((H, U))
    K = np.zeros((H, U, D))
    sigma = np.zeros((H, U))
    Vx = cost.q + Qs @ x_bar[H]          # gradient of terminal state cost
    Vxx = Qs.copy()
    for k in range(H - 1, -1, -1):
        resid = c[k] + A[k] @ x_bar[k] + B[k] @ u_bar[k] - x_bar[k + 1]
        Vx_hat = Vx + Vxx @ resid
        kl = kl_weight * np.diag(1.0 / np.maximum(prev_sigma[k] ** 2,
                                                  1e-6))
        Qx = A[k].T @ Vx_hat
        Qu = Ru @ u_bar[k] + B[k].T @ Vx_hat
        Qxx = A[k].T @ Vxx @ A[k]
        Quu = Ru + kl + B[k].T @ Vxx @ B[k] + reg * np.eye(U)
        Qux = B[k].T @ Vxx @ A[k]
        try:
            L = np.linalg.cholesky(0.5 * (Quu + Quu.T))
        except np.linalg.LinAlgError:
            raise _NotPositiveDefinite(k)
        def solve(rhs):
            y = np.linalg.solve(L, rhs)
            return np.linalg.solve(L.T, y)
        k_ff[k] = -solve(Qu)
        K[k] = -solve(Qux)
        sigma[k] = np.sqrt(np.clip(np.diag(np.linalg.inv(Quu)),
                                   1e-4, None))
        Vx = (Qx + K[k].T @ Quu @ k_ff[k] + K[k].T @ Qu
              + Qux.T @ k_ff[k])
        Vxx = Qxx + K[k].T @ Quu @ K[k] + K[k].T @ Qux + Qux.T @ K[k]
        Vxx = 0.5 * (Vxx + Vxx.T)
        if k > 0:
            Vx = Vx + cost.q + Qs @ x_bar[k]
            Vxx = Vxx + Qs
    return k_ff, K, sigma


# ---------------------------------------------------------------------
# the optimizer
# ---------------------------------------------------------------------

@dataclass
class IlqgConfig:
    """Optimization schedule and trust-region knobs."""

    iterations: int = 20
    samples: int = 40
    horizon: int = 50               # control intervals per episode
    interval: int = 100             # simulation steps per interval
    sigma0: float = 5.0
    sigma_max: float = 5.0
    seed: int = 0
    ridge: float = 1e-6
    reg_init: float = 1e-6
    reg_factor: float = 10.0
    reg_max: float = 1e8
    regression_samples: int = 0     # 0 -> use `samples`
    backend: str = "regression"

    def __post_init__(self):
        if min(self.iterations, self.samples, self.horizon,
               self.interval) <= 0:
            raise UsageError("iLQG schedule values must be positive")


def trajectory_cost(xs, us, cost):
    """Mean episode cost over sampled rollouts (N, H+1, D), (N, H, U)."""
    state_part = cost.state_cost(xs[:, 1:]).sum(axis=1)
    control_part = cost.control_cost(us).sum(axis=1)
    return float(np.mean(state_part + control_part))


def optimize_policy(stepper, cost, config, callback=None):
    """Run the full KL-regularized iLQG loop; returns (policy, curve).

    The curve lists the mean sampled episode cost per iteration.  The
    returned policy is the best accepted one.
    """
    rng = np.random.default_rng(config.seed)
    D = stepper.x0.shape[-1]
    U = len(stepper.model.actuated_indices)
    policy = Policy.zeros(config.horizon, U, D, sigma0=config.sigma0)
    xs0, _ = stepper.rollouts(policy, 1)
    policy.x_ref = xs0[0, :config.horizon]
    best = copy.deepcopy(policy)
    best_cost = np.inf
    reg = config.reg_init
    curve = []
    n_lin = config.regression_samples or config.samples
    for it in range(config.iterations):
        if config.backend == "regression" and n_lin > config.samples:
            dyn, (xs, us) = linearize(stepper, policy, n_lin, rng,
                                      config.ridge, "regression")
            xs, us = xs[:config.samples], us[:config.samples]
        else:
            dyn, (xs, us) = linearize(stepper, policy, config.samples,
                                      rng, config.ridge, config.backend)
        J = trajectory_cost(xs, us, cost)
        curve.append(J)
        if J < best_cost:
            best_cost = J
            best = copy.deepcopy(policy)
            reg = max(reg / config.reg_factor, config.reg_init)
        else:
            reg = min(reg * config.reg_factor, config.reg_max)
            policy = copy.deepcopy(best)
        x_bar = xs.mean(axis=0)
        u_bar = us.mean(axis=0)
        bumps = 0
        while True:
            try:
                k_ff, K, sigma = _backward_pass(
                    dyn, x_bar, u_bar, cost, policy.sigma, reg,
                    cost.kl_weight)
                break
            except _NotPositiveDefinite:
                reg = reg * config.reg_factor
                bumps += 1
                if reg > config.reg_max or bumps > 12:
                    raise NumericalFault(
                        f"backward pass stays indefinite at "
                        f"iteration {it}")
        new = copy.deepcopy(policy)
        new.u = np.clip(u_bar + k_ff, *policy.clamp)
        new.K = K
        new.x_ref = x_bar[:config.horizon]
        new.sigma = np.minimum(sigma, config.sigma_max)
        policy = new
        if callback is not None:
            callback(it, J, policy)
    return best, curve


def transfer_evaluate(policy, stepper, cost, episodes=1):
    """Execute the policy (mean actions, feedback on observed states)
    on a target engine; returns per-interval costs and CoM traces."""
    model = stepper.model
    n_rods = model.n_rods
    results = {"costs": [], "com": [], "diverged": []}
    for _ in range(episodes):
        try:
            xs, us = stepper.rollouts(policy, 1)
            diverged = None
        except DivergenceFault as exc:
            diverged = exc.step
            xs = us = None
        if xs is None:
            results["costs"].append([])
            results["com"].append([])
            results["diverged"].append(diverged)
            continue
        per_step = (cost.state_cost(xs[0, 1:])
                    + cost.control_cost(us[0]))
        pts = (np.mean([xs[0][:, r * 13:r * 13 + 3]
                        for r in range(n_rods)], axis=0)
               if n_rods else np.zeros((xs.shape[1], 3)))
        results["costs"].append(per_step.tolist())
        results["com"].append(pts.tolist())
        results["diverged"].append(diverged)
    results["mean_cost"] = float(np.mean(
        [np.sum(c) for c in results["costs"] if len(c)])) \
        if any(len(c) for c in results["costs"]) else float("nan")
    return results


# ---------------------------------------------------------------------
# tiny linear benchmark used by the test-suite oracles
# ---------------------------------------------------------------------

class DoubleIntegratorStepper:
    """Point mass on a line; one control interval = one 0.1 s step."""

    def __init__(self, dt=0.1, x0=(1.0, 0.0)):
        self.dt = dt
        self.x0 = np.asarray(x0, dtype=float)
        self.A = np.array([[1.0, dt], [0.0, 1.0]])
        self.B = np.array([[0.5 * dt * dt], [dt]])
        self.supports_analytic = True

        class _M:
            actuated_indices = [0]
            n_rods = 0
        self.model = _M()

    def rollouts(self, policy, n, rng=None, noise_scale=1.0):
        x = np.repeat(self.x0[None, :], n, axis=0)
        xs, us = [x], []
        for k in range(policy.horizon):
            u = policy.mean_action(k, x) if rng is None else \
                policy.sample_action(k, x, rng, noise_scale)
            us.append(u)
            x = x @ self.A.T + u @ self.B.T
            xs.append(x)
        return np.stack(xs, axis=1), np.stack(us, axis=1)

    def interval_jacobian(self, x_bar, u_bar):
        return self.A.copy(), self.B.copy()
