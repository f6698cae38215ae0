"""Progressive system identification from one-step transitions.

Three stages, each freezing the previous group bitwise: first the
non-contact scalars (rod mass, cable stiffness/damping, motor rate and
scale) on suspension data, then the five linear contact scalars on
throw data, finally an optional residual MLP on the same contact data.
The loss is always the mean squared error over the packed next-state
vector.
"""

import copy
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import params as params_mod
from .contact import ContactConfig, ResidualMlp, detect
from .dynamics import state_scalars, unpack_state
from .engine import LearnableEngine, com_curve
from .errors import DivergenceFault, NumericalFault, UsageError

STAGE_GROUPS = {
    "noncontact": params_mod.NONCONTACT_KEYS,
    "contact-linear": params_mod.CONTACT_KEYS,
    "contact-mlp": (),
    "mlp-only": (),
}

STAGE_PREREQS = {
    "noncontact": (),
    "contact-linear": ("noncontact",),
    "contact-mlp": ("noncontact", "contact-linear"),
    "mlp-only": ("noncontact",),
}

_STAGE_CONTACT_MODE = {
    "contact-linear": "linear",
    "contact-mlp": "residual",
    "mlp-only": "mlp_only",
}


# ---------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------

@dataclass
class Dataset:
    """One-step transitions cut from whole trajectories.

    No transition crosses a trajectory boundary; ``contact_ages`` maps a
    contact slot key to the per-transition count of consecutive steps
    that slot had already been active (used by the residual MLP).
    """

    robot: str
    dt: float
    states: np.ndarray            # (N, D)
    controls: np.ndarray          # (N, U)
    next_states: np.ndarray       # (N, D)
    scenario: str = ""
    fixed_rods: tuple = ()
    contact_ages: Optional[dict] = None

    def __len__(self):
        return self.states.shape[0]

    def subset(self, idx):
        ages = None if self.contact_ages is None else \
            {k: v[idx] for k, v in self.contact_ages.items()}
        return Dataset(self.robot, self.dt, self.states[idx],
                       self.controls[idx], self.next_states[idx],
                       self.scenario, self.fixed_rods, ages)


def dataset_from_trajectories(trajs, model=None, contact_ages=False):
    """Decompose trajectories into transition triples."""
    if not trajs:
        raise UsageError("no trajectories given")
    robot, dt = trajs[0].robot, trajs[0].dt
    scenario = trajs[0].scenario
    fixed = ()
    xs, us, ys = [], [], []
    ages_parts = []
    for tr in trajs:
        if tr.robot != robot or tr.dt != dt:
            raise UsageError("mixed robots or time steps in one dataset")
        xs.append(tr.states[:-1])
        us.append(tr.controls)
        ys.append(tr.states[1:])
        if "fixed_rod" in tr.extra:
            fixed = (int(tr.extra["fixed_rod"]),)
        if contact_ages:
            if model is None:
                raise UsageError("contact ages need the robot model")
            ages_parts.append(_contact_ages(model, tr.states[:-1]))
    ages = None
    if contact_ages:
        keys = set()
        for part in ages_parts:
            keys.update(part)
        n_parts = [p.shape[0] for p in xs]
        ages = {k: np.concatenate(
            [part.get(k, np.zeros(n)) for part, n in
             zip(ages_parts, n_parts)]) for k in keys}
    return Dataset(robot, dt, np.concatenate(xs), np.concatenate(us),
                   np.concatenate(ys), scenario, fixed, ages)


def _contact_ages(model, states):
    """Consecutive-contact counters per slot for every row of a single
    trajectory's states, computed from batched detection."""
    batch = unpack_state(states, model.n_rods, model.n_cables)
    contacts = detect(model, batch)
    T = states.shape[0]
    ages = {}
    for c in contacts:
        active = np.broadcast_to(np.asarray(c.active), (T,))
        a = np.zeros(T)
        run = 0
        for t in range(1, T):
            run = run + 1 if active[t - 1] else 0
            a[t] = run
        ages[c.key] = a
    return ages


# ---------------------------------------------------------------------
# identified model
# ---------------------------------------------------------------------

@dataclass
class IdentifiedModel:
    """Learned parameters plus training provenance."""

    robot: str
    raw_params: dict = field(default_factory=params_mod.default_raw)
    mlp: Optional[ResidualMlp] = None
    frozen_stages: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def physical_params(self):
        return params_mod.squash_all(self.raw_params)

    def contact_mode(self):
        if self.mlp is None:
            return "linear"
        return "mlp_only" if "mlp-only" in self.frozen_stages \
            else "residual"

    def engine(self, model, contact_mode=None, gravity_scale=1.0):
        mode = contact_mode or self.contact_mode()
        return LearnableEngine(
            model, raw_params=self.raw_params,
            contact_config=ContactConfig(mode=mode, mlp=self.mlp),
            gravity_scale=gravity_scale)

    def save(self, path):
        doc = {"robot": self.robot, "raw_params": self.raw_params,
               "frozen_stages": self.frozen_stages,
               "provenance": self.provenance,
               "mlp": None if self.mlp is None else self.mlp.state_dict()}
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            doc = json.load(fh)
        mlp = None if doc.get("mlp") is None \
            else ResidualMlp.from_state_dict(doc["mlp"])
        return cls(robot=doc["robot"], raw_params=doc["raw_params"],
                   mlp=mlp, frozen_stages=list(doc["frozen_stages"]),
                   provenance=doc.get("provenance", {}))


# ---------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------

def _predict(engine, dataset, idx, phys, tc=None, train_mlp=False,
             tape=None):
    """Batched one-step prediction; returns the flat scalar list."""
    model = engine.model
    rows = dataset.states[idx]
    state = unpack_state(rows, model.n_rods, model.n_cables)
    controls = list(dataset.controls[idx].T)
    overrides = None
    if dataset.contact_ages is not None:
        overrides = {k: v[idx] for k, v in dataset.contact_ages.items()}
    contact_on = dataset.scenario != "hang"
    nxt = engine.step(state, controls, phys=phys,
                      fixed_rods=dataset.fixed_rods,
                      tc_overrides=overrides, train_mlp=train_mlp,
                      contact_enabled=contact_on, tape=tape)
    return state_scalars(nxt)


def _batch_loss(pred_scalars, target_rows):
    """Per-transition MSE over the packed state, as a tape node (or a
    raw array in value mode)."""
    D = len(pred_scalars)
    total = 0.0
    for j, p in enumerate(pred_scalars):
        diff = p - target_rows[..., j]
        total = diff * diff + total
    return total * (1.0 / D)


def one_step_loss(identified, model, transition, scenario="",
                  fixed_rods=()):
    """MSE of one (state, control, next state) triple, value mode.

    ``scenario``/``fixed_rods`` carry the trajectory context the bare
    triple lacks (suspension data pins a rod and skips contact).
    """
    x, u, y = transition
    engine = identified.engine(model)
    ds = Dataset(model.name, engine.dt, np.asarray(x)[None, :],
                 np.asarray(u)[None, :], np.asarray(y)[None, :],
                 scenario=scenario, fixed_rods=tuple(fixed_rods))
    pred = _predict(engine, ds, np.array([0]), engine.physical_params())
    loss = _batch_loss(pred, ds.next_states)
    val = float(np.asarray(ad.value_of(loss)).reshape(()))
    if not np.isfinite(val):
        raise NumericalFault("one-step prediction diverged")
    return val


def dataset_loss(identified, model, dataset, batch=1024):
    """Mean one-step MSE over a whole dataset (value mode)."""
    engine = identified.engine(model)
    phys = engine.physical_params()
    total, n = 0.0, len(dataset)
    for lo in range(0, n, batch):
        idx = np.arange(lo, min(lo + batch, n))
        pred = _predict(engine, dataset, idx, phys)
        losses = np.asarray(ad.value_of(_batch_loss(pred,
                                                    dataset.next_states[idx])))
        total += float(np.sum(losses))
    if not np.isfinite(total):
        raise NumericalFault("non-finite dataset loss")
    return total / n


# ---------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------

class Adam:
    """Adam with bias correction; state per parameter slot."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m, self.v = {}, {}
        self.t = 0

    def step(self, grads):
        """grads: dict name -> gradient (float or array); returns the
        update dict to subtract."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        out = {}
        for k, g in grads.items():
            m = self.m.get(k, 0.0) * b1 + (1 - b1) * g
            v = self.v.get(k, 0.0) * b2 + (1 - b2) * (g * g)
            self.m[k], self.v[k] = m, v
            out[k] = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return out


# ---------------------------------------------------------------------
# training
# ---------------------------------------------------------------------

@dataclass
class TrainConfig:
    """One stage's optimization schedule."""

    stage: str
    epochs: int = 40
    batch_size: int = 256
    lr: float = 0.1
    halve_every: int = 10
    seed: int = 0
    mlp_seed: int = 0
    mlp_output_scale: float = 100.0

    def __post_init__(self):
        if self.stage not in STAGE_GROUPS:
            raise UsageError(f"unknown stage '{self.stage}'")
        if min(self.epochs, self.batch_size, self.halve_every) <= 0 \
                or self.lr <= 0:
            raise UsageError("training schedule values must be positive")


def train_stage(identified, model, dataset, config, validation=None):
    """Optimize one parameter group; earlier groups stay bitwise frozen.

    Returns (new IdentifiedModel, curves) where curves is a list of
    per-epoch dicts with train/validation losses.
    """
    for pre in STAGE_PREREQS[config.stage]:
        if pre not in identified.frozen_stages:
            raise UsageError(
                f"stage '{config.stage}' requires '{pre}' first")
    ident = copy.deepcopy(identified)
    group = STAGE_GROUPS[config.stage]
    train_mlp = config.stage in ("contact-mlp", "mlp-only")
    if train_mlp and ident.mlp is None:
        ident.mlp = ResidualMlp(seed=config.mlp_seed,
                                output_scale=config.mlp_output_scale)
    mode = _STAGE_CONTACT_MODE.get(config.stage, "linear")
    engine = LearnableEngine(model, raw_params=ident.raw_params,
                             contact_config=ContactConfig(
                                 mode=mode, mlp=ident.mlp))

    rng = np.random.default_rng(config.seed)
    n = len(dataset)
    opt = Adam(config.lr)
    curves = []
    best = (copy.deepcopy(ident.raw_params),
            None if ident.mlp is None else
            copy.deepcopy(ident.mlp.state_dict()))
    aborted = False
    for epoch in range(config.epochs):
        opt.lr = config.lr * 0.5 ** (epoch // config.halve_every)
        order = rng.permutation(n)
        epoch_loss, seen = 0.0, 0
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            tape = ad.Tape()
            leaves = {k: tape.input(ident.raw_params[k]) for k in group}
            raw = dict(ident.raw_params)
            raw.update(leaves)
            phys = params_mod.squash_all(raw)
            if ident.mlp is not None:
                ident.mlp.zero_grads()
            try:
                pred = _predict(engine, dataset, idx, phys,
                                train_mlp=train_mlp, tape=tape)
                loss = _batch_loss(pred, dataset.next_states[idx])
            except NumericalFault:
                aborted = True
                break
            B = idx.shape[0]
            lval = float(np.mean(np.asarray(ad.value_of(loss))))
            if not np.isfinite(lval):
                aborted = True
                break
            epoch_loss += lval * B
            seen += B
            if isinstance(loss, ad.DualScalar):
                seed = np.full(B, 1.0 / B) \
                    if isinstance(loss.value, np.ndarray) else 1.0
                grads = tape.backward(loss, seed=seed)
                gdict = {k: grads.wrt(v) for k, v in leaves.items()}
            else:
                gdict = {}
            if train_mlp:
                # the backward seed already carries the 1/B weighting
                for i, g in enumerate(ident.mlp.gradients()):
                    gdict[f"mlp{i}"] = g
            updates = opt.step(gdict)
            for k in group:
                ident.raw_params[k] -= updates[k]
            if train_mlp:
                tensors = ident.mlp.parameters()
                for i, t in enumerate(tensors):
                    t -= updates[f"mlp{i}"]
        if aborted:
            break
        row = {"epoch": epoch, "lr": opt.lr,
               "train_loss": epoch_loss / max(seen, 1)}
        if validation is not None:
            row["val_loss"] = dataset_loss(ident, model, validation)
        curves.append(row)
        best = (copy.deepcopy(ident.raw_params),
                None if ident.mlp is None else
                copy.deepcopy(ident.mlp.state_dict()))
    ident.raw_params, mlp_state = best[0], best[1]
    if mlp_state is not None:
        ident.mlp = ResidualMlp.from_state_dict(mlp_state)
    if config.stage not in ident.frozen_stages:
        ident.frozen_stages.append(config.stage)
    prov = dict(ident.provenance)
    prov[config.stage] = {
        "epochs_run": len(curves), "aborted": aborted,
        "final_train_loss": curves[-1]["train_loss"] if curves else None,
        "n_transitions": n,
        "config": {"epochs": config.epochs,
                   "batch_size": config.batch_size, "lr": config.lr,
                   "halve_every": config.halve_every,
                   "seed": config.seed}}
    ident.provenance = prov
    return ident, curves


# ---------------------------------------------------------------------
# rollout evaluation
# ---------------------------------------------------------------------

def rollout_error(identified, model, traj, metric="CoM"):
    """Per-step error of an open-loop re-simulation of ``traj``.

    Returns (curve, diverged_at) where diverged_at is None or the step
    at which the learned model blew up (the curve is truncated there).
    """
    engine = identified.engine(model)
    x0 = unpack_state(traj.states[0], model.n_rods, model.n_cables)
    fixed = ()
    if "fixed_rod" in traj.extra:
        fixed = (int(traj.extra["fixed_rod"]),)
    diverged_at = None
    try:
        states, _ = engine.rollout(x0, traj.controls, traj.n_steps,
                                   fixed_rods=fixed)
    except DivergenceFault as exc:
        diverged_at = exc.step
        n = exc.step - 1
        states, _ = (engine.rollout(x0, traj.controls[:n], n,
                                    fixed_rods=fixed) if n > 0
                     else (traj.states[:1], None))
    T = states.shape[0]
    ref = traj.states[:T]
    if metric == "CoM":
        curve = np.linalg.norm(com_curve(model, states)
                               - com_curve(model, ref), axis=-1)
    elif metric == "position":
        errs = [np.linalg.norm(states[:, r * 13:r * 13 + 3]
                               - ref[:, r * 13:r * 13 + 3], axis=-1)
                for r in range(model.n_rods)]
        curve = np.mean(errs, axis=0)
    elif metric == "orientation":
        errs = []
        for r in range(model.n_rods):
            qa = states[:, r * 13 + 3:r * 13 + 7]
            qb = ref[:, r * 13 + 3:r * 13 + 7]
            qa = qa / np.linalg.norm(qa, axis=-1, keepdims=True)
            qb = qb / np.linalg.norm(qb, axis=-1, keepdims=True)
            dot = np.clip(np.abs(np.sum(qa * qb, axis=-1)), 0.0, 1.0)
            errs.append(2.0 * np.arccos(dot))
        curve = np.mean(errs, axis=0)
    else:
        raise UsageError(f"unknown metric '{metric}'")
    return curve, diverged_at
