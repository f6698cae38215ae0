"""Identification pipeline: datasets, losses, staging and the optimizer.

The end-to-end recovery criteria (parameter ratios, rollout errors,
closed-loop identifiability) live in test_acceptance.py; this file
checks the machinery.
"""

import numpy as np
import pytest

from tenseg import params as params_mod
from tenseg import sysid
from tenseg.engine import LearnableEngine
from tenseg.errors import UsageError
from tenseg.robot import load_robot
from tenseg.trajectory import Trajectory


@pytest.fixture(scope="module")
def model():
    return load_robot("threebar")


@pytest.fixture(scope="module")
def hang_traj(model):
    """Short suspension trajectory generated by the learnable engine
    itself (fast, no reference simulator involved)."""
    eng = LearnableEngine(model)
    state = model.initial_state()
    for r in state.rods:
        r.p = r.p + type(r.p)(0.0, 0.0, 4.0)
    rng = np.random.default_rng(0)
    T = 300
    table = rng.uniform(-100, 100, (T // 50 + 1, model.control_dim))
    controls = np.stack([table[t // 50] for t in range(T)])
    states, applied = eng.rollout(state, controls, T, fixed_rods=(0,))
    return Trajectory(robot=model.name, dt=eng.dt, states=states,
                      controls=applied, seed=0, scenario="hang",
                      control_interval=50, extra={"fixed_rod": 0})


def test_dataset_from_trajectories(model, hang_traj):
    ds = sysid.dataset_from_trajectories([hang_traj, hang_traj], model)
    assert len(ds) == 2 * hang_traj.n_steps
    assert ds.fixed_rods == (0,)
    assert ds.scenario == "hang"
    # transitions don't cross the trajectory boundary
    T = hang_traj.n_steps
    assert np.array_equal(ds.states[T], hang_traj.states[0])
    assert np.array_equal(ds.next_states[T - 1], hang_traj.states[-1])
    sub = ds.subset(np.arange(5))
    assert len(sub) == 5
    with pytest.raises(UsageError):
        sysid.dataset_from_trajectories([])


def test_contact_ages_prefix_counts(model):
    """Counters equal consecutive active steps, reset on separation."""
    eng = LearnableEngine(model)
    # drop from low height: airborne, impact, settle
    state = model.initial_state()
    for r in state.rods:
        r.p = r.p + type(r.p)(0.0, 0.0, 0.05)
    states, applied = eng.rollout(state, None, 120)
    tr = Trajectory(robot=model.name, dt=eng.dt, states=states,
                    controls=applied, scenario="throw")
    ds = sysid.dataset_from_trajectories([tr], model, contact_ages=True)
    assert ds.contact_ages
    from tenseg.contact import detect
    from tenseg.dynamics import unpack_state
    batch = unpack_state(tr.states[:-1], model.n_rods, model.n_cables)
    active = {c.key: np.broadcast_to(np.asarray(c.active), (120,))
              for c in detect(model, batch)}
    touched = 0
    for key, ages in ds.contact_ages.items():
        run = 0
        for t in range(120):
            assert ages[t] == run
            run = run + 1 if active[key][t] else 0
        touched += int(np.any(active[key]))
    assert touched > 0                      # the drop actually lands


def test_one_step_and_dataset_loss_consistency(model, hang_traj):
    ds = sysid.dataset_from_trajectories([hang_traj], model)
    ident = sysid.IdentifiedModel("threebar")
    ident.raw_params["cable_stiffness"] += 0.5   # make the loss nonzero
    full = sysid.dataset_loss(ident, model, ds)
    assert full > 0.0
    singles = [sysid.one_step_loss(
        ident, model, (ds.states[i], ds.controls[i], ds.next_states[i]),
        scenario=ds.scenario, fixed_rods=ds.fixed_rods)
        for i in range(len(ds))]
    # dataset loss is the mean of per-transition losses
    assert full == pytest.approx(np.mean(singles), rel=1e-9, abs=1e-20)
    assert all(s >= 0.0 for s in singles)


def test_self_data_has_zero_loss(model, hang_traj):
    """Data generated at the default parameters is explained exactly."""
    ds = sysid.dataset_from_trajectories([hang_traj], model)
    ident = sysid.IdentifiedModel("threebar")
    assert sysid.dataset_loss(ident, model, ds) < 1e-25


def test_adam_matches_reference_formulas():
    """Two steps of Adam against hand-computed values."""
    opt = sysid.Adam(lr=0.1)
    g1 = {"a": 2.0}
    up1 = opt.step(g1)
    # t=1: m=0.2/bc m_hat=2, v=0.004/bc v_hat=4 -> update ~ lr * 2/2
    assert up1["a"] == pytest.approx(0.1 * 2.0 / (2.0 + 1e-8), rel=1e-12)
    up2 = opt.step({"a": -1.0})
    m = 0.9 * 0.2 + 0.1 * -1.0
    v = 0.999 * 0.004 + 0.001 * 1.0
    mh = m / (1 - 0.9 ** 2)
    vh = v / (1 - 0.999 ** 2)
    assert up2["a"] == pytest.approx(0.1 * mh / (np.sqrt(vh) + 1e-8),
                                     rel=1e-12)


def test_stage_prerequisites_enforced(model, hang_traj):
    ds = sysid.dataset_from_trajectories([hang_traj], model)
    ident = sysid.IdentifiedModel("threebar")
    with pytest.raises(UsageError):
        sysid.train_stage(ident, model, ds,
                          sysid.TrainConfig(stage="contact-linear",
                                            epochs=1))
    with pytest.raises(UsageError):
        sysid.TrainConfig(stage="bogus")
    with pytest.raises(UsageError):
        sysid.TrainConfig(stage="noncontact", lr=-1.0)


def test_training_freezes_earlier_groups_bitwise(model, hang_traj):
    ds = sysid.dataset_from_trajectories([hang_traj], model)
    ident = sysid.IdentifiedModel("threebar")
    trained, curves = sysid.train_stage(
        ident, model, ds,
        sysid.TrainConfig(stage="noncontact", epochs=2, halve_every=1))
    assert "noncontact" in trained.frozen_stages
    assert len(curves) == 2 and "train_loss" in curves[0]
    # input model untouched (functional update)
    assert ident.frozen_stages == []
    # contact group stayed bitwise identical
    for k in params_mod.CONTACT_KEYS:
        assert trained.raw_params[k] == ident.raw_params[k]
    # training again with the same seed is deterministic
    trained2, curves2 = sysid.train_stage(
        ident, model, ds,
        sysid.TrainConfig(stage="noncontact", epochs=2, halve_every=1))
    assert trained.raw_params == trained2.raw_params
    assert curves == curves2


def test_identified_model_save_load_round_trip(model, tmp_path, hang_traj):
    ds = sysid.dataset_from_trajectories([hang_traj], model)
    ident = sysid.IdentifiedModel("threebar")
    trained, _ = sysid.train_stage(
        ident, model, ds,
        sysid.TrainConfig(stage="noncontact", epochs=1))
    p = tmp_path / "ident.json"
    trained.save(p)
    loaded = sysid.IdentifiedModel.load(p)
    assert loaded.raw_params == trained.raw_params
    assert loaded.frozen_stages == trained.frozen_stages
    assert loaded.robot == trained.robot
    # byte-identical re-save
    p2 = tmp_path / "ident2.json"
    loaded.save(p2)
    assert p.read_bytes() == p2.read_bytes()


def test_rollout_error_zero_on_self_data(model, hang_traj):
    ident = sysid.IdentifiedModel("threebar")
    curve, diverged = sysid.rollout_error(ident, model, hang_traj,
                                          metric="position")
    assert diverged is None
    assert curve.shape[0] == hang_traj.states.shape[0]
    assert curve[-1] < 1e-10
    com, _ = sysid.rollout_error(ident, model, hang_traj, metric="CoM")
    ori, _ = sysid.rollout_error(ident, model, hang_traj,
                                 metric="orientation")
    assert com[-1] < 1e-10 and ori[-1] < 1e-6
    with pytest.raises(UsageError):
        sysid.rollout_error(ident, model, hang_traj, metric="speed")
