"""Trajectory persistence: bit-exact round trips and format guards."""

import numpy as np
import pytest

from tenseg.errors import FormatError
from tenseg.trajectory import LAYOUT_VERSION, Trajectory


def make_traj(T=7, D=5, du=2, seed=0):
    rng = np.random.default_rng(seed)
    return Trajectory(robot="threebar", dt=0.001,
                      states=rng.normal(size=(T + 1, D)) * 1e3,
                      controls=rng.uniform(-100, 100, size=(T, du)),
                      seed=seed, scenario="hang", control_interval=100,
                      extra={"fixed_rod": 0})


def test_round_trip_bit_exact(tmp_path):
    tr = make_traj()
    p = tmp_path / "t.jsonl"
    tr.save(p)
    tr2 = Trajectory.load(p)
    assert np.array_equal(tr.states, tr2.states)
    assert np.array_equal(tr.controls, tr2.controls)
    assert tr2.robot == "threebar" and tr2.dt == 0.001
    assert tr2.seed == 0 and tr2.scenario == "hang"
    assert tr2.control_interval == 100
    assert tr2.extra == {"fixed_rod": 0}
    assert tr2.n_steps == 7


def test_save_is_deterministic_bytes(tmp_path):
    tr = make_traj(seed=3)
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    tr.save(a)
    Trajectory.load(a).save(b)
    assert a.read_bytes() == b.read_bytes()


def test_shape_validation():
    with pytest.raises(FormatError):
        Trajectory("r", 0.001, np.zeros((5, 3)), np.zeros((5, 1)))
    with pytest.raises(FormatError):
        Trajectory("r", 0.001, np.zeros(5), np.zeros((4, 1)))


def test_load_guards(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text("")
    with pytest.raises(FormatError):
        Trajectory.load(p)
    p.write_text("{not json\n")
    with pytest.raises(FormatError):
        Trajectory.load(p)
    p.write_text('{"layout_version": 999}\n{"t":0,"x":[0],"u":[]}\n')
    with pytest.raises(FormatError):
        Trajectory.load(p)
    # metadata only, no rows
    tr = make_traj()
    good = tmp_path / "good.jsonl"
    tr.save(good)
    first_line = good.read_text().splitlines()[0]
    p.write_text(first_line + "\n")
    with pytest.raises(FormatError):
        Trajectory.load(p)
    assert LAYOUT_VERSION == 1
