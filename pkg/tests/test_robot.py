"""Robot topology loading, the reel motor and cable spring-dampers."""

import json

import numpy as np
import pytest

from tenseg.dynamics import RobotState, RodState
from tenseg.errors import DegenerateCable, ModelError
from tenseg.robot import (MIN_REST_LENGTH, Cable, RobotModel, RodBody,
                          anchor_kinematics, cable_wrenches,
                          effective_rest_length, load_robot,
                          rest_length_degenerate, step_motor)
from tenseg.vecmath import Quat, Vec3


def two_rod_model(**cable_kw):
    kw = dict(rod_a=0, offset_a=(0.0, 0.0, 0.5),
              rod_b=1, offset_b=(0.0, 0.0, 0.5),
              stiffness=100.0, damping=10.0, rest_length=1.0)
    kw.update(cable_kw)
    return RobotModel(
        "pair",
        [RodBody(1.0, 1.0), RodBody(1.0, 1.0)],
        [Cable(**kw)],
        (0.0, 0.0, -9.81))


def test_bundled_robots_load_and_validate():
    for name, n_rods in (("threebar", 3), ("sixbar", 6)):
        m = load_robot(name)
        assert m.n_rods == n_rods
        assert m.n_cables > 0
        assert m.control_dim == len(m.actuated_indices) > 0
        assert m.state_dim == n_rods * 13 + m.n_cables
        st = m.initial_state()
        assert len(st.rods) == n_rods and len(st.motors) == m.n_cables
        g = m.gravity_vec(0.5)
        assert g.z == pytest.approx(0.5 * m.gravity[2])
        # anchors must sit on the rod surface, not far outside it
        for c in m.cables:
            for rod, off in ((c.rod_a, c.offset_a), (c.rod_b, c.offset_b)):
                assert np.linalg.norm(off) <= m.bodies[rod].length


def test_load_robot_from_path(tmp_path):
    src = load_robot("threebar")
    doc = {
        "name": "copy",
        "gravity": list(src.gravity),
        "rods": [{"mass": b.mass, "length": b.length, "radius": b.radius,
                  "position": list(p), "quaternion": list(q)}
                 for b, (p, q) in zip(src.bodies, src.initial_poses)],
        "cables": [{"rod_a": c.rod_a, "offset_a": list(c.offset_a),
                    "rod_b": c.rod_b, "offset_b": list(c.offset_b),
                    "stiffness": c.stiffness, "damping": c.damping,
                    "rest_length": c.rest_length, "actuated": c.actuated}
                   for c in src.cables],
    }
    path = tmp_path / "copy.json"
    path.write_text(json.dumps(doc))
    m = load_robot(str(path))
    assert m.n_rods == src.n_rods and m.n_cables == src.n_cables


def test_model_validation():
    with pytest.raises(ModelError):
        two_rod_model(rod_b=5)
    with pytest.raises(ModelError):
        two_rod_model(rod_b=0)


def test_motor_first_order_filter():
    w = 0.0
    for _ in range(2000):
        w = step_motor(w, 10.0, 0.01)
    # converges to the input with rate (1 - speed)^n
    assert w == pytest.approx(10.0 * (1 - (1 - 0.01) ** 2000), rel=1e-12)
    assert effective_rest_length(w, 1.0, 0.01) == pytest.approx(1.0 + 0.01 * w)
    # floor engages for large negative commands
    assert effective_rest_length(-1e6, 1.0, 0.01) == MIN_REST_LENGTH
    assert rest_length_degenerate(-1e6, 1.0, 0.01)
    assert not rest_length_degenerate(0.0, 1.0, 0.01)


def test_anchor_kinematics_rigid_body_formula():
    q = Quat.identity().integrate(Vec3(0.0, 0.0, 1.0), 0.7)
    st = RodState(Vec3(1, 2, 3), q, Vec3(0.5, 0, 0), Vec3(0, 0, 2.0))
    pos, vel, arm = anchor_kinematics(st, (0.0, 0.0, 0.5))
    assert np.allclose(arm.values(), q.rotate(Vec3(0, 0, 0.5)).values())
    assert np.allclose(pos.values(), (st.p + arm).values())
    want_v = st.v + st.w.cross(arm)
    assert np.allclose(vel.values(), want_v.values())


def hang_state(separation):
    """Two vertical rods, cable between their top caps, rods separated
    along x so the cable is horizontal with known length."""
    r0 = RodState(Vec3(0, 0, 0), Quat.identity(), Vec3.zero(), Vec3.zero())
    r1 = RodState(Vec3(separation, 0, 0), Quat.identity(),
                  Vec3.zero(), Vec3.zero())
    return RobotState([r0, r1], [0.0])


def test_cable_tension_hand_example():
    model = two_rod_model()
    st = hang_state(1.5)        # cable length 1.5, rest 1.0
    w = cable_wrenches(model, st, [1.0])
    # T = k (l - l0) = 100 * 0.5 pulling rod 0 toward +x
    assert np.allclose(w[0].f.values(), (50.0, 0.0, 0.0), atol=1e-12)
    assert np.allclose(w[1].f.values(), (-50.0, 0.0, 0.0), atol=1e-12)
    # torque = arm x f, arm = (0,0,0.5)
    assert np.allclose(w[0].tau.values(), (0.0, 25.0, 0.0), atol=1e-12)
    # force pair sums to zero -> momentum conserving
    assert np.allclose((w[0].f + w[1].f).values(), (0, 0, 0), atol=1e-15)


def test_cable_damping_term():
    model = two_rod_model()
    st = hang_state(1.5)
    st.rods[1].v = Vec3(2.0, 0.0, 0.0)      # separating at 2 m/s
    w = cable_wrenches(model, st, [1.0])
    # T = 100*0.5 + 10*2
    assert w[0].f.x == pytest.approx(70.0)
    # damping cannot push: closing fast enough clamps T at 0
    st.rods[1].v = Vec3(-10.0, 0.0, 0.0)
    w = cable_wrenches(model, st, [1.0])
    assert w[0].f.x == pytest.approx(0.0, abs=1e-12)


def test_slack_cable_is_force_free():
    model = two_rod_model()
    st = hang_state(0.8)                    # length 0.8 < rest 1.0
    w = cable_wrenches(model, st, [1.0])
    assert np.allclose(w[0].f.values(), (0, 0, 0), atol=1e-15)
    assert np.allclose(w[0].tau.values(), (0, 0, 0), atol=1e-15)


def test_stiffness_damping_overrides():
    model = two_rod_model()
    st = hang_state(1.5)
    w = cable_wrenches(model, st, [1.0], stiffness=40.0, damping=0.0)
    assert w[0].f.x == pytest.approx(40.0 * 0.5)


def test_degenerate_cable_raises():
    model = two_rod_model(offset_a=(0.0, 0.0, 0.0), offset_b=(0.0, 0.0, 0.0))
    st = hang_state(0.0)                    # coincident anchors
    with pytest.raises(DegenerateCable):
        cable_wrenches(model, st, [1.0])
