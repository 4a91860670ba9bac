import copy
import json

import numpy as np
import pytest

from gaitforge import charmodel as cm
from gaitforge.charmodel import (ValidationError, builtin_character_path,
                                 from_dict, load_character, mirror_action,
                                 mirror_observation)


@pytest.fixture(scope="module")
def biped_dict():
    with open(builtin_character_path("biped9")) as f:
        return json.load(f)


@pytest.fixture(scope="module")
def biped():
    return load_character(builtin_character_path("biped9"))


def test_biped_shape(biped):
    assert len(biped.links) == 9
    assert biped.ndof == 21
    assert biped.nact == 15
    assert biped.obs_dim == 44
    assert len(biped.end_effectors) == 2
    assert abs(biped.total_mass - 50.0) < 1e-12
    assert list(biped.act_dofs) == list(range(6, 21))
    assert np.all(biped.torque_limits > 0)


def test_minimal_single_link(tmp_path):
    d = {
        "name": "puck",
        "links": [{"name": "body", "mass": 1.0, "inertia": [0.01, 0.01, 0.01],
                   "shapes": [{"kind": "sphere", "radius": 0.1, "center": [0, 0, 0]}]}],
        "joints": [{"name": "root", "kind": "free", "parent_link": -1, "child_link": 0}],
        "end_effectors": [0],
        # obs layout: [x, y, wx, wy, wz] + qd(6) + contact + target speed
        "mirror_obs": {
            "target": list(range(13)),
            "sign": [-1, 1, 1, -1, -1, -1, 1, 1, 1, -1, -1, 1, 1],
        },
    }
    p = tmp_path / "puck.model"
    p.write_text(json.dumps(d))
    m = load_character(str(p))
    assert m.nact == 0
    assert m.ndof == 6
    assert m.obs_dim == 13
    assert len(m.mirror_act) == 0
    assert m.act_dofs.shape == (0,)


def test_mirror_involution_exact(biped):
    rng = np.random.default_rng(0)
    for _ in range(1000):
        v = rng.normal(size=biped.obs_dim)
        w = mirror_observation(biped, mirror_observation(biped, v))
        assert np.array_equal(w, v)
        a = rng.normal(size=biped.nact)
        b = mirror_action(biped, mirror_action(biped, a))
        assert np.array_equal(b, a)


def test_mirror_preserves_norm(biped):
    rng = np.random.default_rng(1)
    for _ in range(200):
        v = rng.normal(size=biped.obs_dim)
        np.testing.assert_allclose(np.linalg.norm(mirror_observation(biped, v)),
                                   np.linalg.norm(v), rtol=1e-15)


def test_mirror_batched(biped):
    rng = np.random.default_rng(2)
    V = rng.normal(size=(32, biped.obs_dim))
    M = mirror_observation(biped, V)
    for i in range(32):
        assert np.array_equal(M[i], mirror_observation(biped, V[i]))


def test_mirror_act_swaps_leg_partitions(biped):
    left = set(biped.left_leg_dofs)
    right = set(biped.right_leg_dofs)
    tgt = biped.mirror_act.target
    assert {int(tgt[i]) for i in left} == right
    assert {int(tgt[i]) for i in right} == left
    # spine/neck actions map to themselves
    for i in set(range(biped.nact)) - left - right:
        assert int(tgt[i]) == i


def test_mirror_act_hip_slots(biped):
    # action 3..5 drive the left hip, 9..11 the right hip
    a = np.zeros(biped.nact)
    a[3:6] = (0.5, 0.25, -0.75)
    b = mirror_action(biped, a)
    assert np.all(b[3:6] == 0)
    assert np.count_nonzero(b[9:12]) == 3


def test_mirror_obs_flips_lateral_offset(biped):
    # obs slot 0 is the root lateral translation
    obs = np.zeros(biped.obs_dim)
    obs[0] = 0.3
    m = mirror_observation(biped, obs)
    assert m[0] == -0.3


def test_mirror_obs_keeps_height_and_target(biped):
    obs = np.zeros(biped.obs_dim)
    obs[1] = 0.95            # root height
    obs[-1] = 1.5            # target speed
    m = mirror_observation(biped, obs)
    assert m[1] == 0.95
    assert m[-1] == 1.5


def test_mirror_obs_swaps_contact_flags(biped):
    obs = np.zeros(biped.obs_dim)
    nee = len(biped.end_effectors)
    c0 = biped.obs_dim - 1 - nee
    obs[c0] = 1.0            # left foot touching
    m = mirror_observation(biped, obs)
    assert m[c0] == 0.0
    assert m[c0 + 1] == 1.0


def _expect_invalid(d, needle):
    with pytest.raises(ValidationError) as ei:
        from_dict(d)
    assert needle in str(ei.value), f"{needle!r} not in {ei.value}"


def test_validation_errors(biped_dict):
    cases = [
        ("mass must be positive", lambda d: d["links"][0].update(mass=0.0)),
        ("inertia must be symmetric",
         lambda d: d["links"][0].update(inertia=[[1, 0.1, 0], [0, 1, 0], [0, 0, 1]])),
        ("inertia must be positive definite",
         lambda d: d["links"][0].update(inertia=[1e-3, -1e-3, 1e-3])),
        ("unknown shape kind",
         lambda d: d["links"][0]["shapes"].append({"kind": "box", "radius": 1})),
        ("unknown joint kind", lambda d: d["joints"][3].update(kind="prismatic")),
        ("child_link must equal the joint index",
         lambda d: d["joints"][3].update(child_link=4)),
        ("parent_link must precede",
         lambda d: d["joints"][3].update(parent_link=7)),
        ("needs 1 axes", lambda d: d["joints"][4].update(axes=[])),
        ("axes must be unit vectors",
         lambda d: d["joints"][4].update(axes=[[2, 0, 0]])),
        ("limit lo must be < hi",
         lambda d: d["joints"][4].update(limits=[[0.5, -0.5]])),
        ("free joint cannot be actuated",
         lambda d: d["joints"][0].update(actuated=True, torque_limit=[1] * 6)),
        ("torque_limit must be positive",
         lambda d: d["joints"][4].update(torque_limit=[0.0])),
        ("one joint per link", lambda d: d["joints"].pop()),
        ("root joint must be a 6-DOF free joint",
         lambda d: d["joints"][0].update(kind="ball", axes=[])),
        ("end_effectors: link index 99 out of range",
         lambda d: d["end_effectors"].append(99)),
        ("duplicate link index",
         lambda d: d["end_effectors"].append(d["end_effectors"][0])),
        ("torso_link 99 out of range", lambda d: d.update(torso_link=99)),
        ("equal size", lambda d: d["left_leg_dofs"].pop()),
        ("must be disjoint",
         lambda d: d.update(right_leg_dofs=d["left_leg_dofs"])),
        ("out of action range", lambda d: d.update(left_leg_dofs=[99] + d["left_leg_dofs"][1:])),
        ("not an involution",
         lambda d: d["mirror_act"]["target"].__setitem__(slice(0, 3), [1, 2, 0])),
        ("signs must be +1 or -1",
         lambda d: d["mirror_act"]["sign"].__setitem__(0, 2)),
        ("friction must be nonnegative", lambda d: d.update(friction=-0.5)),
        ("restitution must lie in [0, 1]", lambda d: d.update(restitution=1.5)),
    ]
    for needle, mutate in cases:
        d = copy.deepcopy(biped_dict)
        mutate(d)
        _expect_invalid(d, needle)


def test_duplicate_mirror_index(biped_dict):
    d = copy.deepcopy(biped_dict)
    # two slots pointing at the same target
    d["mirror_obs"]["target"][0] = d["mirror_obs"]["target"][1]
    _expect_invalid(d, "not a permutation")


def test_bad_json_reports_parse_error(tmp_path):
    p = tmp_path / "broken.model"
    p.write_text("{not json")
    with pytest.raises(cm.ParseError, match="not valid JSON"):
        load_character(str(p))
    # malformed-document errors stay catchable as format violations
    assert issubclass(cm.ParseError, ValidationError)


def test_missing_mirror_obs(biped_dict):
    d = copy.deepcopy(biped_dict)
    del d["mirror_obs"]
    _expect_invalid(d, "mirror_obs: missing")


def test_mirror_act_must_map_left_onto_right(biped_dict):
    d = copy.deepcopy(biped_dict)
    n = len(d["mirror_act"]["target"])
    d["mirror_act"]["target"] = list(range(n))  # identity, a valid involution
    d["mirror_act"]["sign"] = [1] * n
    _expect_invalid(d, "map left_leg_dofs onto right_leg_dofs")


def test_limits_null_means_unbounded(tmp_path, biped_dict):
    d = copy.deepcopy(biped_dict)
    d["joints"][4]["limits"] = [[None, None]]
    m = from_dict(d)
    ds = m.joints[4].dof_start
    assert np.isneginf(m.joints[4].limit_lo[0])
    assert np.isposinf(m.joints[4].limit_hi[0])
    assert ds > 0
