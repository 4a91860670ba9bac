"""Character models: articulated rigid-body descriptions loaded from JSON.

A character file describes a kinematic tree of links connected by joints,
plus the metadata the training stack needs: end-effector links for contact
flags, mirror maps for the symmetry machinery, and the partition of leg
actuators into left and right sets.

Axis conventions (world and link frames at the zero pose):
    +y  vertical (up), gravity acts along -y
    +z  sagittal (forward travel direction)
    +x  frontal (lateral)

Joint kinds and their generalized coordinates:
    free       6 DOF: world translation (x, y, z) then exponential-map
               rotation (wx, wy, wz). Velocity rows are world linear velocity
               and world angular velocity.
    ball       3 DOF exponential-map rotation; velocity is the relative
               angular velocity expressed in the parent frame.
    universal  2 DOF, rotation about axes[0] then axes[1] (joint frame).
    revolute   1 DOF about axes[0].

The observation layout produced by the environment is
    [q without the root forward translation, qd, contact flags, target speed]
and the file's mirror_obs map is indexed against exactly that layout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

JOINT_DOF = {"free": 6, "ball": 3, "universal": 2, "revolute": 1}

# dof index of the root forward (sagittal) translation, excluded from observations
ROOT_FORWARD_DOF = 2


class ValidationError(ValueError):
    """Raised when a character description violates the format contract."""


class ParseError(ValidationError):
    """Raised when a character file is not even well-formed JSON."""


@dataclass
class Shape:
    """Collision primitive attached to a link (local frame)."""

    kind: str                # "sphere" or "capsule"
    radius: float
    center: np.ndarray = None          # sphere
    p0: np.ndarray = None              # capsule segment ends
    p1: np.ndarray = None


@dataclass
class Link:
    name: str
    mass: float
    com: np.ndarray                    # center of mass, link frame
    inertia: np.ndarray                # 3x3 about the COM, link frame
    shapes: list = field(default_factory=list)


@dataclass
class Joint:
    name: str
    kind: str
    parent_link: int                   # -1 for the world
    child_link: int
    parent_offset: np.ndarray          # joint origin in the parent frame
    axes: np.ndarray                   # (n_axes, 3), unit vectors
    limit_lo: np.ndarray               # per dof; -inf where unlimited
    limit_hi: np.ndarray
    torque_limit: np.ndarray           # per dof; only meaningful if actuated
    actuated: bool
    dof_start: int = 0                 # filled in by the model

    @property
    def ndof(self) -> int:
        return JOINT_DOF[self.kind]


@dataclass
class SignedPermutation:
    """Involutive signed permutation: (Sv)[i] = sign[i] * v[target[i]]."""

    target: np.ndarray
    sign: np.ndarray

    def apply(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v)
        return v[..., self.target] * self.sign

    def __len__(self) -> int:
        return len(self.target)


@dataclass
class CharacterModel:
    name: str
    links: list
    joints: list
    end_effectors: list
    mirror_obs: SignedPermutation
    mirror_act: SignedPermutation
    left_leg_dofs: list
    right_leg_dofs: list
    torso_link: int = 0
    friction: float = 1.0
    restitution: float = 0.0

    # derived, filled by _finalize
    ndof: int = 0
    nact: int = 0
    act_dofs: np.ndarray = None        # generalized-coordinate index per action dim
    torque_limits: np.ndarray = None   # per action dim
    total_mass: float = 0.0

    @property
    def obs_dim(self) -> int:
        return (self.ndof - 1) + self.ndof + len(self.end_effectors) + 1

    def _finalize(self):
        start = 0
        act = []
        tl = []
        for j in self.joints:
            j.dof_start = start
            if j.actuated:
                act.extend(range(start, start + j.ndof))
                tl.extend(j.torque_limit.tolist())
            start += j.ndof
        self.ndof = start
        self.act_dofs = np.asarray(act, dtype=np.intp)
        self.nact = len(act)
        self.torque_limits = np.asarray(tl, dtype=np.float64)
        self.total_mass = float(sum(l.mass for l in self.links))


def assemble(name, links, joints, end_effectors=(), torso_link=0,
             friction=1.0, restitution=0.0) -> CharacterModel:
    """Build a bare CharacterModel from parts, skipping file-level checks.

    Intended for programmatic rigs (test fixtures, analysis scripts) that
    need the dynamics layer but not observations or mirror maps; in
    particular the root joint does not have to be free. Mirror maps are
    left empty.
    """
    ident = SignedPermutation(np.zeros(0, dtype=np.intp), np.zeros(0))
    model = CharacterModel(
        name=name, links=list(links), joints=list(joints),
        end_effectors=list(end_effectors),
        mirror_obs=ident, mirror_act=ident,
        left_leg_dofs=[], right_leg_dofs=[],
        torso_link=torso_link, friction=friction, restitution=restitution)
    model._finalize()
    return model


def mirror_observation(model: CharacterModel, obs: np.ndarray) -> np.ndarray:
    """Reflect an observation (or batch) through the sagittal plane."""
    return model.mirror_obs.apply(obs)


def mirror_action(model: CharacterModel, act: np.ndarray) -> np.ndarray:
    """Reflect an action (or batch) through the sagittal plane."""
    return model.mirror_act.apply(act)


def _vec3(x, what):
    v = np.asarray(x, dtype=np.float64)
    if v.shape != (3,):
        raise ValidationError(f"{what}: expected a 3-vector, got shape {v.shape}")
    return v


def _parse_shape(d, where):
    kind = d.get("kind")
    if kind == "sphere":
        return Shape(kind="sphere", radius=float(d["radius"]),
                     center=_vec3(d["center"], f"{where} sphere center"))
    if kind == "capsule":
        return Shape(kind="capsule", radius=float(d["radius"]),
                     p0=_vec3(d["p0"], f"{where} capsule p0"),
                     p1=_vec3(d["p1"], f"{where} capsule p1"))
    raise ValidationError(f"{where}: unknown shape kind {kind!r}")


def _parse_link(d, idx):
    where = f"links[{idx}]"
    try:
        mass = float(d["mass"])
    except KeyError:
        raise ValidationError(f"{where}: missing mass") from None
    if not mass > 0:
        raise ValidationError(f"{where}: mass must be positive, got {mass}")
    inertia = np.asarray(d["inertia"], dtype=np.float64)
    if inertia.shape == (3,):
        inertia = np.diag(inertia)
    if inertia.shape != (3, 3):
        raise ValidationError(f"{where}: inertia must be a 3x3 matrix or diagonal 3-vector")
    if not np.allclose(inertia, inertia.T, atol=1e-12):
        raise ValidationError(f"{where}: inertia must be symmetric")
    if np.any(np.linalg.eigvalsh(inertia) <= 0):
        raise ValidationError(f"{where}: inertia must be positive definite")
    shapes = [_parse_shape(s, where) for s in d.get("shapes", [])]
    return Link(name=str(d.get("name", f"link{idx}")), mass=mass,
                com=_vec3(d.get("com", (0, 0, 0)), f"{where} com"),
                inertia=inertia, shapes=shapes)


def _parse_joint(d, idx, n_links):
    where = f"joints[{idx}]"
    kind = d.get("kind")
    if kind not in JOINT_DOF:
        raise ValidationError(f"{where}: unknown joint kind {kind!r}")
    ndof = JOINT_DOF[kind]
    parent = int(d["parent_link"])
    child = int(d["child_link"])
    if child != idx:
        raise ValidationError(f"{where}: child_link must equal the joint index ({idx}), got {child}")
    if not -1 <= parent < n_links:
        raise ValidationError(f"{where}: parent_link {parent} out of range")
    if parent >= child:
        raise ValidationError(f"{where}: parent_link must precede child_link (tree order)")

    n_axes = {"free": 0, "ball": 0, "universal": 2, "revolute": 1}[kind]
    axes = np.asarray(d.get("axes", np.zeros((0, 3))), dtype=np.float64).reshape(-1, 3)
    if axes.shape[0] != n_axes:
        raise ValidationError(f"{where}: {kind} joint needs {n_axes} axes, got {axes.shape[0]}")
    for a in axes:
        if abs(np.linalg.norm(a) - 1.0) > 1e-9:
            raise ValidationError(f"{where}: axes must be unit vectors")

    lim = d.get("limits")
    if lim is None:
        lo = np.full(ndof, -np.inf)
        hi = np.full(ndof, np.inf)
    else:
        lim = [[(-np.inf if v is None else float(v)) for v in pair] for pair in lim]
        lim = np.asarray(lim, dtype=np.float64)
        if lim.shape != (ndof, 2):
            raise ValidationError(f"{where}: limits must be {ndof} [lo, hi] pairs")
        lo, hi = lim[:, 0], lim[:, 1]
        hi = np.where(np.isneginf(hi), np.inf, hi)
        if np.any(lo >= hi):
            raise ValidationError(f"{where}: limit lo must be < hi")

    actuated = bool(d.get("actuated", False))
    tq = np.asarray(d.get("torque_limit", np.zeros(ndof)), dtype=np.float64).reshape(-1)
    if actuated:
        if kind == "free":
            raise ValidationError(f"{where}: a free joint cannot be actuated")
        if tq.shape[0] != ndof:
            raise ValidationError(f"{where}: torque_limit must have {ndof} entries")
        if np.any(tq <= 0):
            raise ValidationError(f"{where}: torque_limit must be positive for actuated joints")

    return Joint(name=str(d.get("name", f"joint{idx}")), kind=kind, parent_link=parent,
                 child_link=child, parent_offset=_vec3(d.get("parent_offset", (0, 0, 0)),
                                                       f"{where} parent_offset"),
                 axes=axes, limit_lo=lo, limit_hi=hi, torque_limit=tq, actuated=actuated)


def _parse_signed_permutation(d, n, what):
    if d is None:
        if n == 0:
            return SignedPermutation(np.zeros(0, dtype=np.intp), np.zeros(0))
        raise ValidationError(f"{what}: missing")
    target = np.asarray(d["target"], dtype=np.intp)
    sign = np.asarray(d["sign"], dtype=np.float64)
    if target.shape != (n,) or sign.shape != (n,):
        raise ValidationError(f"{what}: expected length {n}, got {len(target)} targets / {len(sign)} signs")
    if not np.all(np.isin(sign, (-1.0, 1.0))):
        raise ValidationError(f"{what}: signs must be +1 or -1")
    seen = np.zeros(n, dtype=bool)
    for t in target:
        if not 0 <= t < n or seen[t]:
            raise ValidationError(f"{what} not a permutation (index {t} repeated or out of range)")
        seen[t] = True
    # involution: applying the map twice must give back the input exactly
    if not (np.all(target[target] == np.arange(n)) and np.all(sign[target] == sign)):
        raise ValidationError(f"{what} not an involution")
    return SignedPermutation(target=target, sign=sign)


def from_dict(d: dict) -> CharacterModel:
    """Build and validate a CharacterModel from a parsed JSON dict."""
    links = [_parse_link(l, i) for i, l in enumerate(d.get("links", []))]
    if not links:
        raise ValidationError("links: at least one link required")
    joints = [_parse_joint(j, i, len(links)) for i, j in enumerate(d.get("joints", []))]
    if len(joints) != len(links):
        raise ValidationError(f"need one joint per link, got {len(joints)} joints / {len(links)} links")
    if joints[0].parent_link != -1:
        raise ValidationError("joints[0]: the first joint must attach link 0 to the world (parent -1)")
    if joints[0].kind != "free":
        raise ValidationError("joints[0]: the root joint must be a 6-DOF free joint")
    for j in joints[1:]:
        if j.parent_link < 0:
            raise ValidationError(f"{j.name}: only the root joint may have parent -1")

    ee = [int(i) for i in d.get("end_effectors", [])]
    for i in ee:
        if not 0 <= i < len(links):
            raise ValidationError(f"end_effectors: link index {i} out of range")
    if len(set(ee)) != len(ee):
        raise ValidationError("end_effectors: duplicate link index")

    torso = int(d.get("torso_link", 0))
    if not 0 <= torso < len(links):
        raise ValidationError(f"torso_link {torso} out of range")

    model = CharacterModel(
        name=str(d.get("name", "character")),
        links=links, joints=joints, end_effectors=ee,
        mirror_obs=None, mirror_act=None,
        left_leg_dofs=[int(i) for i in d.get("left_leg_dofs", [])],
        right_leg_dofs=[int(i) for i in d.get("right_leg_dofs", [])],
        torso_link=torso,
        friction=float(d.get("friction", 1.0)),
        restitution=float(d.get("restitution", 0.0)),
    )
    model._finalize()

    model.mirror_obs = _parse_signed_permutation(d.get("mirror_obs"), model.obs_dim, "mirror_obs")
    model.mirror_act = _parse_signed_permutation(d.get("mirror_act"), model.nact, "mirror_act")

    left, right = model.left_leg_dofs, model.right_leg_dofs
    if len(left) != len(right):
        raise ValidationError("left_leg_dofs and right_leg_dofs must have equal size")
    if set(left) & set(right):
        raise ValidationError("left_leg_dofs and right_leg_dofs must be disjoint")
    for i in left + right:
        if not 0 <= i < model.nact:
            raise ValidationError(f"leg dof index {i} out of action range")
    if left:
        mapped = {int(model.mirror_act.target[i]) for i in left}
        if mapped != set(right):
            raise ValidationError("mirror_act must map left_leg_dofs onto right_leg_dofs")

    if model.friction < 0:
        raise ValidationError("friction must be nonnegative")
    if not 0 <= model.restitution <= 1:
        raise ValidationError("restitution must lie in [0, 1]")
    return model


def load_character(path: str) -> CharacterModel:
    """Load and validate a character file.

    Raises ValidationError with the offending field named if the file
    violates the format contract.
    """
    with open(path) as f:
        try:
            d = json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(f"not valid JSON: {e}") from None
    return from_dict(d)


def builtin_character_path(name: str) -> str:
    """Filesystem path of a character file shipped with the package."""
    return str(resources.files("gaitforge").joinpath("data", name + ".model"))
