"""Reduced-coordinate rigid-body world over the jitted kernels.

One World wraps one character on an infinite ground plane at y = 0 with
gravity along -y. State is (q, qd): generalized coordinates and velocities
in the joint ordering of the character (see charmodel for per-kind
coordinate conventions).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..charmodel import JOINT_DOF
from . import kernels as K

DEFAULT_DT = 0.002
GRAVITY = 9.81


class NumericalError(RuntimeError):
    """Simulation produced a state the solver cannot continue from."""


@dataclass
class ExternalForce:
    """World-frame force applied at a body-frame point of a link."""

    link: int
    point: np.ndarray
    force: np.ndarray


@dataclass
class SimState:
    q: np.ndarray
    qd: np.ndarray
    t: float = 0.0
    contacts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def copy(self) -> "SimState":
        return SimState(self.q.copy(), self.qd.copy(), self.t, self.contacts.copy())


_KIND_CODE = {"free": K.K_FREE, "ball": K.K_BALL,
              "universal": K.K_UNIVERSAL, "revolute": K.K_REVOLUTE}
_SHAPE_CODE = {"sphere": K.SH_SPHERE, "capsule": K.SH_CAPSULE}


class World:
    """Forward simulation, inverse dynamics, and contact queries for a model."""

    def __init__(self, model, baumgarte=0.2, bias_cap=0.2, contact_tol=1e-4,
                 pgs_iters=500, pgs_tol=1e-12, gravity=GRAVITY):
        self.model = model
        self.gravity = float(gravity)
        self.baumgarte = float(baumgarte)
        self.bias_cap = float(bias_cap)
        self.contact_tol = float(contact_tol)
        self.pgs_iters = int(pgs_iters)
        self.pgs_tol = float(pgs_tol)

        links, joints = model.links, model.joints
        L = len(links)
        self.nlinks = L
        self.jkind = np.array([_KIND_CODE[j.kind] for j in joints], dtype=np.int64)
        self.jparent = np.array([j.parent_link for j in joints], dtype=np.int64)
        self.jndof = np.array([JOINT_DOF[j.kind] for j in joints], dtype=np.int64)
        self.jdofstart = np.zeros(L, dtype=np.int64)
        start = 0
        for i, j in enumerate(joints):
            self.jdofstart[i] = start
            start += JOINT_DOF[j.kind]
        self.ndof = start
        self.joffset = np.array([j.parent_offset for j in joints], dtype=np.float64)
        self.jaxes = np.zeros((L, 2, 3))
        for i, j in enumerate(joints):
            for a in range(min(2, j.axes.shape[0])):
                self.jaxes[i, a] = j.axes[a]

        self.mass = np.array([l.mass for l in links], dtype=np.float64)
        self.link_com = np.array([l.com for l in links], dtype=np.float64)
        self.total_mass = float(self.mass.sum())
        self.Isp = np.zeros((L, 6, 6))
        for i, l in enumerate(links):
            m = l.mass
            c = l.com
            cx = np.array([[0.0, -c[2], c[1]],
                           [c[2], 0.0, -c[0]],
                           [-c[1], c[0], 0.0]])
            self.Isp[i, 0:3, 0:3] = l.inertia - m * (cx @ cx)
            self.Isp[i, 0:3, 3:6] = m * cx
            self.Isp[i, 3:6, 0:3] = m * cx.T
            self.Isp[i, 3:6, 3:6] = m * np.eye(3)

        self.limit_lo = np.full(self.ndof, -np.inf)
        self.limit_hi = np.full(self.ndof, np.inf)
        for i, j in enumerate(joints):
            ds = self.jdofstart[i]
            self.limit_lo[ds:ds + self.jndof[i]] = j.limit_lo
            self.limit_hi[ds:ds + self.jndof[i]] = j.limit_hi

        sh_link, sh_kind, sh_rad, sh_a, sh_b = [], [], [], [], []
        for i, l in enumerate(links):
            for s in l.shapes:
                sh_link.append(i)
                sh_kind.append(_SHAPE_CODE[s.kind])
                sh_rad.append(s.radius)
                if s.kind == "sphere":
                    sh_a.append(s.center)
                    sh_b.append(np.zeros(3))
                else:
                    sh_a.append(s.p0)
                    sh_b.append(s.p1)
        self.sh_link = np.asarray(sh_link, dtype=np.int64).reshape(-1)
        self.sh_kind = np.asarray(sh_kind, dtype=np.int64).reshape(-1)
        self.sh_rad = np.asarray(sh_rad, dtype=np.float64).reshape(-1)
        self.sh_a = np.asarray(sh_a, dtype=np.float64).reshape(-1, 3)
        self.sh_b = np.asarray(sh_b, dtype=np.float64).reshape(-1, 3)

        self.ee_links = np.asarray(getattr(model, "end_effectors", []) or [],
                                   dtype=np.int64)
        self.mu = float(model.friction)
        self.restitution = float(model.restitution)

        # audit state from the last step
        self.last_impulses = np.zeros(0)
        self.last_contact_links = np.zeros(0, dtype=np.int64)
        self.last_contact_points = np.zeros((0, 3))
        self.last_contact_gaps = np.zeros(0)
        self.last_n_limit_rows = 0
        self.last_com = np.zeros(3)

        self._no_ext = (np.zeros(0, dtype=np.int64), np.zeros((0, 3)),
                        np.zeros((0, 3)))
        self._pack = (self.jkind, self.jparent, self.jdofstart, self.jndof,
                      self.joffset, self.jaxes, self.Isp,
                      self.mass, self.link_com, self.limit_lo, self.limit_hi,
                      self.sh_link, self.sh_kind, self.sh_rad, self.sh_a,
                      self.sh_b, self.ee_links,
                      self.mu, self.restitution, self.gravity,
                      self.baumgarte, self.bias_cap, self.contact_tol,
                      self.pgs_iters, self.pgs_tol)

    # -- kinematics / dynamics queries ------------------------------------

    def fk(self, q):
        """World rotation and origin of every link."""
        return K.fk_positions(q, self.jkind, self.jparent, self.jdofstart,
                              self.joffset, self.jaxes)

    def _fk_full(self, q, qd):
        return K.fk_velocity(q, qd, self.jkind, self.jparent, self.jdofstart,
                             self.jndof, self.joffset, self.jaxes)

    def mass_matrix(self, q):
        _, _, E, rloc, S, _, _, _ = self._fk_full(q, np.zeros(self.ndof))
        return K.crba_given(self.jkind, self.jparent, self.jdofstart,
                            self.jndof, self.Isp, E, rloc, S, self.ndof)

    def _ext_arrays(self, external_forces):
        if not external_forces:
            return self._no_ext
        n = len(external_forces)
        eL = np.zeros(n, dtype=np.int64)
        eP = np.zeros((n, 3))
        eF = np.zeros((n, 3))
        for k, e in enumerate(external_forces):
            eL[k] = e.link
            eP[k] = e.point
            eF[k] = e.force
        return eL, eP, eF

    def rnea(self, q, qd, qdd, external_forces=()):
        """Generalized forces realizing qdd at (q, qd): tau = M qdd + bias."""
        Rw, pw, E, rloc, S, cJ, vJ, v = self._fk_full(q, qd)
        eL, eP, eF = self._ext_arrays(external_forces)
        return K.rnea_given(np.asarray(qdd, dtype=np.float64), eL, eP, eF,
                            self.gravity, self.jkind, self.jparent, self.jdofstart,
                            self.jndof, self.Isp, Rw, pw, E, rloc, S, cJ, vJ, v)

    def bias(self, q, qd, external_forces=()):
        return self.rnea(q, qd, np.zeros(self.ndof), external_forces)

    def forward_dynamics(self, q, qd, tau, external_forces=()):
        """Unconstrained joint accelerations (no contact impulses)."""
        Rw, pw, E, rloc, S, cJ, vJ, v = self._fk_full(q, qd)
        eL, eP, eF = self._ext_arrays(external_forces)
        b = K.rnea_given(np.zeros(self.ndof), eL, eP, eF, self.gravity,
                         self.jkind, self.jparent, self.jdofstart, self.jndof,
                         self.Isp, Rw, pw, E, rloc, S, cJ, vJ, v)
        M = K.crba_given(self.jkind, self.jparent, self.jdofstart, self.jndof,
                         self.Isp, E, rloc, S, self.ndof)
        Lm, bad = K.chol_factor(M)
        if bad:
            raise NumericalError("mass matrix not positive definite")
        return K.chol_solve(Lm, np.asarray(tau, dtype=np.float64) - b)

    # -- queries on a configuration ---------------------------------------

    def com(self, q):
        Rw, pw = self.fk(q)
        return K.com_of(Rw, pw, self.mass, self.link_com)

    def com_velocity(self, q, qd):
        Rw, _, _, _, _, _, _, v = self._fk_full(q, qd)
        return K.com_velocity_of(Rw, v, self.mass, self.link_com)

    def total_energy(self, q, qd):
        """Kinetic plus gravitational potential energy (zero level at y=0)."""
        M = self.mass_matrix(q)
        Rw, pw = self.fk(q)
        pot = 0.0
        for i in range(self.nlinks):
            ci = pw[i] + Rw[i] @ self.link_com[i]
            pot += self.mass[i] * self.gravity * ci[1]
        return float(0.5 * qd @ M @ qd + pot)

    def contact_flags(self, q):
        """Per end-effector: 1 if any of its shapes touches the ground."""
        Rw, pw = self.fk(q)
        links, _, _ = K.detect_contacts(Rw, pw, self.sh_link, self.sh_kind,
                                        self.sh_rad, self.sh_a, self.sh_b,
                                        self.contact_tol)
        return K.ee_flags_of(links, self.ee_links, self.contact_tol)

    def link_rotation(self, q, link):
        Rw, _ = self.fk(q)
        return Rw[link]

    def reference_state(self) -> SimState:
        """Zero pose translated vertically so the lowest shape touches y=0."""
        if self.jkind[0] != K.K_FREE:
            raise ValueError("reference_state requires a free root joint")
        q = np.zeros(self.ndof)
        Rw, pw = self.fk(q)
        lowest = np.inf
        for s in range(self.sh_link.shape[0]):
            li = self.sh_link[s]
            pts = [self.sh_a[s]] if self.sh_kind[s] == K.SH_SPHERE \
                else [self.sh_a[s], self.sh_b[s]]
            for p in pts:
                w = pw[li] + Rw[li] @ p
                lowest = min(lowest, w[1] - self.sh_rad[s])
        if np.isfinite(lowest):
            q[1] = -lowest
        st = SimState(q=q, qd=np.zeros(self.ndof), t=0.0)
        st.contacts = self.contact_flags(q)
        return st

    # -- stepping ----------------------------------------------------------

    def step(self, state: SimState, tau, external_forces=(),
             dt=DEFAULT_DT) -> SimState:
        """Advance one substep; contact flags refresh on the new state.

        Raises NumericalError if the mass matrix loses positive
        definiteness (the factorization is the only hard failure; velocity
        blowups are left to the caller to police).
        """
        eL, eP, eF = self._ext_arrays(external_forces)
        qn, qdn, lam, clink, cpt, cgap, n_lim, flags, com_new, bad = K.substep(
            state.q, state.qd, np.asarray(tau, dtype=np.float64),
            eL, eP, eF, dt, *self._pack)
        if bad:
            raise NumericalError("mass matrix not positive definite")
        self.last_impulses = lam
        self.last_contact_links = clink
        self.last_contact_points = cpt
        self.last_contact_gaps = cgap
        self.last_n_limit_rows = int(n_lim)
        self.last_com = com_new
        return SimState(q=qn, qd=qdn, t=state.t + dt, contacts=flags)
