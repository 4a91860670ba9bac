"""Plain-loop rigid-body kernels, jitted when numba is present.

Everything here operates on the flat model arrays packed by world.World.
The code is deliberately written as scalar loops over small fixed-size
arrays: it is valid (slow) Python as-is and compiles to tight machine code
under numba without any semantic change (no fastmath, IEEE evaluation
order), so jitted and un-jitted runs produce bit-identical trajectories.
Inner loops avoid temporaries; scratch buffers are allocated once per call.

Spatial vectors are 6-arrays [angular(3); linear(3)] in body coordinates.
A transform child<-parent is stored as (E, r): E rotates parent coords into
child coords, r is the child frame origin in parent coords.
"""

import math

import numpy as np

try:
    from numba import njit
except ImportError:      # pragma: no cover - numba is a declared dependency
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(f):
            return f
        return wrap

K_FREE, K_BALL, K_UNIVERSAL, K_REVOLUTE = 0, 1, 2, 3
SH_SPHERE, SH_CAPSULE = 0, 1


@njit(cache=True)
def _rot_exp_into(R, wx, wy, wz):
    """Exponential map: rotation vector components -> 3x3 rotation matrix."""
    t2 = wx * wx + wy * wy + wz * wz
    t = math.sqrt(t2)
    if t < 1e-8:
        a = 1.0 - t2 / 6.0
        b = 0.5 - t2 / 24.0
    else:
        a = math.sin(t) / t
        b = (1.0 - math.cos(t)) / t2
    c = 1.0 - b * t2
    R[0, 0] = c + b * wx * wx
    R[0, 1] = b * wx * wy - a * wz
    R[0, 2] = b * wx * wz + a * wy
    R[1, 0] = b * wx * wy + a * wz
    R[1, 1] = c + b * wy * wy
    R[1, 2] = b * wy * wz - a * wx
    R[2, 0] = b * wx * wz - a * wy
    R[2, 1] = b * wy * wz + a * wx
    R[2, 2] = c + b * wz * wz


@njit(cache=True)
def rot_exp(w):
    R = np.empty((3, 3))
    _rot_exp_into(R, w[0], w[1], w[2])
    return R


@njit(cache=True)
def _rot_log3(R):
    """Logarithm map: rotation matrix -> rotation vector components, |w| <= pi."""
    ax = R[2, 1] - R[1, 2]
    ay = R[0, 2] - R[2, 0]
    az = R[1, 0] - R[0, 1]
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    ct = 0.5 * (tr - 1.0)
    if ct > 1.0:
        ct = 1.0
    if ct < -1.0:
        ct = -1.0
    t = math.acos(ct)
    if t < 1e-8:
        s = 0.5 * (1.0 + t * t / 6.0)
        return s * ax, s * ay, s * az
    if t > math.pi - 1e-4:
        # near pi the axial part vanishes; recover the axis from R + I
        d0 = 1.0 + R[0, 0]
        d1 = 1.0 + R[1, 1]
        d2 = 1.0 + R[2, 2]
        if d0 >= d1 and d0 >= d2:
            n0 = math.sqrt(d0 / 2.0) if d0 > 0.0 else 0.0
            n1 = (R[0, 1] + R[1, 0]) / (4.0 * n0)
            n2 = (R[0, 2] + R[2, 0]) / (4.0 * n0)
        elif d1 >= d2:
            n1 = math.sqrt(d1 / 2.0) if d1 > 0.0 else 0.0
            n0 = (R[0, 1] + R[1, 0]) / (4.0 * n1)
            n2 = (R[1, 2] + R[2, 1]) / (4.0 * n1)
        else:
            n2 = math.sqrt(d2 / 2.0) if d2 > 0.0 else 0.0
            n0 = (R[0, 2] + R[2, 0]) / (4.0 * n2)
            n1 = (R[1, 2] + R[2, 1]) / (4.0 * n2)
        if n0 * ax + n1 * ay + n2 * az < 0.0:
            n0, n1, n2 = -n0, -n1, -n2
        nn = math.sqrt(n0 * n0 + n1 * n1 + n2 * n2)
        return t * n0 / nn, t * n1 / nn, t * n2 / nn
    s = t / (2.0 * math.sin(t))
    return s * ax, s * ay, s * az


@njit(cache=True)
def rot_log(R):
    w = np.empty(3)
    w[0], w[1], w[2] = _rot_log3(R)
    return w


@njit(cache=True)
def _mat3_mat3_into(C, A, B):
    for i in range(3):
        for j in range(3):
            C[i, j] = A[i, 0] * B[0, j] + A[i, 1] * B[1, j] + A[i, 2] * B[2, j]


@njit(cache=True)
def _joint_pose(q, i, k, ds, joffset, jaxes, Rrel, Ra, Rb, rloc):
    """Relative rotation Rrel (child->parent) and joint origin rloc[i]."""
    if k == K_FREE:
        _rot_exp_into(Rrel, q[ds + 3], q[ds + 4], q[ds + 5])
        rloc[i, 0] = joffset[i, 0] + q[ds]
        rloc[i, 1] = joffset[i, 1] + q[ds + 1]
        rloc[i, 2] = joffset[i, 2] + q[ds + 2]
    elif k == K_BALL:
        _rot_exp_into(Rrel, q[ds], q[ds + 1], q[ds + 2])
        rloc[i, 0] = joffset[i, 0]
        rloc[i, 1] = joffset[i, 1]
        rloc[i, 2] = joffset[i, 2]
    elif k == K_UNIVERSAL:
        _rot_exp_into(Ra, jaxes[i, 0, 0] * q[ds], jaxes[i, 0, 1] * q[ds],
                      jaxes[i, 0, 2] * q[ds])
        _rot_exp_into(Rb, jaxes[i, 1, 0] * q[ds + 1], jaxes[i, 1, 1] * q[ds + 1],
                      jaxes[i, 1, 2] * q[ds + 1])
        _mat3_mat3_into(Rrel, Ra, Rb)
        rloc[i, 0] = joffset[i, 0]
        rloc[i, 1] = joffset[i, 1]
        rloc[i, 2] = joffset[i, 2]
    else:
        _rot_exp_into(Rrel, jaxes[i, 0, 0] * q[ds], jaxes[i, 0, 1] * q[ds],
                      jaxes[i, 0, 2] * q[ds])
        rloc[i, 0] = joffset[i, 0]
        rloc[i, 1] = joffset[i, 1]
        rloc[i, 2] = joffset[i, 2]


@njit(cache=True)
def fk_velocity(q, qd, jkind, jparent, jdofstart, jndof, joffset, jaxes):
    """Forward pass: poses, joint transforms, motion subspaces, velocities.

    Returns Rw, pw (world pose per link), E, rloc (child<-parent transform),
    S (6 x ndof motion subspace, child frame), cJ (apparent subspace rate
    times qd), vJ (joint velocity), v (link spatial velocity).
    """
    L = jkind.shape[0]
    Rw = np.empty((L, 3, 3))
    pw = np.empty((L, 3))
    E = np.empty((L, 3, 3))
    rloc = np.empty((L, 3))
    S = np.zeros((L, 6, 6))
    cJ = np.zeros((L, 6))
    vJ = np.zeros((L, 6))
    v = np.zeros((L, 6))
    Rrel = np.empty((3, 3))
    Ra = np.empty((3, 3))
    Rb = np.empty((3, 3))

    for i in range(L):
        k = jkind[i]
        ds = jdofstart[i]
        p = jparent[i]
        _joint_pose(q, i, k, ds, joffset, jaxes, Rrel, Ra, Rb, rloc)
        for a in range(3):
            for b in range(3):
                E[i, a, b] = Rrel[b, a]

        if k == K_FREE:
            for a in range(3):
                for b in range(3):
                    S[i, 3 + a, b] = E[i, a, b]
                    S[i, a, 3 + b] = E[i, a, b]
            wx = qd[ds + 3]
            wy = qd[ds + 4]
            wz = qd[ds + 5]
            tx = qd[ds]
            ty = qd[ds + 1]
            tz = qd[ds + 2]
            for a in range(3):
                vJ[i, a] = E[i, a, 0] * wx + E[i, a, 1] * wy + E[i, a, 2] * wz
                vJ[i, 3 + a] = E[i, a, 0] * tx + E[i, a, 1] * ty + E[i, a, 2] * tz
            cx = wy * tz - wz * ty
            cy = wz * tx - wx * tz
            cz = wx * ty - wy * tx
            for a in range(3):
                cJ[i, 3 + a] = -(E[i, a, 0] * cx + E[i, a, 1] * cy + E[i, a, 2] * cz)
        elif k == K_BALL:
            for a in range(3):
                for b in range(3):
                    S[i, a, b] = E[i, a, b]
            for a in range(3):
                vJ[i, a] = (E[i, a, 0] * qd[ds] + E[i, a, 1] * qd[ds + 1]
                            + E[i, a, 2] * qd[ds + 2])
        elif k == K_UNIVERSAL:
            u10 = jaxes[i, 0, 0]
            u11 = jaxes[i, 0, 1]
            u12 = jaxes[i, 0, 2]
            u20 = jaxes[i, 1, 0]
            u21 = jaxes[i, 1, 1]
            u22 = jaxes[i, 1, 2]
            for a in range(3):
                c0a = E[i, a, 0] * u10 + E[i, a, 1] * u11 + E[i, a, 2] * u12
                S[i, a, 0] = c0a
                S[i, a, 1] = jaxes[i, 1, a]
                vJ[i, a] = c0a * qd[ds] + jaxes[i, 1, a] * qd[ds + 1]
            # apparent rate of the first column: -E ((R1 u2) x u1) qd0 qd1
            r0 = Ra[0, 0] * u20 + Ra[0, 1] * u21 + Ra[0, 2] * u22
            r1 = Ra[1, 0] * u20 + Ra[1, 1] * u21 + Ra[1, 2] * u22
            r2 = Ra[2, 0] * u20 + Ra[2, 1] * u21 + Ra[2, 2] * u22
            cx = r1 * u12 - r2 * u11
            cy = r2 * u10 - r0 * u12
            cz = r0 * u11 - r1 * u10
            qq = qd[ds] * qd[ds + 1]
            for a in range(3):
                cJ[i, a] = -(E[i, a, 0] * cx + E[i, a, 1] * cy + E[i, a, 2] * cz) * qq
        else:
            for a in range(3):
                S[i, a, 0] = jaxes[i, 0, a]
                vJ[i, a] = jaxes[i, 0, a] * qd[ds]

        if p < 0:
            for a in range(3):
                for b in range(3):
                    Rw[i, a, b] = Rrel[a, b]
                pw[i, a] = rloc[i, a]
            for a in range(6):
                v[i, a] = vJ[i, a]
        else:
            for a in range(3):
                for b in range(3):
                    Rw[i, a, b] = (Rw[p, a, 0] * Rrel[0, b]
                                   + Rw[p, a, 1] * Rrel[1, b]
                                   + Rw[p, a, 2] * Rrel[2, b])
                pw[i, a] = (pw[p, a] + Rw[p, a, 0] * rloc[i, 0]
                            + Rw[p, a, 1] * rloc[i, 1] + Rw[p, a, 2] * rloc[i, 2])
            # v_i = Xup v_p + vJ
            wx = v[p, 0]
            wy = v[p, 1]
            wz = v[p, 2]
            lx = v[p, 3] + wy * rloc[i, 2] - wz * rloc[i, 1]
            ly = v[p, 4] + wz * rloc[i, 0] - wx * rloc[i, 2]
            lz = v[p, 5] + wx * rloc[i, 1] - wy * rloc[i, 0]
            for a in range(3):
                v[i, a] = (E[i, a, 0] * wx + E[i, a, 1] * wy + E[i, a, 2] * wz
                           + vJ[i, a])
                v[i, 3 + a] = (E[i, a, 0] * lx + E[i, a, 1] * ly + E[i, a, 2] * lz
                               + vJ[i, 3 + a])

    return Rw, pw, E, rloc, S, cJ, vJ, v


@njit(cache=True)
def rnea_given(qdd, ext_link, ext_pt, ext_force, g,
               jkind, jparent, jdofstart, jndof, Isp,
               Rw, pw, E, rloc, S, cJ, vJ, v):
    """Inverse dynamics given a forward-kinematics pass.

    Returns the generalized force vector tau with tau = M qdd + bias, where
    bias collects gravity, velocity products, and minus the external forces.
    """
    L = jkind.shape[0]
    N = qdd.shape[0]
    a = np.zeros((L, 6))
    f = np.zeros((L, 6))
    tau = np.zeros(N)

    for i in range(L):
        p = jparent[i]
        # parent acceleration in this frame (base trick: world accelerates +g up)
        if p < 0:
            awx = 0.0
            awy = 0.0
            awz = 0.0
            alx = 0.0
            aly = g
            alz = 0.0
        else:
            awx = a[p, 0]
            awy = a[p, 1]
            awz = a[p, 2]
            alx = a[p, 3]
            aly = a[p, 4]
            alz = a[p, 5]
        llx = alx + awy * rloc[i, 2] - awz * rloc[i, 1]
        lly = aly + awz * rloc[i, 0] - awx * rloc[i, 2]
        llz = alz + awx * rloc[i, 1] - awy * rloc[i, 0]
        ds = jdofstart[i]
        nd = jndof[i]
        for r in range(3):
            s1 = E[i, r, 0] * awx + E[i, r, 1] * awy + E[i, r, 2] * awz + cJ[i, r]
            s2 = E[i, r, 0] * llx + E[i, r, 1] * lly + E[i, r, 2] * llz + cJ[i, 3 + r]
            for c in range(nd):
                s1 += S[i, r, c] * qdd[ds + c]
                s2 += S[i, 3 + r, c] * qdd[ds + c]
            a[i, r] = s1
            a[i, 3 + r] = s2
        # a += v x vJ
        a[i, 0] += v[i, 1] * vJ[i, 2] - v[i, 2] * vJ[i, 1]
        a[i, 1] += v[i, 2] * vJ[i, 0] - v[i, 0] * vJ[i, 2]
        a[i, 2] += v[i, 0] * vJ[i, 1] - v[i, 1] * vJ[i, 0]
        a[i, 3] += (v[i, 1] * vJ[i, 5] - v[i, 2] * vJ[i, 4]
                    + v[i, 4] * vJ[i, 2] - v[i, 5] * vJ[i, 1])
        a[i, 4] += (v[i, 2] * vJ[i, 3] - v[i, 0] * vJ[i, 5]
                    + v[i, 5] * vJ[i, 0] - v[i, 3] * vJ[i, 2])
        a[i, 5] += (v[i, 0] * vJ[i, 4] - v[i, 1] * vJ[i, 3]
                    + v[i, 3] * vJ[i, 1] - v[i, 4] * vJ[i, 0])

        # f = Isp a + v x* (Isp v)
        i0 = 0.0
        i1 = 0.0
        i2 = 0.0
        i3 = 0.0
        i4 = 0.0
        i5 = 0.0
        for c in range(6):
            vc = v[i, c]
            i0 += Isp[i, 0, c] * vc
            i1 += Isp[i, 1, c] * vc
            i2 += Isp[i, 2, c] * vc
            i3 += Isp[i, 3, c] * vc
            i4 += Isp[i, 4, c] * vc
            i5 += Isp[i, 5, c] * vc
        for r in range(6):
            s = 0.0
            for c in range(6):
                s += Isp[i, r, c] * a[i, c]
            f[i, r] = s
        f[i, 0] += v[i, 1] * i2 - v[i, 2] * i1 + v[i, 4] * i5 - v[i, 5] * i4
        f[i, 1] += v[i, 2] * i0 - v[i, 0] * i2 + v[i, 5] * i3 - v[i, 3] * i5
        f[i, 2] += v[i, 0] * i1 - v[i, 1] * i0 + v[i, 3] * i4 - v[i, 4] * i3
        f[i, 3] += v[i, 1] * i5 - v[i, 2] * i4
        f[i, 4] += v[i, 2] * i3 - v[i, 0] * i5
        f[i, 5] += v[i, 0] * i4 - v[i, 1] * i3

    # external point forces (world vector at a body-frame point)
    for e in range(ext_link.shape[0]):
        i = ext_link[e]
        fx = (Rw[i, 0, 0] * ext_force[e, 0] + Rw[i, 1, 0] * ext_force[e, 1]
              + Rw[i, 2, 0] * ext_force[e, 2])
        fy = (Rw[i, 0, 1] * ext_force[e, 0] + Rw[i, 1, 1] * ext_force[e, 1]
              + Rw[i, 2, 1] * ext_force[e, 2])
        fz = (Rw[i, 0, 2] * ext_force[e, 0] + Rw[i, 1, 2] * ext_force[e, 1]
              + Rw[i, 2, 2] * ext_force[e, 2])
        px = ext_pt[e, 0]
        py = ext_pt[e, 1]
        pz = ext_pt[e, 2]
        f[i, 0] -= py * fz - pz * fy
        f[i, 1] -= pz * fx - px * fz
        f[i, 2] -= px * fy - py * fx
        f[i, 3] -= fx
        f[i, 4] -= fy
        f[i, 5] -= fz

    for i in range(L - 1, -1, -1):
        ds = jdofstart[i]
        nd = jndof[i]
        for c in range(nd):
            s = 0.0
            for r in range(6):
                s += S[i, r, c] * f[i, r]
            tau[ds + c] = s
        p = jparent[i]
        if p >= 0:
            # transform f to the parent frame and accumulate
            n0 = E[i, 0, 0] * f[i, 0] + E[i, 1, 0] * f[i, 1] + E[i, 2, 0] * f[i, 2]
            n1 = E[i, 0, 1] * f[i, 0] + E[i, 1, 1] * f[i, 1] + E[i, 2, 1] * f[i, 2]
            n2 = E[i, 0, 2] * f[i, 0] + E[i, 1, 2] * f[i, 1] + E[i, 2, 2] * f[i, 2]
            f0 = E[i, 0, 0] * f[i, 3] + E[i, 1, 0] * f[i, 4] + E[i, 2, 0] * f[i, 5]
            f1 = E[i, 0, 1] * f[i, 3] + E[i, 1, 1] * f[i, 4] + E[i, 2, 1] * f[i, 5]
            f2 = E[i, 0, 2] * f[i, 3] + E[i, 1, 2] * f[i, 4] + E[i, 2, 2] * f[i, 5]
            f[p, 0] += n0 + rloc[i, 1] * f2 - rloc[i, 2] * f1
            f[p, 1] += n1 + rloc[i, 2] * f0 - rloc[i, 0] * f2
            f[p, 2] += n2 + rloc[i, 0] * f1 - rloc[i, 1] * f0
            f[p, 3] += f0
            f[p, 4] += f1
            f[p, 5] += f2
    return tau


@njit(cache=True)
def crba_given(jkind, jparent, jdofstart, jndof, Isp, E, rloc, S, ndof):
    """Composite rigid-body mass matrix from a forward-kinematics pass."""
    L = jkind.shape[0]
    Ic = Isp.copy()
    M = np.zeros((ndof, ndof))
    X = np.empty((6, 6))
    IX = np.empty((6, 6))
    F = np.empty((6, 6))
    Ft = np.empty((6, 6))
    for i in range(L - 1, -1, -1):
        p = jparent[i]
        if p >= 0:
            # X (child<-parent): [[E, 0], [-E rx, E]]
            for a in range(3):
                for b in range(3):
                    X[a, b] = E[i, a, b]
                    X[a, 3 + b] = 0.0
                    X[3 + a, 3 + b] = E[i, a, b]
            r0 = rloc[i, 0]
            r1 = rloc[i, 1]
            r2 = rloc[i, 2]
            for a in range(3):
                X[3 + a, 0] = E[i, a, 2] * r1 - E[i, a, 1] * r2
                X[3 + a, 1] = E[i, a, 0] * r2 - E[i, a, 2] * r0
                X[3 + a, 2] = E[i, a, 1] * r0 - E[i, a, 0] * r1
            # Ic[p] += X^T Ic[i] X
            for a in range(6):
                for b in range(6):
                    s = 0.0
                    for c in range(6):
                        s += Ic[i, a, c] * X[c, b]
                    IX[a, b] = s
            for a in range(6):
                for b in range(6):
                    s = 0.0
                    for c in range(6):
                        s += X[c, a] * IX[c, b]
                    Ic[p, a, b] += s

        ds = jdofstart[i]
        nd = jndof[i]
        for r in range(6):
            for c in range(nd):
                s = 0.0
                for m in range(6):
                    s += Ic[i, r, m] * S[i, m, c]
                F[r, c] = s
        for r in range(nd):
            for c in range(nd):
                s = 0.0
                for m in range(6):
                    s += S[i, m, r] * F[m, c]
                M[ds + r, ds + c] = s

        j = i
        while jparent[j] >= 0:
            # transform the nd force columns of F to the parent of j
            rj0 = rloc[j, 0]
            rj1 = rloc[j, 1]
            rj2 = rloc[j, 2]
            for c in range(nd):
                n0 = E[j, 0, 0] * F[0, c] + E[j, 1, 0] * F[1, c] + E[j, 2, 0] * F[2, c]
                n1 = E[j, 0, 1] * F[0, c] + E[j, 1, 1] * F[1, c] + E[j, 2, 1] * F[2, c]
                n2 = E[j, 0, 2] * F[0, c] + E[j, 1, 2] * F[1, c] + E[j, 2, 2] * F[2, c]
                f0 = E[j, 0, 0] * F[3, c] + E[j, 1, 0] * F[4, c] + E[j, 2, 0] * F[5, c]
                f1 = E[j, 0, 1] * F[3, c] + E[j, 1, 1] * F[4, c] + E[j, 2, 1] * F[5, c]
                f2 = E[j, 0, 2] * F[3, c] + E[j, 1, 2] * F[4, c] + E[j, 2, 2] * F[5, c]
                Ft[0, c] = n0 + rj1 * f2 - rj2 * f1
                Ft[1, c] = n1 + rj2 * f0 - rj0 * f2
                Ft[2, c] = n2 + rj0 * f1 - rj1 * f0
                Ft[3, c] = f0
                Ft[4, c] = f1
                Ft[5, c] = f2
            for r in range(6):
                for c in range(nd):
                    F[r, c] = Ft[r, c]
            j = jparent[j]
            dsj = jdofstart[j]
            ndj = jndof[j]
            for r in range(nd):
                for c in range(ndj):
                    s = 0.0
                    for m in range(6):
                        s += F[m, r] * S[j, m, c]
                    M[ds + r, dsj + c] = s
                    M[dsj + c, ds + r] = s
    return M


@njit(cache=True)
def chol_factor(M):
    """Lower-triangular Cholesky factor; status 1 if not positive definite."""
    n = M.shape[0]
    Lm = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1):
            s = M[i, j]
            for k in range(j):
                s -= Lm[i, k] * Lm[j, k]
            if i == j:
                if s <= 0.0:
                    return Lm, 1
                Lm[i, i] = math.sqrt(s)
            else:
                Lm[i, j] = s / Lm[j, j]
    return Lm, 0


@njit(cache=True)
def _chol_solve_into(Lm, x):
    n = Lm.shape[0]
    for i in range(n):
        s = x[i]
        for k in range(i):
            s -= Lm[i, k] * x[k]
        x[i] = s / Lm[i, i]
    for i in range(n - 1, -1, -1):
        s = x[i]
        for k in range(i + 1, n):
            s -= Lm[k, i] * x[k]
        x[i] = s / Lm[i, i]


@njit(cache=True)
def chol_solve(Lm, b):
    x = b.copy()
    _chol_solve_into(Lm, x)
    return x


@njit(cache=True)
def detect_contacts(Rw, pw, sh_link, sh_kind, sh_rad, sh_a, sh_b, tol):
    """Ground-plane contact candidates: (link, world point, gap) per touch.

    Sphere shapes contribute their lowest point; capsules contribute each
    endpoint cap that is within tolerance of the plane.
    """
    ns = sh_link.shape[0]
    con_link = np.empty(2 * ns, dtype=np.int64)
    con_pt = np.empty((2 * ns, 3))
    con_gap = np.empty(2 * ns)
    n = 0
    for s in range(ns):
        li = sh_link[s]
        ends = 1 if sh_kind[s] == SH_SPHERE else 2
        for endp in range(ends):
            if endp == 0:
                a0 = sh_a[s, 0]
                a1 = sh_a[s, 1]
                a2 = sh_a[s, 2]
            else:
                a0 = sh_b[s, 0]
                a1 = sh_b[s, 1]
                a2 = sh_b[s, 2]
            cx = pw[li, 0] + Rw[li, 0, 0] * a0 + Rw[li, 0, 1] * a1 + Rw[li, 0, 2] * a2
            cy = pw[li, 1] + Rw[li, 1, 0] * a0 + Rw[li, 1, 1] * a1 + Rw[li, 1, 2] * a2
            cz = pw[li, 2] + Rw[li, 2, 0] * a0 + Rw[li, 2, 1] * a1 + Rw[li, 2, 2] * a2
            gap = cy - sh_rad[s]
            if gap <= tol:
                con_link[n] = li
                con_pt[n, 0] = cx
                con_pt[n, 1] = cy - sh_rad[s]
                con_pt[n, 2] = cz
                con_gap[n] = gap
                n += 1
    return con_link[:n], con_pt[:n], con_gap[:n]


@njit(cache=True)
def _point_jacobian(J, row0, li, P, Rw, pw, S, jparent, jdofstart, jndof):
    """World-frame linear velocity Jacobian rows (3 x ndof) of point P on link li."""
    j = li
    while j >= 0:
        d0 = P[0] - pw[j, 0]
        d1 = P[1] - pw[j, 1]
        d2 = P[2] - pw[j, 2]
        p0 = Rw[j, 0, 0] * d0 + Rw[j, 1, 0] * d1 + Rw[j, 2, 0] * d2
        p1 = Rw[j, 0, 1] * d0 + Rw[j, 1, 1] * d1 + Rw[j, 2, 1] * d2
        p2 = Rw[j, 0, 2] * d0 + Rw[j, 1, 2] * d1 + Rw[j, 2, 2] * d2
        ds = jdofstart[j]
        for c in range(jndof[j]):
            sa0 = S[j, 0, c]
            sa1 = S[j, 1, c]
            sa2 = S[j, 2, c]
            cl0 = S[j, 3, c] + sa1 * p2 - sa2 * p1
            cl1 = S[j, 4, c] + sa2 * p0 - sa0 * p2
            cl2 = S[j, 5, c] + sa0 * p1 - sa1 * p0
            for a in range(3):
                J[row0 + a, ds + c] = (Rw[j, a, 0] * cl0 + Rw[j, a, 1] * cl1
                                       + Rw[j, a, 2] * cl2)
        j = jparent[j]


@njit(cache=True)
def pgs_solve(A, b, bias, mu, n_con, n_lim, max_iters, tol):
    """Projected Gauss-Seidel on contact (normal/tangent) and limit rows.

    Contact row layout: [normal, tangent-x, tangent-z] per contact, then one
    row per active joint limit. Friction impulses are projected onto the
    circle |t| <= mu * normal each sweep. Cold-started and iterated to a
    fixed point, so the result does not depend on row order up to `tol`.
    """
    m = A.shape[0]
    lam = np.zeros(m)
    for _ in range(max_iters):
        delta = 0.0
        for k in range(n_con):
            rn = 3 * k
            vn = b[rn]
            for c in range(m):
                vn += A[rn, c] * lam[c]
            ln = lam[rn] + (bias[rn] - vn) / A[rn, rn]
            if ln < 0.0:
                ln = 0.0
            d = abs(ln - lam[rn])
            if d > delta:
                delta = d
            lam[rn] = ln

            lim = mu * ln
            for t in range(1, 3):
                rt = rn + t
                vt = b[rt]
                for c in range(m):
                    vt += A[rt, c] * lam[c]
                lam[rt] = lam[rt] - vt / A[rt, rt]
            t1 = lam[rn + 1]
            t2 = lam[rn + 2]
            tn = math.sqrt(t1 * t1 + t2 * t2)
            if tn > lim:
                s = lim / tn if tn > 0.0 else 0.0
                lam[rn + 1] = t1 * s
                lam[rn + 2] = t2 * s
            d = abs(lam[rn + 1] - t1) + abs(lam[rn + 2] - t2)
            if d > delta:
                delta = d

        for k in range(n_lim):
            r = 3 * n_con + k
            vr = b[r]
            for c in range(m):
                vr += A[r, c] * lam[c]
            lr = lam[r] + (bias[r] - vr) / A[r, r]
            if lr < 0.0:
                lr = 0.0
            d = abs(lr - lam[r])
            if d > delta:
                delta = d
            lam[r] = lr

        if delta < tol:
            break
    return lam


@njit(cache=True)
def integrate_positions(q, qd, dt, jkind, jdofstart, lo, hi):
    """Semi-implicit position update with exp-map composition on rotations."""
    N = q.shape[0]
    qn = q.copy()
    L = jkind.shape[0]
    Rt = np.empty((3, 3))
    Rd = np.empty((3, 3))
    Rn = np.empty((3, 3))
    for i in range(L):
        k = jkind[i]
        ds = jdofstart[i]
        if k == K_FREE:
            for a in range(3):
                qn[ds + a] = q[ds + a] + dt * qd[ds + a]
            _rot_exp_into(Rt, q[ds + 3], q[ds + 4], q[ds + 5])
            _rot_exp_into(Rd, dt * qd[ds + 3], dt * qd[ds + 4], dt * qd[ds + 5])
            _mat3_mat3_into(Rn, Rd, Rt)
            qn[ds + 3], qn[ds + 4], qn[ds + 5] = _rot_log3(Rn)
        elif k == K_BALL:
            _rot_exp_into(Rt, q[ds], q[ds + 1], q[ds + 2])
            _rot_exp_into(Rd, dt * qd[ds], dt * qd[ds + 1], dt * qd[ds + 2])
            _mat3_mat3_into(Rn, Rd, Rt)
            qn[ds], qn[ds + 1], qn[ds + 2] = _rot_log3(Rn)
        elif k == K_UNIVERSAL:
            qn[ds] = q[ds] + dt * qd[ds]
            qn[ds + 1] = q[ds + 1] + dt * qd[ds + 1]
        else:
            qn[ds] = q[ds] + dt * qd[ds]
    for d in range(N):
        if qn[d] < lo[d]:
            qn[d] = lo[d]
        elif qn[d] > hi[d]:
            qn[d] = hi[d]
    return qn


@njit(cache=True)
def fk_positions(q, jkind, jparent, jdofstart, joffset, jaxes):
    """Position-only forward kinematics (no velocities, no subspaces)."""
    L = jkind.shape[0]
    Rw = np.empty((L, 3, 3))
    pw = np.empty((L, 3))
    rloc = np.empty((L, 3))
    Rrel = np.empty((3, 3))
    Ra = np.empty((3, 3))
    Rb = np.empty((3, 3))
    for i in range(L):
        k = jkind[i]
        ds = jdofstart[i]
        p = jparent[i]
        _joint_pose(q, i, k, ds, joffset, jaxes, Rrel, Ra, Rb, rloc)
        if p < 0:
            for a in range(3):
                for b in range(3):
                    Rw[i, a, b] = Rrel[a, b]
                pw[i, a] = rloc[i, a]
        else:
            for a in range(3):
                for b in range(3):
                    Rw[i, a, b] = (Rw[p, a, 0] * Rrel[0, b]
                                   + Rw[p, a, 1] * Rrel[1, b]
                                   + Rw[p, a, 2] * Rrel[2, b])
                pw[i, a] = (pw[p, a] + Rw[p, a, 0] * rloc[i, 0]
                            + Rw[p, a, 1] * rloc[i, 1] + Rw[p, a, 2] * rloc[i, 2])
    return Rw, pw


@njit(cache=True)
def com_of(Rw, pw, mass, com):
    L = mass.shape[0]
    out = np.zeros(3)
    tot = 0.0
    for i in range(L):
        for a in range(3):
            ca = (pw[i, a] + Rw[i, a, 0] * com[i, 0] + Rw[i, a, 1] * com[i, 1]
                  + Rw[i, a, 2] * com[i, 2])
            out[a] += mass[i] * ca
        tot += mass[i]
    for a in range(3):
        out[a] /= tot
    return out


@njit(cache=True)
def com_velocity_of(Rw, v, mass, com):
    """World COM velocity from body-frame spatial velocities."""
    L = mass.shape[0]
    out = np.zeros(3)
    tot = 0.0
    for i in range(L):
        b0 = v[i, 3] + v[i, 1] * com[i, 2] - v[i, 2] * com[i, 1]
        b1 = v[i, 4] + v[i, 2] * com[i, 0] - v[i, 0] * com[i, 2]
        b2 = v[i, 5] + v[i, 0] * com[i, 1] - v[i, 1] * com[i, 0]
        for a in range(3):
            out[a] += mass[i] * (Rw[i, a, 0] * b0 + Rw[i, a, 1] * b1
                                 + Rw[i, a, 2] * b2)
        tot += mass[i]
    for a in range(3):
        out[a] /= tot
    return out


@njit(cache=True)
def ee_flags_of(con_link, ee_links, tol_unused):
    ne = ee_links.shape[0]
    flags = np.zeros(ne, dtype=np.int64)
    for c in range(con_link.shape[0]):
        for e in range(ne):
            if con_link[c] == ee_links[e]:
                flags[e] = 1
    return flags


@njit(cache=True)
def substep(q, qd, tau, ext_link, ext_pt, ext_force, dt,
            jkind, jparent, jdofstart, jndof, joffset, jaxes, Isp,
            mass, com, lo, hi,
            sh_link, sh_kind, sh_rad, sh_a, sh_b, ee_links,
            mu, restitution, g, baumgarte, bias_cap, contact_tol,
            pgs_iters, pgs_tol):
    """One velocity-impulse integration substep.

    Order: unconstrained forward dynamics, velocity prediction, contact and
    joint-limit impulses (PGS), semi-implicit position update with limit
    projection, contact flags and COM on the new configuration. Returns the
    new state plus audit arrays and a status flag (0 ok, 1 mass matrix not
    positive definite).
    """
    ndof = q.shape[0]
    Rw, pw, E, rloc, S, cJ, vJ, v = fk_velocity(
        q, qd, jkind, jparent, jdofstart, jndof, joffset, jaxes)
    zero = np.zeros(ndof)
    bias_f = rnea_given(zero, ext_link, ext_pt, ext_force, g,
                        jkind, jparent, jdofstart, jndof, Isp,
                        Rw, pw, E, rloc, S, cJ, vJ, v)
    M = crba_given(jkind, jparent, jdofstart, jndof, Isp, E, rloc, S, ndof)
    Lm, bad = chol_factor(M)
    if bad != 0:
        return (q, qd, np.zeros(0), np.zeros(0, dtype=np.int64),
                np.zeros((0, 3)), np.zeros(0), 0,
                np.zeros(ee_links.shape[0], dtype=np.int64), np.zeros(3), 1)
    qd_pred = np.empty(ndof)
    for d in range(ndof):
        qd_pred[d] = tau[d] - bias_f[d]
    _chol_solve_into(Lm, qd_pred)
    for d in range(ndof):
        qd_pred[d] = qd[d] + dt * qd_pred[d]

    con_link, con_pt, con_gap = detect_contacts(
        Rw, pw, sh_link, sh_kind, sh_rad, sh_a, sh_b, contact_tol)
    n_con = con_link.shape[0]

    # active joint limits: violated now or by the predicted step
    lim_dof = np.empty(ndof, dtype=np.int64)
    lim_sign = np.empty(ndof)
    lim_err = np.empty(ndof)
    n_lim = 0
    for d in range(ndof):
        qpredict = q[d] + dt * qd_pred[d]
        if lo[d] > -1e30 and (q[d] < lo[d] or qpredict < lo[d]):
            lim_dof[n_lim] = d
            lim_sign[n_lim] = 1.0
            e = lo[d] - q[d]
            lim_err[n_lim] = e if e > 0.0 else 0.0
            n_lim += 1
        elif hi[d] < 1e30 and (q[d] > hi[d] or qpredict > hi[d]):
            lim_dof[n_lim] = d
            lim_sign[n_lim] = -1.0
            e = q[d] - hi[d]
            lim_err[n_lim] = e if e > 0.0 else 0.0
            n_lim += 1

    qd_new = qd_pred
    lam = np.zeros(0)
    if n_con + n_lim > 0:
        m = 3 * n_con + n_lim
        J = np.zeros((m, ndof))
        biasv = np.zeros(m)
        for k in range(n_con):
            _point_jacobian(J, 3 * k, con_link[k], con_pt[k], Rw, pw, S,
                            jparent, jdofstart, jndof)
            # reorder to [normal (y), tangent x, tangent z]
            for c in range(ndof):
                ty = J[3 * k + 1, c]
                tx = J[3 * k, c]
                J[3 * k, c] = ty
                J[3 * k + 1, c] = tx
            pen = -con_gap[k]
            if pen < 0.0:
                pen = 0.0
            bb = baumgarte * pen / dt
            if bb > bias_cap:
                bb = bias_cap
            if restitution > 0.0:
                vn_pre = 0.0
                for c in range(ndof):
                    vn_pre += J[3 * k, c] * qd[c]
                if -restitution * vn_pre > bb:
                    bb = -restitution * vn_pre
            biasv[3 * k] = bb
        for k in range(n_lim):
            r = 3 * n_con + k
            J[r, lim_dof[k]] = lim_sign[k]
            bb = baumgarte * lim_err[k] / dt
            if bb > bias_cap:
                bb = bias_cap
            biasv[r] = bb

        Z = np.empty((ndof, m))
        col = np.empty(ndof)
        for r in range(m):
            for d in range(ndof):
                col[d] = J[r, d]
            _chol_solve_into(Lm, col)
            for d in range(ndof):
                Z[d, r] = col[d]
        A = np.empty((m, m))
        for r in range(m):
            for c in range(m):
                s = 0.0
                for d in range(ndof):
                    s += J[r, d] * Z[d, c]
                A[r, c] = s
        bv = np.empty(m)
        for r in range(m):
            s = 0.0
            for d in range(ndof):
                s += J[r, d] * qd_pred[d]
            bv[r] = s
        lam = pgs_solve(A, bv, biasv, mu, n_con, n_lim, pgs_iters, pgs_tol)
        qd_new = qd_pred.copy()
        for d in range(ndof):
            s = 0.0
            for r in range(m):
                s += Z[d, r] * lam[r]
            qd_new[d] += s

    qn = integrate_positions(q, qd_new, dt, jkind, jdofstart, lo, hi)

    Rw2, pw2 = fk_positions(qn, jkind, jparent, jdofstart, joffset, jaxes)
    nlink2, _, _ = detect_contacts(Rw2, pw2, sh_link, sh_kind, sh_rad,
                                   sh_a, sh_b, contact_tol)
    flags = ee_flags_of(nlink2, ee_links, contact_tol)
    com_new = com_of(Rw2, pw2, mass, com)
    return qn, qd_new, lam, con_link, con_pt, con_gap, n_lim, flags, com_new, 0
