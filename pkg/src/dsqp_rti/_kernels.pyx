# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled pendulum kernels (frozen-neighbour RK4 with sensitivities).

Mirrors ``_kernels_py`` exactly; see that module for the conventions.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sin, cos
from libc.string cimport memset

cnp.import_array()

cdef double _C[4]
cdef double _B[4]
_C[:] = [0.0, 0.5, 0.5, 1.0]
_B[:] = [1.0, 2.0, 2.0, 1.0]


cdef inline void _rhs(const double* s, const double* p, double kl, double kr,
                      double mc, double m, double l, double g,
                      double* f, double* F, double* F2, int order) noexcept nogil:
    """f[4], F[4*7] row-major, F2[4*7*7] (only rows 1 and 3 non-zero)."""
    cdef double q = s[0], v = s[1], phi = s[2], om = s[3]
    cdef double u = p[0], ql = p[1], qr = p[2]
    cdef double sn = sin(phi), cs = cos(phi)
    cdef double s2 = 2.0 * sn * cs, c2 = cs * cs - sn * sn
    cdef double num = u + 0.75 * m * g * sn * cs - 0.5 * m * l * om * om * sn + kl * (ql - q) + kr * (qr - q)
    cdef double den = mc + m - 0.75 * m * cs * cs
    cdef double qdd = num / den
    cdef double a_ = 1.5 * g / l, b_ = 1.5 / l
    cdef double dn[7]
    cdef double dq[7]
    cdef double d2n22, d2n23, d2n33, dd, ddd, t
    cdef int r, c

    f[0] = v
    f[1] = qdd
    f[2] = om
    f[3] = a_ * sn + b_ * cs * qdd

    dn[0] = -(kl + kr)
    dn[1] = 0.0
    dn[2] = 0.75 * m * g * c2 - 0.5 * m * l * om * om * cs
    dn[3] = -m * l * om * sn
    dn[4] = 1.0
    dn[5] = kl
    dn[6] = kr
    dd = 0.75 * m * s2
    for r in range(7):
        dq[r] = dn[r] / den
    dq[2] -= num * dd / (den * den)

    memset(F, 0, 28 * sizeof(double))
    F[0 * 7 + 1] = 1.0
    F[2 * 7 + 3] = 1.0
    for r in range(7):
        F[1 * 7 + r] = dq[r]
        F[3 * 7 + r] = b_ * cs * dq[r]
    F[3 * 7 + 2] += a_ * cs - b_ * sn * qdd

    if order < 2:
        return

    memset(F2, 0, 196 * sizeof(double))
    d2n22 = -1.5 * m * g * s2 + 0.5 * m * l * om * om * sn
    d2n23 = -m * l * om * cs
    d2n33 = -m * l * sn
    ddd = 1.5 * m * c2
    # row 1: second derivatives of qdd = num / den(phi)
    F2[49 + 2 * 7 + 2] = d2n22 / den
    F2[49 + 2 * 7 + 3] = d2n23 / den
    F2[49 + 3 * 7 + 2] = d2n23 / den
    F2[49 + 3 * 7 + 3] = d2n33 / den
    for r in range(7):
        t = dn[r] * dd / (den * den)
        F2[49 + r * 7 + 2] -= t
        F2[49 + 2 * 7 + r] -= t
    F2[49 + 2 * 7 + 2] += num * (2.0 * dd * dd / (den * den * den) - ddd / (den * den))
    # row 3: phidd = a sin(phi) + b cos(phi) qdd
    for r in range(7):
        for c in range(7):
            F2[147 + r * 7 + c] = b_ * cs * F2[49 + r * 7 + c]
    for r in range(7):
        F2[147 + 2 * 7 + r] -= b_ * sn * dq[r]
        F2[147 + r * 7 + 2] -= b_ * sn * dq[r]
    F2[147 + 2 * 7 + 2] += -a_ * sn - b_ * cs * qdd


def pendulum_rhs(x, double u, double q_left, double q_right, bint has_left, bint has_right, params):
    """Right-hand side of one cart-pendulum, neighbour positions as inputs."""
    cdef double mc, m, l, k, g
    mc, m, l, k, g = params
    cdef double s[4]
    cdef double p[3]
    cdef double f[4]
    cdef double F[28]
    cdef int i
    for i in range(4):
        s[i] = x[i]
    p[0] = u
    p[1] = q_left
    p[2] = q_right
    _rhs(s, p, k if has_left else 0.0, k if has_right else 0.0, mc, m, l, g, f, F, NULL, 1)
    return np.array([f[0], f[1], f[2], f[3]])


def rk4_frozen(x, double u, double q_left, double q_right, bint has_left, bint has_right, double h, params):
    """One RK4 step with input and neighbour positions held constant."""
    X = np.asarray(x, dtype=np.float64).reshape(1, 4)
    P = np.array([[u, q_left, q_right]], dtype=np.float64)
    return rk4_frozen_batch(X, P, has_left, has_right, h, params)[0][0]


def rk4_frozen_batch(X, P, bint has_left, bint has_right, double h, params, NU=None):
    """Batched frozen-neighbour RK4 step with sensitivities (see ``_kernels_py``)."""
    cdef double mc, m, l, k, g
    mc, m, l, k, g = params
    cdef double kl = k if has_left else 0.0
    cdef double kr = k if has_right else 0.0
    cdef double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef double[:, ::1] Pv = np.ascontiguousarray(P, dtype=np.float64)
    cdef Py_ssize_t nb = Xv.shape[0]
    cdef int order = 1 if NU is None else 2
    cdef double[:, ::1] NUv
    if order == 2:
        NUv = np.ascontiguousarray(NU, dtype=np.float64)

    out_x = np.empty((nb, 4))
    out_j = np.empty((nb, 4, 7))
    out_h = np.zeros((nb, 7, 7)) if order == 2 else None
    cdef double[:, ::1] ox = out_x
    cdef double[:, :, ::1] oj = out_j
    cdef double[:, :, ::1] oh
    if order == 2:
        oh = out_h

    cdef double s[4]
    cdef double f[4]
    cdef double F[28]
    cdef double F2[196]
    cdef double kp[4]
    cdef double dkp[28]
    cdef double d2kp[196]
    cdef double dk[28]
    cdef double d2k[196]
    cdef double da[49]
    cdef double xn[4]
    cdef double Jn[28]
    cdef double T[196]
    cdef double c, wgt, acc
    cdef Py_ssize_t b
    cdef int j, mm, r, v, w, ss

    with nogil:
        for b in range(nb):
            for r in range(4):
                xn[r] = Xv[b, r]
            memset(Jn, 0, 28 * sizeof(double))
            for r in range(4):
                Jn[r * 7 + r] = 1.0
            if order == 2:
                memset(T, 0, 196 * sizeof(double))
            for j in range(4):
                c = _C[j] * h
                # stage argument and its Jacobian w.r.t. w
                memset(da, 0, 49 * sizeof(double))
                for r in range(4):
                    if j == 0:
                        s[r] = Xv[b, r]
                    else:
                        s[r] = Xv[b, r] + c * kp[r]
                    for w in range(7):
                        da[r * 7 + w] = (1.0 if r == w else 0.0) + (c * dkp[r * 7 + w] if j > 0 else 0.0)
                da[4 * 7 + 4] = 1.0
                da[5 * 7 + 5] = 1.0
                da[6 * 7 + 6] = 1.0
                _rhs(s, &Pv[b, 0], kl, kr, mc, m, l, g, f, F, F2, order)
                for mm in range(4):
                    for w in range(7):
                        acc = 0.0
                        for r in range(7):
                            acc = acc + F[mm * 7 + r] * da[r * 7 + w]
                        dk[mm * 7 + w] = acc
                wgt = h / 6.0 * _B[j]
                for r in range(4):
                    xn[r] += wgt * f[r]
                for r in range(28):
                    Jn[r] += wgt * dk[r]
                if order == 2:
                    memset(d2k, 0, 196 * sizeof(double))
                    for mm in range(1, 4, 2):
                        # da^T F2[mm] da
                        for v in range(7):
                            for w in range(7):
                                acc = 0.0
                                for r in range(7):
                                    if da[r * 7 + v] == 0.0:
                                        continue
                                    for ss in range(7):
                                        acc = acc + da[r * 7 + v] * F2[mm * 49 + r * 7 + ss] * da[ss * 7 + w]
                                d2k[mm * 49 + v * 7 + w] = acc
                    if j > 0:
                        for mm in range(4):
                            for r in range(4):
                                if F[mm * 7 + r] == 0.0:
                                    continue
                                for v in range(49):
                                    d2k[mm * 49 + v] += F[mm * 7 + r] * c * d2kp[r * 49 + v]
                    for r in range(196):
                        T[r] += wgt * d2k[r]
                        d2kp[r] = d2k[r]
                for r in range(4):
                    kp[r] = f[r]
                for r in range(28):
                    dkp[r] = dk[r]
            for r in range(4):
                ox[b, r] = xn[r]
                for w in range(7):
                    oj[b, r, w] = Jn[r * 7 + w]
            if kl == 0.0:
                for r in range(4):
                    oj[b, r, 5] = 0.0
            if kr == 0.0:
                for r in range(4):
                    oj[b, r, 6] = 0.0
            if order == 2:
                for v in range(7):
                    for w in range(7):
                        acc = 0.0
                        for mm in range(4):
                            acc = acc + NUv[b, mm] * T[mm * 49 + v * 7 + w]
                        oh[b, v, w] = acc
    return out_x, out_j, out_h
