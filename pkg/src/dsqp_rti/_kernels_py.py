"""Pure NumPy implementation of the pendulum kernels.

Used when the compiled ``_kernels`` extension is unavailable. Both
implementations expose the same functions with the same signatures and
must agree to rounding error (see ``tests/test_kernels.py``).

Variable ordering for derivatives is ``w = (q, qdot, phi, phidot, u, q_left,
q_right)``; columns belonging to an absent neighbour are zero.
"""

import numpy as np

# RK4 stage offsets and weights.
_C = (0.0, 0.5, 0.5, 1.0)
_B = (1.0, 2.0, 2.0, 1.0)


def pendulum_rhs(x, u, q_left, q_right, has_left, has_right, params):
    """Right-hand side of one cart-pendulum, neighbour positions as inputs."""
    mc, m, l, k, g = params
    q, v, phi, om = x
    s, c = np.sin(phi), np.cos(phi)
    force = u + 0.75 * m * g * s * c - 0.5 * m * l * om * om * s
    if has_left:
        force += k * (q_left - q)
    if has_right:
        force += k * (q_right - q)
    qdd = force / (mc + m - 0.75 * m * c * c)
    phidd = 1.5 * g / l * s + 1.5 / l * c * qdd
    return np.array([v, qdd, om, phidd])


def _rhs_batch(s, p, has_left, has_right, params, order):
    """Vectorised right-hand side with first and (optionally) second derivatives.

    ``s`` has shape (B, 4), ``p`` = (u, q_left, q_right) has shape (B, 3).
    Returns f (B, 4), F (B, 4, 7) and F2 (B, 4, 7, 7) or None.
    """
    mc, m, l, k, g = params
    nb = s.shape[0]
    q, v, phi, om = s[:, 0], s[:, 1], s[:, 2], s[:, 3]
    u, ql, qr = p[:, 0], p[:, 1], p[:, 2]
    sn, cs = np.sin(phi), np.cos(phi)
    s2, c2 = 2.0 * sn * cs, cs * cs - sn * sn
    kl = k if has_left else 0.0
    kr = k if has_right else 0.0

    num = u + 0.75 * m * g * sn * cs - 0.5 * m * l * om * om * sn + kl * (ql - q) + kr * (qr - q)
    den = mc + m - 0.75 * m * cs * cs
    qdd = num / den
    a_, b_ = 1.5 * g / l, 1.5 / l
    phidd = a_ * sn + b_ * cs * qdd

    f = np.empty((nb, 4))
    f[:, 0], f[:, 1], f[:, 2], f[:, 3] = v, qdd, om, phidd

    # gradient of the numerator, index order (q, v, phi, om, u, ql, qr)
    dn = np.zeros((nb, 7))
    dn[:, 0] = -(kl + kr)
    dn[:, 2] = 0.75 * m * g * c2 - 0.5 * m * l * om * om * cs
    dn[:, 3] = -m * l * om * sn
    dn[:, 4] = 1.0
    dn[:, 5] = kl
    dn[:, 6] = kr
    dd = 0.75 * m * s2  # d den / d phi

    dq = dn / den[:, None]
    dq[:, 2] -= num * dd / den**2

    F = np.zeros((nb, 4, 7))
    F[:, 0, 1] = 1.0
    F[:, 1, :] = dq
    F[:, 2, 3] = 1.0
    F[:, 3, :] = b_ * cs[:, None] * dq
    F[:, 3, 2] += a_ * cs - b_ * sn * qdd

    if order < 2:
        return f, F, None

    d2n = np.zeros((nb, 7, 7))
    d2n[:, 2, 2] = -1.5 * m * g * s2 + 0.5 * m * l * om * om * sn
    d2n[:, 2, 3] = d2n[:, 3, 2] = -m * l * om * cs
    d2n[:, 3, 3] = -m * l * sn
    ddd = 1.5 * m * c2  # d2 den / d phi2

    # second derivatives of num/den where den depends on phi only
    e = np.zeros((nb, 7))
    e[:, 2] = 1.0
    nd = dn[:, :, None] * e[:, None, :] * dd[:, None, None]
    d2q = (
        d2n / den[:, None, None]
        - (nd + nd.transpose(0, 2, 1)) / den[:, None, None] ** 2
        + (num * (2.0 * dd * dd / den**3 - ddd / den**2))[:, None, None] * e[:, :, None] * e[:, None, :]
    )

    F2 = np.zeros((nb, 4, 7, 7))
    F2[:, 1] = d2q
    ph = b_ * cs[:, None, None] * d2q
    cross = -b_ * sn[:, None] * dq
    ph[:, 2, :] += cross
    ph[:, :, 2] += cross
    ph[:, 2, 2] += -a_ * sn - b_ * cs * qdd
    F2[:, 3] = ph
    return f, F, F2


def rk4_frozen(x, u, q_left, q_right, has_left, has_right, h, params):
    """One RK4 step with input and neighbour positions held constant."""
    x = np.asarray(x, dtype=float)
    k1 = pendulum_rhs(x, u, q_left, q_right, has_left, has_right, params)
    k2 = pendulum_rhs(x + 0.5 * h * k1, u, q_left, q_right, has_left, has_right, params)
    k3 = pendulum_rhs(x + 0.5 * h * k2, u, q_left, q_right, has_left, has_right, params)
    k4 = pendulum_rhs(x + h * k3, u, q_left, q_right, has_left, has_right, params)
    return x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_frozen_batch(X, P, has_left, has_right, h, params, NU=None):
    """Batched frozen-neighbour RK4 step with sensitivities.

    Parameters
    ----------
    X : ndarray, shape (B, 4)
        States at the start of each shooting interval.
    P : ndarray, shape (B, 3)
        Frozen (u, q_left, q_right) per interval.
    has_left, has_right : bool
        Whether the neighbour spring exists.
    h : float
        Step size.
    params : tuple
        (M_c, m, l, k_spring, g).
    NU : ndarray, shape (B, 4), optional
        Weights for the contracted Hessian. When omitted no second-order
        information is propagated.

    Returns
    -------
    Xn : ndarray, shape (B, 4)
    J : ndarray, shape (B, 4, 7)
        Jacobian of the step with respect to (x, u, q_left, q_right).
    Hc : ndarray, shape (B, 7, 7) or None
        ``sum_m NU[:, m] * d2 Xn[:, m] / dw2``.
    """
    X = np.asarray(X, dtype=float)
    P = np.asarray(P, dtype=float)
    nb = X.shape[0]
    order = 1 if NU is None else 2
    base = np.zeros((nb, 4, 7))
    base[:, :, :4] = np.eye(4)

    xn = X.copy()
    J = base.copy()
    T = np.zeros((nb, 4, 7, 7)) if order == 2 else None
    k_prev = dk_prev = d2k_prev = None
    for j in range(4):
        c = _C[j] * h
        if j == 0:
            s, ds = X, base
            d2s = None
        else:
            s = X + c * k_prev
            ds = base + c * dk_prev
            d2s = c * d2k_prev if order == 2 else None
        f, F, F2 = _rhs_batch(s, P, has_left, has_right, params, order)
        # full Jacobian of the stage argument (s, p) with respect to w
        da = np.zeros((nb, 7, 7))
        da[:, :4, :] = ds
        da[:, 4:, 4:] = np.eye(3)
        dk = np.einsum("bmr,brw->bmw", F, da)
        wgt = h / 6.0 * _B[j]
        xn = xn + wgt * f
        J = J + wgt * dk
        if order == 2:
            d2k = np.einsum("brv,bmrs,bsw->bmvw", da, F2, da)
            if d2s is not None:
                d2k += np.einsum("bmr,brvw->bmvw", F[:, :, :4], d2s)
            T = T + wgt * d2k
            d2k_prev = d2k
        k_prev, dk_prev = f, dk

    if not has_left:
        J[:, :, 5] = 0.0
    if not has_right:
        J[:, :, 6] = 0.0
    if order == 1:
        return xn, J, None
    Hc = np.einsum("bm,bmvw->bvw", np.asarray(NU, dtype=float), T)
    return xn, J, Hc
