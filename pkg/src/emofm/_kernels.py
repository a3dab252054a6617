"""Compiled loops for the rank-one cross-attention used by the mixers.

Every mixer token is a scalar feature times a projection row, so a head's
attention logits collapse to ``t_i * b_j`` with scalar ``t_i`` (query side)
and ``b_j`` (key side).  The kernels below evaluate

    f_i = sum_j softmax_j(t_i * b_j) * b_j

and its exact gradient without materialising the ``L_q x L_k`` weight matrix.
"""

import numpy as np
from numba import njit, types
from numba.extending import intrinsic

_LOG2E = 1.4426950408889634
_LN2_HI = 0.6931471803691238
_LN2_LO = 1.9082149292705877e-10


@intrinsic
def _int_bits_as_float(typingctx, x):
    if x != types.int64:
        return None
    sig = types.float64(types.int64)

    def codegen(context, builder, signature, args):
        return builder.bitcast(args[0], context.get_value_type(types.float64))

    return sig, codegen


@njit(fastmath=True, inline="always", cache=True)
def _exp_nonpos(x):
    # exp for x <= 0, written so the loops that call it vectorise;
    # ~1 ulp, underflows to ~1e-308 instead of 0 below -708
    xv = max(x, -708.0)
    k = np.floor(xv * _LOG2E + 0.5)
    r = (xv - k * _LN2_HI) - k * _LN2_LO
    p = 1.0 / 6227020800.0
    p = p * r + 1.0 / 479001600.0
    p = p * r + 1.0 / 39916800.0
    p = p * r + 1.0 / 3628800.0
    p = p * r + 1.0 / 362880.0
    p = p * r + 1.0 / 40320.0
    p = p * r + 1.0 / 5040.0
    p = p * r + 1.0 / 720.0
    p = p * r + 1.0 / 120.0
    p = p * r + 1.0 / 24.0
    p = p * r + 1.0 / 6.0
    p = p * r + 0.5
    p = p * r + 1.0
    p = p * r + 1.0
    return p * _int_bits_as_float((np.int64(k) + 1023) << 52)


@njit(cache=True)
def exp_nonpos(x):
    out = np.empty_like(x)
    flat_in = x.ravel()
    flat_out = out.ravel()
    for i in range(flat_in.size):
        flat_out[i] = _exp_nonpos(min(flat_in[i], 0.0))
    return out


@njit(fastmath=True, cache=True)
def softmax_mean_forward(t, b, f, z, m, var):
    """Fill f, z (partition), m (row max) and var for every (n, h, i)."""
    nb, nh, nq = t.shape
    nk = b.shape[1]
    for n in range(nb):
        bv = b[n]
        bmax = bv[0]
        bmin = bv[0]
        for j in range(1, nk):
            bmax = max(bmax, bv[j])
            bmin = min(bmin, bv[j])
        # moments are accumulated about the midpoint for conditioning
        bc = 0.5 * (bmax + bmin)
        for h in range(nh):
            for i in range(nq):
                ti = t[n, h, i]
                mi = ti * bmax if ti >= 0.0 else ti * bmin
                s0 = 0.0
                s1 = 0.0
                s2 = 0.0
                for j in range(nk):
                    bj = bv[j]
                    e = _exp_nonpos(ti * bj - mi)
                    dj = bj - bc
                    s0 += e
                    s1 += e * dj
                    s2 += e * dj * dj
                mu = s1 / s0
                f[n, h, i] = bc + mu
                z[n, h, i] = s0
                m[n, h, i] = mi
                var[n, h, i] = max(s2 / s0 - mu * mu, 0.0)


@njit(fastmath=True, cache=True)
def softmax_mean_backward(t, b, g, f, z, m, var, gt, gb):
    """Accumulate d/dt and d/db of sum(g * f) into gt and gb."""
    nb, nh, nq = t.shape
    nk = b.shape[1]
    acc0 = np.empty(nk)
    acc1 = np.empty(nk)
    for n in range(nb):
        bv = b[n]
        bmax = bv[0]
        bmin = bv[0]
        for j in range(1, nk):
            bmax = max(bmax, bv[j])
            bmin = min(bmin, bv[j])
        bc = 0.5 * (bmax + bmin)
        acc0[:] = 0.0
        acc1[:] = 0.0
        for h in range(nh):
            for i in range(nq):
                gi = g[n, h, i]
                ti = t[n, h, i]
                gt[n, h, i] = gi * var[n, h, i]
                if gi == 0.0:
                    continue
                mi = m[n, h, i]
                alpha = gi * (1.0 - ti * (f[n, h, i] - bc)) / z[n, h, i]
                beta = gi * ti / z[n, h, i]
                for j in range(nk):
                    e = _exp_nonpos(ti * bv[j] - mi)
                    acc0[j] += alpha * e
                    acc1[j] += beta * e
        for j in range(nk):
            gb[n, j] = acc0[j] + (bv[j] - bc) * acc1[j]


@njit(fastmath=True, cache=True)
def softmax_mean_weights(t, b, out):
    """Write the full attention weight tensor (nb, nh, nq, nk) into out."""
    nb, nh, nq = t.shape
    nk = b.shape[1]
    for n in range(nb):
        bv = b[n]
        bmax = bv[0]
        bmin = bv[0]
        for j in range(1, nk):
            bmax = max(bmax, bv[j])
            bmin = min(bmin, bv[j])
        for h in range(nh):
            for i in range(nq):
                ti = t[n, h, i]
                mi = ti * bmax if ti >= 0.0 else ti * bmin
                s0 = 0.0
                for j in range(nk):
                    e = _exp_nonpos(ti * bv[j] - mi)
                    out[n, h, i, j] = e
                    s0 += e
                for j in range(nk):
                    out[n, h, i, j] /= s0
