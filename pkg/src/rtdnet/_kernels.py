"""Numba kernels for the DistNet forward/backward pass and the SGD epoch loop.

Parameters live in one flat float64 vector. ``offs[l]`` holds the offsets of
(W, b, gamma, beta) for layer ``l`` (gamma/beta are -1 when absent; the
output layer never has them). ``W`` is stored row-major as ``[fan_in, width]``.

Per-layer activations are contiguous ``(B, width)`` views into flat
workspace buffers, one slot of ``stride`` floats per layer, so the affine maps
can go through BLAS.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit

FAMILY_CODES = {"N": 0, "LOG": 1, "EXP": 2, "INV": 3}
ACTIVATION_CODES = {"tanh": 0, "relu": 1}

BN_EPS = 1e-5
NLL_CEILING = 1e15
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def layer_offsets(sizes, batch_norm: bool) -> tuple[np.ndarray, int]:
    n_layers = len(sizes) - 1
    offs = np.full((n_layers, 4), -1, dtype=np.int64)
    pos = 0
    for l in range(n_layers):
        d_in, d_out = sizes[l], sizes[l + 1]
        offs[l, 0] = pos
        pos += d_in * d_out
        offs[l, 1] = pos
        pos += d_out
        if batch_norm and l < n_layers - 1:
            offs[l, 2] = pos
            pos += d_out
            offs[l, 3] = pos
            pos += d_out
    return offs, pos


def state_offsets(sizes) -> tuple[np.ndarray, int]:
    """Offsets of per-hidden-layer running statistics."""
    n_hidden = len(sizes) - 2
    offs = np.zeros(max(n_hidden, 1), dtype=np.int64)
    pos = 0
    for l in range(n_hidden):
        offs[l] = pos
        pos += sizes[l + 1]
    return offs, pos


@njit(cache=True, inline="always")
def _tanh(u):
    # ~3x cheaper than math.tanh; absolute error ~1e-16, saturates cleanly
    return 1.0 - 2.0 / (math.exp(2.0 * u) + 1.0)


@njit(cache=True)
def _activate(u, act):
    if act == 0:
        for q in range(u.shape[0]):
            u[q] = _tanh(u[q])
    else:
        for q in range(u.shape[0]):
            if u[q] < 0.0:
                u[q] = 0.0


@njit(cache=True)
def _activation_backward(dZ, H, act):
    if act == 0:
        for i in range(dZ.shape[0]):
            for j in range(dZ.shape[1]):
                dZ[i, j] *= 1.0 - H[i, j] * H[i, j]
    else:
        for i in range(dZ.shape[0]):
            for j in range(dZ.shape[1]):
                if H[i, j] <= 0.0:
                    dZ[i, j] = 0.0


@njit(cache=True, inline="always")
def _view(buf, slot, stride, B, d):
    return buf[slot * stride:slot * stride + B * d].reshape((B, d))


@njit(cache=True)
def _nll_row(family, A, i, x, dA, scale):
    """NLL of runtime ``x`` given log-parameters ``A[i]``; writes
    ``scale * d nll / d A[i]`` into ``dA[i]``."""
    if family == 0:
        mu = math.exp(A[i, 0])
        sd = math.exp(A[i, 1])
        z = (x - mu) / sd
        nll = A[i, 1] + _HALF_LOG_2PI + 0.5 * z * z
        g0 = -mu * z / sd
        g1 = 1.0 - z * z
    elif family == 1:
        sd = math.exp(A[i, 1])
        lx = math.log(x)
        z = (lx - A[i, 0]) / sd
        nll = A[i, 1] + lx + _HALF_LOG_2PI + 0.5 * z * z
        g0 = -z / sd
        g1 = 1.0 - z * z
    elif family == 2:
        beta = math.exp(A[i, 0])
        nll = A[i, 0] + x / beta
        g0 = 1.0 - x / beta
        g1 = 0.0
    else:
        mu = math.exp(A[i, 0])
        lam = math.exp(A[i, 1])
        r = (x - mu) / mu
        q = lam * r * r / (2.0 * x)
        nll = -0.5 * A[i, 1] + _HALF_LOG_2PI + 1.5 * math.log(x) + q
        g0 = -lam * r / mu
        g1 = -0.5 + q
    if not (nll < NLL_CEILING):
        nll = NLL_CEILING
        g0 = 0.0
        g1 = 0.0
    dA[i, 0] = scale * g0
    if dA.shape[1] > 1:
        dA[i, 1] = scale * g1
    return nll


@njit(cache=True)
def _plan(w, grad, offs, sizes, bn, B, run_mean, run_var, bmean, bvar, soffs):
    """Allocate the workspace for batch size ``B`` and precompute every
    per-layer view (weights, gradients, activations, statistics).

    Views alias ``w``/``grad``/``run_*``/``b*``, which must outlive the plan.
    """
    n_layers = sizes.shape[0] - 1
    stride = B * np.max(sizes)
    Hb = np.zeros((n_layers + 1) * stride)  # slot l: input of layer l
    Zb = np.zeros(n_layers * stride)        # slot l: (normalised) pre-activation of layer l
    Db = np.zeros(3 * stride)               # backward scratch, ping-pong between slots 1 and 2
    INV = np.ones(max(run_mean.shape[0], 1))
    empty = w[0:0]
    Ws = []
    gWs = []
    H = []
    Z = []
    dZ = []
    dPrev = []
    bs = []
    gbs = []
    gam = []
    bet = []
    ggam = []
    gbet = []
    mean = []
    var = []
    inv = []
    rmean = []
    rvar = []
    H.append(_view(Hb, 0, stride, B, sizes[0]))
    cur = 0
    for l in range(n_layers - 1, -1, -1):
        # filled top-down, reversed below
        d_in = sizes[l]
        nxt = 1 if cur != 1 else 2
        dZ.append(_view(Db, cur, stride, B, sizes[l + 1]))
        dPrev.append(_view(Db, nxt, stride, B, d_in))
        cur = nxt
    dZ.reverse()
    dPrev.reverse()
    for l in range(n_layers):
        d_in = sizes[l]
        d_out = sizes[l + 1]
        oW = offs[l, 0]
        ob = offs[l, 1]
        Ws.append(w[oW:oW + d_in * d_out].reshape((d_in, d_out)))
        gWs.append(grad[oW:oW + d_in * d_out].reshape((d_in, d_out)))
        bs.append(w[ob:ob + d_out])
        gbs.append(grad[ob:ob + d_out])
        Z.append(_view(Zb, l, stride, B, d_out))
        H.append(_view(Hb, l + 1, stride, B, d_out))
        if bn and l < n_layers - 1:
            og = offs[l, 2]
            obt = offs[l, 3]
            gam.append(w[og:og + d_out])
            bet.append(w[obt:obt + d_out])
            ggam.append(grad[og:og + d_out])
            gbet.append(grad[obt:obt + d_out])
        else:
            gam.append(empty)
            bet.append(empty)
            ggam.append(empty)
            gbet.append(empty)
        if l < n_layers - 1:
            so = soffs[l]
            mean.append(bmean[so:so + d_out])
            var.append(bvar[so:so + d_out])
            inv.append(INV[so:so + d_out])
            rmean.append(run_mean[so:so + d_out])
            rvar.append(run_var[so:so + d_out])
        else:
            mean.append(empty)
            var.append(empty)
            inv.append(empty)
            rmean.append(empty)
            rvar.append(empty)
    return (Ws, gWs, bs, gbs, gam, bet, ggam, gbet, H, Z, dZ, dPrev,
            mean, var, inv, rmean, rvar)


@njit(cache=True)
def _forward(plan, n_layers, bn, act, train):
    """Forward pass; the input must already be in ``H[0]``. Returns the
    ``(B, p)`` output pre-activations."""
    (Ws, gWs, bs, gbs, gam, bet, ggam, gbet, H, Z, dZ, dPrev,
     mean, var, inv, rmean, rvar) = plan
    for l in range(n_layers):
        Zl = Z[l]
        b = bs[l]
        B, d_out = Zl.shape
        np.dot(H[l], Ws[l], Zl)
        for i in range(B):
            for j in range(d_out):
                Zl[i, j] += b[j]
        if l == n_layers - 1:
            return Zl
        Hout = H[l + 1]
        if bn:
            g = gam[l]
            bt = bet[l]
            mu = mean[l]
            vr = var[l]
            iv = inv[l]
            if train:
                mu[:] = 0.0
                vr[:] = 0.0
                for i in range(B):
                    for j in range(d_out):
                        mu[j] += Zl[i, j]
                for j in range(d_out):
                    mu[j] /= B
                for i in range(B):
                    for j in range(d_out):
                        dz = Zl[i, j] - mu[j]
                        vr[j] += dz * dz
                for j in range(d_out):
                    vr[j] /= B
                    iv[j] = 1.0 / math.sqrt(vr[j] + BN_EPS)
            else:
                rm = rmean[l]
                rv = rvar[l]
                for j in range(d_out):
                    mu[j] = rm[j]
                    iv[j] = 1.0 / math.sqrt(rv[j] + BN_EPS)
            for i in range(B):
                for j in range(d_out):
                    zh = (Zl[i, j] - mu[j]) * iv[j]
                    Zl[i, j] = zh
                    Hout[i, j] = g[j] * zh + bt[j]
        else:
            Hout[:, :] = Zl
        _activate(Hout.reshape(B * d_out), act)
    return Z[n_layers - 1]


@njit(cache=True)
def _loss_grad_ws(plan, n_layers, bn, act, family, t, l2, train, grad):
    (Ws, gWs, bs, gbs, gam, bet, ggam, gbet, H, Z, dZ, dPrev,
     mean, var, inv, rmean, rvar) = plan
    A = _forward(plan, n_layers, bn, act, train)
    B = A.shape[0]
    dA = dZ[n_layers - 1]
    total = 0.0
    for i in range(B):
        total += _nll_row(family, A, i, t[i], dA, 1.0 / B)
    loss = total / B

    grad[:] = 0.0
    for l in range(n_layers - 1, -1, -1):
        W = Ws[l]
        gW = gWs[l]
        d_in, d_out = W.shape
        dZl = dZ[l]
        if l < n_layers - 1:
            Zl = Z[l]
            _activation_backward(dZl, H[l + 1], act)
            if bn:
                g = gam[l]
                gg = ggam[l]
                gbt = gbet[l]
                iv = inv[l]
                for i in range(B):
                    for j in range(d_out):
                        gg[j] += dZl[i, j] * Zl[i, j]
                        gbt[j] += dZl[i, j]
                if train:
                    for i in range(B):
                        for j in range(d_out):
                            dZl[i, j] = iv[j] * (g[j] * dZl[i, j] - g[j] * (gbt[j] + Zl[i, j] * gg[j]) / B)
                else:
                    for i in range(B):
                        for j in range(d_out):
                            dZl[i, j] *= g[j] * iv[j]
        np.dot(H[l].T, dZl, gW)
        gb = gbs[l]
        for i in range(B):
            for j in range(d_out):
                gb[j] += dZl[i, j]
        if l2 != 0.0:
            for kk in range(d_in):
                for j in range(d_out):
                    gW[kk, j] += l2 * W[kk, j]
        if l > 0:
            np.dot(dZl, W.T, dPrev[l])

    pen = 0.0
    if l2 != 0.0:
        for l in range(n_layers):
            W = Ws[l]
            for kk in range(W.shape[0]):
                for j in range(W.shape[1]):
                    pen += W[kk, j] * W[kk, j]
    return loss + 0.5 * l2 * pen


@njit(cache=True)
def loss_grad(w, offs, sizes, bn, act, family, X, t, l2, train, run_mean, run_var,
              soffs, grad, bmean, bvar):
    """Mean per-sample NLL plus ``l2/2 * sum(W**2)``; writes the exact gradient
    into ``grad`` and the batch statistics into ``bmean``/``bvar``."""
    plan = _plan(w, grad, offs, sizes, bn, X.shape[0], run_mean, run_var, bmean, bvar, soffs)
    plan[8][0][:, :] = X
    return _loss_grad_ws(plan, sizes.shape[0] - 1, bn, act, family, t, l2, train, grad)


@njit(cache=True)
def predict_log_params(w, offs, sizes, bn, act, X, train, run_mean, run_var, soffs):
    width = max(run_mean.shape[0], 1)
    bmean = np.empty(width)
    bvar = np.empty(width)
    grad = np.empty(w.shape[0])
    plan = _plan(w, grad, offs, sizes, bn, X.shape[0], run_mean, run_var, bmean, bvar, soffs)
    plan[8][0][:, :] = X
    return _forward(plan, sizes.shape[0] - 1, bn, act, train).copy()


@njit(cache=True)
def sgd_epoch(w, offs, sizes, bn, act, family, Xinst, inst_of, t, batch_size,
              lr, l2, clip, run_mean, run_var, soffs, momentum):
    """One pass over the samples ``(Xinst[inst_of[s]], t[s])`` in the given
    order, in minibatches (the last one possibly smaller); updates ``w`` and
    the running statistics in place. Returns the sample-weighted mean batch
    loss."""
    n = t.shape[0]
    m = Xinst.shape[1]
    n_layers = sizes.shape[0] - 1
    n_state = run_mean.shape[0]
    grad = np.empty(w.shape[0])
    bmean = np.empty(max(n_state, 1))
    bvar = np.empty(max(n_state, 1))
    full = _plan(w, grad, offs, sizes, bn, min(batch_size, n), run_mean, run_var, bmean, bvar, soffs)
    tail = n % batch_size
    last = full
    if tail and n > batch_size:
        last = _plan(w, grad, offs, sizes, bn, tail, run_mean, run_var, bmean, bvar, soffs)
    tb = np.empty(batch_size)
    total = 0.0
    start = 0
    while start < n:
        stop = min(start + batch_size, n)
        B = stop - start
        plan = full if B == full[8][0].shape[0] else last
        Hin = plan[8][0]
        for i in range(B):
            tb[i] = t[start + i]
            row = inst_of[start + i]
            for kk in range(m):
                Hin[i, kk] = Xinst[row, kk]
        loss = _loss_grad_ws(plan, n_layers, bn, act, family, tb, l2, True, grad)
        total += loss * B
        if bn:
            for c in range(n_state):
                run_mean[c] = momentum * run_mean[c] + (1.0 - momentum) * bmean[c]
                run_var[c] = momentum * run_var[c] + (1.0 - momentum) * bvar[c]
        norm = 0.0
        for q in range(grad.shape[0]):
            norm += grad[q] * grad[q]
        norm = math.sqrt(norm)
        step = lr
        if norm > clip:
            step = lr * clip / norm
        for q in range(w.shape[0]):
            w[q] -= step * grad[q]
        start = stop
    return total / n
