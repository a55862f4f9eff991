"""Compiled training step for stacks made only of SBN layers.

Mirrors the numpy fast path in :func:`rws.training.train_step` step for
step: same uniforms in the same order, same weights and the same momentum
update, with sums accumulated in loop order rather than by BLAS.  It exists
because at toy sizes the numpy path is dominated by per-call overhead.

Layer tuples follow the model orientation: ``pW``/``pb`` top first (index 0
is the prior), ``qW``/``qb`` bottom-up.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit

MODES = {"none": 0, "wake": 1, "sleep": 2, "both": 3}


@njit(cache=True)
def _forward(W, b, parent, has_parent, U, out, s, lp, sample):
    """Logits of one layer; samples ``out`` from ``U`` when ``sample``.

    Writes sigmoid(z) into ``s`` and adds the row log-probs into ``lp``.
    Per unit log P = x z - max(z, 0) - log1p(exp(-|z|)); the log1p terms of
    a row are taken as the log of one running product to save transcendentals.
    """
    n_out, n_in = W.shape
    WT = np.ascontiguousarray(W.T)
    z = np.empty(n_out)
    for n in range(out.shape[0]):
        for i in range(n_out):
            z[i] = b[i]
        if has_parent:
            for m in range(n_in):
                pm = parent[n, m]
                if pm != 0.0:
                    for i in range(n_out):
                        z[i] += WT[m, i] * pm
        acc = 0.0
        prod = 1.0
        for i in range(n_out):
            zi = z[i]
            e = math.exp(-abs(zi))
            d = 1.0 + e
            si = 1.0 / d if zi >= 0 else e / d
            s[n, i] = si
            if sample:
                out[n, i] = 1.0 if U[n, i] < si else 0.0
            acc += out[n, i] * zi - max(zi, 0.0)
            prod *= d
            if prod > 1e300:
                acc -= math.log(prod)
                prod = 1.0
        lp[n] += acc - math.log(prod)


@njit(cache=True)
def _accumulate(gW, gb, out, s, parent, has_parent, w):
    """gW += sum_n w[n] (out[n] - s[n]) parent[n]^T, gb likewise."""
    n_out, n_in = gW.shape
    d = np.empty(n_out)
    for n in range(out.shape[0]):
        for i in range(n_out):
            d[i] = (out[n, i] - s[n, i]) * w[n]
            gb[i] += d[i]
        if has_parent:
            for m in range(n_in):
                pm = parent[n, m]
                if pm != 0.0:
                    for i in range(n_out):
                        gW[i, m] += d[i] * pm


@njit(cache=True)
def _momentum(theta, v, g, lr, beta):
    a = theta.reshape(-1)
    vv = v.reshape(-1)
    gg = g.reshape(-1)
    for i in range(a.shape[0]):
        vv[i] = vv[i] * beta + gg[i]
        a[i] += lr * vv[i]


@njit(cache=True)
def sbn_step(X, K, pW, pb, qW, qb, vpW, vpb, vqW, vqb, Uq, Up, mode, wake_w, sleep_w, lr, beta, ll, ess):
    """One update; returns False (parameters untouched) on non-finite weights."""
    B = X.shape[0]
    N = B * K
    Lq = len(qW)
    Lp = Lq + 1
    empty = np.zeros((N, 0))

    Xr = np.empty((N, X.shape[1]))
    for n in range(N):
        Xr[n] = X[n // K]

    # proposal samples, bottom-up
    lq = np.zeros(N)
    hs = []
    qs = []
    below = Xr
    for j in range(Lq):
        h = np.empty((N, qW[j].shape[0]))
        s = np.empty_like(h)
        _forward(qW[j], qb[j], below, True, Uq[j], h, s, lq, True)
        hs.append(h)
        qs.append(s)
        below = h

    # score under p; chain[k] is the output of p layer k (top first)
    chain = []
    for k in range(Lq):
        chain.append(hs[Lq - 1 - k])
    chain.append(Xr)
    lpj = np.zeros(N)
    ps = []
    for k in range(Lp):
        s = np.empty_like(chain[k])
        parent = chain[k - 1] if k > 0 else empty
        _forward(pW[k], pb[k], parent, k > 0, Uq[0], chain[k], s, lpj, False)
        ps.append(s)

    # self-normalised weights per datapoint, pre-divided by B
    wf = np.empty(N)
    for bi in range(B):
        m = -np.inf
        for k in range(K):
            m = max(m, lpj[bi * K + k] - lq[bi * K + k])
        if not np.isfinite(m):
            return False
        tot = 0.0
        for k in range(K):
            wf[bi * K + k] = math.exp(lpj[bi * K + k] - lq[bi * K + k] - m)
            tot += wf[bi * K + k]
        sq = 0.0
        for k in range(K):
            wf[bi * K + k] /= tot
            sq += wf[bi * K + k] * wf[bi * K + k]
        ll[bi] = m + math.log(tot) - math.log(K)
        ess[bi] = 1.0 / sq
        for k in range(K):
            wf[bi * K + k] /= B

    gpW = [np.zeros_like(a) for a in pW]
    gpb = [np.zeros_like(a) for a in pb]
    for k in range(Lp):
        parent = chain[k - 1] if k > 0 else empty
        _accumulate(gpW[k], gpb[k], chain[k], ps[k], parent, k > 0, wf)

    gqW = [np.zeros_like(a) for a in qW]
    gqb = [np.zeros_like(a) for a in qb]
    if mode == 1 or mode == 3:
        ww = wf * wake_w
        below = Xr
        for j in range(Lq):
            _accumulate(gqW[j], gqb[j], hs[j], qs[j], below, True, ww)
            below = hs[j]
    if mode == 2 or mode == 3:
        n = Up[0].shape[0]
        junk = np.zeros(n)
        dream = []
        parent = empty
        for k in range(Lp):
            out = np.empty((n, pW[k].shape[0]))
            s = np.empty_like(out)
            _forward(pW[k], pb[k], parent, k > 0, Up[k], out, s, junk, True)
            dream.append(out)
            parent = out
        ws = np.full(n, sleep_w / n)
        below = dream[Lp - 1]
        for j in range(Lq):
            target = dream[Lp - 2 - j]
            s = np.empty_like(target)
            _forward(qW[j], qb[j], below, True, Up[0], target, s, junk, False)
            _accumulate(gqW[j], gqb[j], target, s, below, True, ws)
            below = target

    # every gradient was taken at the old parameters; now move them
    for k in range(Lp):
        _momentum(pW[k], vpW[k], gpW[k], lr, beta)
        _momentum(pb[k], vpb[k], gpb[k], lr, beta)
    if mode != 0:
        for j in range(Lq):
            _momentum(qW[j], vqW[j], gqW[j], lr, beta)
            _momentum(qb[j], vqb[j], gqb[j], lr, beta)
    return True
