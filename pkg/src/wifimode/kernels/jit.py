"""Numba-compiled fused kernels; numerically matches kernels.reference.

Matrix products go through np.dot (same BLAS as the numpy backend);
normalization, activation, dropout, and the softmax loss are fused
explicit loops.  fastmath stays off so results are reproducible
run-to-run.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

BN_EPS = 1e-5


@njit(cache=True)
def forward_eval(X, Wi, bi, Wh, bh, gamma, beta, rmean, rvar, Wo, bo,
                 layers_per_block, use_bn, use_residual):
    B = X.shape[0]
    L = Wh.shape[0]
    H = Wh.shape[1]
    n_blocks = L // layers_per_block
    n_relu = layers_per_block - 1

    h = np.dot(X, Wi.T) + bi
    for b_i in range(n_blocks):
        xb = h.copy()
        for j in range(layers_per_block):
            l = b_i * layers_per_block + j
            if use_bn:
                u = np.empty((B, H))
                for c in range(H):
                    istd = 1.0 / math.sqrt(rvar[l, c] + BN_EPS)
                    g = gamma[l, c]
                    be = beta[l, c]
                    mu = rmean[l, c]
                    for r in range(B):
                        u[r, c] = g * (h[r, c] - mu) * istd + be
            else:
                u = h
            z = np.dot(u, Wh[l].T) + bh[l]
            if j < n_relu:
                for r in range(B):
                    for c in range(H):
                        if z[r, c] < 0.0:
                            z[r, c] = 0.0
            h = z
        if use_residual:
            h = h + xb
    return np.dot(h, Wo.T) + bo


@njit(cache=True)
def forward_backward(X, y, Wi, bi, Wh, bh, gamma, beta, rmean, rvar, Wo, bo,
                     layers_per_block, use_bn, use_residual,
                     update_running, bn_momentum,
                     drop_masks, drop_scale, use_dropout):
    B = X.shape[0]
    L = Wh.shape[0]
    H = Wh.shape[1]
    n_out = Wo.shape[0]
    n_blocks = L // layers_per_block
    n_relu = layers_per_block - 1

    block_in = np.empty((n_blocks, B, H))
    dense_in = np.empty((L, B, H))
    z_pre = np.empty((L, B, H))
    xhat = np.empty((L, B, H))
    inv_std = np.empty((L, H))

    h = np.dot(X, Wi.T) + bi
    for b_i in range(n_blocks):
        block_in[b_i, :, :] = h
        for j in range(layers_per_block):
            l = b_i * layers_per_block + j
            if use_bn:
                for c in range(H):
                    s = 0.0
                    for r in range(B):
                        s += h[r, c]
                    mean = s / B
                    ss = 0.0
                    for r in range(B):
                        d = h[r, c] - mean
                        ss += d * d
                    var = ss / B
                    istd = 1.0 / math.sqrt(var + BN_EPS)
                    inv_std[l, c] = istd
                    g = gamma[l, c]
                    be = beta[l, c]
                    for r in range(B):
                        xh = (h[r, c] - mean) * istd
                        xhat[l, r, c] = xh
                        dense_in[l, r, c] = g * xh + be
                    if update_running:
                        rmean[l, c] = bn_momentum * rmean[l, c] + (1.0 - bn_momentum) * mean
                        rvar[l, c] = bn_momentum * rvar[l, c] + (1.0 - bn_momentum) * var
            else:
                dense_in[l, :, :] = h
            z = np.dot(dense_in[l], Wh[l].T) + bh[l]
            if j < n_relu:
                z_pre[l, :, :] = z
                h = np.empty((B, H))
                if use_dropout:
                    md = b_i * n_relu + j
                    for r in range(B):
                        for c in range(H):
                            a = z[r, c] if z[r, c] > 0.0 else 0.0
                            h[r, c] = a * drop_masks[md, r, c] * drop_scale
                else:
                    for r in range(B):
                        for c in range(H):
                            h[r, c] = z[r, c] if z[r, c] > 0.0 else 0.0
            else:
                h = z
        if use_residual:
            h = h + block_in[b_i]

    logits = np.dot(h, Wo.T) + bo

    loss = 0.0
    n_correct = 0
    dlogits = np.empty((B, n_out))
    for r in range(B):
        mx = logits[r, 0]
        best = 0
        for c in range(1, n_out):
            if logits[r, c] > mx:
                mx = logits[r, c]
                best = c
        if best == y[r]:
            n_correct += 1
        s = 0.0
        for c in range(n_out):
            e = math.exp(logits[r, c] - mx)
            dlogits[r, c] = e
            s += e
        loss += math.log(s) - (logits[r, y[r]] - mx)
        for c in range(n_out):
            p = dlogits[r, c] / s
            if c == y[r]:
                p -= 1.0
            dlogits[r, c] = p / B
    loss /= B

    dWo = np.dot(dlogits.T, h)
    dbo = np.empty(n_out)
    for c in range(n_out):
        s = 0.0
        for r in range(B):
            s += dlogits[r, c]
        dbo[c] = s
    dx = np.dot(dlogits, Wo)

    dWh = np.zeros((L, H, H))
    dbh = np.zeros((L, H))
    dgamma = np.zeros((L, H))
    dbeta = np.zeros((L, H))

    for b_i in range(n_blocks - 1, -1, -1):
        dh = dx
        for j in range(layers_per_block - 1, -1, -1):
            l = b_i * layers_per_block + j
            if j < n_relu:
                nd = np.empty((B, H))
                if use_dropout:
                    md = b_i * n_relu + j
                    for r in range(B):
                        for c in range(H):
                            if z_pre[l, r, c] > 0.0:
                                nd[r, c] = dh[r, c] * drop_masks[md, r, c] * drop_scale
                            else:
                                nd[r, c] = 0.0
                else:
                    for r in range(B):
                        for c in range(H):
                            nd[r, c] = dh[r, c] if z_pre[l, r, c] > 0.0 else 0.0
                dh = nd
            dWh[l] = np.dot(dh.T, dense_in[l])
            for c in range(H):
                s = 0.0
                for r in range(B):
                    s += dh[r, c]
                dbh[l, c] = s
            du = np.dot(dh, Wh[l])
            if use_bn:
                nd = np.empty((B, H))
                for c in range(H):
                    g = gamma[l, c]
                    sum_dxh = 0.0
                    sum_dxh_xh = 0.0
                    sum_du = 0.0
                    sum_du_xh = 0.0
                    for r in range(B):
                        dxh = du[r, c] * g
                        sum_dxh += dxh
                        sum_dxh_xh += dxh * xhat[l, r, c]
                        sum_du += du[r, c]
                        sum_du_xh += du[r, c] * xhat[l, r, c]
                    dgamma[l, c] = sum_du_xh
                    dbeta[l, c] = sum_du
                    istd = inv_std[l, c]
                    for r in range(B):
                        dxh = du[r, c] * g
                        nd[r, c] = (istd / B) * (B * dxh - sum_dxh - xhat[l, r, c] * sum_dxh_xh)
                dh = nd
            else:
                dh = du
        if use_residual:
            dx = dh + dx
        else:
            dx = dh

    dWi = np.dot(dx.T, X)
    nI = Wi.shape[0]
    dbi = np.empty(nI)
    for c in range(nI):
        s = 0.0
        for r in range(B):
            s += dx[r, c]
        dbi[c] = s

    return loss, n_correct, dWi, dbi, dWh, dbh, dgamma, dbeta, dWo, dbo


@njit(cache=True)
def adam_update(p, g, m, v, t, lr, beta1, beta2, eps):
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for i in range(p.shape[0]):
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        p[i] -= lr * (m[i] / c1) / (math.sqrt(v[i] / c2) + eps)
