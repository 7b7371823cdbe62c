"""Vectorized numpy implementation of the fused network kernels.

The network: affine stem n_in -> H, a stack of residual blocks (each
``layers_per_block`` dense layers of width H with optional
batch normalization before every dense layer, ReLU and optional dropout
after every dense layer except the block's last, then the identity
shortcut added), and an affine head H -> 3.

This backend composes the gradient-checked primitives in
:mod:`wifimode.nn`; the numba backend must agree with it numerically.
Both mutate ``rmean``/``rvar`` in place when ``update_running`` is set and
nothing else.
"""

from __future__ import annotations

import numpy as np

from .. import nn


def forward_eval(X: np.ndarray, Wi, bi, Wh, bh, gamma, beta, rmean, rvar, Wo, bo,
                 layers_per_block: int, use_bn: bool, use_residual: bool) -> np.ndarray:
    """Inference logits (B, 3); running stats, no dropout."""
    h = nn.dense_forward(X, Wi, bi)
    n_blocks = Wh.shape[0] // layers_per_block
    for b_i in range(n_blocks):
        xb = h
        for j in range(layers_per_block):
            l = b_i * layers_per_block + j
            u = nn.bn_eval_forward(h, gamma[l], beta[l], rmean[l], rvar[l]) if use_bn else h
            h = nn.dense_forward(u, Wh[l], bh[l])
            if j < layers_per_block - 1:
                h = nn.relu_forward(h)
        if use_residual:
            h = h + xb
    return nn.dense_forward(h, Wo, bo)


def forward_backward(X: np.ndarray, y: np.ndarray,
                     Wi, bi, Wh, bh, gamma, beta, rmean, rvar, Wo, bo,
                     layers_per_block: int, use_bn: bool, use_residual: bool,
                     update_running: bool, bn_momentum: float,
                     drop_masks: np.ndarray, drop_scale: float, use_dropout: bool):
    """One training-mode forward/backward over a batch.

    Returns (loss, n_correct, dWi, dbi, dWh, dbh, dgamma, dbeta, dWo, dbo).
    ``drop_masks`` holds one 0/1 mask of shape (B, H) per ReLU site, indexed
    ``block * (layers_per_block - 1) + layer``; ``drop_scale`` is the
    inverted-dropout keep scale 1/(1-rate).
    """
    B = X.shape[0]
    L, H = Wh.shape[0], Wh.shape[1]
    n_blocks = L // layers_per_block
    n_relu = layers_per_block - 1

    block_in = np.empty((n_blocks, B, H))
    dense_in = np.empty((L, B, H))
    z_pre = np.empty((L, B, H))
    xhat = np.empty((L, B, H))
    inv_std = np.empty((L, H))

    h = nn.dense_forward(X, Wi, bi)
    for b_i in range(n_blocks):
        block_in[b_i] = h
        for j in range(layers_per_block):
            l = b_i * layers_per_block + j
            if use_bn:
                u, xh, istd, mean, var = nn.bn_train_forward(h, gamma[l], beta[l])
                xhat[l] = xh
                inv_std[l] = istd
                if update_running:
                    rmean[l] = bn_momentum * rmean[l] + (1.0 - bn_momentum) * mean
                    rvar[l] = bn_momentum * rvar[l] + (1.0 - bn_momentum) * var
            else:
                u = h
            dense_in[l] = u
            z = nn.dense_forward(dense_in[l], Wh[l], bh[l])
            if j < n_relu:
                z_pre[l] = z
                h = nn.relu_forward(z)
                if use_dropout:
                    h = h * drop_masks[b_i * n_relu + j] * drop_scale
            else:
                h = z
        if use_residual:
            h = h + block_in[b_i]

    logits = nn.dense_forward(h, Wo, bo)
    loss, dlogits = nn.softmax_xent(logits, y)
    n_correct = int(np.sum(np.argmax(logits, axis=1) == y))

    dx, dWo, dbo = nn.dense_backward(h, Wo, dlogits)
    dWh = np.zeros_like(Wh)
    dbh = np.zeros_like(bh)
    dgamma = np.zeros_like(gamma)
    dbeta = np.zeros_like(beta)

    for b_i in range(n_blocks - 1, -1, -1):
        dh = dx
        for j in range(layers_per_block - 1, -1, -1):
            l = b_i * layers_per_block + j
            if j < n_relu:
                if use_dropout:
                    dh = dh * drop_masks[b_i * n_relu + j] * drop_scale
                dh = nn.relu_backward(z_pre[l], dh)
            du, dWh[l], dbh[l] = nn.dense_backward(dense_in[l], Wh[l], dh)
            if use_bn:
                dh, dgamma[l], dbeta[l] = nn.bn_backward(du, xhat[l], inv_std[l], gamma[l])
            else:
                dh = du
        dx = dh + dx if use_residual else dh

    _, dWi, dbi = nn.dense_backward(X, Wi, dx)
    return loss, n_correct, dWi, dbi, dWh, dbh, dgamma, dbeta, dWo, dbo


def adam_update(p: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray,
                t: int, lr: float, beta1: float, beta2: float, eps: float) -> None:
    """In-place bias-corrected Adam step on flat views."""
    nn.adam_update(p, g, m, v, t, lr, beta1, beta2, eps)
