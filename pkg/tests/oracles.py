"""Independent NumPy reference computations used to cross-check the torch code."""
from __future__ import annotations

import numpy as np


def linear_critic_value(w, b, real, fake, lam=0.0):
    """V for a linear critic D(h) = w.h + b; its gradient norm is ||w|| everywhere."""
    w = np.asarray(w, dtype=float)
    wass = (fake @ w + b).mean() - (real @ w + b).mean()
    return wass + lam * (np.linalg.norm(w) - 1.0) ** 2


def mlp_critic(params, h):
    W1, b1, W2, b2 = params
    return np.maximum(h @ W1.T + b1, 0.0) @ W2.T + b2


def fd_grad(params, h, eps=1e-6):
    """Central finite differences of a ReLU MLP critic, row by row."""
    g = np.zeros_like(h)
    for i in range(h.shape[0]):
        for j in range(h.shape[1]):
            up, dn = h[i].copy(), h[i].copy()
            up[j] += eps
            dn[j] -= eps
            g[i, j] = (mlp_critic(params, up[None])[0, 0] - mlp_critic(params, dn[None])[0, 0]) / (2 * eps)
    return g


def penalty_fd(params, real, fake, u, lam):
    mixed = u[:, None] * real + (1 - u[:, None]) * fake
    norms = np.linalg.norm(fd_grad(params, mixed), axis=1)
    return lam * np.mean((norms - 1.0) ** 2)


def cross_entropy(logits, labels):
    z = logits - logits.max(1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(1, keepdims=True))
    return -logp[np.arange(len(labels)), labels].mean()


def energy_sq(X, Y):
    d = lambda A, B: np.sqrt(((A[:, None, :] - B[None, :, :]) ** 2).sum(-1)).mean()
    return 2 * d(X, Y) - d(X, X) - d(Y, Y)
