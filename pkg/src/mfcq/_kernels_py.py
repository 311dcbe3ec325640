"""NumPy reference implementation of the simulation kernels.

Signatures match the compiled ``_kernels`` module exactly.
"""

import numpy as np


def lq_euler_step(X, A, dW, dB, extra, drift_c, B, C, sig_c, D, F, sigo_c, Do, Fo, M, R, O, reward_c, dt, reward):
    """One Euler-Maruyama step of the affine particle SDE; accumulates the running reward in place.

    drift = drift_c + B x + C a, sigma = sig_c + D x + F a, sigma_o = sigo_c + Do x + Fo a,
    reward += (x'Mx + a'Ra + x'O + reward_c) dt. ``extra`` is an additive (N, d) increment.
    """
    drift = drift_c + X @ B.T + A @ C.T
    sig = sig_c + X @ D.T + A @ F.T
    sigo = sigo_c + X @ Do.T + A @ Fo.T
    reward += (np.einsum("ni,ij,nj->n", X, M, X) + np.einsum("ni,ij,nj->n", A, R, A) + X @ O + reward_c) * dt
    out = X + drift * dt + sig * dW[:, None] + sigo * dB
    if extra is not None:
        out += extra
    return out


def gaussian_actions(X, Z, K, shift, L):
    """a = K x + shift + L z for every particle."""
    return X @ K.T + shift + Z @ L.T
