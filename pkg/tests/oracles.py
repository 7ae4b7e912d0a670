"""Brute-force reference implementations shared across test modules."""

import numpy as np


def conv2d_oracle(x, k, b):
    """Direct six-nested-loop same-padded cross-correlation."""
    c_out, c_in, kk, _ = k.shape
    _, t, f = x.shape
    p = (kk - 1) // 2
    out = np.zeros((c_out, t, f), dtype=np.float64)
    for o in range(c_out):
        for c in range(c_in):
            for a in range(t):
                for bb in range(f):
                    acc = 0.0
                    for i in range(kk):
                        for j in range(kk):
                            ti, fj = a + i - p, bb + j - p
                            if 0 <= ti < t and 0 <= fj < f:
                                acc += x[c, ti, fj] * k[o, c, i, j]
                    out[o, a, bb] += acc
        out[o] += b[o]
    return out


def attention_oracle(q, k, v, att_scale):
    """Per-channel scaled dot-product attention, explicit loops at 64-bit."""
    c, t, f = q.shape
    out = np.zeros((c, t, f), dtype=np.float64)
    for ch in range(c):
        logits = np.zeros((t, t))
        for i in range(t):
            for j in range(t):
                logits[i, j] = float(np.dot(q[ch, i], k[ch, j])) * att_scale
        for i in range(t):
            row = logits[i] - logits[i].max()
            w = np.exp(row)
            w /= w.sum()
            for j in range(t):
                out[ch, i] += w[j] * v[ch, j]
    return out


def conv1x1_oracle(x, kernels, bias):
    """1x1 convolution is a per-position channel mix."""
    c_out = kernels.shape[0]
    out = np.einsum("oc,ctf->otf", kernels[:, :, 0, 0], x)
    return out + bias.reshape(c_out, 1, 1)
