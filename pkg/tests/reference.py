"""Scalar-loop reference implementations used as test oracles.

Everything here is deliberately naive: explicit Python loops over padded
inputs, no vectorization, so it shares no code paths with the package ops.
``MulCounter.mul`` is used for every multiplication that feeds a running sum;
element-wise scalings (pool means, BN, the FA broadcast product) use plain ``*``.
"""
from __future__ import annotations

import math

import numpy as np


class MulCounter:
    def __init__(self):
        self.count = 0

    def mul(self, a: float, b: float) -> float:
        self.count += 1
        return a * b


def conv2d(x, w, b=None, groups=1, counter: MulCounter | None = None):
    """Stride-1 'same' convolution. x: (C_in, H, W); w: (C_out, C_in/g, kh, kw)."""
    counter = counter or MulCounter()
    c_in, h, wd = x.shape
    c_out, cpg, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    xp = [[[0.0] * (wd + 2 * pw) for _ in range(h + 2 * ph)] for _ in range(c_in)]
    for c in range(c_in):
        for i in range(h):
            for j in range(wd):
                xp[c][i + ph][j + pw] = float(x[c, i, j])
    out_per_group = c_out // groups
    y = np.zeros((c_out, h, wd))
    for o in range(c_out):
        g = o // out_per_group
        for i in range(h):
            for j in range(wd):
                acc = 0.0 if b is None else float(b[o])
                for ci in range(cpg):
                    plane = xp[g * cpg + ci]
                    for a in range(kh):
                        row = plane[i + a]
                        for e in range(kw):
                            acc += counter.mul(float(w[o, ci, a, e]), row[j + e])
                y[o, i, j] = acc
    return y


def linear(x, w, b=None, counter: MulCounter | None = None):
    counter = counter or MulCounter()
    d_out, d_in = w.shape
    y = np.zeros(d_out)
    for o in range(d_out):
        acc = 0.0 if b is None else float(b[o])
        for i in range(d_in):
            acc += counter.mul(float(w[o, i]), float(x[i]))
        y[o] = acc
    return y


def relu(x):
    return np.vectorize(lambda v: v if v > 0 else 0.0)(x)


def sigmoid(v: float) -> float:
    return 1.0 / (1.0 + math.exp(-v))


def shuffle(x, groups):
    c = x.shape[0]
    per = c // groups
    # output slot k takes input channel (k % groups) * per + k // groups
    return np.stack([x[(k % groups) * per + k // groups] for k in range(c)])


def avg_pool(x, ph, pw):
    c, h, w = x.shape
    y = np.zeros((c, h // ph, w // pw))
    for k in range(c):
        for i in range(h // ph):
            for j in range(w // pw):
                s = 0.0
                for a in range(ph):
                    for e in range(pw):
                        s += x[k, i * ph + a, j * pw + e]
                y[k, i, j] = s / (ph * pw)
    return y


def global_avg_pool(x):
    c, h, w = x.shape
    return np.array([sum(float(v) for v in x[k].ravel()) / (h * w) for k in range(c)])


def batch_norm_infer(x, gamma, beta, mean, var, eps=1e-5):
    y = np.empty_like(x)
    for c in range(x.shape[0]):
        y[c] = (x[c] - mean[c]) / math.sqrt(var[c] + eps) * gamma[c] + beta[c]
    return y


def fa(x, pos, w, b, counter: MulCounter | None = None):
    """Shared-gate frequency-aware block."""
    counter = counter or MulCounter()
    c, f, t = x.shape
    y = np.empty_like(x)
    for k in range(c):
        z = float(b)
        for q in range(f):
            m = sum(float(v) for v in x[k, q]) / t
            z += counter.mul(float(w[q]), m)
        s = sigmoid(z)
        for q in range(f):
            y[k, q] = x[k, q] + s * pos[q]
    return y


def model_forward(model, x, counter: MulCounter | None = None):
    """Inference-mode forward of a shared-gate model on one (1, F, T) input."""
    counter = counter or MulCounter()
    cfg = model.config
    p = {k: v.data for k, v in model.params.items()}
    bufs = model.buffers
    from shufflefac.model import POOL_PLAN, stage_names

    names = stage_names()

    def tail(h, idx):
        n = names[idx]
        args = (p[f"{n}.bn.gamma"], p[f"{n}.bn.beta"], bufs[f"{n}.bn.running_mean"], bufs[f"{n}.bn.running_var"])
        h = batch_norm_infer(relu(h), *args) if not cfg.bn_before_act else relu(batch_norm_infer(h, *args))
        return avg_pool(h, *POOL_PLAN[idx])

    h = fa(np.asarray(x, dtype=float), p["expansion.fa.pos"], p["expansion.fa.att_weight"],
           p["expansion.fa.att_bias"], counter)
    h = tail(conv2d(h, p["expansion.conv.weight"], p.get("expansion.conv.bias"), 1, counter), 0)
    for i in range(1, len(names)):
        n = names[i]
        h = fa(h, p[f"{n}.fa.pos"], p[f"{n}.fa.att_weight"], p[f"{n}.fa.att_bias"], counter)
        h = conv2d(h, p[f"{n}.pw1.weight"], p.get(f"{n}.pw1.bias"), 2, counter)
        h = conv2d(h, p[f"{n}.dw.weight"], p.get(f"{n}.dw.bias"), h.shape[0], counter)
        h = shuffle(h, 2)
        h = conv2d(h, p[f"{n}.pw2.weight"], p.get(f"{n}.pw2.bias"), 2, counter)
        h = tail(h, i)
    return linear(global_avg_pool(h), p["classifier.weight"], p.get("classifier.bias"), counter), counter
