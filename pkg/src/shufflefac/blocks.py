"""Frequency-aware (FA) bias block and the FASC separable module."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .complexity import CostEntry, depthwise_cost, fa_cost, free_cost, pointwise_cost
from .tensor import Tensor

FA_GATES = ("shared", "channel_mix")


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    s = np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-s, s, size=shape), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


@dataclass
class FABlock:
    """Learnable frequency encoding added to the input, scaled by a per-channel gate.

    ``shared`` gate: temporal mean -> one FC over frequency (weights shared by all
    channels) -> sigmoid.  ``channel_mix`` gate: global mean -> C x C FC -> sigmoid.
    """

    pos: Tensor
    att_weight: Tensor
    att_bias: Tensor
    gate: str = "shared"

    @classmethod
    def init(cls, channels: int, n_freq: int, rng: np.random.Generator, gate: str = "shared") -> "FABlock":
        if gate not in FA_GATES:
            raise ValueError(f"unknown FA gate mode {gate!r}; expected one of {FA_GATES}")
        pos = Tensor(rng.uniform(-0.1, 0.1, size=n_freq), requires_grad=True)
        if gate == "shared":
            return cls(pos, zeros(n_freq), Tensor(np.zeros(()), requires_grad=True), gate)
        return cls(pos, zeros((channels, channels)), zeros(channels), gate)

    @property
    def n_freq(self) -> int:
        return self.pos.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        return {"pos": self.pos, "att_weight": self.att_weight, "att_bias": self.att_bias}

    def cost(self, channels: int, name: str = "fa") -> CostEntry:
        return fa_cost(channels, self.n_freq, self.gate, name)


def fa_gates(x: Tensor, fa: FABlock) -> Tensor:
    """Per-channel gate in (0, 1): shape (C,) or (N, C)."""
    if fa.gate == "shared":
        profile = ops.mean(x, axis=-1)                       # (.., C, F)
        z = ops.add(ops.matmul(profile, fa.att_weight), fa.att_bias)
    else:
        pooled = ops.mean(x, axis=(-2, -1))                  # (.., C)
        z = ops.linear(pooled, fa.att_weight, fa.att_bias)
    return ops.sigmoid(z)


def fa_forward(x: Tensor, fa: FABlock) -> Tensor:
    """y[c, f, t] = x[c, f, t] + gate[c] * pos[f]; the added term does not depend on t."""
    if x.ndim not in (3, 4) or x.shape[-2] != fa.n_freq:
        raise ValueError(f"FA block expects {fa.n_freq} frequency bins, got input shape {x.shape}")
    if fa.gate == "channel_mix" and x.shape[-3] != fa.att_weight.shape[0]:
        raise ValueError(f"FA channel_mix gate built for {fa.att_weight.shape[0]} channels, got {x.shape}")
    return ops.add(x, fa_bias(x, fa))


def fa_bias(x: Tensor, fa: FABlock) -> Tensor:
    """The injected term gate[c] * pos[f], shaped (.., C, F, 1) so it broadcasts over time."""
    s = fa_gates(x, fa)
    bias = ops.mul(ops.reshape(s, s.shape + (1,)), fa.pos)  # (.., C, F)
    return ops.reshape(bias, bias.shape + (1,))


@dataclass
class FASCBlock:
    """FA -> pointwise group conv (C_in -> C_in/2) -> depthwise -> shuffle -> pointwise group conv."""

    fa: FABlock
    pw1_weight: Tensor
    pw1_bias: Tensor | None
    dw_weight: Tensor
    dw_bias: Tensor | None
    pw2_weight: Tensor
    pw2_bias: Tensor | None
    groups: int = 2
    shuffle_groups: int = 2

    @classmethod
    def init(cls, c_in: int, c_out: int, n_freq: int, rng: np.random.Generator, k_dw: int = 3,
             gate: str = "shared", bias: bool = True, groups: int = 2) -> "FASCBlock":
        if c_in % 2:
            raise ValueError(f"FASC input channels must be even, got {c_in}")
        mid = c_in // 2
        if mid % groups or c_out % groups:
            raise ValueError(f"FASC: groups={groups} must divide C_in/2={mid} and C_out={c_out}")
        if k_dw % 2 == 0:
            raise ValueError(f"depthwise kernel must be odd, got {k_dw}")
        fa = FABlock.init(c_in, n_freq, rng, gate)
        pw1 = uniform_init(rng, (mid, c_in // groups, 1, 1), c_in // groups)
        dw = uniform_init(rng, (mid, 1, k_dw, k_dw), k_dw * k_dw)
        pw2 = uniform_init(rng, (c_out, mid // groups, 1, 1), mid // groups)
        b = (lambda n: zeros(n)) if bias else (lambda n: None)
        return cls(fa, pw1, b(mid), dw, b(mid), pw2, b(c_out), groups, groups)

    @property
    def c_in(self) -> int:
        return self.pw1_weight.shape[1] * self.groups

    @property
    def c_mid(self) -> int:
        return self.pw1_weight.shape[0]

    @property
    def c_out(self) -> int:
        return self.pw2_weight.shape[0]

    @property
    def k_dw(self) -> int:
        return self.dw_weight.shape[-1]

    def parameters(self) -> dict[str, Tensor]:
        out = {f"fa.{k}": v for k, v in self.fa.parameters().items()}
        for key in ("pw1", "dw", "pw2"):
            out[f"{key}.weight"] = getattr(self, f"{key}_weight")
            bias = getattr(self, f"{key}_bias")
            if bias is not None:
                out[f"{key}.bias"] = bias
        return out

    def cost_entries(self, n_freq: int, n_time: int, prefix: str = "fasc") -> list[CostEntry]:
        has_bias = self.pw1_bias is not None
        return [
            self.fa.cost(self.c_in, f"{prefix}.fa"),
            pointwise_cost(self.c_in, self.c_mid, self.groups, n_freq, n_time, has_bias, f"{prefix}.pw1"),
            depthwise_cost(self.c_mid, self.k_dw, self.k_dw, n_freq, n_time, has_bias, f"{prefix}.dw"),
            free_cost("shuffle", f"{prefix}.shuffle"),
            pointwise_cost(self.c_mid, self.c_out, self.groups, n_freq, n_time, has_bias, f"{prefix}.pw2"),
        ]


def fasc_forward(x: Tensor, blk: FASCBlock, shuffle: bool = True) -> Tensor:
    """Run the module; spatial extents are preserved (pooling belongs to the stage).

    ``shuffle=False`` exists only to demonstrate that the shuffle matters.
    """
    c = x.shape[-3] if x.ndim in (3, 4) else None
    if c is None or c % 2:
        raise ValueError(f"FASC input must have an even channel count, got shape {x.shape}")
    if c != blk.c_in:
        raise ValueError(f"FASC block expects {blk.c_in} input channels, got {c}")
    h = fa_forward(x, blk.fa)
    h = ops.pointwise_group_conv(h, blk.pw1_weight, blk.pw1_bias, blk.groups)
    h = ops.depthwise_conv2d(h, blk.dw_weight, blk.dw_bias)
    if shuffle:
        h = ops.channel_shuffle(h, blk.shuffle_groups)
    return ops.pointwise_group_conv(h, blk.pw2_weight, blk.pw2_bias, blk.groups)


def fasc_cost(blk: FASCBlock, n_freq: int, n_time: int) -> tuple[int, int]:
    """(parameters, MACs) of one FASC module at the given input resolution."""
    entries = blk.cost_entries(n_freq, n_time)
    return sum(e.params for e in entries), sum(e.macs for e in entries)
