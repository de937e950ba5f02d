"""Closed-form parameter and MAC counts.

Counting convention: one MAC is one multiplication feeding an accumulation.
Bias additions, BN arithmetic, activations, pooling means and permutations
cost zero MACs.  Linear layers count ``D_in * D_out`` (not doubled).
Parameter totals are reported gross and with conv/linear biases and BN
affine parameters excluded.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable

from .ops import ConvSpec

KINDS = ("standard", "separable", "group-pointwise", "depthwise", "micro-factorized",
         "linear", "fa", "shuffle", "pool", "bn", "act")

CONVENTION_NOTES = (
    "MAC = one multiplication in a multiply-accumulate inner loop; biases, BN, "
    "activations, pooling and permutations are 0 MACs",
    "linear MACs = D_in * D_out",
    "FA (shared gate): params = 2F + 1, MACs = C * F for the gate FC; the broadcast "
    "bias add (C * F * T) and the gate-encoding product are element-wise, not MACs",
    "params_excl drops conv/linear biases and BN gamma/beta; FA parameters are always counted",
)


@dataclass
class CostEntry:
    name: str
    kind: str
    params: int
    macs: int
    bias_params: int = 0
    notes: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.params < 0 or self.macs < 0 or not 0 <= self.bias_params <= self.params:
            raise ValueError(f"invalid counts for {self.name}: {self.params}, {self.macs}, {self.bias_params}")


def standard_conv_cost(spec: ConvSpec, h: int, w: int, name: str = "conv", kind: str = "standard") -> CostEntry:
    weights = spec.k_h * spec.k_w * spec.c_in * spec.c_out // spec.groups
    bias = spec.c_out if spec.has_bias else 0
    return CostEntry(name, kind, weights + bias, h * w * weights, bias)


def depthwise_cost(channels: int, k_h: int, k_w: int, h: int, w: int, bias: bool = True,
                   name: str = "dw") -> CostEntry:
    return standard_conv_cost(ConvSpec(channels, channels, k_h, k_w, channels, bias), h, w, name, "depthwise")


def pointwise_cost(c_in: int, c_out: int, groups: int, h: int, w: int, bias: bool = True,
                   name: str = "pw") -> CostEntry:
    return standard_conv_cost(ConvSpec(c_in, c_out, 1, 1, groups, bias), h, w, name, "group-pointwise")


def separable_conv_cost(c_in: int, c_out: int, k_h: int, k_w: int, h: int, w: int,
                        name: str = "separable") -> CostEntry:
    """Depthwise k_h x k_w followed by a dense 1x1, without biases."""
    params = c_in * (k_h * k_w + c_out)
    macs = h * w * (k_h * k_w * c_in + c_in * c_out)
    return CostEntry(name, "separable", params, macs)


def micro_factorized_cost(c_in: int, c_int: int, c_out: int, k_h: int, k_w: int, h: int, w: int,
                          name: str = "micro") -> CostEntry:
    """Spatial kernel factored as p q^T, channel mixing through a C_int subspace."""
    if c_int < 1:
        raise ValueError(f"micro-factorized intermediate width must be >= 1, got {c_int}")
    params = c_in * (k_h + k_w) + c_int * (c_in + c_out)
    macs = (h * k_h + w * k_w) * c_in + h * w * c_int * (c_in + c_out)
    return CostEntry(name, "micro-factorized", params, macs)


def linear_cost(d_in: int, d_out: int, bias: bool = True, name: str = "linear") -> CostEntry:
    b = d_out if bias else 0
    return CostEntry(name, "linear", d_in * d_out + b, d_in * d_out, b)


def fa_cost(channels: int, n_freq: int, gate: str = "shared", name: str = "fa") -> CostEntry:
    if gate == "shared":
        return CostEntry(name, "fa", 2 * n_freq + 1, channels * n_freq, 0,
                         "gate FC shared across channels")
    if gate == "channel_mix":
        return CostEntry(name, "fa", n_freq + channels * channels + channels, channels * channels, 0,
                         "global pooling + CxC gate FC")
    raise ValueError(f"unknown FA gate mode {gate!r}")


def bn_cost(channels: int, name: str = "bn") -> CostEntry:
    return CostEntry(name, "bn", 2 * channels, 0, 2 * channels)


def free_cost(kind: str, name: str) -> CostEntry:
    if kind not in ("shuffle", "pool", "act"):
        raise ValueError(f"{kind!r} is not a zero-cost layer kind")
    return CostEntry(name, kind, 0, 0)


@dataclass
class ComplexityReport:
    entries: list[CostEntry]
    config: dict = field(default_factory=dict)
    notes: tuple[str, ...] = CONVENTION_NOTES

    @property
    def total_params(self) -> int:
        return sum(e.params for e in self.entries)

    @property
    def total_params_excl(self) -> int:
        return sum(e.params - e.bias_params for e in self.entries)

    @property
    def total_macs(self) -> int:
        return sum(e.macs for e in self.entries)

    def by_prefix(self, prefix: str) -> list[CostEntry]:
        return [e for e in self.entries if e.name.split(".")[0] == prefix]

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "layers": [asdict(e) for e in self.entries],
            "totals": {
                "params_gross": self.total_params,
                "params_excl_bias_bn": self.total_params_excl,
                "macs": self.total_macs,
            },
            "convention": list(self.notes),
        }

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    def to_table(self) -> str:
        rows = [("layer", "kind", "params", "macs")]
        rows += [(e.name, e.kind, f"{e.params:,}", f"{e.macs:,}") for e in self.entries]
        rows.append(("TOTAL (gross)", "", f"{self.total_params:,}", f"{self.total_macs:,}"))
        rows.append(("TOTAL (excl. bias/BN)", "", f"{self.total_params_excl:,}", f"{self.total_macs:,}"))
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        lines = []
        for k, r in enumerate(rows):
            lines.append("  ".join(c.ljust(widths[i]) if i < 2 else c.rjust(widths[i]) for i, c in enumerate(r)))
            if k == 0 or k == len(rows) - 3:
                lines.append("  ".join("-" * wd for wd in widths))
        return "\n".join(lines)


def model_cost(model) -> ComplexityReport:
    """Per-layer accounting for a built model or a bare architecture config."""
    entries: Iterable[CostEntry] = model.layer_costs()
    cfg = getattr(model, "config", model)
    return ComplexityReport(list(entries), cfg.to_dict() if hasattr(cfg, "to_dict") else dict(cfg))
