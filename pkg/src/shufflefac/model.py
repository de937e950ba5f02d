"""ShuffleFAC network: construction, forward pass, SFAC files and summaries."""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .blocks import FA_GATES, FABlock, FASCBlock, fa_forward, fasc_forward, uniform_init, zeros
from .complexity import (CostEntry, ComplexityReport, bn_cost, free_cost, linear_cost, model_cost,
                         standard_conv_cost)
from .ops import ConvSpec
from .tensor import FormatError, Tensor

N_FASC = 6
# (freq, time) pooling after the expansion stage and each FASC stage; printed
# in the architecture table as AvgPool(2x2) twice, then AvgPool(1x2) which
# halves frequency only.
POOL_PLAN = ((2, 2), (2, 2), (2, 1), (2, 1), (2, 1), (2, 1), (2, 1))
CHANNEL_MULT = (1, 2, 4, 8, 8, 8, 8)


@dataclass(frozen=True)
class ShuffleFACConfig:
    gamma: int = 16
    k_first: int = 3
    k_dw: int = 3
    fa_gate: str = "shared"
    n_classes: int = 4
    input_shape: tuple[int, int, int] = (1, 128, 24)
    bias: bool = True
    bn_before_act: bool = False

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if self.gamma < 1 or self.gamma % 4:
            raise ValueError(
                f"gamma={self.gamma} invalid: every FASC compresses C_in to C_in/2 and splits it "
                "into 2 groups, so gamma must be a positive multiple of 4")
        if self.k_first % 2 == 0 or self.k_dw % 2 == 0:
            raise ValueError(f"kernel sizes must be odd, got k_first={self.k_first}, k_dw={self.k_dw}")
        if self.fa_gate not in FA_GATES:
            raise ValueError(f"fa_gate must be one of {FA_GATES}, got {self.fa_gate!r}")
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        c, h, w = self.input_shape
        ph = int(np.prod([p[0] for p in POOL_PLAN]))
        pw = int(np.prod([p[1] for p in POOL_PLAN]))
        if c != 1 or h % ph or w % pw:
            raise ValueError(f"input shape {self.input_shape} incompatible with the pooling plan "
                             f"(needs 1 x k*{ph} x k*{pw})")

    @property
    def channels(self) -> list[int]:
        return [m * self.gamma for m in CHANNEL_MULT]

    def stage_shapes(self) -> list[tuple[int, int, int]]:
        """Output shape (C, F, T) of the expansion stage and each FASC stage."""
        _, h, w = self.input_shape
        shapes = []
        for c, (ph, pw) in zip(self.channels, POOL_PLAN):
            h, w = h // ph, w // pw
            shapes.append((c, h, w))
        return shapes

    def stage_input_shapes(self) -> list[tuple[int, int, int]]:
        return [self.input_shape] + self.stage_shapes()[:-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ShuffleFACConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown config fields {sorted(unknown)}")
        return cls(**known)

    def layer_costs(self) -> list[CostEntry]:
        return build(self).layer_costs()


def stage_names(n: int = N_FASC) -> list[str]:
    return ["expansion"] + [f"fasc{i}" for i in range(1, n + 1)]


_STAGE_NAMES = tuple(stage_names())


@dataclass
class Model:
    config: ShuffleFACConfig
    expansion_fa: FABlock
    conv_weight: Tensor
    conv_bias: Tensor | None
    fasc: list[FASCBlock]
    bn: list[tuple[Tensor, Tensor]]
    classifier_weight: Tensor
    classifier_bias: Tensor | None
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    training: bool = False

    # ---------------------------------------------------------------- store
    @property
    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for k, v in self.expansion_fa.parameters().items():
            out[f"expansion.fa.{k}"] = v
        out["expansion.conv.weight"] = self.conv_weight
        if self.conv_bias is not None:
            out["expansion.conv.bias"] = self.conv_bias
        out["expansion.bn.gamma"], out["expansion.bn.beta"] = self.bn[0]
        for i, blk in enumerate(self.fasc, start=1):
            for k, v in blk.parameters().items():
                out[f"fasc{i}.{k}"] = v
            out[f"fasc{i}.bn.gamma"], out[f"fasc{i}.bn.beta"] = self.bn[i]
        out["classifier.weight"] = self.classifier_weight
        if self.classifier_bias is not None:
            out["classifier.bias"] = self.classifier_bias
        return out

    def n_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    # --------------------------------------------------------------- forward
    def _stage_tail(self, h: Tensor, idx: int, train: bool) -> Tensor:
        name = _STAGE_NAMES[idx]
        gamma, beta = self.bn[idx]
        rm, rv = self.buffers[name + ".bn.running_mean"], self.buffers[name + ".bn.running_var"]
        if self.config.bn_before_act:
            h = ops.relu(ops.batch_norm(h, gamma, beta, rm, rv, train))
        else:
            h = ops.batch_norm(ops.relu(h), gamma, beta, rm, rv, train)
        return ops.avg_pool2d(h, *POOL_PLAN[idx])

    def _check_input(self, x: Tensor) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float64))
        if x.shape[-3:] != self.config.input_shape or x.ndim not in (3, 4):
            raise ValueError(f"model input must be {self.config.input_shape} or "
                             f"(N, *{self.config.input_shape}), got {x.shape}")
        return x

    def stage_outputs(self, x: Tensor, mode: str | None = None) -> list[Tensor]:
        """Outputs of every stage plus the logits, in order."""
        x = self._check_input(x)
        train = self._is_train(mode)
        outs = []
        h = fa_forward(x, self.expansion_fa)
        h = ops.conv2d(h, self.conv_weight, self.conv_bias)
        h = self._stage_tail(h, 0, train)
        outs.append(h)
        for i, blk in enumerate(self.fasc, start=1):
            h = self._stage_tail(fasc_forward(h, blk), i, train)
            outs.append(h)
        outs.append(ops.linear(ops.global_avg_pool(h), self.classifier_weight, self.classifier_bias))
        return outs

    def _is_train(self, mode: str | None) -> bool:
        if mode is None:
            return self.training
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        return mode == "train"

    def forward(self, x: Tensor, mode: str | None = None) -> Tensor:
        """Logits, shape (n_classes,) or (N, n_classes); no softmax."""
        return self.stage_outputs(x, mode)[-1]

    __call__ = forward

    # ---------------------------------------------------------------- costs
    def layer_costs(self) -> list[CostEntry]:
        cfg = self.config
        names = stage_names()
        entries: list[CostEntry] = []
        for idx, ((c_in, f, t), (c_out, _, _)) in enumerate(zip(cfg.stage_input_shapes(), cfg.stage_shapes())):
            name = names[idx]
            if idx == 0:
                entries.append(self.expansion_fa.cost(c_in, f"{name}.fa"))
                spec = ConvSpec(c_in, c_out, cfg.k_first, cfg.k_first, 1, self.conv_bias is not None)
                entries.append(standard_conv_cost(spec, f, t, f"{name}.conv"))
            else:
                entries.extend(self.fasc[idx - 1].cost_entries(f, t, name))
            tail = [free_cost("act", f"{name}.relu"), bn_cost(c_out, f"{name}.bn")]
            entries.extend(tail[::-1] if cfg.bn_before_act else tail)
            entries.append(free_cost("pool", f"{name}.pool"))
        c_last = cfg.channels[-1]
        entries.append(free_cost("pool", "classifier.gap"))
        entries.append(linear_cost(c_last, cfg.n_classes, self.classifier_bias is not None, "classifier.linear"))
        return entries


def build(config: ShuffleFACConfig | None = None, seed: int = 0) -> Model:
    """Construct a freshly initialized network (seeded, deterministic)."""
    cfg = config or ShuffleFACConfig()
    rng = np.random.default_rng(seed)
    ch = cfg.channels
    in_shapes = cfg.stage_input_shapes()
    c0, f0, _ = cfg.input_shape
    fa = FABlock.init(c0, f0, rng, cfg.fa_gate)
    k = cfg.k_first
    conv_w = uniform_init(rng, (ch[0], c0, k, k), c0 * k * k)
    conv_b = zeros(ch[0]) if cfg.bias else None
    blocks = []
    for i in range(1, N_FASC + 1):
        c_in, f, _ = in_shapes[i]
        blocks.append(FASCBlock.init(c_in, ch[i], f, rng, cfg.k_dw, cfg.fa_gate, cfg.bias))
    bn = [(Tensor(np.ones(c), requires_grad=True), zeros(c)) for c in ch]
    cls_w = uniform_init(rng, (cfg.n_classes, ch[-1]), ch[-1])
    cls_b = zeros(cfg.n_classes) if cfg.bias else None
    buffers = {}
    for name, c in zip(stage_names(), ch):
        buffers[f"{name}.bn.running_mean"] = np.zeros(c)
        buffers[f"{name}.bn.running_var"] = np.ones(c)
    return Model(cfg, fa, conv_w, conv_b, blocks, bn, cls_w, cls_b, buffers)


# ------------------------------------------------------------------ SFAC file

MODEL_MAGIC = b"SFAC"
MODEL_VERSION = 1
_TAG_TO_DTYPE = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def _record(name: str, arr: np.ndarray) -> bytes:
    tag = 1 if arr.dtype == np.float32 else 2
    raw = name.encode("utf-8")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<BI", tag, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_TAG_TO_DTYPE[tag]).tobytes()


def model_to_bytes(model: Model) -> bytes:
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    body = struct.pack("<I", MODEL_VERSION) + struct.pack("<I", len(cfg)) + cfg
    for name, t in model.params.items():
        body += _record(name, t.data)
    for name, arr in model.buffers.items():
        body += _record(name, arr)
    return MODEL_MAGIC + body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def model_from_bytes(buf: bytes, source: str = "<bytes>") -> Model:
    if buf[:4] != MODEL_MAGIC:
        raise FormatError(f"{source}: bad magic {buf[:4]!r}, expected {MODEL_MAGIC!r}")
    if len(buf) < 16:
        raise FormatError(f"{source}: truncated model file ({len(buf)} bytes)")
    body, (crc,) = buf[4:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise FormatError(f"{source}: CRC mismatch (file truncated or corrupted)")
    (version,) = struct.unpack_from("<I", body, 0)
    if version != MODEL_VERSION:
        raise FormatError(f"{source}: unsupported model version {version}")
    (clen,) = struct.unpack_from("<I", body, 4)
    try:
        cfg = ShuffleFACConfig.from_dict(json.loads(body[8:8 + clen].decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"{source}: invalid config: {exc}") from exc
    model = build(cfg)
    params, buffers = model.params, model.buffers
    seen = set()
    pos = 8 + clen
    try:
        while pos < len(body):
            (nlen,) = struct.unpack_from("<I", body, pos)
            name = body[pos + 4:pos + 4 + nlen].decode("utf-8")
            pos += 4 + nlen
            tag, rank = struct.unpack_from("<BI", body, pos)
            pos += 5
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            dtype = _TAG_TO_DTYPE.get(tag)
            if dtype is None:
                raise FormatError(f"{source}: unknown dtype tag {tag} for {name!r}")
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(body):
                raise FormatError(f"{source}: truncated payload for {name!r}")
            arr = np.frombuffer(body, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos)
            arr = arr.reshape(dims).astype(dtype.newbyteorder("="))
            pos += nbytes
            if name in params:
                target = params[name].data
            elif name in buffers:
                target = buffers[name]
            else:
                raise FormatError(f"{source}: unknown parameter name {name!r}")
            if target.shape != arr.shape:
                raise FormatError(f"{source}: {name!r} has shape {arr.shape}, expected {target.shape}")
            if name in params:
                params[name].data = arr
            else:
                buffers[name] = arr.copy()
            seen.add(name)
    except struct.error as exc:
        raise FormatError(f"{source}: truncated record: {exc}") from exc
    missing = (set(params) | set(buffers)) - seen
    if missing:
        raise FormatError(f"{source}: missing parameters {sorted(missing)}")
    return model


def save(model: Model, path: str | Path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load(path: str | Path) -> Model:
    return model_from_bytes(Path(path).read_bytes(), str(path))


# -------------------------------------------------------------------- summary

@dataclass
class StageRow:
    stage: str
    ops: str
    output_shape: tuple[int, ...]
    params: int
    params_excl: int
    macs: int


def summary(model: Model | ShuffleFACConfig) -> tuple[list[StageRow], ComplexityReport]:
    """Per-stage table (stage, ops, output shape, params, MACs) and the full report."""
    m = build(model) if isinstance(model, ShuffleFACConfig) else model
    cfg = m.config
    report = model_cost(m)
    tail = "BN, ReLU" if cfg.bn_before_act else "ReLU, BN"
    rows = []
    names = stage_names()
    for idx, (name, shape, pool) in enumerate(zip(names, cfg.stage_shapes(), POOL_PLAN)):
        # table notation lists pooling as (time x freq)
        pool_txt = f"AvgPool ({pool[1]}x{pool[0]})"
        head = f"FA, Conv2D ({shape[0]})" if idx == 0 else f"FASC ({shape[0]})"
        entries = report.by_prefix(name)
        rows.append(StageRow(name, f"{head}, {tail}, {pool_txt}", shape,
                             sum(e.params for e in entries),
                             sum(e.params - e.bias_params for e in entries),
                             sum(e.macs for e in entries)))
    entries = report.by_prefix("classifier")
    rows.append(StageRow("classifier", f"Global AvgPool, Linear ({cfg.channels[-1]}, {cfg.n_classes})",
                         (cfg.n_classes,), sum(e.params for e in entries),
                         sum(e.params - e.bias_params for e in entries), sum(e.macs for e in entries)))
    return rows, report


def format_summary(rows: list[StageRow], report: ComplexityReport) -> str:
    table = [("stage", "configuration", "output", "params", "MACs")]
    for r in rows:
        table.append((r.stage, r.ops, " x ".join(map(str, r.output_shape)), f"{r.params:,}", f"{r.macs:,}"))
    table.append(("total", "", "", f"{report.total_params:,}", f"{report.total_macs:,}"))
    table.append(("total excl. bias/BN", "", "", f"{report.total_params_excl:,}", ""))
    widths = [max(len(r[i]) for r in table) for i in range(5)]
    lines = []
    for k, r in enumerate(table):
        lines.append("  ".join(c.ljust(widths[i]) if i < 3 else c.rjust(widths[i]) for i, c in enumerate(r)))
        if k == 0 or k == len(table) - 3:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)
