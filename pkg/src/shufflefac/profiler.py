"""Inference latency profiling with per-operator category attribution and energy estimates."""
from __future__ import annotations

import json
import platform
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as _tensor
from .frontend import MelConfig, log_mel
from .model import Model
from .tensor import CATEGORIES, CORE, OTHER, TENSOR_MANIP, OpTimer, Tensor

DEFAULT_THRESHOLD = 0.15


@dataclass(frozen=True)
class EnergyParams:
    p_cpu_watts: float = 10.0
    utilization: float = 0.9

    def __post_init__(self):
        if self.p_cpu_watts <= 0:
            raise ValueError(f"P_cpu must be > 0, got {self.p_cpu_watts}")
        if not 0 < self.utilization <= 1:
            raise ValueError(f"utilization must be in (0, 1], got {self.utilization}")


def estimate_energy(t_inf_ms: float, params: EnergyParams = EnergyParams()) -> float:
    """Energy per inference in microwatt-hours: u * P_cpu * t[s] / 3600 * 1e6."""
    if t_inf_ms < 0:
        raise ValueError(f"inference time must be >= 0, got {t_inf_ms}")
    return params.utilization * params.p_cpu_watts * (t_inf_ms / 1000.0) / 3600.0 * 1e6


@dataclass
class OpStat:
    total_ms: float
    calls: int
    category: str


@dataclass
class ProfileReport:
    runs: int
    warmup: int
    latencies_ms: list[float]
    mean_ms: float
    std_ms: float
    min_ms: float
    max_ms: float
    category_ms: dict[str, float]
    category_fraction: dict[str, float]
    attributed_fraction: float
    per_op: dict[str, OpStat]
    energy_uwh: float
    p_cpu_watts: float
    utilization: float
    timer_overhead_ns: float
    tensor_fraction_threshold: float = DEFAULT_THRESHOLD
    macs_unreliable: bool = False
    environment: str = ""
    outputs: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("outputs")
        return d

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_dict(cls, d: dict) -> "ProfileReport":
        d = dict(d)
        d["per_op"] = {k: OpStat(**v) for k, v in d["per_op"].items()}
        return cls(**d)


def attribute(per_op: dict[str, OpStat] | ProfileReport, threshold: float = DEFAULT_THRESHOLD) -> dict:
    """Category fractions of attributed time and the tensor-overhead flag."""
    ops_ = per_op.per_op if isinstance(per_op, ProfileReport) else per_op
    totals = {c: 0.0 for c in CATEGORIES}
    for stat in ops_.values():
        totals[stat.category] += stat.total_ms
    attributed = sum(totals.values())
    fractions = {c: (totals[c] / attributed if attributed > 0 else 0.0) for c in CATEGORIES}
    return {
        "category_ms": totals,
        "fractions": fractions,
        "flagged": fractions[TENSOR_MANIP] >= threshold,
        "threshold": threshold,
    }


def _single_thread():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - optional
        import contextlib
        return contextlib.nullcontext()
    return threadpool_limits(limits=1)


def timer_overhead_ns(samples: int = 2000) -> float:
    """Mean cost of one empty span, measured with the same clock."""
    timer = OpTimer()
    _tensor.set_op_timer(timer)
    try:
        t0 = time.perf_counter_ns()
        for _ in range(samples):
            with _tensor.span("empty", OTHER):
                pass
        t1 = time.perf_counter_ns()
    finally:
        _tensor.set_op_timer(None)
    return (t1 - t0) / samples


def profile(model: Model, x: Tensor | np.ndarray | None = None, runs: int = 100, warmup: int = 10,
            energy: EnergyParams = EnergyParams(), threshold: float = DEFAULT_THRESHOLD,
            keep_outputs: bool = False, end_to_end: bool = False, seed: int = 0) -> ProfileReport:
    """Time ``runs`` single-clip forwards after ``warmup`` discarded ones.

    With ``end_to_end`` the input is a raw 3-s waveform and log-Mel extraction
    is inside the timed region (attributed to a single ``log_mel`` op).
    """
    if runs < 1 or warmup < 0:
        raise ValueError(f"need runs >= 1 and warmup >= 0, got runs={runs}, warmup={warmup}")
    if model.training:
        raise ValueError("profile requires an inference-mode model (call model.eval())")
    rng = np.random.default_rng(seed)
    if end_to_end:
        mel = MelConfig()
        if x is None:
            x = 0.1 * rng.standard_normal(mel.clip_samples)
        wave = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)

        def run_once():
            with _tensor.span("log_mel", CORE):
                feats = log_mel(wave, mel)
            return model.forward(feats, mode="infer")
    else:
        if x is None:
            x = rng.standard_normal(model.config.input_shape)
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float64))

        def run_once():
            return model.forward(x, mode="infer")
    overhead = timer_overhead_ns()
    timer = OpTimer()
    latencies = []
    outputs = []
    clock = time.perf_counter_ns
    with _single_thread():
        for _ in range(warmup):
            run_once()
        _tensor.set_op_timer(timer)
        try:
            for _ in range(runs):
                t0 = clock()
                out = run_once()
                t1 = clock()
                latencies.append((t1 - t0) / 1e6)
                if keep_outputs:
                    outputs.append(out.data.copy())
        finally:
            _tensor.set_op_timer(None)
    lat = np.asarray(latencies)
    per_op = {name: OpStat(timer.totals[name] / 1e6 / runs, timer.calls[name] // runs, timer.categories[name])
              for name in sorted(timer.totals)}
    summary = attribute(per_op, threshold)
    mean = float(lat.mean())
    attributed = sum(summary["category_ms"].values())
    return ProfileReport(
        runs=runs, warmup=warmup, latencies_ms=[float(v) for v in lat],
        mean_ms=mean, std_ms=float(lat.std()), min_ms=float(lat.min()), max_ms=float(lat.max()),
        category_ms=summary["category_ms"], category_fraction=summary["fractions"],
        attributed_fraction=attributed / mean if mean > 0 else 0.0,
        per_op=per_op, energy_uwh=estimate_energy(mean, energy), p_cpu_watts=energy.p_cpu_watts,
        utilization=energy.utilization, timer_overhead_ns=overhead,
        tensor_fraction_threshold=threshold, macs_unreliable=summary["flagged"],
        environment=f"{platform.platform()} | python {platform.python_version()} | numpy {np.__version__} | "
                    f"gamma={model.config.gamma} | single-threaded BLAS"
                    f"{' | end-to-end (frontend timed)' if end_to_end else ''}",
        outputs=outputs,
    )


def format_report(r: ProfileReport) -> str:
    lines = [
        f"runs {r.runs} (warmup {r.warmup})",
        f"latency ms: mean {r.mean_ms:.3f}  std {r.std_ms:.3f}  min {r.min_ms:.3f}  max {r.max_ms:.3f}",
        f"attributed {r.attributed_fraction * 100:.1f}% of wall time "
        f"(timer overhead {r.timer_overhead_ns:.0f} ns/span, not subtracted)",
    ]
    for c in CATEGORIES:
        lines.append(f"  {c:<20} {r.category_ms[c]:8.3f} ms  {r.category_fraction[c] * 100:5.1f}%")
    lines.append(f"energy {r.energy_uwh:.3f} uWh at P_cpu={r.p_cpu_watts} W, utilization {r.utilization}")
    if r.macs_unreliable:
        lines.append(f"tensor-manipulation share >= {r.tensor_fraction_threshold:.0%}: "
                     "MAC count is a poor latency proxy here")
    lines.append("per-op:")
    for name, s in sorted(r.per_op.items(), key=lambda kv: -kv[1].total_ms):
        lines.append(f"  {name:<22} {s.total_ms:8.3f} ms  x{s.calls:<4d} {s.category}")
    return "\n".join(lines)


__all__ = ["EnergyParams", "ProfileReport", "OpStat", "attribute", "estimate_energy", "profile",
           "format_report", "CORE", "TENSOR_MANIP", "OTHER"]
