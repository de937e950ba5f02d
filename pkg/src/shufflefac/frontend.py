"""WAV ingestion, resampling, clip segmentation and log-Mel features."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .tensor import FormatError, Tensor

SAMPLE_RATE = 16000


@dataclass(frozen=True)
class MelConfig:
    sample_rate_hz: int = SAMPLE_RATE
    clip_seconds: float = 3.0
    window_ms: float = 256.0
    hop_ms: float = 128.0
    n_mels: int = 128
    f_min_hz: float = 0.0
    f_max_hz: float = 8000.0
    log_floor: float = 1e-10
    mel_scale: str = "htk"
    window: str = "hann-periodic"

    def __post_init__(self):
        if self.n_fft != self.win_length:
            raise ValueError("window length must equal n_fft")
        if not 0 < self.hop_length <= self.win_length:
            raise ValueError(f"hop {self.hop_length} must be in (0, {self.win_length}]")
        if not 0 <= self.f_min_hz < self.f_max_hz <= self.sample_rate_hz / 2:
            raise ValueError(f"need 0 <= f_min < f_max <= {self.sample_rate_hz / 2}, "
                             f"got {self.f_min_hz}, {self.f_max_hz}")

    @property
    def win_length(self) -> int:
        return int(round(self.sample_rate_hz * self.window_ms / 1000))

    @property
    def n_fft(self) -> int:
        return self.win_length

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate_hz * self.hop_ms / 1000))

    @property
    def clip_samples(self) -> int:
        return int(round(self.sample_rate_hz * self.clip_seconds))

    @property
    def n_frames(self) -> int:
        return 1 + self.clip_samples // self.hop_length


@dataclass
class Clip:
    samples: np.ndarray
    recording_id: str
    index: int


# ------------------------------------------------------------------------ WAV

_PCM = 1
_FLOAT = 3
_EXTENSIBLE = 0xFFFE


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Read PCM16 or float32 WAV, downmix by channel mean, return (samples, rate)."""
    buf = Path(path).read_bytes()
    if len(buf) < 12 or buf[:4] != b"RIFF" or buf[8:12] != b"WAVE":
        raise FormatError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(buf):
        cid, size = buf[pos:pos + 4], struct.unpack_from("<I", buf, pos + 4)[0]
        body = buf[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise FormatError(f"{path}: truncated fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", body)
            if fmt[0] == _EXTENSIBLE and len(body) >= 26:
                fmt = (struct.unpack_from("<H", body, 24)[0],) + fmt[1:]
        elif cid == b"data":
            if len(body) < size:
                raise FormatError(f"{path}: truncated data chunk ({len(body)} of {size} bytes)")
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise FormatError(f"{path}: missing fmt chunk")
    if data is None:
        raise FormatError(f"{path}: missing data chunk")
    tag, channels, rate, _, block_align, bits = fmt
    if tag == _PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif tag == _FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise FormatError(f"{path}: unsupported encoding (format tag {tag}, {bits} bits); "
                          "expected PCM 16-bit or IEEE float 32-bit")
    if channels < 1:
        raise FormatError(f"{path}: channel count {channels}")
    frame = channels * dtype.itemsize
    usable = len(data) - len(data) % frame
    samples = np.frombuffer(data[:usable], dtype=dtype).astype(np.float64) * scale
    samples = samples.reshape(-1, channels).mean(axis=1)
    return samples, int(rate)


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE,
              encoding: str = "pcm16") -> None:
    """Write mono (1-D) or multichannel (frames x channels) audio."""
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    channels = arr.shape[1]
    if encoding == "pcm16":
        payload = np.clip(np.round(arr * 32768.0), -32768, 32767).astype("<i2").tobytes()
        tag, bits = _PCM, 16
    elif encoding == "float32":
        payload = arr.astype("<f4").tobytes()
        tag, bits = _FLOAT, 32
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    block = channels * bits // 8
    fmt = struct.pack("<HHIIHH", tag, channels, sample_rate, sample_rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


# ---------------------------------------------------------------- resampling

def resample_to_16k(samples: np.ndarray, src_rate: int) -> np.ndarray:
    """Linear-interpolation resampling to 16 kHz (no anti-alias filter)."""
    samples = np.asarray(samples, dtype=np.float64)
    if src_rate < 8000:
        raise ValueError(f"source rate {src_rate} Hz below supported minimum 8000 Hz")
    if src_rate == SAMPLE_RATE or samples.size == 0:
        return samples.copy()
    n_out = (samples.size - 1) * SAMPLE_RATE // src_rate + 1
    pos = np.arange(n_out) * (src_rate / SAMPLE_RATE)
    return np.interp(pos, np.arange(samples.size), samples)


def segment(samples: np.ndarray, recording_id: str, cfg: MelConfig = MelConfig()) -> list[Clip]:
    """Non-overlapping consecutive clips; a trailing partial clip is dropped."""
    n = cfg.clip_samples
    return [Clip(np.asarray(samples[k * n:(k + 1) * n], dtype=np.float64), recording_id, k)
            for k in range(len(samples) // n)]


# ------------------------------------------------------------------- features

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: MelConfig = MelConfig()) -> np.ndarray:
    pts = np.linspace(hz_to_mel(cfg.f_min_hz), hz_to_mel(cfg.f_max_hz), cfg.n_mels + 2)
    return mel_to_hz(pts[1:-1])


def mel_filterbank(cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Triangular HTK-Mel filters, shape (n_mels, n_fft // 2 + 1), peak weight 1."""
    return _filterbank(cfg).copy()


@lru_cache(maxsize=8)
def _filterbank(cfg: MelConfig) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min_hz), hz_to_mel(cfg.f_max_hz), cfg.n_mels + 2))
    freqs = np.arange(cfg.n_fft // 2 + 1) * cfg.sample_rate_hz / cfg.n_fft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(fb.max(axis=1) <= 0)
    if empty.size:
        raise ValueError(f"{cfg.n_mels} Mel bands too many for n_fft={cfg.n_fft}: "
                         f"filters {empty.tolist()} cover no FFT bin")
    fb.setflags(write=False)
    return fb


@lru_cache(maxsize=8)
def _window(n: int) -> np.ndarray:
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
    w.setflags(write=False)
    return w


def stft_magnitude(samples: np.ndarray, cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Centered (reflect-padded) Hann STFT magnitude, shape (bins, frames)."""
    half = cfg.n_fft // 2
    padded = np.pad(np.asarray(samples, dtype=np.float64), half, mode="reflect")
    n_frames = 1 + len(samples) // cfg.hop_length
    idx = np.arange(cfg.n_fft)[None, :] + cfg.hop_length * np.arange(n_frames)[:, None]
    frames = padded[idx] * _window(cfg.n_fft)[None, :]
    return np.abs(np.fft.rfft(frames, axis=1)).T


def log_mel(clip: Clip | np.ndarray, cfg: MelConfig = MelConfig()) -> Tensor:
    """Log-Mel magnitude features of one clip as a (1, n_mels, frames) tensor."""
    samples = clip.samples if isinstance(clip, Clip) else np.asarray(clip, dtype=np.float64)
    if samples.ndim != 1 or samples.size != cfg.clip_samples:
        raise ValueError(f"log_mel expects {cfg.clip_samples} mono samples, got shape {samples.shape}")
    mel = _filterbank(cfg) @ stft_magnitude(samples, cfg)
    return Tensor(np.log(mel + cfg.log_floor)[None])


def wav_to_features(path: str | Path, recording_id: str | None = None,
                    cfg: MelConfig = MelConfig()) -> list[Tensor]:
    samples, rate = read_wav(path)
    samples = resample_to_16k(samples, rate)
    rid = recording_id if recording_id is not None else Path(path).stem
    return [log_mel(c, cfg) for c in segment(samples, rid, cfg)]
