"""Raw waveform data model, synthetic PPG/ECG generation, and corpus files.

The on-disk corpus format is a self-describing binary container
(documented in docs/formats.md): a fixed header followed by one block per
record with little-endian 32-bit float samples and a bit-packed missing
mask.  Round trips are bit-exact, which the tests rely on.
"""

import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ContractError, FormatError

MAGIC = b"WVC1"
FORMAT_VERSION = 1


class Channel(Enum):
    PPG = 0
    ECG_LEAD_II = 1


class NoiseKind(Enum):
    NONE = "none"
    GAUSSIAN = "gaussian"
    BASELINE_WANDER = "baseline_wander"
    MOTION_BURST = "motion_burst"
    DROPOUT = "dropout"


@dataclass(frozen=True)
class WaveformRecord:
    """A raw single-channel recording with a per-sample missing mask."""

    subject_id: str
    channel: Channel
    sampling_rate_hz: float
    start_time_s: float
    samples: np.ndarray
    missing_mask: np.ndarray

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32)
        mask = np.asarray(self.missing_mask, dtype=bool)
        if samples.ndim != 1 or mask.ndim != 1:
            raise ContractError("samples and missing_mask must be 1-D")
        if len(samples) != len(mask):
            raise ContractError(
                f"samples ({len(samples)}) and missing_mask ({len(mask)}) "
                "must have equal length"
            )
        if not self.sampling_rate_hz > 0:
            raise ContractError(f"sampling_rate_hz must be > 0, got {self.sampling_rate_hz}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "missing_mask", mask)
        self.samples.setflags(write=False)
        self.missing_mask.setflags(write=False)

    @property
    def duration_s(self):
        return len(self.samples) / self.sampling_rate_hz

    @property
    def missing_fraction(self):
        if len(self.missing_mask) == 0:
            return 0.0
        return float(self.missing_mask.mean())

    def equals(self, other):
        """Bitwise field-by-field equality (used by round-trip tests)."""
        return (
            self.subject_id == other.subject_id
            and self.channel == other.channel
            and self.sampling_rate_hz == other.sampling_rate_hz
            and self.start_time_s == other.start_time_s
            and np.array_equal(
                self.samples.view(np.uint32), other.samples.view(np.uint32)
            )
            and np.array_equal(self.missing_mask, other.missing_mask)
        )


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters for one synthetic PPG/ECG record pair."""

    heart_rate_bpm: float
    noise_kind: NoiseKind = NoiseKind.NONE
    noise_level: float = 0.0
    duration_s: float = 30.0
    seed: int = 0
    subject_id: str = "synth"
    sampling_rate_hz: float = 125.0
    start_time_s: float = 0.0

    def __post_init__(self):
        if not 20.0 < self.heart_rate_bpm < 300.0:
            raise ContractError(
                f"heart_rate_bpm must be in (20, 300), got {self.heart_rate_bpm}"
            )
        if self.noise_level < 0:
            raise ContractError(f"noise_level must be >= 0, got {self.noise_level}")
        if self.duration_s <= 0:
            raise ContractError(f"duration_s must be > 0, got {self.duration_s}")
        if isinstance(self.noise_kind, str):
            object.__setattr__(self, "noise_kind", NoiseKind(self.noise_kind))


def _gauss(x, mu, sigma):
    return np.exp(-0.5 * ((x - mu) / sigma) ** 2)


# PPG beat: one positive and one matched negative lobe per period.  The
# offset between the lobes concentrates spectral power in the first two
# beat harmonics, which keeps clean segments inside the quality bands the
# scoring module expects.
_PPG_DC = 8.0
_PPG_LOBE_POS = 0.20
_PPG_LOBE_NEG = 0.50
_PPG_SIGMA = 0.07

# ECG beat: P, Q, R, S, T lobes as fractions of the beat period.
_ECG_LOBES = (
    (0.15, 0.15, 0.030),
    (-0.12, 0.265, 0.012),
    (1.00, 0.290, 0.009),
    (-0.25, 0.315, 0.012),
    (0.38, 0.52, 0.050),
)

_BURST_LEN_S = 3.0
_BURSTS_PER_30S_MAX = 4.0  # artifacts must stay a minority of the duration
_BURST_AMP_PER_LEVEL = 12.0
_BURST_BAND_HZ = (1.0, 45.0)
_DROPOUT_RUN_S = 0.5


def _ppg_clean(t, bpm):
    period = 60.0 / bpm
    ph = t % period
    return (
        _PPG_DC
        + _gauss(ph, _PPG_LOBE_POS * period, _PPG_SIGMA * period)
        - _gauss(ph, _PPG_LOBE_NEG * period, _PPG_SIGMA * period)
    )


def _ecg_clean(t, bpm):
    period = 60.0 / bpm
    ph = t % period
    out = np.zeros_like(t)
    for amp, pos, width in _ECG_LOBES:
        out += amp * _gauss(ph, pos * period, width * period)
    return out


def _bandlimited_noise(rng, n, fs, lo, hi):
    x = rng.standard_normal(n)
    spec = np.fft.rfft(x)
    f = np.fft.rfftfreq(n, 1.0 / fs)
    spec[(f < lo) | (f > hi)] = 0.0
    y = np.fft.irfft(spec, n=n)
    sd = y.std()
    return y / sd if sd > 0 else y


def _apply_noise(clean, spec, rng):
    """Returns (samples, missing_mask) for one channel."""
    n = len(clean)
    fs = spec.sampling_rate_hz
    mask = np.zeros(n, dtype=bool)
    kind, level = spec.noise_kind, spec.noise_level
    if kind is NoiseKind.NONE or level == 0.0:
        return clean, mask
    sig_sd = float(np.std(clean - clean.mean()))
    if kind is NoiseKind.GAUSSIAN:
        return clean + rng.standard_normal(n) * level * sig_sd, mask
    if kind is NoiseKind.BASELINE_WANDER:
        t = np.arange(n) / fs
        drift = np.sin(2 * np.pi * 0.25 * t + rng.uniform(0, 2 * np.pi))
        drift += 0.6 * np.sin(2 * np.pi * 0.1 * t + rng.uniform(0, 2 * np.pi))
        return clean + 2.0 * level * sig_sd * drift, mask
    if kind is NoiseKind.MOTION_BURST:
        # One-sided bursts (pressure/detachment transients) over a low
        # broadband disturbance floor.  Bursts occupy distinct 3 s slots;
        # the count saturates at 4 per 30 s so artifacts stay a minority
        # of the duration, and past level 1 only the amplitude grows.
        burst_len = int(round(_BURST_LEN_S * fs))
        n_slots = max(1, n // burst_len)
        want = min(level, 1.0) * _BURSTS_PER_30S_MAX * (n / fs) / 30.0
        n_bursts = min(n_slots, max(1, int(round(want))))
        slots = rng.permutation(n_slots)[:n_bursts]
        out = clean + 0.3 * level * sig_sd * rng.standard_normal(n)
        for s in slots:
            i0 = s * burst_len
            i1 = min(i0 + burst_len, n)
            burst = np.abs(_bandlimited_noise(rng, i1 - i0, fs, *_BURST_BAND_HZ))
            out[i0:i1] += level * _BURST_AMP_PER_LEVEL * sig_sd * burst
        return out, mask
    if kind is NoiseKind.DROPOUT:
        frac = min(level, 0.95)
        run = max(1, int(round(_DROPOUT_RUN_S * fs)))
        target = int(round(frac * n))
        dropped = 0
        while dropped < target:
            i0 = int(rng.integers(0, n))
            i1 = min(i0 + run, n)
            newly = int((~mask[i0:i1]).sum())
            mask[i0:i1] = True
            dropped += newly
        out = clean.copy()
        out[mask] = 0.0
        return out, mask
    raise ContractError(f"unknown noise kind {kind!r}")


def generate_synthetic(spec: SyntheticSpec):
    """Generate a time-aligned (PPG, ECG) record pair.

    Both channels share beat timing.  Identical specs produce bit-identical
    records.
    """
    n = int(round(spec.duration_s * spec.sampling_rate_hz))
    if n <= 0:
        raise ContractError("duration too short for one sample")
    t = np.arange(n) / spec.sampling_rate_hz
    ppg = _ppg_clean(t, spec.heart_rate_bpm)
    ecg = _ecg_clean(t, spec.heart_rate_bpm)
    ss = np.random.SeedSequence(entropy=spec.seed)
    rng_ppg, rng_ecg = (np.random.Generator(np.random.PCG64(s)) for s in ss.spawn(2))
    ppg, mask_ppg = _apply_noise(ppg, spec, rng_ppg)
    ecg, mask_ecg = _apply_noise(ecg, spec, rng_ecg)
    common = dict(
        subject_id=spec.subject_id,
        sampling_rate_hz=spec.sampling_rate_hz,
        start_time_s=spec.start_time_s,
    )
    return (
        WaveformRecord(channel=Channel.PPG, samples=ppg, missing_mask=mask_ppg, **common),
        WaveformRecord(channel=Channel.ECG_LEAD_II, samples=ecg, missing_mask=mask_ecg, **common),
    )


def write_corpus(records, path):
    """Write records to a corpus container file."""
    records = list(records)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(records)))
        for rec in records:
            sid = rec.subject_id.encode("utf-8")
            fh.write(struct.pack("<I", len(sid)))
            fh.write(sid)
            fh.write(
                struct.pack(
                    "<BddQ",
                    rec.channel.value,
                    rec.sampling_rate_hz,
                    rec.start_time_s,
                    len(rec.samples),
                )
            )
            fh.write(rec.samples.astype("<f4").tobytes())
            fh.write(np.packbits(rec.missing_mask, bitorder="little").tobytes())


def _read_exact(fh, count, what):
    data = fh.read(count)
    if len(data) != count:
        raise FormatError(f"truncated file while reading {what}", offset=fh.tell())
    return data


def read_corpus(path):
    """Read a corpus container file, returning a list of WaveformRecord."""
    records = []
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
        version, count = struct.unpack("<IQ", _read_exact(fh, 12, "header"))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported version {version}", offset=4)
        for i in range(count):
            (sid_len,) = struct.unpack("<I", _read_exact(fh, 4, f"record {i} id length"))
            sid = _read_exact(fh, sid_len, f"record {i} id").decode("utf-8")
            chan, rate, start, n = struct.unpack(
                "<BddQ", _read_exact(fh, 25, f"record {i} header")
            )
            try:
                channel = Channel(chan)
            except ValueError:
                raise FormatError(
                    f"unknown channel tag {chan} in record {i}", offset=fh.tell() - 25
                ) from None
            samples = np.frombuffer(
                _read_exact(fh, 4 * n, f"record {i} samples"), dtype="<f4"
            ).copy()
            mask_bytes = _read_exact(fh, (n + 7) // 8, f"record {i} mask")
            mask = np.unpackbits(
                np.frombuffer(mask_bytes, dtype=np.uint8), bitorder="little"
            )[:n].astype(bool)
            records.append(
                WaveformRecord(
                    subject_id=sid,
                    channel=channel,
                    sampling_rate_hz=rate,
                    start_time_s=start,
                    samples=samples,
                    missing_mask=mask,
                )
            )
        trailing = fh.read(1)
        if trailing:
            raise FormatError("trailing bytes after last record", offset=fh.tell() - 1)
    return records


# Noise palette used when building multi-subject desk corpora.  Levels are
# graded so segment quality labels spread over all five classes.
_CORPUS_PALETTE = (
    (NoiseKind.NONE, 0.0),
    (NoiseKind.GAUSSIAN, 0.15),
    (NoiseKind.GAUSSIAN, 0.45),
    (NoiseKind.MOTION_BURST, 0.45),
    (NoiseKind.GAUSSIAN, 0.9),
    (NoiseKind.MOTION_BURST, 1.0),
    (NoiseKind.BASELINE_WANDER, 1.2),
    (NoiseKind.MOTION_BURST, 1.6),
)


def generate_noise_graded_corpus(
    n_subjects=8, blocks_per_subject=3, block_s=300.0, seed=0
):
    """Generate a corpus whose segments span the full quality range.

    Each subject contributes consecutive record pairs whose noise kind and
    level are drawn from a graded palette, so temporally close segments of
    the same subject end up with different quality labels.
    """
    root = np.random.SeedSequence(entropy=seed)
    rng = np.random.Generator(np.random.PCG64(root))
    records = []
    for s in range(n_subjects):
        bpm = float(rng.uniform(60.0, 67.0))
        for b in range(blocks_per_subject):
            kind, level = _CORPUS_PALETTE[int(rng.integers(0, len(_CORPUS_PALETTE)))]
            spec = SyntheticSpec(
                heart_rate_bpm=bpm,
                noise_kind=kind,
                noise_level=level,
                duration_s=block_s,
                seed=int(rng.integers(0, 2**31)),
                subject_id=f"subj{s:03d}",
                start_time_s=b * block_s,
            )
            records.extend(generate_synthetic(spec))
    return records
