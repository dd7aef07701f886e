"""Record filtering, segmentation, resampling, and normalization.

Raw record pairs become 2-channel, 30 s segments sampled at 300 Hz
(9000 samples per channel), min-max normalized to [0, 1].  The
pre-normalization amplitudes are kept on each segment because the
perfusion score needs the raw AC/DC ratio.
"""

import struct
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.signal import resample_poly

from .errors import ContractError, FormatError
from .waveio import Channel

SEGMENT_SECONDS = 30.0
SEGMENT_STEP_SECONDS = 15.0
SEGMENT_RATE_HZ = 300.0
SEGMENT_SAMPLES = 9000

MIN_RECORD_SECONDS = 300.0
MAX_MISSING_FRACTION = 0.20


@dataclass(frozen=True)
class Segment:
    """One normalized 2-channel window (row 0 = PPG, row 1 = ECG)."""

    subject_id: str
    t_start_s: float
    channels: np.ndarray  # (2, 9000) in [0, 1]
    raw_channels: np.ndarray  # (2, 9000) pre-normalization amplitudes

    def __post_init__(self):
        ch = np.asarray(self.channels, dtype=np.float64)
        raw = np.asarray(self.raw_channels, dtype=np.float64)
        if ch.shape != (2, SEGMENT_SAMPLES) or raw.shape != (2, SEGMENT_SAMPLES):
            raise ContractError(
                f"segment channels must be (2, {SEGMENT_SAMPLES}), "
                f"got {ch.shape} and {raw.shape}"
            )
        object.__setattr__(self, "channels", ch)
        object.__setattr__(self, "raw_channels", raw)
        self.channels.setflags(write=False)
        self.raw_channels.setflags(write=False)


def filter_records(records):
    """Drop records shorter than 5 minutes or missing more than 20%."""
    return [
        r
        for r in records
        if r.duration_s >= MIN_RECORD_SECONDS
        and r.missing_fraction <= MAX_MISSING_FRACTION
    ]


def interpolate_missing(samples, missing_mask):
    """Fill masked samples by linear interpolation between observed ones.

    Runs touching the record edge hold the nearest observed value.
    """
    samples = np.asarray(samples, dtype=np.float64)
    mask = np.asarray(missing_mask, dtype=bool)
    if not mask.any():
        return samples.copy()
    if mask.all():
        raise ContractError("cannot interpolate a fully missing window")
    idx = np.arange(len(samples))
    out = samples.copy()
    out[mask] = np.interp(idx[mask], idx[~mask], samples[~mask])
    return out


def resample(samples, rate_in, rate_out=SEGMENT_RATE_HZ):
    """Polyphase windowed-sinc resampling.

    Output length is round(len * rate_out / rate_in).  Constant signals are
    preserved exactly; band-limited content below the smaller Nyquist keeps
    frequency and amplitude within 1%.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise ContractError("cannot resample an empty signal")
    if rate_in <= 0 or rate_out <= 0:
        raise ContractError(f"rates must be positive, got {rate_in} -> {rate_out}")
    n_out = int(round(len(samples) * rate_out / rate_in))
    if rate_in == rate_out:
        return samples.copy()
    ratio = Fraction(rate_out).limit_denominator(10**6) / Fraction(
        rate_in
    ).limit_denominator(10**6)
    out = resample_poly(samples, ratio.numerator, ratio.denominator, padtype="mean")
    if len(out) > n_out:
        out = out[:n_out]
    elif len(out) < n_out:
        out = np.concatenate([out, np.full(n_out - len(out), out[-1])])
    return out


def minmax_normalize(samples):
    """Affine map to [0, 1]; constant input maps to all 0.5."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise ContractError("cannot normalize an empty signal")
    lo, hi = samples.min(), samples.max()
    if hi == lo:
        return np.full_like(samples, 0.5)
    return (samples - lo) / (hi - lo)


def _window_samples(record, w_start, w_end):
    """Cut [w_start, w_end) in corpus time out of one record."""
    i0 = int(round((w_start - record.start_time_s) * record.sampling_rate_hz))
    i1 = i0 + int(round((w_end - w_start) * record.sampling_rate_hz))
    samples = record.samples[i0:i1].astype(np.float64)
    mask = record.missing_mask[i0:i1]
    if mask.all():
        return None
    return interpolate_missing(samples, mask)


def segment_pairwise(ppg, ecg):
    """Segment an aligned (PPG, ECG) record pair into 30 s windows.

    Windows start every 15 s from the shared record start; only windows
    fully covered by both channels are emitted.  Within a window, missing
    values are interpolated, each channel is resampled to 300 Hz, and
    min-max normalization is applied per channel.
    """
    if ppg.subject_id != ecg.subject_id:
        raise ContractError(
            f"records from different subjects: {ppg.subject_id!r} vs {ecg.subject_id!r}"
        )
    if ppg.channel is not Channel.PPG or ecg.channel is not Channel.ECG_LEAD_II:
        raise ContractError("expected (PPG, ECG_LEAD_II) in that order")
    if ppg.start_time_s != ecg.start_time_s:
        raise ContractError(
            f"records misaligned: starts {ppg.start_time_s} vs {ecg.start_time_s}"
        )
    t0 = ppg.start_time_s
    span = min(ppg.duration_s, ecg.duration_s)
    segments = []
    k = 0
    while k * SEGMENT_STEP_SECONDS + SEGMENT_SECONDS <= span + 1e-9:
        w_start = t0 + k * SEGMENT_STEP_SECONDS
        w_end = w_start + SEGMENT_SECONDS
        rows_raw = []
        for rec in (ppg, ecg):
            cut = _window_samples(rec, w_start, w_end)
            if cut is None:
                rows_raw = None
                break
            rows_raw.append(resample(cut, rec.sampling_rate_hz, SEGMENT_RATE_HZ))
        k += 1
        if rows_raw is None:
            continue
        raw = np.stack(rows_raw)
        norm = np.stack([minmax_normalize(row) for row in raw])
        segments.append(
            Segment(
                subject_id=ppg.subject_id,
                t_start_s=w_start,
                channels=norm,
                raw_channels=raw,
            )
        )
    return segments


def segment_corpus(records):
    """Filter records, pair channels per subject, and segment every pair.

    Records are paired by (subject, start time).  Output is ordered by
    (subject_id, t_start_s) so parallel callers can produce identical files.
    """
    kept = filter_records(records)
    by_key = {}
    for rec in kept:
        by_key.setdefault((rec.subject_id, rec.start_time_s), {})[rec.channel] = rec
    segments = []
    for key in sorted(by_key):
        pair = by_key[key]
        if Channel.PPG in pair and Channel.ECG_LEAD_II in pair:
            segments.extend(segment_pairwise(pair[Channel.PPG], pair[Channel.ECG_LEAD_II]))
    segments.sort(key=lambda s: (s.subject_id, s.t_start_s))
    return segments


SEGMENT_MAGIC = b"SGC1"


def write_segments(segments, path):
    """Write segments to a container file (same conventions as the corpus)."""
    segments = list(segments)
    with open(path, "wb") as fh:
        fh.write(SEGMENT_MAGIC)
        fh.write(struct.pack("<IQ", 1, len(segments)))
        for seg in segments:
            sid = seg.subject_id.encode("utf-8")
            fh.write(struct.pack("<I", len(sid)))
            fh.write(sid)
            fh.write(struct.pack("<d", seg.t_start_s))
            fh.write(seg.channels.astype("<f4").tobytes())
            fh.write(seg.raw_channels.astype("<f4").tobytes())


def read_segments(path):
    """Read a segment container file."""
    block = 2 * SEGMENT_SAMPLES * 4
    segments = []
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != SEGMENT_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {SEGMENT_MAGIC!r}", offset=0)
        header = fh.read(12)
        if len(header) != 12:
            raise FormatError("truncated header", offset=fh.tell())
        version, count = struct.unpack("<IQ", header)
        if version != 1:
            raise FormatError(f"unsupported version {version}", offset=4)
        for i in range(count):
            head = fh.read(4)
            if len(head) != 4:
                raise FormatError(f"truncated segment {i}", offset=fh.tell())
            (sid_len,) = struct.unpack("<I", head)
            body = fh.read(sid_len + 8 + 2 * block)
            if len(body) != sid_len + 8 + 2 * block:
                raise FormatError(f"truncated segment {i}", offset=fh.tell())
            sid = body[:sid_len].decode("utf-8")
            (t_start,) = struct.unpack("<d", body[sid_len : sid_len + 8])
            ch = np.frombuffer(
                body[sid_len + 8 : sid_len + 8 + block], dtype="<f4"
            ).reshape(2, SEGMENT_SAMPLES)
            raw = np.frombuffer(body[sid_len + 8 + block :], dtype="<f4").reshape(
                2, SEGMENT_SAMPLES
            )
            segments.append(
                Segment(
                    subject_id=sid,
                    t_start_s=t_start,
                    channels=ch.astype(np.float64),
                    raw_channels=raw.astype(np.float64),
                )
            )
    return segments
