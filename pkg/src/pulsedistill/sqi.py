"""Signal quality indices, segment quality labels, and pair mining.

Five PPG component scores and two ECG component scores are fused into a
segment-level quality index in [0, 1], which a fixed threshold rule turns
into one of five labels.  Temporally close same-subject segments with
different labels form (high, low) training pairs.
"""

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
from scipy import stats
from scipy.signal import find_peaks

from .errors import ContractError
from .preprocess import SEGMENT_RATE_HZ, SEGMENT_SAMPLES, Segment

# Band edges and thresholds.  These are conventional choices for adult
# ICU-style recordings; all of them can be overridden through the run
# config.
HR_BAND_HZ = (0.5, 4.0)
PPG_TOTAL_BAND_HZ = (0.0, 15.0)
PULSE_BAND_HZ = (1.0, 2.25)
PULSE_TOTAL_BAND_HZ = (0.0, 8.0)
PERFUSION_REF = 0.05
ENTROPY_BINS = 16
SUBWINDOW_SECONDS = 3.0
ENERGY_Z_THRESHOLD = 3.0
SAMPLE_ENTROPY_THRESHOLD = 1.5
SAMPLE_ENTROPY_M = 2
SAMPLE_ENTROPY_R = 0.2
HR_RANGE_BPM = (30.0, 220.0)
RR_RATIO_RANGE = (2.0 / 3.0, 3.0 / 2.0)
PAIR_WINDOW_SECONDS = 300.0

_BAND_EDGE_TOL = 1e-9


class QualityLabel(IntEnum):
    """Quality classes ordered worst (0) to best (4)."""

    BAD = 0
    POOR = 1
    ACCEPTABLE = 2
    GOOD = 3
    EXCELLENT = 4


LABEL_THRESHOLDS = ((0.9, QualityLabel.EXCELLENT), (0.7, QualityLabel.GOOD),
                    (0.5, QualityLabel.ACCEPTABLE), (0.3, QualityLabel.POOR))


def label_for_sqi(sqi):
    """Threshold rule: >=0.9 Excellent, >=0.7 Good, >=0.5 Acceptable,
    >=0.3 Poor, else Bad.  Boundaries are closed below, open above."""
    for threshold, label in LABEL_THRESHOLDS:
        if sqi >= threshold:
            return label
    return QualityLabel.BAD


@dataclass(frozen=True)
class QualityAssessment:
    sqi_ppg: float
    sqi_ecg: float
    sqi: float
    label: QualityLabel
    component_scores: dict = field(default_factory=dict)


@dataclass(frozen=True)
class QualityPair:
    """An ordered (better, worse) pair of assessed segments."""

    high: Segment
    high_assessment: QualityAssessment
    low: Segment
    low_assessment: QualityAssessment

    def __post_init__(self):
        if self.high.subject_id != self.low.subject_id:
            raise ContractError("pair members must share a subject")
        if abs(self.high.t_start_s - self.low.t_start_s) >= PAIR_WINDOW_SECONDS:
            raise ContractError("pair members must start within 5 minutes")
        if not self.high_assessment.label > self.low_assessment.label:
            raise ContractError("high member must carry the strictly better label")


def _band_mask(freqs, lo, hi, lo_open=False):
    # tolerant comparisons: bin frequencies land within 1 ulp of band edges
    above = freqs > lo + _BAND_EDGE_TOL if lo_open else freqs >= lo - _BAND_EDGE_TOL
    return above & (freqs <= hi + _BAND_EDGE_TOL)


def _psd_fraction(x, band, total_band, fs=SEGMENT_RATE_HZ):
    x = np.asarray(x, dtype=np.float64)
    x = x - x.mean()
    power = np.abs(np.fft.rfft(x)) ** 2
    freqs = np.fft.rfftfreq(len(x), 1.0 / fs)
    denom = power[_band_mask(freqs, total_band[0], total_band[1], lo_open=True)].sum()
    if denom <= 0:
        return 0.0
    num = power[_band_mask(freqs, band[0], band[1])].sum()
    return float(np.clip(num / denom, 0.0, 1.0))


def bandpass(x, lo, hi, fs=SEGMENT_RATE_HZ):
    """Zero-phase band-pass via spectral masking."""
    x = np.asarray(x, dtype=np.float64)
    spec = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(len(x), 1.0 / fs)
    spec[~_band_mask(freqs, lo, hi)] = 0.0
    return np.fft.irfft(spec, n=len(x))


def ppg_power_sqi(x, band=HR_BAND_HZ, total_band=PPG_TOTAL_BAND_HZ):
    """Fraction of spectral power in the heart-rate band 0.5-4 Hz,
    relative to the total in (0, 15] Hz."""
    return _psd_fraction(x, band, total_band)


def ppg_perfusion_sqi(raw, ref=PERFUSION_REF, band=HR_BAND_HZ):
    """Pulsatile-to-static amplitude ratio, mapped to [0, 1].

    Operates on pre-normalization amplitudes: min-max scaling destroys the
    AC/DC ratio.
    """
    raw = np.asarray(raw, dtype=np.float64)
    dc = abs(float(raw.mean()))
    if dc == 0.0:
        return 0.0
    ac = bandpass(raw, *band)
    pi = float(np.ptp(ac)) / dc
    return float(min(pi / ref, 1.0))


def ppg_skewness_sqi(x):
    """exp(-g^2/2) for sample skewness g; 0 for constant input."""
    x = np.asarray(x, dtype=np.float64)
    if x.std() == 0:
        return 0.0
    g = float(stats.skew(x))
    return float(np.exp(-0.5 * g * g))


def ppg_relative_power_sqi(x, band=PULSE_BAND_HZ, total_band=PULSE_TOTAL_BAND_HZ):
    """Fraction of spectral power in the pulse band 1-2.25 Hz relative to
    the total in (0, 8] Hz (DC excluded)."""
    return _psd_fraction(x, band, total_band)


def ppg_entropy_sqi(x, bins=ENTROPY_BINS):
    """1 minus the normalized Shannon entropy of a 16-bin amplitude
    histogram.  Concentrated amplitude distributions score high."""
    x = np.asarray(x, dtype=np.float64)
    hist, _ = np.histogram(x, bins=bins)
    total = hist.sum()
    if total == 0:
        return 0.0
    p = hist[hist > 0] / total
    h = float(-(p * np.log(p)).sum())
    return float(np.clip(1.0 - h / np.log(bins), 0.0, 1.0))


def sample_entropy(x, m=SAMPLE_ENTROPY_M, r_factor=SAMPLE_ENTROPY_R):
    """Sample entropy with Chebyshev distance; inf when no template repeats."""
    x = np.asarray(x, dtype=np.float64)
    sd = x.std()
    if sd == 0:
        return 0.0
    r = r_factor * sd
    close = np.abs(x[:, None] - x[None, :]) <= r
    b = close[: -m, : -m]
    for k in range(1, m):
        b = b & close[k : k - m, k : k - m]
    a = b & close[m:, m:]
    n_b = int(b.sum()) - (len(x) - m)
    n_a = int(a.sum()) - (len(x) - m)
    if n_b <= 0 or n_a <= 0:
        return float("inf")
    return float(-np.log(n_a / n_b))


def ecg_noise_sqi(x, fs=SEGMENT_RATE_HZ, z_threshold=ENERGY_Z_THRESHOLD,
                  entropy_threshold=SAMPLE_ENTROPY_THRESHOLD):
    """Fraction of 3 s sub-windows that look clean.

    A sub-window is flagged when its energy sits far above the segment
    median (robust z-score > 3) or its sample entropy exceeds 1.5.
    """
    x = np.asarray(x, dtype=np.float64)
    win = int(round(SUBWINDOW_SECONDS * fs))
    n_win = len(x) // win
    if n_win == 0:
        return 0.0
    wins = x[: n_win * win].reshape(n_win, win)
    # fluctuation energy: a DC offset must not mask artifact energy
    centered = wins - wins.mean(axis=1, keepdims=True)
    energy = (centered**2).sum(axis=1)
    med = float(np.median(energy))
    mad = float(np.median(np.abs(energy - med)))
    scale = max(1.4826 * mad, 0.25 * med, 1e-12)
    flagged = (energy - med) / scale > z_threshold
    for i in range(n_win):
        if not flagged[i] and sample_entropy(wins[i]) > entropy_threshold:
            flagged[i] = True
    return float(1.0 - flagged.mean())


def detect_beats(x, fs=SEGMENT_RATE_HZ):
    """Beat times (s) from squared-derivative energy with an adaptive
    threshold."""
    x = np.asarray(x, dtype=np.float64)
    filtered = bandpass(x, 5.0, 15.0, fs=fs)
    deriv = np.diff(filtered, prepend=filtered[0])
    energy = deriv * deriv
    width = max(1, int(round(0.150 * fs)))
    integrated = np.convolve(energy, np.ones(width) / width, mode="same")
    peak = integrated.max()
    if peak <= 0:
        return np.empty(0)
    locs, _ = find_peaks(
        integrated, height=0.25 * peak, distance=max(1, int(round(0.30 * fs)))
    )
    return locs / fs


def beat_plausibility(beat_times, hr_range=HR_RANGE_BPM,
                      rr_ratio_range=RR_RATIO_RANGE):
    """Per-interval plausibility flags for a beat-time sequence.

    Interval i (between beats i and i+1) is plausible when its
    instantaneous heart rate is within [30, 220] bpm and, from the second
    interval on, the adjacent RR ratio is within [2/3, 3/2].
    """
    beat_times = np.asarray(beat_times, dtype=np.float64)
    rr = np.diff(beat_times)
    if len(rr) == 0:
        return np.empty(0, dtype=bool)
    hr = 60.0 / rr
    ok = (hr >= hr_range[0]) & (hr <= hr_range[1])
    if len(rr) > 1:
        ratio = rr[1:] / rr[:-1]
        ok[1:] &= (ratio >= rr_ratio_range[0]) & (ratio <= rr_ratio_range[1])
    return ok


def ecg_beat_sqi(x, fs=SEGMENT_RATE_HZ, hr_range=HR_RANGE_BPM,
                 rr_ratio_range=RR_RATIO_RANGE):
    """Fraction of plausible beats; 0 when fewer than 2 beats are found."""
    beats = detect_beats(x, fs=fs)
    if len(beats) < 2:
        return 0.0
    return float(beat_plausibility(beats, hr_range, rr_ratio_range).mean())


PPG_COMPONENTS = ("ppg_power", "ppg_perfusion", "ppg_skewness", "ppg_relative_power",
                  "ppg_entropy")
ECG_COMPONENTS = ("ecg_noise", "ecg_beat")


def assess(segment: Segment, raw_channels=None, ppg_weight=0.5,
           component_kwargs=None) -> QualityAssessment:
    """Score one segment and assign its quality label.

    The five PPG scores are averaged with equal weight, the two ECG scores
    with equal weight, and the two channel scores are averaged 0.5/0.5.
    Threshold overrides can be passed per component through
    `component_kwargs` (e.g. {"ppg_perfusion": {"ref": 0.1}}).
    """
    raw = segment.raw_channels if raw_channels is None else np.asarray(raw_channels)
    ppg, ecg = segment.channels[0], segment.channels[1]
    kw = component_kwargs or {}
    scores = {
        "ppg_power": ppg_power_sqi(ppg, **kw.get("ppg_power", {})),
        "ppg_perfusion": ppg_perfusion_sqi(raw[0], **kw.get("ppg_perfusion", {})),
        "ppg_skewness": ppg_skewness_sqi(ppg),
        "ppg_relative_power": ppg_relative_power_sqi(ppg, **kw.get("ppg_relative_power", {})),
        "ppg_entropy": ppg_entropy_sqi(ppg, **kw.get("ppg_entropy", {})),
        "ecg_noise": ecg_noise_sqi(ecg, **kw.get("ecg_noise", {})),
        "ecg_beat": ecg_beat_sqi(ecg, **kw.get("ecg_beat", {})),
    }
    sqi_ppg = float(np.mean([scores[k] for k in PPG_COMPONENTS]))
    sqi_ecg = float(np.mean([scores[k] for k in ECG_COMPONENTS]))
    sqi = ppg_weight * sqi_ppg + (1.0 - ppg_weight) * sqi_ecg
    return QualityAssessment(
        sqi_ppg=sqi_ppg,
        sqi_ecg=sqi_ecg,
        sqi=sqi,
        label=label_for_sqi(sqi),
        component_scores=scores,
    )


def mine_pairs(assessed_segments):
    """All (high, low) pairs satisfying the pairing rule.

    Two segments pair when they share a subject, start within 5 minutes of
    each other, and carry different labels.  The better-labeled segment is
    stored as `high`; each unordered pair is emitted once, ordered by
    (subject, t_high, t_low).
    """
    items = sorted(assessed_segments, key=lambda sa: (sa[0].subject_id, sa[0].t_start_s))
    pairs = []
    for i, (seg_i, qa_i) in enumerate(items):
        for j in range(i + 1, len(items)):
            seg_j, qa_j = items[j]
            if seg_j.subject_id != seg_i.subject_id:
                break
            if seg_j.t_start_s - seg_i.t_start_s >= PAIR_WINDOW_SECONDS:
                break
            if qa_i.label == qa_j.label:
                continue
            if qa_i.label > qa_j.label:
                high, low = (seg_i, qa_i), (seg_j, qa_j)
            else:
                high, low = (seg_j, qa_j), (seg_i, qa_i)
            pairs.append(
                QualityPair(
                    high=high[0], high_assessment=high[1],
                    low=low[0], low_assessment=low[1],
                )
            )
    pairs.sort(key=lambda p: (p.high.subject_id, p.high.t_start_s, p.low.t_start_s))
    return pairs
