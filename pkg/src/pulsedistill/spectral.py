"""One-sided amplitude/phase spectra and their inverse.

The forward transform is the plain DFT
X[k] = sum_n x(n) * exp(-j*2*pi*k*n/N), evaluated with a real-input FFT
and returned as the one-sided half-spectrum (N/2 + 1 bins for even N).
Amplitude is |X[k]|; phase is the two-argument arctangent, zeroed on bins
whose amplitude is below a small epsilon where it would be meaningless.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

PHASE_EPSILON = 1e-8


@dataclass(frozen=True)
class SpectralTarget:
    amplitude: np.ndarray  # (..., N//2 + 1), >= 0
    phase: np.ndarray  # same shape, in (-pi, pi]

    def __post_init__(self):
        amp = np.asarray(self.amplitude, dtype=np.float64)
        ph = np.asarray(self.phase, dtype=np.float64)
        if amp.shape != ph.shape:
            raise ContractError(f"amplitude {amp.shape} and phase {ph.shape} differ")
        if np.any(amp < 0):
            raise ContractError("amplitude spectrum must be non-negative")
        object.__setattr__(self, "amplitude", amp)
        object.__setattr__(self, "phase", ph)


def dft(samples):
    """One-sided DFT of a real signal (last axis)."""
    x = np.asarray(samples, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ContractError("dft input must be finite")
    return np.fft.rfft(x, axis=-1)


def naive_dft(samples):
    """Direct O(N^2) evaluation of the transform; the FFT oracle."""
    x = np.asarray(samples, dtype=np.float64)
    n = x.shape[-1]
    k = np.arange(n)
    twiddle = np.exp(-2j * np.pi * np.outer(k, k) / n)
    return x @ twiddle.T


def amp_phase(spectrum, eps=PHASE_EPSILON):
    """Split a complex spectrum into amplitude and masked phase."""
    spectrum = np.asarray(spectrum)
    amplitude = np.abs(spectrum)
    phase = np.arctan2(spectrum.imag, spectrum.real)
    phase = np.where(amplitude < eps, 0.0, phase)
    return SpectralTarget(amplitude=amplitude, phase=phase)


def phase_mask(target: SpectralTarget, eps=PHASE_EPSILON):
    """Bins whose phase is meaningful (amplitude >= eps)."""
    return target.amplitude >= eps


def inverse_check(target: SpectralTarget, n=None):
    """Reconstruct the time-domain signal from (amplitude, phase).

    For any real x, inverse_check(amp_phase(dft(x)), n=len(x)) recovers x
    to within double-precision round-off.
    """
    amp = target.amplitude
    if n is None:
        n = 2 * (amp.shape[-1] - 1)
    spectrum = amp * np.exp(1j * target.phase)
    return np.fft.irfft(spectrum, n=n, axis=-1)


def segment_spectra(channels):
    """Per-channel spectral targets for a (C, N) segment."""
    return amp_phase(dft(np.asarray(channels, dtype=np.float64)))
