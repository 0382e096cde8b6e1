"""Discrete Fourier analysis of Coulomb signals.

The forward transform is unnormalized,

    Y[k] = sum_l y[l] exp(-2j pi k l / L),

and the inverse carries the 1/L factor. numpy's FFT computes exactly this
convention; :func:`direct_dft` evaluates the sum literally and serves as a
reference for it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import get_window

from .descriptor import FeatureMatrix

IMAG_TOLERANCE = 1e-9
WINDOW_KINDS = ("hann", "rectangular")


@dataclass(frozen=True, eq=False)
class Spectrogram:
    """Squared STFT magnitudes, one row per frame, bins 0..W//2."""

    frames: np.ndarray
    window_length: int
    hop: int
    window_kind: str

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_bins(self) -> int:
        return self.frames.shape[1]


def _as_signal(signal) -> np.ndarray:
    y = np.asarray(signal)
    if y.ndim != 1:
        raise ValueError("expected a 1D signal")
    if y.size == 0:
        raise ValueError("cannot transform an empty signal")
    if not np.all(np.isfinite(y)):
        raise ValueError("signal contains non-finite values")
    return y


def dft(signal) -> np.ndarray:
    """Complex spectrum of a 1D signal, same length as the input."""
    return np.fft.fft(_as_signal(signal))


def direct_dft(signal) -> np.ndarray:
    """O(L^2) evaluation of the DFT sum; the reference for :func:`dft`."""
    y = _as_signal(signal).astype(np.complex128)
    n = y.size
    # k*l reduced mod L keeps the phase argument small and exact.
    kl = np.outer(np.arange(n), np.arange(n)) % n
    return np.exp(-2j * np.pi * kl / n) @ y


def idft(spectrum) -> np.ndarray:
    """Inverse of :func:`dft` for spectra of real signals.

    Raises ValueError when the inverse has an imaginary part above 1e-9,
    i.e. the spectrum is not conjugate-symmetric.
    """
    y = np.fft.ifft(_as_signal(spectrum))
    residue = np.max(np.abs(y.imag))
    if residue > IMAG_TOLERANCE:
        raise ValueError(
            f"inverse transform has imaginary residue {residue:.3g}; "
            "spectrum is not that of a real signal")
    return y.real.copy()


def magnitude(spectrum) -> np.ndarray:
    return np.abs(np.asarray(spectrum))


def spectrogram(signal, window_length: int = 32, hop: int = 8,
                window_kind: str = "hann") -> Spectrogram:
    """Short-time power spectrum over a sliding window.

    Frame ``t`` covers samples ``[t*hop, t*hop + window_length)``; the
    frame count is ``(L - window_length) // hop + 1``. The Hann window is
    the periodic variant used for spectral analysis.
    """
    y = _as_signal(signal).astype(np.float64)
    w, h = int(window_length), int(hop)
    if w < 2:
        raise ValueError("window length must be at least 2")
    if not 1 <= h <= w:
        raise ValueError("hop must satisfy 1 <= hop <= window length")
    if w > y.size:
        raise ValueError(
            f"window length {w} exceeds signal length {y.size}; "
            "zero-pad the signal or use a smaller window")
    if window_kind not in WINDOW_KINDS:
        raise ValueError(f"unknown window kind {window_kind!r}")
    window = np.ones(w) if window_kind == "rectangular" else get_window("hann", w)
    n_frames = (y.size - w) // h + 1
    starts = np.arange(n_frames) * h
    frames = y[starts[:, None] + np.arange(w)] * window
    power = np.abs(np.fft.fft(frames, axis=1)[:, : w // 2 + 1]) ** 2
    return Spectrogram(power, w, h, window_kind)


def transform_features(fm: FeatureMatrix, mode: str) -> FeatureMatrix:
    """Row-wise DFT of raw Coulomb signals.

    ``dft_complex`` stores interleaved (re, im) columns, width 2L;
    ``dft_magnitude`` stores |Y[k]|, width L.
    """
    if fm.domain != "raw":
        raise ValueError(f"features are already in the {fm.domain!r} domain")
    spectra = np.fft.fft(fm.values, axis=1)
    if mode == "dft_complex":
        values = np.empty((fm.values.shape[0], 2 * fm.values.shape[1]))
        values[:, 0::2] = spectra.real
        values[:, 1::2] = spectra.imag
    elif mode == "dft_magnitude":
        values = np.abs(spectra)
    else:
        raise ValueError(f"unknown transform mode {mode!r}")
    return FeatureMatrix(values, mode, fm.n_max, fm.labels)


def to_domain(fm: FeatureMatrix, domain: str) -> FeatureMatrix:
    """Raw features mapped into ``domain`` (a no-op for ``raw``)."""
    return fm if domain == "raw" else transform_features(fm, domain)


def write_pgm(path, image: np.ndarray) -> None:
    """Write a 16-bit binary PGM (P5), scaling the maximum to 65535.

    Rows of ``image`` become image rows, top to bottom.
    """
    img = np.asarray(image, dtype=np.float64)
    peak = img.max() if img.size else 0.0
    scaled = np.zeros(img.shape) if peak <= 0 else img / peak * 65535.0
    data = np.rint(np.clip(scaled, 0, 65535)).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode("ascii"))
        fh.write(data.tobytes())
