"""Periodic inflow waveforms as truncated Fourier series.

A waveform is stored as its period, mean flow and nine harmonic pairs
(19 coefficients). Fitting uses trapezoidal quadrature on the sample
grid, which is exact for band-limited signals on uniform grids below
the Nyquist rate. A parametric generator produces physiologically
shaped pulses (systolic peak plus dicrotic notch) for building corpora
when measured waveforms are unavailable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientSamples
from .validation import as_vector

N_HARMONICS = 9
FEATURE_DIM = 2 * N_HARMONICS + 2  # mean, nine cos/sin pairs, period


@dataclass
class FourierInflow:
    """Mean flow plus harmonic coefficients of a T-periodic inflow [cm^3/s]."""

    period: float
    mean: float
    cos_coeffs: np.ndarray = field(default_factory=lambda: np.zeros(N_HARMONICS))
    sin_coeffs: np.ndarray = field(default_factory=lambda: np.zeros(N_HARMONICS))

    def __post_init__(self):
        if self.period <= 0:
            raise ValueError(f"period must be positive, got {self.period}")
        self.cos_coeffs = np.asarray(self.cos_coeffs, dtype=float)
        self.sin_coeffs = np.asarray(self.sin_coeffs, dtype=float)
        if self.cos_coeffs.shape != (N_HARMONICS,) or self.sin_coeffs.shape != (N_HARMONICS,):
            raise ValueError(
                f"expected {N_HARMONICS} harmonic pairs, got "
                f"{self.cos_coeffs.shape}/{self.sin_coeffs.shape}"
            )


def fit_fourier(times, flows, period, n_harmonics=N_HARMONICS):
    """Fit a truncated Fourier series to samples covering one period.

    The integrals close the period by wrapping the first sample to
    ``t0 + period``, so a uniform grid on [0, T) recovers band-limited
    signals to machine precision.
    """
    t = as_vector(times, "times")
    q = as_vector(flows, "flows", dim=t.shape[0])
    if n_harmonics > N_HARMONICS:
        raise ValueError(f"n_harmonics must be <= {N_HARMONICS} for the standard feature vector")
    if t.shape[0] < 4 * max(n_harmonics, 1):
        raise InsufficientSamples(
            f"need at least {4 * max(n_harmonics, 1)} samples for {n_harmonics} harmonics, "
            f"got {t.shape[0]}"
        )
    order = np.argsort(t)
    t, q = t[order], q[order]
    # periodic closure
    t_ext = np.append(t, t[0] + period)
    q_ext = np.append(q, q[0])
    mean = np.trapezoid(q_ext, t_ext) / period
    cos_coeffs = np.zeros(N_HARMONICS)
    sin_coeffs = np.zeros(N_HARMONICS)
    for n in range(1, n_harmonics + 1):
        w = 2.0 * np.pi * n / period
        cos_coeffs[n - 1] = 2.0 / period * np.trapezoid(q_ext * np.cos(w * t_ext), t_ext)
        sin_coeffs[n - 1] = 2.0 / period * np.trapezoid(q_ext * np.sin(w * t_ext), t_ext)
    return FourierInflow(period=float(period), mean=float(mean),
                         cos_coeffs=cos_coeffs, sin_coeffs=sin_coeffs)


def eval_fourier(inflow, t):
    """Evaluate the truncated series at time(s) ``t`` (wrapped modulo the period)."""
    t = np.asarray(t, dtype=float)
    w = 2.0 * np.pi / inflow.period
    n = np.arange(1, N_HARMONICS + 1)
    phase = w * np.multiply.outer(t, n)
    val = inflow.mean + np.cos(phase) @ inflow.cos_coeffs + np.sin(phase) @ inflow.sin_coeffs
    return float(val) if np.isscalar(t) or t.ndim == 0 else val


def eval_fourier_deriv(inflow, t):
    """Time derivative of the series (used for series inertance terms)."""
    t = np.asarray(t, dtype=float)
    w = 2.0 * np.pi / inflow.period
    n = np.arange(1, N_HARMONICS + 1)
    phase = w * np.multiply.outer(t, n)
    val = -np.sin(phase) @ (inflow.cos_coeffs * n * w) + np.cos(phase) @ (inflow.sin_coeffs * n * w)
    return float(val) if np.isscalar(t) or t.ndim == 0 else val


def pack_features(inflow):
    """Flatten to the 20-vector [mean, cos 1..9, sin 1..9, period]."""
    return np.concatenate([[inflow.mean], inflow.cos_coeffs, inflow.sin_coeffs,
                           [inflow.period]])


def unpack_features(vec):
    """Inverse of :func:`pack_features`; exact roundtrip."""
    v = as_vector(vec, "features", dim=FEATURE_DIM)
    return FourierInflow(
        period=float(v[-1]),
        mean=float(v[0]),
        cos_coeffs=v[1:1 + N_HARMONICS].copy(),
        sin_coeffs=v[1 + N_HARMONICS:1 + 2 * N_HARMONICS].copy(),
    )


def eval_fourier_packed(features, t_norm):
    """Vectorized evaluation for a batch of packed feature rows.

    ``features`` is (n, 20); ``t_norm`` is a phase array in [0, 1) shared by
    all rows (each row uses its own period only through the coefficients,
    so evaluation at normalized phase is period-free).
    """
    f = np.asarray(features, dtype=float)
    t_norm = np.asarray(t_norm, dtype=float)
    n = np.arange(1, N_HARMONICS + 1)
    phase = 2.0 * np.pi * np.multiply.outer(t_norm, n)  # (nt, 9)
    cos_part = np.cos(phase) @ f[:, 1:1 + N_HARMONICS].T  # (nt, nrows)
    sin_part = np.sin(phase) @ f[:, 1 + N_HARMONICS:1 + 2 * N_HARMONICS].T
    return (f[:, 0][None, :] + cos_part + sin_part).T  # (nrows, nt)


# --- synthetic waveform corpus -------------------------------------------

def pulse_waveform(t, period, q_mean, pulsatility=3.2, systole_frac=0.36,
                   notch_depth=0.14, notch_width=0.045, diastolic_level=0.12):
    """Parametric pulse: half-sine systolic ejection, dicrotic notch, flat diastole.

    ``pulsatility`` is the peak-to-mean ratio before normalization; the
    waveform is rescaled so its exact mean equals ``q_mean``.
    """
    t = np.asarray(t, dtype=float)
    phase = np.mod(t, period) / period
    q = np.full_like(phase, diastolic_level)
    sys_mask = phase < systole_frac
    q[sys_mask] = diastolic_level + np.sin(np.pi * phase[sys_mask] / systole_frac) ** 2 * (
        pulsatility - diastolic_level
    )
    notch_center = systole_frac * 1.08
    q -= notch_depth * pulsatility * np.exp(-0.5 * ((phase - notch_center) / notch_width) ** 2)
    mean = np.mean(q)
    return q * (q_mean / mean)


def synthetic_waveform(seed, period=None, q_mean=None, n_samples=256):
    """One randomized physiological stand-in waveform as (times, flows, period)."""
    rng = np.random.default_rng(seed)
    period = float(rng.uniform(0.75, 1.15)) if period is None else float(period)
    q_mean = float(rng.uniform(45.0, 85.0)) if q_mean is None else float(q_mean)
    t = np.linspace(0.0, period, n_samples, endpoint=False)
    q = pulse_waveform(
        t, period, q_mean,
        pulsatility=rng.uniform(2.6, 3.8),
        systole_frac=rng.uniform(0.30, 0.42),
        notch_depth=rng.uniform(0.08, 0.2),
        notch_width=rng.uniform(0.03, 0.06),
        diastolic_level=rng.uniform(0.05, 0.2),
    )
    return t, q, period


def waveform_corpus(n_waveforms=16, seed=2024, n_samples=256):
    """Deterministic corpus of fitted synthetic waveforms."""
    out = []
    for k in range(n_waveforms):
        t, q, period = synthetic_waveform(seed + k, n_samples=n_samples)
        out.append(fit_fourier(t, q, period))
    return out
