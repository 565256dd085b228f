"""Apodization windows.

The asymmetric Kilgour-Van Orden (KV) window rises as a raised cosine from 0
at n=0 to 1 at n=NF-1 and then falls as a half cosine to 0 at n=N-1.  The
``sqrt`` variant takes the square root of the fall to keep more of the
transient tail.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FAMILIES = ("none", "sine-bell", "kv-asym", "kv-asym-sqrt")


def kv_peak_index(N: int, F: float) -> int:
    """NF = N*F rounded to nearest, ties up."""
    return int(np.floor(N * F + 0.5))


def kv_window(N: int, F: float = 0.25, sqrt_fall: bool = False) -> np.ndarray:
    """Asymmetric KV window of length N with its maximum near fraction F.

    Rise, n <= NF-1:  A(n) = 1/2 (1 - cos(n pi / (NF-1)))
    Fall, n >= NF:    A(n) = 1/2 (1 + cos(pi (n-NF) / (N-1-NF)))

    so A(NF-1) = A(NF) = 1 and A(N-1) = 0.  With ``sqrt_fall`` the fall is
    replaced by sqrt(|A(n)|).
    """
    N = int(N)
    if N < 4:
        raise ValueError(f"kv_window needs N >= 4, got {N}")
    if not 0.0 < F < 1.0:
        raise ValueError(f"F must lie in (0, 1), got {F}")
    nf = kv_peak_index(N, F)
    if nf < 2 or nf > N - 2:
        raise ValueError(f"N*F rounds to {nf}; need 2 <= NF <= N-2")
    w = np.empty(N)
    n = np.arange(nf)
    w[:nf] = 0.5 * (1.0 - np.cos(np.pi * n / (nf - 1)))
    m = np.arange(N - nf)
    fall = 0.5 * (1.0 + np.cos(np.pi * m / (N - 1 - nf)))
    if sqrt_fall:
        fall = np.sqrt(np.abs(fall))
    w[nf:] = fall
    # exact endpoints; cos(pi) leaves ~1e-17 residue
    w[0] = 0.0
    w[nf - 1] = 1.0
    w[nf] = 1.0
    w[-1] = 0.0
    return w


def sine_bell(N: int, shift: float = 0.0) -> np.ndarray:
    """w(n) = sin(pi (shift + (1-shift) n/(N-1)))."""
    N = int(N)
    if N < 2:
        raise ValueError(f"sine_bell needs N >= 2, got {N}")
    if not 0.0 <= shift <= 1.0:
        raise ValueError(f"shift must lie in [0, 1], got {shift}")
    n = np.arange(N)
    w = np.sin(np.pi * (shift + (1.0 - shift) * n / (N - 1)))
    return np.clip(w, 0.0, 1.0)


@dataclass(frozen=True)
class ApodizationSpec:
    family: str = "kv-asym"
    F: float = 0.25
    sine_shift: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown apodization family {self.family!r}; choose from {FAMILIES}")
        if not 0.0 < self.F < 1.0:
            raise ValueError(f"F must lie in (0, 1), got {self.F}")
        if not 0.0 <= self.sine_shift <= 1.0:
            raise ValueError(f"sine_shift must lie in [0, 1], got {self.sine_shift}")

    def weights(self, N: int) -> np.ndarray:
        if self.family == "none":
            return np.ones(int(N))
        if self.family == "sine-bell":
            return sine_bell(N, self.sine_shift)
        return kv_window(N, self.F, sqrt_fall=self.family == "kv-asym-sqrt")


def apply_window(signal, spec: ApodizationSpec, weights: np.ndarray | None = None) -> np.ndarray:
    """Elementwise product of signal and window (along the last axis).

    ``weights`` may be passed precomputed; it must match the signal length.
    """
    signal = np.asarray(signal)
    n = signal.shape[-1]
    if weights is None:
        if spec.family == "none":
            return signal.copy()
        weights = spec.weights(n)
    if weights.shape != (n,):
        raise ValueError(f"window length {weights.shape[0]} != signal length {n}")
    return signal * weights
