"""Cadzow rank-reduction denoising of transients.

Each iteration embeds the signal in an L x K Hankel matrix, truncates it to
``rank`` singular triplets and maps back by averaging anti-diagonals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve
from scipy.sparse.linalg import LinearOperator, svds

DENSE_LIMIT = 2_000_000  # L*K above which the Hankel matrix is never formed


class DenoiseError(ValueError):
    pass


@dataclass(frozen=True)
class DenoiseSpec:
    enabled: bool = False
    rank: int = 20
    iterations: int = 1
    hankel_rows: int | None = None  # default: length // 2

    def __post_init__(self):
        if self.rank < 1:
            raise DenoiseError("rank >= 1 required")
        if self.iterations < 1:
            raise DenoiseError("iterations >= 1 required")


def _hankel(x, L):
    K = x.size - L + 1
    idx = np.arange(L)[:, None] + np.arange(K)[None, :]
    return x[idx]


def _antidiag_weights(L, K):
    return fftconvolve(np.ones(L), np.ones(K)).round()


def _truncated_svd(x, L, rank):
    K = x.size - L + 1
    if L * K <= DENSE_LIMIT:
        U, s, Vh = np.linalg.svd(_hankel(x, L), full_matrices=False)
        return U[:, :rank], s[:rank], Vh[:rank]
    xc = np.conj(x)

    def matvec(v):
        v = np.ravel(v)
        return fftconvolve(x, v[::-1])[K - 1:K - 1 + L]

    def rmatvec(u):
        u = np.ravel(u)
        return fftconvolve(xc, u[::-1])[L - 1:L - 1 + K]

    op = LinearOperator((L, K), matvec=matvec, rmatvec=rmatvec, dtype=x.dtype)
    v0 = np.random.default_rng(12345).standard_normal(min(L, K))
    U, s, Vh = svds(op, k=rank, v0=v0.astype(x.dtype), solver="arpack")
    order = np.argsort(s)[::-1]
    return U[:, order], s[order], Vh[order]


def cadzow(signal, spec: DenoiseSpec) -> np.ndarray:
    """Rank-``spec.rank`` Cadzow iterations; output has the input length."""
    x = np.asarray(signal)
    x = x.astype(complex if np.iscomplexobj(x) else float)
    n = x.size
    L = int(spec.hankel_rows) if spec.hankel_rows else n // 2
    K = n - L + 1
    if L < 1 or K < 1:
        raise DenoiseError(f"hankel_rows {L} invalid for length {n}")
    if spec.rank >= min(L, K):
        raise DenoiseError(f"rank too large: rank {spec.rank} must be < hankel rows {min(L, K)}")
    weights = _antidiag_weights(L, K)
    for _ in range(spec.iterations):
        U, s, Vh = _truncated_svd(x, L, spec.rank)
        acc = np.zeros(n, dtype=x.dtype)
        for k in range(s.size):
            acc += s[k] * fftconvolve(U[:, k], Vh[k])
        x = acc / weights
        if not np.iscomplexobj(signal):
            x = x.real
    return x
