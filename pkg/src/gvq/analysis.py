"""Codebook and reconstruction analytics.

Covers utilization, per-group norm/usage statistics, pairwise cosine
similarity, 2-D views of the code cloud (seeded random projection and
PCA), and the pixel metrics PSNR and SSIM. Everything here is pure and
read-only; the CLI turns these into CSV exports.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .numerics import RngStream

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def utilization(index_counts: np.ndarray, n: int) -> float:
    """Fraction of the n codes used at least once."""
    counts = np.asarray(index_counts)
    if counts.shape != (n,):
        raise ShapeError(f"expected {n} per-code counts, got shape {counts.shape}")
    return float(np.count_nonzero(counts > 0) / n)


@dataclass(frozen=True)
class GroupStats:
    group: int
    norm_mean: float
    norm_var: float  # population variance of the row l2-norms
    usage_frac: float


@dataclass(frozen=True)
class GroupStatsReport:
    per_group: list[GroupStats]
    has_usage: bool  # False when the count vector was all zero


def group_stats(gc, index_counts: np.ndarray) -> GroupStatsReport:
    """Per-group l2-norm mean/variance of materialized codes and the share
    of assignments each group received."""
    counts = np.asarray(index_counts)
    if counts.shape != (gc.n,):
        raise ShapeError(f"expected {gc.n} per-code counts, got shape {counts.shape}")
    codes = gc.materialize()
    total = float(counts.sum())
    has_usage = total > 0
    stats = []
    for j in range(gc.k):
        lo, hi = int(gc.offsets[j]), int(gc.offsets[j + 1])
        norms = np.linalg.norm(codes[lo:hi].astype(np.float64), axis=1)
        usage = float(counts[lo:hi].sum() / total) if has_usage else 0.0
        stats.append(
            GroupStats(
                group=j,
                norm_mean=float(norms.mean()),
                norm_var=float(norms.var()),
                usage_frac=usage,
            )
        )
    return GroupStatsReport(per_group=stats, has_usage=has_usage)


def cosine_similarity_matrix(codes: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Pairwise cosine similarities; symmetric with unit diagonal."""
    codes = np.asarray(codes, dtype=np.float64)
    norms = np.linalg.norm(codes, axis=1)
    bad = np.flatnonzero(norms < eps)
    if bad.size:
        raise NumericError(f"zero-norm code row {int(bad[0])}; cosine similarity undefined")
    unit = codes / norms[:, None]
    sim = unit @ unit.T
    np.fill_diagonal(sim, 1.0)
    return sim


def random_projection_2d(codes: np.ndarray, rng: RngStream) -> np.ndarray:
    """Project (m, d) codes to 2-D with a seeded N(0, 1/d) matrix."""
    codes = np.asarray(codes)
    if codes.ndim != 2 or codes.shape[1] < 2:
        raise ShapeError(f"expected (m, d) codes with d >= 2, got shape {codes.shape}")
    d = codes.shape[1]
    proj = rng.standard_normal((d, 2), dtype=np.float64) / np.sqrt(d)
    return codes @ proj


def pca_2d(codes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Top-2 principal components of standardized codes.

    Columns are standardized to zero mean and unit variance (constant
    columns are dropped with a warning), the covariance is
    eigendecomposed with numpy's symmetric solver, and each component's
    sign is fixed so its largest-magnitude entry is positive. Returns the
    (m, 2) projection and the two leading explained variances.
    """
    codes = np.asarray(codes, dtype=np.float64)
    if codes.ndim != 2:
        raise ShapeError(f"expected (m, d) codes, got shape {codes.shape}")
    m = codes.shape[0]
    if m < 3:
        raise ConfigError(f"PCA needs at least 3 rows, got {m}")
    std = codes.std(axis=0)
    keep = std > 0
    if not np.all(keep):
        warnings.warn(f"dropping {int((~keep).sum())} constant dimension(s) before PCA")
    if int(keep.sum()) < 2:
        raise ConfigError("fewer than 2 non-constant dimensions; PCA to 2-D impossible")
    x = (codes[:, keep] - codes[:, keep].mean(axis=0)) / std[keep]
    cov = (x.T @ x) / m
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:2]
    vecs = eigvecs[:, order]
    for c in range(2):
        lead = np.argmax(np.abs(vecs[:, c]))
        if vecs[lead, c] < 0:
            vecs[:, c] = -vecs[:, c]
    return x @ vecs, eigvals[order]


def psnr(I: np.ndarray, I_hat: np.ndarray, max_value: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 99 for a zero MSE."""
    I = np.asarray(I)
    I_hat = np.asarray(I_hat)
    if I.shape != I_hat.shape:
        raise ShapeError(f"image shapes differ: {I.shape} vs {I_hat.shape}")
    if max_value <= 0:
        raise ConfigError(f"max_value must be positive, got {max_value}")
    mse = float(np.mean((I.astype(np.float64) - I_hat.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    value = 10.0 * np.log10(max_value * max_value / mse)
    return float(min(value, PSNR_CAP_DB))


def ssim(I: np.ndarray, I_hat: np.ndarray) -> float:
    """Mean structural similarity over non-overlapping 7x7 windows.

    Expects (H, W) or (H, W, C) images with values in [0, 1] (dynamic
    range fixed at 1). Windows use uniform weighting and population
    moments; trailing rows/columns that do not fill a window are ignored,
    and channels are averaged.
    """
    I = np.asarray(I, dtype=np.float64)
    I_hat = np.asarray(I_hat, dtype=np.float64)
    if I.shape != I_hat.shape:
        raise ShapeError(f"image shapes differ: {I.shape} vs {I_hat.shape}")
    if I.ndim == 2:
        I = I[:, :, None]
        I_hat = I_hat[:, :, None]
    if I.ndim != 3:
        raise ShapeError(f"expected (H, W) or (H, W, C) images, got shape {I.shape}")
    H, W, C = I.shape
    win = SSIM_WINDOW
    if H < win or W < win:
        raise ConfigError(f"image {H}x{W} smaller than the {win}x{win} SSIM window")
    a, b = H // win, W // win
    x = I[: a * win, : b * win].reshape(a, win, b, win, C)
    y = I_hat[: a * win, : b * win].reshape(a, win, b, win, C)
    axes = (1, 3)
    mu_x = x.mean(axis=axes)
    mu_y = y.mean(axis=axes)
    var_x = (x * x).mean(axis=axes) - mu_x * mu_x
    var_y = (y * y).mean(axis=axes) - mu_y * mu_y
    cov = (x * y).mean(axis=axes) - mu_x * mu_y
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))
