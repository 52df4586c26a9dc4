"""Nearest-code lookup, straight-through estimator, and the VQ loss.

The forward pass replaces each feature vector with its nearest code under
squared Euclidean distance (ties break toward the smaller index). The
loss has three terms: reconstruction, a codebook term pulling codes toward
features, and a commitment term pulling features toward codes; the last
two are means of the same squared difference but route gradients to
opposite sides. The backward pass here is hand-derived: the codebook term
reaches only the projector parameters of groups that actually received
assignments, and the straight-through estimator forwards reconstruction
gradients to the encoder unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codebook import GroupedCodebook, projector_backward
from .errors import ConfigError, ShapeError, StaleCodebookError
from .numerics import DEFAULT_DTYPE

__all__ = [
    "LossWeights",
    "LossBreakdown",
    "QuantizeResult",
    "nearest_code",
    "nearest_indices",
    "nearest_indices_naive",
    "quantize_featuremap",
    "ste_gradient",
    "vq_losses",
    "codebook_term_code_grads",
    "commitment_grad_z",
    "backward_codebook",
]


@dataclass(frozen=True)
class LossWeights:
    """Weights on the codebook term (beta) and commitment term (gamma)."""

    beta: float = 1.0
    gamma: float = 0.25

    def __post_init__(self):
        if self.beta < 0 or self.gamma < 0:
            raise ConfigError(f"loss weights must be >= 0, got beta={self.beta}, gamma={self.gamma}")


@dataclass(frozen=True)
class LossBreakdown:
    recon: float
    codebook_term: float
    commit_term: float
    total: float


@dataclass
class QuantizeResult:
    """Per-position lookup output for one feature map (or stacked batch).

    ``straight_through`` holds the same values as ``quantized``: the
    estimator's forward value is exactly the selected code, only its
    gradient behaves like the identity on the pre-quantization features.
    ``codebook_version`` records which codebook state produced the result.
    """

    indices: np.ndarray  # (h, w) int64, global code indices
    quantized: np.ndarray  # (h, w, d)
    straight_through: np.ndarray  # (h, w, d), equal values
    group_counts: np.ndarray  # (k,) int64
    codebook_version: int


def nearest_indices_naive(flat_z: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Reference lookup: explicit squared distances, no algebraic shortcut."""
    diffs = flat_z[:, None, :] - codes[None, :, :]
    d2 = np.sum(diffs * diffs, axis=2)
    return np.argmin(d2, axis=1)


def nearest_indices(flat_z: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Vectorized lookup via ||z||^2 - 2 z.q + ||q||^2; argmin ties go to
    the smallest index. Must agree with the naive route (tested)."""
    z2 = np.sum(flat_z * flat_z, axis=1, keepdims=True)
    q2 = np.sum(codes * codes, axis=1)
    d2 = z2 - 2.0 * (flat_z @ codes.T) + q2
    return np.argmin(d2, axis=1)


def nearest_code(z: np.ndarray, codebook: np.ndarray) -> tuple[int, np.ndarray]:
    """Index and row of the code closest to a single feature vector."""
    z = np.asarray(z)
    codebook = np.asarray(codebook)
    if codebook.ndim != 2 or codebook.shape[0] < 1:
        raise ConfigError(f"codebook must be a non-empty (n, d) matrix, got shape {codebook.shape}")
    if z.shape != (codebook.shape[1],):
        raise ShapeError(f"feature shape {z.shape} does not match code dim {codebook.shape[1]}")
    diffs = codebook - z
    d2 = np.sum(diffs * diffs, axis=1)
    idx = int(np.argmin(d2))
    return idx, codebook[idx].copy()


def quantize_featuremap(Z: np.ndarray, gc) -> QuantizeResult:
    """Quantize every position of an (h, w, d) feature map against the
    materialized codebook. A batch quantizes as one stacked (B*h, w, d) map;
    group counts then cover the whole batch."""
    Z = np.asarray(Z)
    if Z.ndim != 3:
        raise ShapeError(f"feature map must be (h, w, d), got shape {Z.shape}")
    if Z.shape[2] != gc.d:
        raise ShapeError(f"feature dim {Z.shape[2]} does not match codebook dim {gc.d}")
    codes = gc.materialize()
    h, w, d = Z.shape
    flat = Z.reshape(-1, d)
    idx = nearest_indices(flat, codes)
    quantized = codes[idx].reshape(h, w, d)
    group_ids = np.searchsorted(gc.offsets, idx, side="right") - 1
    counts = np.bincount(group_ids, minlength=gc.k).astype(np.int64)
    return QuantizeResult(
        indices=idx.reshape(h, w),
        quantized=quantized,
        straight_through=quantized,
        group_counts=counts,
        codebook_version=gc.version,
    )


def ste_gradient(upstream: np.ndarray) -> np.ndarray:
    """Straight-through backward: the upstream gradient passes to the
    pre-quantization features unchanged."""
    return upstream


def vq_losses(I, I_hat, Z, result: QuantizeResult, weights: LossWeights) -> LossBreakdown:
    """Three-term loss; every term is a mean over its tensor's elements.

    Stop-gradient routing lives in the backward ops: numerically the
    codebook and commitment terms are the same squared difference.
    """
    I = np.asarray(I)
    I_hat = np.asarray(I_hat)
    Z = np.asarray(Z)
    if I.shape != I_hat.shape:
        raise ShapeError(f"image shapes differ: {I.shape} vs {I_hat.shape}")
    if Z.shape != result.quantized.shape:
        raise ShapeError(f"feature shape {Z.shape} does not match quantized shape {result.quantized.shape}")
    recon = float(np.mean((I - I_hat) ** 2))
    gap = float(np.mean((result.quantized - Z) ** 2))
    codebook_term = gap
    commit_term = gap
    total = recon + weights.beta * codebook_term + weights.gamma * commit_term
    return LossBreakdown(recon=recon, codebook_term=codebook_term, commit_term=commit_term, total=total)


def codebook_term_code_grads(result: QuantizeResult, Z: np.ndarray, n: int, weights: LossWeights) -> np.ndarray:
    """Gradient of beta * codebook term w.r.t. every code row: rows that
    received no assignments get exactly-zero gradients."""
    d = Z.shape[-1]
    scale = 2.0 * weights.beta / Z.size
    diff = (result.quantized - Z).reshape(-1, d) * Z.dtype.type(scale)
    grads = np.zeros((n, d), dtype=Z.dtype)
    np.add.at(grads, result.indices.reshape(-1), diff)
    return grads


def commitment_grad_z(result: QuantizeResult, Z: np.ndarray, weights: LossWeights) -> np.ndarray:
    """Gradient of gamma * commitment term w.r.t. the features."""
    scale = 2.0 * weights.gamma / Z.size
    return (Z - result.quantized) * Z.dtype.type(scale)


def backward_codebook(
    result: QuantizeResult, Z: np.ndarray, gc: GroupedCodebook, weights: LossWeights
) -> dict[str, np.ndarray]:
    """Projector-parameter gradients of beta * codebook term, group by group.

    Each group's gradient accumulates only over positions assigned to that
    group, so groups with zero assignments receive exactly-zero gradients.
    Raises if the codebook changed since the result was produced.
    """
    if result.codebook_version != gc.version:
        raise StaleCodebookError(
            f"quantization was computed at codebook version {result.codebook_version}, "
            f"but the codebook is now at version {gc.version}"
        )
    code_grads = codebook_term_code_grads(result, Z, gc.n, weights)
    grads: dict[str, np.ndarray] = {}
    for j, g in enumerate(gc.groups):
        d_codes = code_grads[gc.offsets[j] : gc.offsets[j + 1]]
        for key, val in projector_backward(gc.variant, g.core, g.params, d_codes).items():
            grads[f"group{j}.{key}"] = val
    return grads
