"""Pooling and PCA-based compression of token matrices.

A token matrix (l tokens x d_hidden) collapses to a fixed-size vector through
one of: mean pooling, per-matrix PCA projection plus averaging, last-token
selection, or axis-configurable compression (sequence axis or hidden axis).
All transforms are pure and deterministic; the eigenvector sign convention
(largest-magnitude coordinate positive) makes repeated fits bit-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (
    ConfigError,
    DataError,
    DegenerateVarianceError,
    DimensionMismatchError,
    InsufficientTokensError,
)

DEFAULT_HIDDEN_COMPONENTS = 128
DEFAULT_SEQUENCE_COMPONENTS = 1

POOLING_STRATEGIES = (
    "mean",
    "pca_mean",
    "last_token",
    "dimred_sequence",
    "dimred_hidden",
    "hybrid_concat",
)


@dataclass(frozen=True)
class PCAModel:
    """Fitted mean, orthonormal projection columns, and their eigenvalues."""

    mean: np.ndarray          # (f,)
    components: np.ndarray    # (f, n_components), orthonormal columns
    eigenvalues: np.ndarray   # (n_components,), non-increasing, >= 0
    n_samples_fit: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "mean": self.mean.tolist(),
                "components": self.components.tolist(),
                "eigenvalues": self.eigenvalues.tolist(),
                "n_samples_fit": self.n_samples_fit,
            }
        )

    @classmethod
    def from_json(cls, payload: str | dict) -> "PCAModel":
        obj = json.loads(payload) if isinstance(payload, str) else payload
        return cls(
            mean=np.asarray(obj["mean"], dtype=np.float64),
            components=np.asarray(obj["components"], dtype=np.float64),
            eigenvalues=np.asarray(obj["eigenvalues"], dtype=np.float64),
            n_samples_fit=int(obj["n_samples_fit"]),
        )


@dataclass(frozen=True)
class DimRedConfig:
    """Axis and component count for compression.

    ``n_components=None`` resolves to the per-axis default: 1 for the sequence
    axis, 128 for the hidden axis. Sequence-axis compression is inherently
    per-chunk (its feature axis is token position); hidden-axis compression
    defaults to per-chunk with an optional dataset-level scope fitted on
    stacked pooled vectors.
    """

    axis: str  # "sequence" | "hidden"
    n_components: Optional[int] = None
    fit_scope: str = "per_chunk"  # "per_chunk" | "dataset"

    def __post_init__(self) -> None:
        if self.axis not in ("sequence", "hidden"):
            raise ConfigError(f"unknown DimRed axis {self.axis!r}")
        if self.fit_scope not in ("per_chunk", "dataset"):
            raise ConfigError(f"unknown fit scope {self.fit_scope!r}")
        if self.axis == "sequence" and self.fit_scope != "per_chunk":
            raise ConfigError("sequence-axis DimRed requires per_chunk fit scope")
        if self.n_components is not None and self.n_components < 1:
            raise ConfigError("n_components must be positive")

    @property
    def resolved_components(self) -> int:
        if self.n_components is not None:
            return self.n_components
        return (
            DEFAULT_SEQUENCE_COMPONENTS
            if self.axis == "sequence"
            else DEFAULT_HIDDEN_COMPONENTS
        )


@dataclass(frozen=True)
class PooledVector:
    values: np.ndarray
    strategy: str

    def __post_init__(self) -> None:
        if self.strategy not in POOLING_STRATEGIES:
            raise ConfigError(f"unknown pooling strategy {self.strategy!r}")

    def __len__(self) -> int:
        return int(self.values.shape[0])


def _as_matrix(m: np.ndarray, what: str = "token matrix") -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise DataError(f"{what} must be a non-empty 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise DataError(f"{what} contains non-finite values")
    return m


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------

def _apply_sign_convention(components: np.ndarray) -> np.ndarray:
    for j in range(components.shape[1]):
        col = components[:, j]
        if col[int(np.argmax(np.abs(col)))] < 0:
            components[:, j] = -col
    return components


def pca_fit(data: np.ndarray, n_components: int) -> PCAModel:
    """Fit principal components of an (s samples x f features) matrix.

    Uses the sample covariance T = centered^T centered / (s - 1). When the
    matrix is wide (s < f) the eigenpairs come from the s x s Gram matrix,
    which has the same nonzero spectrum; results are identical to the direct
    covariance decomposition.
    """
    data = _as_matrix(data, "pca input")
    s, f = data.shape
    if s < 2:
        raise DataError(f"pca_fit needs at least 2 samples (covariance uses s-1), got {s}")
    max_components = min(s - 1, f)
    if not 1 <= n_components <= max_components:
        raise ConfigError(
            f"n_components={n_components} out of range [1, {max_components}] "
            f"for shape ({s}, {f})"
        )

    mean = data.mean(axis=0)
    centered = data - mean

    if s >= f:
        cov = centered.T @ centered / (s - 1)
        eigenvalues, eigenvectors = np.linalg.eigh(cov)
        order = np.argsort(eigenvalues)[::-1][:n_components]
        top_values = eigenvalues[order]
        components = eigenvectors[:, order].copy()
    else:
        gram = centered @ centered.T / (s - 1)
        eigenvalues, eigenvectors = np.linalg.eigh(gram)
        order = np.argsort(eigenvalues)[::-1][:n_components]
        top_values = eigenvalues[order]
        scale = np.max(np.abs(top_values)) if top_values.size else 0.0
        if top_values.size and top_values[-1] <= max(scale, 1.0) * 1e-12:
            # Rank-deficient inside the requested components: the Gram route
            # cannot recover those directions, so fall back to the covariance.
            cov = centered.T @ centered / (s - 1)
            eigenvalues, eigenvectors = np.linalg.eigh(cov)
            order = np.argsort(eigenvalues)[::-1][:n_components]
            top_values = eigenvalues[order]
            components = eigenvectors[:, order].copy()
        else:
            dual = eigenvectors[:, order]
            components = centered.T @ dual
            norms = np.linalg.norm(components, axis=0)
            components = components / norms

    components = _apply_sign_convention(components)
    return PCAModel(
        mean=mean,
        components=components,
        eigenvalues=np.maximum(top_values, 0.0),
        n_samples_fit=s,
    )


def pca_project(model: PCAModel, data: np.ndarray) -> np.ndarray:
    """Project rows into the fitted component space: (data - mean) @ W."""
    data = _as_matrix(data, "projection input")
    if data.shape[1] != model.mean.shape[0]:
        raise DimensionMismatchError(
            f"data has {data.shape[1]} features, model expects {model.mean.shape[0]}"
        )
    return (data - model.mean) @ model.components


def _check_not_degenerate(data: np.ndarray) -> None:
    centered = data - data.mean(axis=0)
    total_variance = float(np.sum(centered * centered)) / (data.shape[0] - 1)
    scale = max(1.0, float(np.mean(data * data)))
    if total_variance <= 1e-12 * scale:
        raise DegenerateVarianceError(
            "input has zero variance; principal directions are undefined"
        )


# ---------------------------------------------------------------------------
# Pooling strategies
# ---------------------------------------------------------------------------

def mean_pool(m: np.ndarray) -> PooledVector:
    """Average over the token axis; output length d_hidden."""
    m = _as_matrix(m)
    return PooledVector(values=m.mean(axis=0), strategy="mean")


def select_last_token(m: np.ndarray) -> PooledVector:
    """The final token row as a compact whole-chunk summary."""
    m = _as_matrix(m)
    return PooledVector(values=m[-1].copy(), strategy="last_token")


def pool_pca_mean(m: np.ndarray, n_components: int) -> PooledVector:
    """Per-matrix PCA projection averaged over tokens; output length n_components.

    The projection centers the rows, so the row mean of the projected scores
    is zero by construction; this strategy is kept for parity with the
    hidden-axis compression it defines.
    """
    m = _as_matrix(m)
    if m.shape[0] < 2:
        raise InsufficientTokensError(
            f"pca pooling needs at least 2 token rows, got {m.shape[0]}"
        )
    _check_not_degenerate(m)
    model = pca_fit(m, n_components)
    projected = pca_project(model, m)
    return PooledVector(values=projected.mean(axis=0), strategy="pca_mean")


def dimred(m: np.ndarray, cfg: DimRedConfig) -> PooledVector:
    """Axis-configurable compression of one token matrix.

    hidden axis: PCA over rows=tokens, features=dims; output is the mean of
    the projected rows (length n_components, identical to pool_pca_mean).

    sequence axis: PCA over the transposed matrix (samples are the d_hidden
    per-dimension profiles, features are token positions). With one component
    the output is the full score column (length d_hidden), a token-axis
    compression of the sequence; with more components the projected rows are
    averaged (length n_components).
    """
    m = _as_matrix(m)
    l, d = m.shape
    n = cfg.resolved_components

    if cfg.axis == "hidden":
        if l < 2:
            raise InsufficientTokensError(
                f"hidden-axis compression needs at least 2 tokens, got {l}"
            )
        if n > min(l - 1, d):
            raise ConfigError(
                f"n_components={n} out of range [1, {min(l - 1, d)}] for a "
                f"{l}x{d} matrix on the hidden axis"
            )
        pooled = pool_pca_mean(m, n)
        return PooledVector(values=pooled.values, strategy="dimred_hidden")

    if d < 2:
        raise DataError("sequence-axis compression needs d_hidden >= 2")
    if n > min(d - 1, l):
        raise ConfigError(
            f"n_components={n} out of range [1, {min(d - 1, l)}] for a "
            f"{l}x{d} matrix on the sequence axis"
        )
    profiles = m.T  # d_hidden rows, one per-dimension profile across positions
    _check_not_degenerate(profiles)
    model = pca_fit(profiles, n)
    projected = pca_project(model, profiles)
    if n == 1:
        values = projected[:, 0].copy()
    else:
        values = projected.mean(axis=0)
    return PooledVector(values=values, strategy="dimred_sequence")


def hybrid_concat(a: PooledVector, b: PooledVector) -> PooledVector:
    """Concatenate two pooled vectors; lengths add."""
    return PooledVector(
        values=np.concatenate([a.values, b.values]), strategy="hybrid_concat"
    )
