"""Trainable affine dimensionality reduction, initialized by PCA.

The map is x' = (x - mean) @ axes.T with axes of shape (n_c, D).  At
initialization the rows are the top-n_c eigenvectors of the sample
covariance (orthonormal); both the mean and the axes are updated freely
during finetuning, so orthogonality is not preserved afterwards.
"""

from dataclasses import dataclass

import numpy as np

RANK_RTOL = 1e-10


@dataclass
class ProjectionParams:
    mean: np.ndarray   # (D,)
    axes: np.ndarray   # (n_c, D)


def pca_fit(samples, n_components):
    """Fit the projection to (N, D) samples.

    Uses the 1/(N-1) covariance and returns eigenvectors in descending
    eigenvalue order with a deterministic sign (largest-magnitude entry of
    each axis positive).  Raises if the data's effective rank is below
    ``n_components``.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise ValueError(f"expected (N, D) samples, got {samples.shape}")
    n, d = samples.shape
    if n_components > d:
        raise ValueError(f"n_components {n_components} > dimensionality {d}")
    if n <= n_components:
        raise ValueError(f"need more than {n_components} samples, got {n}")

    mean = samples.mean(axis=0)
    centered = samples - mean
    cov = centered.T @ centered / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    evecs = evecs[:, order]

    rank_floor = max(evals[0], 0.0) * RANK_RTOL
    effective_rank = int(np.sum(evals > rank_floor))
    if effective_rank < n_components:
        raise ValueError(
            f"rank deficiency: effective rank {effective_rank} < "
            f"requested {n_components} components")

    axes = evecs[:, :n_components].T.copy()
    for row in axes:
        pivot = np.argmax(np.abs(row))
        if row[pivot] < 0:
            row *= -1.0
    return ProjectionParams(mean, axes)


def project(x, params):
    """Apply the affine map along the last axis (per channel fiber)."""
    x = np.asarray(x, dtype=np.float64)
    d = params.mean.shape[0]
    if x.shape[-1] != d:
        raise ValueError(f"last axis {x.shape[-1]} != projection input dim {d}")
    return (x - params.mean) @ params.axes.T


def project_backward(upstream, x, params):
    """Adjoints of :func:`project` for the input, mean, and axes.

    ``upstream`` matches the projected output; fibers beyond the last axis
    are summed into the parameter gradients.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    n_c, d = params.axes.shape
    if upstream.shape != x.shape[:-1] + (n_c,):
        raise ValueError(
            f"upstream shape {upstream.shape} does not match input "
            f"{x.shape[:-1] + (n_c,)}")
    g = upstream.reshape(-1, n_c)
    centered = (x - params.mean).reshape(-1, d)
    grad_x = (g @ params.axes).reshape(x.shape)
    grad_axes = g.T @ centered
    grad_mean = -(g @ params.axes).sum(axis=0)
    return grad_x, grad_mean, grad_axes
