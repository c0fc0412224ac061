"""Hypersphere projection, pairwise distances and distance histograms."""
import csv
import io
from dataclasses import dataclass

import numpy as np

from .exceptions import ShapeMismatch, ZeroVector

ZERO_NORM_THRESHOLD = 1e-12


def _as_matrix(x, name="features"):
    x = np.asarray(x)
    if x.ndim != 2:
        raise ShapeMismatch(f"{name} must be 2-D, got shape {x.shape}")
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    return x


def project_to_sphere(features):
    """Divide every row by its Euclidean norm.

    Raises
    ------
    ZeroVector
        If any row has norm below 1e-12.
    """
    x = _as_matrix(features)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    bad = np.flatnonzero(norms[:, 0] < ZERO_NORM_THRESHOLD)
    if bad.size:
        raise ZeroVector(f"rows {bad[:5].tolist()} have (near-)zero norm")
    return x / norms


def sphere_backward(raw, grad_unit):
    """Pull a gradient w.r.t. ``raw / ||raw||`` back to ``raw``.

    Applies the row-wise Jacobian ``(I - u u^T) / ||v||``, which removes
    the component of the gradient along each output direction.
    """
    raw = _as_matrix(raw)
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    unit = raw / norms
    radial = np.sum(unit * grad_unit, axis=1, keepdims=True)
    return (grad_unit - radial * unit) / norms


def pairwise_distances(batch):
    """Euclidean distance matrix between the rows of ``batch``.

    Uses the Gram-matrix identity and mirrors the strict upper triangle so
    the result is exactly symmetric with a zero diagonal.
    """
    x = _as_matrix(batch, "batch")
    if x.shape[0] < 2:
        raise ShapeMismatch("pairwise distances need at least 2 rows")
    sq = np.einsum("ij,ij->i", x, x)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d2, 0.0, out=d2)
    d = np.sqrt(d2)
    upper = np.triu(d, k=1)
    return upper + upper.T


def pairwise_distances_backward(batch, distances, grad_distances, min_distance=1e-12):
    """Gradient w.r.t. ``batch`` given a gradient on its distance matrix.

    ``grad_distances`` is read in full, so a gradient stored only on the
    upper triangle is handled the same way as a symmetric one. Pairs whose
    distance is below ``min_distance`` contribute nothing (the distance is
    not differentiable there).
    """
    x = _as_matrix(batch, "batch")
    g = np.asarray(grad_distances, dtype=x.dtype)
    g = g + g.T
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(distances > min_distance, g / distances, 0.0)
    np.fill_diagonal(w, 0.0)
    # d d_ij / d x_i = (x_i - x_j) / d_ij
    return w.sum(axis=1, keepdims=True) * x - w @ x


def upper_triangle(d):
    """Strict upper-triangle entries (i < j) in row-major order."""
    d = np.asarray(d)
    i, j = np.triu_indices(d.shape[0], k=1)
    return d[i, j]


def sample_uniform_sphere(n, dim, seed=None):
    """``n`` i.i.d. points uniform on the unit sphere in ``dim`` dimensions."""
    if n < 1 or dim < 2:
        raise ValueError("need n >= 1 and dim >= 2")
    rng = np.random.default_rng(seed)
    return project_to_sphere(rng.standard_normal((n, dim)))


@dataclass
class Histogram:
    bin_edges: np.ndarray
    counts: np.ndarray

    @property
    def total(self):
        return int(self.counts.sum())

    def to_csv(self, path=None):
        """Write ``bin_lo,bin_hi,count`` rows; returns the CSV text."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(self.bin_edges[:-1], self.bin_edges[1:], self.counts):
            writer.writerow([f"{lo:.17g}", f"{hi:.17g}", int(c)])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def distance_histogram(d, bins=50, range=(0.0, 2.0)):
    """Histogram of the strict upper triangle of a distance matrix.

    Values outside ``range`` are clamped into the first or last bin.
    """
    lo, hi = float(range[0]), float(range[1])
    if bins < 1 or not lo < hi:
        raise ValueError("need bins >= 1 and lo < hi")
    values = np.clip(upper_triangle(d), lo, hi)
    edges = np.linspace(lo, hi, bins + 1)
    counts, _ = np.histogram(values, bins=edges)
    return Histogram(bin_edges=edges, counts=counts.astype(np.int64))


def ks_statistic(a, b):
    """Two-sample Kolmogorov-Smirnov statistic ``sup_x |F_a(x) - F_b(x)|``."""
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("KS statistic needs two non-empty samples")
    grid = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, grid, side="right") / a.size
    cdf_b = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(cdf_a - cdf_b)))
