"""Interference weight matrices.

Two constructions from the neighborhood literature are supported:

* k-nearest-neighbor weights: ``w_ij = 1/k`` when j is one of the k
  nearest neighbors of i (ties broken toward the smaller index), so
  every row sums to one by construction.
* inverse-distance weights with a percentile cutoff: ``w_ij = 1/d_ij``
  whenever ``d_ij`` is at or below the requested percentile of the
  pairwise distances (each unordered pair counted once).  This matrix
  is symmetric and is usually row-standardized before use.

The diagonal is always zero: no unit interferes with itself.
"""

from __future__ import annotations

import io
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .geocore import DistanceMatrix


@dataclass
class WeightMatrix:
    """A nonnegative weight matrix with zero diagonal.

    Attributes:
        matrix: (n, n) array of weights.
        scheme: short description of how it was built, e.g. "knn(k=4)".
        standardized: True when rows were rescaled to sum to one.
        isolated: indices of all-zero rows (units with no neighbors).
    """

    matrix: np.ndarray
    scheme: str = "custom"
    standardized: bool = False
    isolated: tuple[int, ...] = ()

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise InvalidArgumentError("weight matrix must be square")
        if not np.all(np.isfinite(m)):
            raise InvalidArgumentError("weights must be finite")
        if np.any(np.diag(m) != 0.0):
            raise InvalidArgumentError("weight matrix diagonal must be zero")
        if np.any(m < 0.0):
            raise InvalidArgumentError("weights must be nonnegative")
        self.matrix = m
        self.isolated = tuple(int(i) for i in np.flatnonzero(m.sum(axis=1) == 0.0))

    def __len__(self) -> int:
        return self.matrix.shape[0]


def knn_weights(d: DistanceMatrix, k: int) -> WeightMatrix:
    """Uniform weights over each unit's k nearest neighbors.

    Ties in distance are broken toward the smaller index.  Rows sum to
    one by construction (k entries of 1/k each).

    Args:
        d: pairwise distances.
        k: neighborhood size, 1 <= k < n.
    """
    n = len(d)
    if not 1 <= k < n:
        raise InvalidArgumentError(f"k must satisfy 1 <= k < n, got k={k}, n={n}")
    dist = d.values.copy()
    np.fill_diagonal(dist, np.inf)
    # Stable sort keeps the original (index) order among equal distances.
    order = np.argsort(dist, axis=1, kind="stable")
    w = np.zeros((n, n))
    rows = np.repeat(np.arange(n), k)
    cols = order[:, :k].ravel()
    w[rows, cols] = 1.0 / k
    return WeightMatrix(matrix=w, scheme=f"knn(k={k})", standardized=True)


def distance_weights(d: DistanceMatrix, percentile: float) -> WeightMatrix:
    """Inverse-distance weights truncated at a distance percentile.

    The cutoff is the given percentile of the off-diagonal distances
    with each unordered pair counted once; pairs at or below the cutoff
    get weight ``1/d_ij``.  The result is symmetric and NOT row
    standardized; apply :func:`row_standardize` for simulation use.

    Args:
        d: pairwise distances.
        percentile: fraction in (0, 1] of pairs to keep.
    """
    if not 0.0 < percentile <= 1.0:
        raise InvalidArgumentError("percentile must lie in (0, 1]")
    dist = d.values
    cutoff = float(np.percentile(d.offdiag(), 100.0 * percentile))
    with np.errstate(divide="ignore"):
        inv = np.where(dist > 0.0, 1.0 / np.where(dist > 0.0, dist, 1.0), 0.0)
    w = np.where((dist <= cutoff) & (dist > 0.0), inv, 0.0)
    np.fill_diagonal(w, 0.0)
    if not np.any(w):
        warnings.warn(
            f"distance cutoff {cutoff:.4g} leaves no neighbor pairs; weights are all zero",
            RuntimeWarning,
            stacklevel=2,
        )
    return WeightMatrix(matrix=w, scheme=f"distance(p={percentile:g})", standardized=False)


def row_standardize(w: WeightMatrix) -> WeightMatrix:
    """Rescale each row to sum to one; all-zero rows are left unchanged."""
    sums = w.matrix.sum(axis=1)
    safe = np.where(sums > 0.0, sums, 1.0)
    m = w.matrix / safe[:, None]
    return WeightMatrix(matrix=m, scheme=w.scheme, standardized=True)


def apply_weights(w: WeightMatrix, values: np.ndarray) -> np.ndarray:
    """Spatial lag ``W x``: each entry is the weighted sum over neighbors."""
    x = np.asarray(values, dtype=float)
    if x.shape[0] != len(w):
        raise InvalidArgumentError(
            f"field length {x.shape[0]} does not match weight matrix size {len(w)}"
        )
    return w.matrix @ x


def write_weight_csv(w: WeightMatrix, path) -> None:
    """Write the dense grid as CSV with a metadata comment line."""
    header = f"# scheme={w.scheme} standardized={w.standardized}"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        np.savetxt(fh, w.matrix, delimiter=",", fmt="%.17g")


def read_weight_csv(path) -> WeightMatrix:
    """Read a dense weight grid written by :func:`write_weight_csv`."""
    scheme = "custom"
    standardized = False
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    for line in text.splitlines():
        if line.startswith("#"):
            for token in line[1:].split():
                if token.startswith("scheme="):
                    scheme = token.split("=", 1)[1]
                elif token.startswith("standardized="):
                    standardized = token.split("=", 1)[1] == "True"
        else:
            break
    m = np.loadtxt(io.StringIO(text), delimiter=",", comments="#", ndmin=2)
    return WeightMatrix(matrix=m, scheme=scheme, standardized=standardized)
