"""Proximity matrix: how often each treated/control pair was matched.

The matrix is stored as integer counts together with the number of
replications that produced it. It can be rendered as a binary PGM image
(treated on rows, controls on columns, darker = matched more often) and
dumped as plain text.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .exceptions import DimensionMismatch


class AllZeroWarning(UserWarning):
    """Rendering a proximity matrix with no matches at all."""


@dataclass(frozen=True, eq=False)
class ProximityMatrix:
    counts: np.ndarray
    R: int

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2:
            raise DimensionMismatch("proximity counts must be a 2-D array")
        if counts.size and (counts.min() < 0 or counts.max() > self.R):
            raise ValueError("proximity counts must lie in [0, R]")
        object.__setattr__(self, "counts", counts.astype(np.int64))

    @property
    def shape(self):
        return self.counts.shape

    @property
    def n_T(self):
        return self.counts.shape[0]

    @property
    def n_C(self):
        return self.counts.shape[1]

    def __add__(self, other):
        if self.shape != other.shape:
            raise DimensionMismatch(f"cannot add {self.shape} and {other.shape} matrices")
        return ProximityMatrix(self.counts + other.counts, self.R + other.R)

    def __eq__(self, other):
        return (isinstance(other, ProximityMatrix) and self.R == other.R
                and np.array_equal(self.counts, other.counts))

    __hash__ = None


def accumulate(weights_list, shape=None):
    """Sum the match matrices of a list of replications.

    Entries may be :class:`~rrpmatch.rrp.MatchWeights` objects or dense 0/1
    arrays. ``shape`` is required only for an empty list.
    """
    weights_list = list(weights_list)
    if not weights_list:
        if shape is None:
            raise ValueError("cannot infer the shape of an empty accumulation")
        return ProximityMatrix(np.zeros(shape, np.int64), 0)
    first = weights_list[0]
    dims = (first.n_T, first.n_C) if hasattr(first, "blocks") else np.shape(first)
    if shape is not None and tuple(shape) != tuple(dims):
        raise DimensionMismatch(f"expected {tuple(shape)}, got {tuple(dims)}")
    counts = np.zeros(dims, np.int64)
    for w in weights_list:
        if hasattr(w, "blocks"):
            if (w.n_T, w.n_C) != tuple(dims):
                raise DimensionMismatch(f"expected {tuple(dims)}, got {(w.n_T, w.n_C)}")
            w.add_to(counts)
        else:
            w = np.asarray(w)
            if w.shape != tuple(dims):
                raise DimensionMismatch(f"expected {tuple(dims)}, got {w.shape}")
            counts += w.astype(np.int64)
    return ProximityMatrix(counts, len(weights_list))


def resample_columns(values, width):
    """Box-resample the columns of ``values`` to ``width`` bins.

    Source column ``j`` spans ``[j, j+1)`` and target bin ``b`` spans
    ``[b*n/width, (b+1)*n/width)``; every source column is split over the
    bins it overlaps in proportion to the overlap, so row sums are kept.
    """
    values = np.asarray(values, dtype=float)
    n = values.shape[1]
    width = int(width)
    if width < 1:
        raise ValueError("target width must be positive")
    if width == n:
        return values.copy()
    edges = np.arange(width + 1) * (n / width)
    M = np.zeros((n, width))
    for j in range(n):
        lo = np.searchsorted(edges, j, side="right") - 1
        hi = np.searchsorted(edges, j + 1, side="left")
        for b in range(max(lo, 0), min(hi, width)):
            overlap = min(j + 1, edges[b + 1]) - max(j, edges[b])
            if overlap > 0:
                M[j, b] = overlap
    return values @ M


def pixels(P, target_width=None):
    """Grayscale pixel array (uint8): 255 minus the count scaled by the global max."""
    values = np.asarray(P.counts, dtype=float)
    if target_width is not None:
        values = resample_columns(values, target_width)
    top = values.max() if values.size else 0.0
    if top <= 0:
        warnings.warn("proximity matrix has no matches; rendering a white image",
                      AllZeroWarning, stacklevel=2)
        return np.full(values.shape, 255, np.uint8)
    return (255 - np.rint(255.0 * values / top)).astype(np.uint8)


def encode_pgm(image):
    """Binary PGM (P5) bytes for a 2-D uint8 array."""
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + image.tobytes()


def render(P, out_path, target_width=None):
    """Write ``P`` as a binary PGM image and return the pixel array."""
    image = pixels(P, target_width)
    with open(out_path, "wb") as fh:
        fh.write(encode_pgm(image))
    return image


def read_pgm(path):
    """Read a binary PGM written by :func:`render`."""
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM file")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError("only 8-bit PGM files are supported")
    raw = parts[4] if len(parts) > 4 else b""
    return np.frombuffer(raw[: w * h], dtype=np.uint8).reshape(h, w)


@dataclass(frozen=True)
class RowQuality:
    nonzero: np.ndarray
    max_count: np.ndarray
    max_share: np.ndarray
    covered_fraction: float


def row_quality(P):
    """Per-treated summary: matched-control count, highest count and its share of R."""
    counts = P.counts
    nonzero = (counts > 0).sum(axis=1)
    max_count = counts.max(axis=1) if counts.shape[1] else np.zeros(counts.shape[0], np.int64)
    share = max_count / P.R if P.R else np.zeros(len(max_count))
    covered = float((nonzero > 0).mean()) if len(nonzero) else 0.0
    return RowQuality(nonzero, max_count, share, covered)


def dump_text(P, path):
    """Plain-text matrix: one row per treated, space-separated integer counts."""
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(f"# R={P.R}\n")
        for row in P.counts:
            fh.write(" ".join(str(int(v)) for v in row) + "\n")


def load_text(path):
    R = None
    rows = []
    with open(path, encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if line.startswith("#"):
                R = int(line.split("=", 1)[1])
            elif line:
                rows.append([int(v) for v in line.split()])
    counts = np.array(rows, dtype=np.int64)
    if R is None:
        R = int(counts.max()) if counts.size else 0
    return ProximityMatrix(counts, R)
