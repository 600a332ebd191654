"""Empirical joint-action distributions and distances between them.

Discrete case: frequency tables over (ego action, opponent joint action)
cells compared with symmetric KL divergence. Continuous case: raw sample
sets compared with sliced Wasserstein distance (random 1-D projections of
the exact 1-D Wasserstein distance). Classical MDS embeds the resulting
distance matrices for visualization.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "JointActionSample",
    "FrequencyTable",
    "SampleSet",
    "ProjectionSet",
    "PolicyDistanceMatrix",
    "build_frequency_table",
    "symmetric_kl",
    "wasserstein_1d",
    "sliced_wasserstein",
    "build_distance_matrix",
    "classical_mds",
]


@dataclass(frozen=True, eq=False)
class JointActionSample:
    """One (ego action, opponent joint action) pair observed in an episode.

    Discrete actions are integer indices; continuous actions are 1-D real
    vectors. ``policy_label`` indexes the opponent policy the pair was
    sampled against.
    """

    ego_action: int | np.ndarray
    opp_action: tuple[int, ...] | np.ndarray
    policy_label: int

    def is_discrete(self) -> bool:
        return isinstance(self.ego_action, (int, np.integer))


class FrequencyTable:
    """Empirical distribution of discrete joint actions with additive smoothing.

    ``counts`` has one axis per agent, ego first: shape
    ``(ego_size, opp1_size, ..., oppN_size)``, row-major cell order.
    Probabilities use the smoothed estimator
    ``(count + smoothing) / (total + smoothing * num_cells)`` while
    ``frequencies`` are the raw ``count / total`` values.
    """

    def __init__(self, counts: np.ndarray, smoothing: float = 0.0):
        counts = np.asarray(counts)
        if counts.ndim < 2:
            raise ValueError("counts must have one axis per agent (ego first)")
        if np.any(counts < 0):
            raise ValueError("counts must be non-negative")
        if smoothing < 0:
            raise ValueError("smoothing must be non-negative")
        self.counts = counts.astype(np.int64)
        self.smoothing = float(smoothing)
        self.total = int(self.counts.sum())
        if self.total <= 0:
            raise ValueError("frequency table needs at least one sample")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.counts.shape

    @property
    def num_cells(self) -> int:
        return self.counts.size

    def probabilities(self) -> np.ndarray:
        """Smoothed probabilities, summing to 1 over all cells."""
        denom = self.total + self.smoothing * self.num_cells
        return (self.counts + self.smoothing) / denom

    def probability(self, cell: tuple[int, ...]) -> float:
        return float(self.probabilities()[cell])

    def frequencies(self) -> np.ndarray:
        """Raw sampled frequencies (no smoothing), summing to 1."""
        return self.counts / self.total

    def ego_by_opponent(self) -> np.ndarray:
        """Raw frequencies as a 2-D (ego action x flattened opponent joint
        action) matrix, row-major over the opponent axes."""
        return self.frequencies().reshape(self.shape[0], -1)

    def to_csv(self, path) -> None:
        """Write the ego-by-opponent frequency matrix; header row holds the
        flattened opponent joint-action indices."""
        mat = self.ego_by_opponent()
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["ego_action"] + [f"opp_{j}" for j in range(mat.shape[1])])
            for i, row in enumerate(mat):
                writer.writerow([i] + [repr(float(v)) for v in row])


@dataclass(frozen=True, eq=False)
class SampleSet:
    """Set of continuous joint-action samples, one fixed-width row per pair."""

    points: np.ndarray
    dimension: int = field(default=0)

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "dimension", pts.shape[1])
        if not np.all(np.isfinite(pts)):
            raise ValueError("sample points must be finite")

    def __len__(self) -> int:
        return self.points.shape[0]


class ProjectionSet:
    """Fixed set of unit direction vectors for sliced projections.

    Directions are drawn by normalizing standard Gaussian vectors, which is
    uniform on the unit sphere. The seed is retained so a distance computed
    against this set is reproducible.
    """

    def __init__(self, directions: np.ndarray, seed: int | None = None):
        directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
        norms = np.linalg.norm(directions, axis=1)
        if directions.shape[0] == 0:
            raise ValueError("projection set must be non-empty")
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("projection directions must be unit vectors")
        self.directions = directions
        self.seed = seed

    @property
    def dimension(self) -> int:
        return self.directions.shape[1]

    def __len__(self) -> int:
        return self.directions.shape[0]

    @classmethod
    def generate(cls, dimension: int, count: int, seed: int) -> "ProjectionSet":
        rng = np.random.default_rng(seed)
        dirs = rng.standard_normal((count, dimension))
        norms = np.linalg.norm(dirs, axis=1, keepdims=True)
        # A zero draw is astronomically unlikely; resample defensively anyway.
        while np.any(norms < 1e-12):
            bad = norms[:, 0] < 1e-12
            dirs[bad] = rng.standard_normal((int(bad.sum()), dimension))
            norms = np.linalg.norm(dirs, axis=1, keepdims=True)
        return cls(dirs / norms, seed=seed)


class PolicyDistanceMatrix:
    """Symmetric matrix of estimated distances between opponent policies."""

    def __init__(self, values: np.ndarray, labels: list[str]):
        values = np.asarray(values, dtype=np.float64)
        n = values.shape[0]
        if values.shape != (n, n) or n != len(labels):
            raise ValueError("values must be square and match the label count")
        if np.any(np.abs(values - values.T) > 1e-9):
            raise ValueError("distance matrix must be symmetric")
        if np.any(np.abs(np.diag(values)) > 1e-12):
            raise ValueError("distance matrix must have a zero diagonal")
        if np.any(values < 0):
            raise ValueError("distances must be non-negative")
        self.values = 0.5 * (values + values.T)
        np.fill_diagonal(self.values, 0.0)
        self.labels = list(labels)

    def __getitem__(self, ij: tuple[int, int]) -> float:
        return float(self.values[ij])

    @property
    def size(self) -> int:
        return len(self.labels)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["label"] + self.labels)
            for label, row in zip(self.labels, self.values):
                writer.writerow([label] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path) -> "PolicyDistanceMatrix":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        labels = rows[0][1:]
        values = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
        return cls(values, labels)


def build_frequency_table(
    samples: list[JointActionSample],
    action_space_sizes: tuple[int, ...],
    smoothing: float = 0.0,
) -> FrequencyTable:
    """Count discrete joint-action pairs into a table over the full cell grid.

    ``action_space_sizes`` is ``(ego_size, opp1_size, ..., oppN_size)``.
    """
    if not samples:
        raise ValueError("cannot build a frequency table from zero samples")
    sizes = tuple(int(s) for s in action_space_sizes)
    counts = np.zeros(sizes, dtype=np.int64)
    for s in samples:
        if not s.is_discrete():
            raise ValueError("frequency tables require discrete actions")
        opp = s.opp_action if isinstance(s.opp_action, tuple) else (int(s.opp_action),)
        cell = (int(s.ego_action),) + tuple(int(a) for a in opp)
        if len(cell) != len(sizes):
            raise ValueError(f"sample arity {len(cell)} does not match spaces {sizes}")
        for idx, size in zip(cell, sizes):
            if not 0 <= idx < size:
                raise ValueError(f"action index {idx} out of range for size {size}")
        counts[cell] += 1
    return FrequencyTable(counts, smoothing=smoothing)


def symmetric_kl(p: FrequencyTable, q: FrequencyTable) -> float:
    """Symmetrized KL divergence ``KL(p||q) + KL(q||p)`` in nats.

    Both tables must share the same cell grid. Cells where one table is zero
    and the other positive make the divergence infinite; smooth the tables
    (``smoothing > 0``) to avoid this. Cells where both are zero contribute
    nothing.
    """
    if p.shape != q.shape:
        raise ValueError(f"cell grids differ: {p.shape} vs {q.shape}")
    pp = p.probabilities().ravel()
    qq = q.probabilities().ravel()
    one_sided = (pp == 0) ^ (qq == 0)
    if np.any(one_sided):
        raise ValueError(
            "a zero-probability cell is paired with a positive one; "
            "rebuild the tables with smoothing > 0"
        )
    both = (pp > 0) & (qq > 0)
    pp, qq = pp[both], qq[both]
    logratio = np.log(pp) - np.log(qq)
    return float(np.sum(pp * logratio) + np.sum(qq * -logratio))


def wasserstein_1d(x, y) -> float:
    """Exact 1-D Wasserstein-1 distance between two empirical distributions.

    Sorts both samples and integrates the absolute difference of the inverse
    CDFs. For equal sizes this reduces to the mean absolute difference of
    the sorted values.
    """
    x = np.sort(np.asarray(x, dtype=np.float64).ravel())
    y = np.sort(np.asarray(y, dtype=np.float64).ravel())
    n, m = len(x), len(y)
    if n == 0 or m == 0:
        raise ValueError("wasserstein_1d requires non-empty samples")
    if n == m:
        return float(np.mean(np.abs(x - y)))
    # The inverse-CDF difference is piecewise constant between the merged
    # quantile breakpoints i/n and j/m; integrate it segment by segment.
    qs = np.union1d(np.arange(1, n) / n, np.arange(1, m) / m)
    edges = np.concatenate(([0.0], qs, [1.0]))
    mids = 0.5 * (edges[:-1] + edges[1:])
    xi = np.minimum((mids * n).astype(np.int64), n - 1)
    yi = np.minimum((mids * m).astype(np.int64), m - 1)
    widths = np.diff(edges)
    return float(np.sum(widths * np.abs(x[xi] - y[yi])))


def sliced_wasserstein(x: SampleSet, y: SampleSet, projections: ProjectionSet) -> float:
    """Average 1-D Wasserstein distance over the given projection directions.

    Deterministic for a fixed :class:`ProjectionSet`.
    """
    if x.dimension != y.dimension or x.dimension != projections.dimension:
        raise ValueError(
            f"dimension mismatch: x={x.dimension} y={y.dimension} "
            f"projections={projections.dimension}"
        )
    if len(x) == 0 or len(y) == 0:
        raise ValueError("sample sets must be non-empty")
    px = x.points @ projections.directions.T  # (n, num_proj)
    py = y.points @ projections.directions.T
    px = np.sort(px, axis=0)
    py = np.sort(py, axis=0)
    if len(x) == len(y):
        return float(np.mean(np.abs(px - py)))
    return float(np.mean([wasserstein_1d(px[:, k], py[:, k]) for k in range(len(projections))]))


def build_distance_matrix(
    distributions: dict[str, FrequencyTable] | dict[str, SampleSet],
    mode: str,
    projections: ProjectionSet | None = None,
) -> PolicyDistanceMatrix:
    """Pairwise policy distances over a labeled family of distributions.

    ``mode`` is ``"kl"`` for frequency tables or ``"sliced_wasserstein"``
    for sample sets; mixing the two kinds is an error.
    """
    labels = list(distributions.keys())
    if len(labels) < 2:
        raise ValueError("need at least two labeled distributions")
    values = list(distributions.values())
    if mode == "kl":
        if not all(isinstance(d, FrequencyTable) for d in values):
            raise ValueError("kl mode requires FrequencyTable inputs")
        metric = symmetric_kl
    elif mode == "sliced_wasserstein":
        if not all(isinstance(d, SampleSet) for d in values):
            raise ValueError("sliced_wasserstein mode requires SampleSet inputs")
        if projections is None:
            raise ValueError("sliced_wasserstein mode requires a ProjectionSet")
        metric = lambda a, b: sliced_wasserstein(a, b, projections)  # noqa: E731
    else:
        raise ValueError(f"unknown mode {mode!r}")
    n = len(labels)
    mat = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d = metric(distributions[labels[i]], distributions[labels[j]])
            mat[i, j] = mat[j, i] = d
    return PolicyDistanceMatrix(mat, labels)


def classical_mds(
    distances: np.ndarray | PolicyDistanceMatrix,
    out_dim: int,
    negative_mass_warn: float = 0.1,
) -> np.ndarray:
    """Embed a distance matrix into ``out_dim`` coordinates (Torgerson MDS).

    Double-centers the squared distances and keeps the top eigenpairs. The
    output is centered at the origin and recovers the input distances in the
    least-squares sense; negative eigenvalue mass beyond
    ``negative_mass_warn`` (as a fraction of positive mass) triggers a
    warning because the distances are then not Euclidean in ``out_dim``.
    """
    if isinstance(distances, PolicyDistanceMatrix):
        d = distances.values
    else:
        d = np.asarray(distances, dtype=np.float64)
    n = d.shape[0]
    if d.shape != (n, n):
        raise ValueError("distance matrix must be square")
    if np.any(np.abs(d - d.T) > 1e-9) or np.any(np.abs(np.diag(d)) > 1e-9):
        raise ValueError("distance matrix must be symmetric with zero diagonal")
    if out_dim < 1:
        raise ValueError("out_dim must be >= 1")
    center = np.eye(n) - np.ones((n, n)) / n
    b = -0.5 * center @ (d ** 2) @ center
    evals, evecs = np.linalg.eigh(b)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    pos = np.clip(evals, 0.0, None)
    neg_mass = float(np.sum(np.abs(evals[evals < 0])))
    pos_mass = float(np.sum(pos))
    if pos_mass > 0 and neg_mass > negative_mass_warn * pos_mass:
        warnings.warn(
            f"distance matrix is far from Euclidean: negative eigenvalue mass "
            f"{neg_mass:.3g} vs positive {pos_mass:.3g}",
            stacklevel=2,
        )
    coords = evecs[:, :out_dim] * np.sqrt(pos[:out_dim])
    return coords - coords.mean(axis=0, keepdims=True)


def pairwise_euclidean(points: np.ndarray) -> np.ndarray:
    """Dense pairwise L2 distance matrix (zero diagonal, symmetric)."""
    pts = np.asarray(points, dtype=np.float64)
    sq = np.sum(pts ** 2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * pts @ pts.T
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(np.clip(d2, 0.0, None))
