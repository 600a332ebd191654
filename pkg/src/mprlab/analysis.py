"""Post-hoc analysis over finished runs: metric aggregation across seeds,
joint-action heatmap monotonicity, and representation-geometry checks."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .distmath import classical_mds, pairwise_euclidean
from .orchestrator import read_representations_csv, select_mds_points


def load_metrics(run_dir) -> dict[str, np.ndarray]:
    with open(Path(run_dir) / "metrics.csv", newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    out: dict[str, np.ndarray] = {}
    for col in reader.fieldnames:
        out[col] = np.array([float(r[col]) for r in rows])
    return out


def load_summary(run_dir) -> dict:
    return json.loads((Path(run_dir) / "summary.json").read_text())


def final_test_reward_ma(run_dir) -> float:
    return float(load_summary(run_dir)["final_test_reward_ma"])


def aggregate_test_curves(run_dirs):
    """Align metrics across runs of one variant; returns (steps, mean, std)
    of the moving-average test reward."""
    curves = [load_metrics(d) for d in run_dirs]
    n = min(len(c["step"]) for c in curves)
    steps = curves[0]["step"][:n]
    for c in curves:
        if not np.array_equal(c["step"][:n], steps):
            raise ValueError("runs have misaligned evaluation steps")
    stacked = np.stack([c["test_reward_ma"][:n] for c in curves])
    return steps, stacked.mean(axis=0), stacked.std(axis=0)


def read_heatmap_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]])


def heatmap_monotonicity(matrices, min_frequency=0.01, skip_opponent_zero=True):
    """Fraction of eligible joint-action cells whose frequency changes
    monotonically across an ordered family of frequency matrices.

    Eligible cells keep ``min_frequency`` in every matrix; opponent action 0
    (the idle action) is excluded because its frequency tracks the deadzone
    rather than the threshold behavior.
    """
    stack = np.stack([np.asarray(m, dtype=np.float64) for m in matrices])
    if stack.ndim != 3 or stack.shape[0] < 3:
        raise ValueError("need >= 3 equally-shaped matrices in threshold order")
    eligible = np.all(stack >= min_frequency, axis=0)
    if skip_opponent_zero:
        eligible[:, 0] = False
    diffs = np.diff(stack, axis=0)
    monotone = np.all(diffs >= 0, axis=0) | np.all(diffs <= 0, axis=0)
    count = int(eligible.sum())
    if count == 0:
        raise ValueError("no eligible cells above the frequency floor")
    return float((monotone & eligible).sum() / count), count


def label_centroids(points: np.ndarray, labels: list[str]) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for lab in dict.fromkeys(labels):
        idx = [i for i, l in enumerate(labels) if l == lab]
        out[lab] = np.mean(points[idx], axis=0)
    return out


def projection_parameter(point: np.ndarray, anchor_a: np.ndarray, anchor_b: np.ndarray) -> float:
    """Scalar position of ``point`` projected onto the line a->b (0 at a,
    1 at b)."""
    axis = anchor_b - anchor_a
    denom = float(axis @ axis)
    if denom == 0:
        raise ValueError("anchors coincide")
    return float((point - anchor_a) @ axis / denom)


def push_test_centroid_between(run_dir, lower="d=0.3", upper="d=0.75", test="d=0.5",
                               last_steps=10) -> tuple[bool, float]:
    """Embed the final-steps representations with MDS and check that the
    held-out policy's centroid projects strictly between the two
    neighboring training policies' centroids."""
    rows = read_representations_csv(Path(run_dir) / "representations.csv")
    points, labels, _ = select_mds_points(rows, "per-step", last_steps=last_steps)
    coords = classical_mds(pairwise_euclidean(points), 2)
    centroids = label_centroids(coords, labels)
    for lab in (lower, upper, test):
        if lab not in centroids:
            raise ValueError(f"missing label {lab!r} in representations")
    t = projection_parameter(centroids[test], centroids[lower], centroids[upper])
    return 0.0 < t < 1.0, t


def keep_smallest_centroid_pair(run_dir, training_labels=None) -> tuple[tuple[str, str], dict]:
    """Among the training opponents' per-episode-mean representations,
    return the pair of labels with the smallest centroid distance."""
    rows = read_representations_csv(Path(run_dir) / "representations.csv")
    points, labels, _ = select_mds_points(rows, "per-episode-mean")
    if training_labels is not None:
        keep = [i for i, l in enumerate(labels) if l in training_labels]
        points = points[keep]
        labels = [labels[i] for i in keep]
    centroids = label_centroids(points, labels)
    names = sorted(centroids)
    dists = {}
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            dists[(a, b)] = float(np.linalg.norm(centroids[a] - centroids[b]))
    best = min(dists, key=dists.get)
    return best, dists
