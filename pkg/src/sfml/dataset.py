"""Pairwise training set and per-epoch nearest-neighbour batch resampling."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from sfml import _io

BRUTE_FORCE_LIMIT = 100_000


class PairStore:
    """All one-step pairs ``(x0, x1)`` of a trajectory set.

    Pairs are stored trajectory-major, step-minor, so pair ``i * L + n`` is
    ``(states[i, n], states[i, n + 1])``. The store is read-only after
    construction; ``x0`` and ``x1`` are non-writeable arrays.
    """

    def __init__(self, x0, x1, dt, n_traj=None, length=None, seed=0):
        x0 = np.array(x0, dtype=np.float64, ndmin=2)
        x1 = np.array(x1, dtype=np.float64, ndmin=2)
        if x0.shape != x1.shape:
            raise ValueError(f"x0 {x0.shape} and x1 {x1.shape} differ in shape")
        if x0.shape[0] == 0:
            raise ValueError("empty pair store")
        x0.flags.writeable = False
        x1.flags.writeable = False
        self.x0 = x0
        self.x1 = x1
        self.dt = float(dt)
        self.n_traj = n_traj if n_traj is not None else x0.shape[0]
        self.length = length if length is not None else 1
        self.seed = seed
        self._tree = None

    def __len__(self):
        return self.x0.shape[0]

    @property
    def dim(self):
        return self.x0.shape[1]

    @property
    def tree(self):
        if self._tree is None:
            self._tree = cKDTree(self.x0)
        return self._tree

    def subset(self, idx):
        return PairStore(self.x0[idx], self.x1[idx], self.dt, seed=self.seed)

    def to_trajectories(self):
        """Undo :func:`build_pairs`; only valid for stores built from trajectories."""
        if self.n_traj * self.length != len(self):
            raise ValueError("store was not built from whole trajectories")
        a = self.x0.reshape(self.n_traj, self.length, self.dim)
        last = self.x1.reshape(self.n_traj, self.length, self.dim)[:, -1:]
        return np.concatenate([a, last], axis=1)

    def save(self, path):
        payload = np.stack([self.x0, self.x1], axis=1)
        _io.write_container(path, _io.PAIR, self.n_traj, self.length, self.dim, self.dt, self.seed, payload)

    @classmethod
    def load(cls, path):
        rec = _io.read_container(path)
        if rec.kind != _io.PAIR:
            raise ValueError(f"{path} holds {rec.kind!r} records, not pairs")
        p = rec.payload.reshape(-1, 2, rec.dim)
        return cls(p[:, 0], p[:, 1], rec.dt, rec.n_traj, rec.length, rec.seed)


def build_pairs(data):
    """Re-arrange a :class:`~sfml.sde.TrajectoryDataset` into ``M = N_T L`` pairs."""
    s = data.states
    if s.size == 0 or s.shape[1] < 2:
        raise ValueError("dataset has no consecutive states")
    n, l1, d = s.shape
    x0 = s[:, :-1].reshape(-1, d)
    x1 = s[:, 1:].reshape(-1, d)
    return PairStore(x0, x1, data.dt, n_traj=n, length=l1 - 1, seed=data.seed)


def _order_with_ties(cand, d2, k):
    order = np.lexsort((cand, d2))
    return cand[order[:k]]


def knn_query(store, anchor, k, brute=None):
    """Indices of the ``k`` stored ``x0`` closest to ``anchor``.

    Sorted by Euclidean distance, ties broken by the lower index. ``brute``
    forces exhaustive search; by default it is used for stores of at most
    ``BRUTE_FORCE_LIMIT`` points and a k-d tree above that.
    """
    m = len(store)
    if k < 1 or k > m:
        raise ValueError(f"k={k} must be in [1, {m}]")
    anchor = np.asarray(anchor, dtype=np.float64).reshape(-1)
    if anchor.shape != (store.dim,):
        raise ValueError(f"anchor has length {anchor.size}, expected {store.dim}")
    if brute is None:
        brute = m <= BRUTE_FORCE_LIMIT

    if brute:
        d2 = np.sum((store.x0 - anchor) ** 2, axis=1)
        if k == m:
            cand = np.arange(m)
        else:
            kth = np.partition(d2, k - 1)[k - 1]
            cand = np.flatnonzero(d2 <= kth)
        return _order_with_ties(cand, d2[cand], k)

    dist, idx = store.tree.query(anchor, k=k)
    idx = np.atleast_1d(idx)
    radius = np.atleast_1d(dist)[-1]
    # pull in every point tied with the k-th so the index rule can apply
    ring = store.tree.query_ball_point(anchor, radius * (1 + 1e-12) + 1e-300)
    cand = np.union1d(idx, np.asarray(ring, dtype=np.intp))
    d2 = np.sum((store.x0[cand] - anchor) ** 2, axis=1)
    return _order_with_ties(cand, d2, k)


@dataclass
class BatchPlan:
    batches: list
    epoch: int = 0
    seed: int = 0
    anchors: np.ndarray = field(default=None, repr=False)

    def __len__(self):
        return len(self.batches)

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["batch_id", "member_index"])
            for b, members in enumerate(self.batches):
                for i in members:
                    w.writerow([b, int(i)])


def resample_batches(store, n_batches, batch_size, epoch_seed, epoch=0, brute=None):
    """Draw ``n_batches`` anchors and grow each into a ``batch_size``-point kNN batch.

    Anchors are drawn uniformly without replacement. Each batch holds the
    anchor first and then its ``batch_size - 1`` nearest ``x0`` neighbours,
    with no duplicates; different batches may overlap.
    """
    m = len(store)
    if batch_size > m:
        raise ValueError(f"batch size {batch_size} exceeds store size {m}")
    if n_batches < 1:
        raise ValueError("n_batches must be >= 1")
    if n_batches > m:
        raise ValueError(f"cannot draw {n_batches} distinct anchors from {m} pairs")
    rng = np.random.default_rng(epoch_seed)
    anchors = rng.choice(m, size=n_batches, replace=False)
    batches = []
    for a in anchors:
        nn = knn_query(store, store.x0[a], batch_size, brute=brute)
        rest = nn[nn != a][: batch_size - 1]
        batches.append(np.concatenate([[a], rest]).astype(np.intp))
    return BatchPlan(batches, epoch=epoch, seed=epoch_seed, anchors=anchors)


def epoch_seed(global_seed, epoch):
    """Per-epoch seed derived from the run seed; distinct epochs give distinct seeds."""
    return int(np.random.SeedSequence([int(global_seed), int(epoch)]).generate_state(1, np.uint64)[0])
