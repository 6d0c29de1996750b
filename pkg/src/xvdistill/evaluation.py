"""Retrieval, joint-attribute search and localization against a reference database.

Heads are scored separately and never fused. Scores are log-likelihoods of
a ground-level sample under each entry's predicted distribution.
"""

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import kernels
from .distributions import (SMOOTH_EPS, dirichlet_log_pdf, dirichlet_mean,
                            poisson_log_pmf, smooth_simplex)
from .model import HEADS, forward_batch
from .specfn import DomainError, log_beta

DEFAULT_THRESHOLDS = tuple([0.001, 0.002, 0.005] + [round(0.01 * i, 2) for i in range(1, 101)])


def _head(head):
    if head not in HEADS:
        raise ValueError(f"unknown head {head!r}; expected one of {', '.join(HEADS)}")
    return head


@dataclass(frozen=True)
class DBEntry:
    id: int
    lat: float
    lon: float
    scene: np.ndarray
    image: np.ndarray
    counts: np.ndarray

    @property
    def location(self):
        return self.lat, self.lon


class ReferenceDB:
    """Predicted parameters for every overhead entry, stacked per head."""

    def __init__(self, ids, locations, scene, image, counts):
        self.ids = np.asarray(ids, dtype=np.int64)
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("reference database ids must be unique")
        self.locations = np.asarray(locations, dtype=np.float64).reshape(-1, 2)
        self.params = {"scene": np.asarray(scene, dtype=np.float64),
                       "image": np.asarray(image, dtype=np.float64),
                       "counts": np.asarray(counts, dtype=np.float64)}
        for h, p in self.params.items():
            if p.shape[0] != len(self.ids) or np.any(p <= 0) or not np.all(np.isfinite(p)):
                raise ValueError(f"{h} parameters must be positive, finite, one row per entry")
        self._pos = {int(i): n for n, i in enumerate(self.ids)}
        # per-entry constants reused by every query
        self._log_norm = {h: log_beta(self.params[h]) for h in ("scene", "image")}
        self._log_rate = np.log(self.params["counts"])
        self._rate_sum = self.params["counts"].sum(axis=1)

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, n):
        return DBEntry(int(self.ids[n]), float(self.locations[n, 0]), float(self.locations[n, 1]),
                       self.params["scene"][n], self.params["image"][n], self.params["counts"][n])

    def __iter__(self):
        return (self[n] for n in range(len(self)))

    def index_of(self, entry_id):
        try:
            return self._pos[int(entry_id)]
        except KeyError:
            raise KeyError(f"id {entry_id} is not in the reference database") from None

    def scores(self, ground, head, eps=SMOOTH_EPS):
        """Log-likelihood of ``ground`` under every entry's ``head`` distribution."""
        head = _head(head)
        if head == "counts":
            k = np.asarray(ground.counts, dtype=np.float64)
            self._check(k, head)
            return (k * self._log_rate).sum(axis=1) - self._rate_sum - kernels.lgamma(k + 1.0).sum()
        x = ground.scene_dist if head == "scene" else ground.image_dist
        log_x = np.log(smooth_simplex(x, eps))
        self._check(log_x, head)
        return ((self.params[head] - 1.0) * log_x).sum(axis=1) - self._log_norm[head]

    def _check(self, obs, head):
        if obs.shape != (self.params[head].shape[1],):
            raise DomainError(
                f"{head} query has dimension {obs.shape}, database expects {self.params[head].shape[1]}")


def build_reference_db(model, records):
    if not records:
        raise ValueError("reference database needs at least one record")
    scene, image, counts = forward_batch(model, np.stack([r.feature for r in records]))
    return ReferenceDB([r.id for r in records], [(r.lat, r.lon) for r in records],
                       scene, image, counts)


def score(ground, entry, head, eps=SMOOTH_EPS):
    head = _head(head)
    if head == "counts":
        return poisson_log_pmf(entry.counts, ground.counts)
    x = ground.scene_dist if head == "scene" else ground.image_dist
    return dirichlet_log_pdf(getattr(entry, head), smooth_simplex(x, eps))


def _ranking(scores, ids):
    # descending score, ascending id among ties
    return np.lexsort((ids, -scores))


def retrieve_topk(ground, db, head, k=3):
    if not 1 <= k <= len(db):
        raise ValueError(f"k={k} must lie in [1, |db|={len(db)}]")
    s = db.scores(ground, head)
    order = _ranking(s, db.ids)[:k]
    return [(int(db.ids[i]), float(s[i])) for i in order]


def _rank_fraction(s, pos, ties, rng):
    truth = s[pos]
    above = np.count_nonzero(s > truth)
    tied = np.count_nonzero(s == truth) - 1
    if ties == "pessimistic":
        ahead = above + tied
    elif ties == "random":
        ahead = above + int(rng.integers(0, tied + 1))
    else:
        raise ValueError(f"unknown tie rule {ties!r}")
    return ahead / (len(s) - 1)


def localize(ground, true_id, db, head, ties="pessimistic", rng=None):
    """Fraction of the other entries ranked at or above the true entry.

    With ``ties="random"`` the true entry takes a uniformly random slot in its
    tie group, drawn from ``rng``.
    """
    if len(db) < 2:
        raise ValueError("localization needs at least two database entries")
    pos = db.index_of(true_id)
    if ties == "random" and rng is None:
        raise ValueError("random tie-breaking needs an rng")
    return _rank_fraction(db.scores(ground, head), pos, ties, rng)


def localize_all(records, db, head, ties="pessimistic", rng=None):
    return np.array([localize(r.ground, r.id, db, head, ties, rng) for r in records])


@dataclass
class LocalizationCurve:
    thresholds: np.ndarray
    accuracy: np.ndarray

    def __post_init__(self):
        self.thresholds = np.asarray(self.thresholds, dtype=np.float64)
        self.accuracy = np.asarray(self.accuracy, dtype=np.float64)

    @property
    def points(self):
        return list(zip(self.thresholds.tolist(), self.accuracy.tolist()))

    def at(self, t):
        i = np.flatnonzero(np.isclose(self.thresholds, t))
        if not len(i):
            raise KeyError(f"threshold {t} not on the curve")
        return float(self.accuracy[i[0]])


def accuracy_curve(ranks, thresholds=DEFAULT_THRESHOLDS):
    """Fraction of queries whose rank fraction is <= each threshold."""
    ranks = np.asarray(ranks, dtype=np.float64)
    t = np.asarray(thresholds, dtype=np.float64)
    if ranks.size == 0:
        raise ValueError("accuracy_curve needs at least one rank")
    if t.size == 0 or np.any(t < 0) or np.any(t > 1) or np.any(np.diff(t) <= 0):
        raise ValueError("thresholds must be strictly increasing within [0, 1]")
    sorted_ranks = np.sort(ranks)
    acc = np.searchsorted(sorted_ranks, t, side="right") / ranks.size
    return LocalizationCurve(t, acc)


@dataclass(frozen=True)
class Grid:
    rows: int
    cols: int
    bbox: tuple  # (lat_min, lat_max, lon_min, lon_max)

    def __post_init__(self):
        lat0, lat1, lon0, lon1 = self.bbox
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid needs at least one row and column")
        if not (lat1 > lat0 and lon1 > lon0):
            raise ValueError(f"zero-area bounding box {self.bbox}")

    def cell_of(self, lat, lon):
        """Row-major cell indices, row 0 at the northern edge; outside points clamp to the border."""
        lat0, lat1, lon0, lon1 = self.bbox
        r = np.floor((lat1 - np.asarray(lat)) / (lat1 - lat0) * self.rows).astype(np.int64)
        c = np.floor((np.asarray(lon) - lon0) / (lon1 - lon0) * self.cols).astype(np.int64)
        return np.clip(r, 0, self.rows - 1), np.clip(c, 0, self.cols - 1)

    def cell_bounds(self, r, c):
        lat0, lat1, lon0, lon1 = self.bbox
        dlat, dlon = (lat1 - lat0) / self.rows, (lon1 - lon0) / self.cols
        return (lat1 - (r + 1) * dlat, lat1 - r * dlat, lon0 + c * dlon, lon0 + (c + 1) * dlon)


def heatmap(ground, db, head, grid):
    """Per-cell maximum score; empty cells hold one unit below the lowest score."""
    s = db.scores(ground, head)
    rows, cols = grid.cell_of(db.locations[:, 0], db.locations[:, 1])
    return kernels.maxpool(rows, cols, s, (grid.rows, grid.cols), s.min() - 1.0)


@dataclass(frozen=True)
class SearchHit:
    id: int
    lat: float
    lon: float
    score: float
    secondary_score: float


def label_scores(db, head, index):
    """Expected label mass (Dirichlet mean) or Poisson rate of one label for every entry."""
    p = db.params[_head(head)]
    if not 0 <= index < p.shape[1]:
        raise IndexError(f"label index {index} out of range for {head} head with {p.shape[1]} labels")
    return p[:, index] if head == "counts" else dirichlet_mean(p)[:, index]


def attribute_search(db, primary, secondary, top_n):
    """Top ``top_n`` entries by the primary label, re-sorted ascending by the secondary."""
    first = label_scores(db, *primary)
    second = label_scores(db, *secondary)
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    chosen = _ranking(first, db.ids)[:top_n]
    chosen = chosen[np.argsort(second[chosen], kind="stable")]
    return [SearchHit(int(db.ids[i]), float(db.locations[i, 0]), float(db.locations[i, 1]),
                      float(first[i]), float(second[i])) for i in chosen]


# -- writers ---------------------------------------------------------------------

def write_curve_csv(curve, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "accuracy"])
        for t, a in curve.points:
            w.writerow([repr(t), repr(a)])


def write_hits_csv(rows, path, db=None):
    """Rows are SearchHit objects or ``(id, score)`` pairs resolved through ``db``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if rows and isinstance(rows[0], SearchHit):
            w.writerow(["id", "lat", "lon", "score", "secondary_score"])
            for h in rows:
                w.writerow([h.id, repr(h.lat), repr(h.lon), repr(h.score), repr(h.secondary_score)])
            return
        w.writerow(["id", "lat", "lon", "score"])
        for entry_id, s in rows:
            lat, lon = db.locations[db.index_of(entry_id)]
            w.writerow([entry_id, repr(float(lat)), repr(float(lon)), repr(float(s))])


def write_pgm(matrix, path):
    """Plain (P2) greymap, min-max normalized to 0..255."""
    m = np.asarray(matrix, dtype=np.float64)
    lo, hi = m.min(), m.max()
    g = np.zeros(m.shape, dtype=np.int64) if hi == lo else np.rint(255.0 * (m - lo) / (hi - lo)).astype(np.int64)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(f"P2\n{m.shape[1]} {m.shape[0]}\n255\n")
        for row in g:
            fh.write(" ".join(str(v) for v in row) + "\n")


def read_pgm(path):
    with open(path, encoding="ascii") as fh:
        tokens = [t for line in fh for t in line.split("#")[0].split()]
    if tokens[0] != "P2":
        raise ValueError(f"{path}: not a plain PGM file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    return np.array(tokens[4:4 + w * h], dtype=np.int64).reshape(h, w), maxval


def write_heatmap(matrix, grid, stem, meta=None):
    """Write ``stem.pgm``, ``stem.csv`` (raw scores) and ``stem.json`` (georeferencing)."""
    write_pgm(matrix, f"{stem}.pgm")
    with open(f"{stem}.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in matrix:
            w.writerow([repr(float(v)) for v in row])
    lat0, lat1, lon0, lon1 = grid.bbox
    side = {"rows": grid.rows, "cols": grid.cols, "orientation": "row 0 is north, column 0 is west",
            "bbox": {"lat_min": lat0, "lat_max": lat1, "lon_min": lon0, "lon_max": lon1},
            "score_min": float(np.min(matrix)), "score_max": float(np.max(matrix))}
    side.update(meta or {})
    with open(f"{stem}.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(side, fh, indent=2, sort_keys=True)
        fh.write("\n")
