"""Synthetic geo-world generation, train/val/test splitting, and JSONL record I/O.

The synthetic world stands in for paired overhead/ground imagery: each
latent class has a feature prototype, a geographic center, and its own
Dirichlet/Poisson laws for the ground-level signals. Real extracted features
can be ingested through the same JSONL format.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .distributions import sample_dirichlet, sample_poisson

RECORDS_FORMAT = "xvdistill-records"
SIMPLEX_TOL = 1e-6
DEFAULT_SPLIT = (0.93, 0.02, 0.05)
# continental US, (lat_min, lat_max, lon_min, lon_max)
CONUS = (24.5, 49.5, -125.0, -66.5)


class RecordFormatError(ValueError):
    pass


@dataclass
class GroundSample:
    scene_dist: np.ndarray
    image_dist: np.ndarray
    counts: np.ndarray

    def __eq__(self, other):
        return (isinstance(other, GroundSample)
                and np.array_equal(self.scene_dist, other.scene_dist)
                and np.array_equal(self.image_dist, other.image_dist)
                and np.array_equal(self.counts, other.counts))


@dataclass
class GeoRecord:
    id: int
    lat: float
    lon: float
    feature: np.ndarray
    ground: GroundSample
    latent_class: int = None

    @property
    def location(self):
        return self.lat, self.lon

    def __eq__(self, other):
        return (isinstance(other, GeoRecord)
                and self.id == other.id and self.lat == other.lat and self.lon == other.lon
                and np.array_equal(self.feature, other.feature)
                and self.ground == other.ground
                and self.latent_class == other.latent_class)


@dataclass
class WorldConfig:
    num_classes: int = 20
    num_records: int = 2000
    feature_dim: int = 32
    k_scene: int = 16
    k_image: int = 24
    k_counts: int = 8
    feature_noise_sigma: float = 1.0
    class_alpha_scale: float = 4.0
    alpha_shape: float = 0.5
    count_rate_scale: float = 3.0
    geo_extent: tuple = CONUS
    geo_spread: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.geo_extent = tuple(self.geo_extent)
        for name in ("num_classes", "num_records", "feature_dim", "k_scene", "k_image", "k_counts"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"world.{name} must be positive")
        if self.k_scene < 2 or self.k_image < 2:
            raise ValueError("label spaces need at least two categories")
        if self.feature_noise_sigma < 0 or self.geo_spread < 0:
            raise ValueError("noise and spread must be >= 0")
        if min(self.class_alpha_scale, self.alpha_shape, self.count_rate_scale) <= 0:
            raise ValueError("class_alpha_scale, alpha_shape and count_rate_scale must be > 0")
        lat0, lat1, lon0, lon1 = self.geo_extent
        if not (lat1 > lat0 and lon1 > lon0):
            raise ValueError(f"degenerate geo_extent {self.geo_extent}")


@dataclass
class World:
    """Generated records plus the class-level laws that produced them."""

    config: WorldConfig
    records: list
    prototypes: np.ndarray
    centers: np.ndarray
    scene_alpha: np.ndarray
    image_alpha: np.ndarray
    count_rates: np.ndarray
    extra: dict = field(default_factory=dict)


def generate_world(config):
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    c = cfg.num_classes
    prototypes = rng.standard_normal((c, cfg.feature_dim))
    # 0.05 keeps every class concentration bounded away from zero
    scene_alpha = cfg.class_alpha_scale * rng.gamma(cfg.alpha_shape, size=(c, cfg.k_scene)) + 0.05
    image_alpha = cfg.class_alpha_scale * rng.gamma(cfg.alpha_shape, size=(c, cfg.k_image)) + 0.05
    count_rates = cfg.count_rate_scale * rng.gamma(cfg.alpha_shape, size=(c, cfg.k_counts)) + 0.05
    lat0, lat1, lon0, lon1 = cfg.geo_extent
    centers = np.column_stack([rng.uniform(lat0, lat1, c), rng.uniform(lon0, lon1, c)])

    n = cfg.num_records
    cls = rng.integers(0, c, size=n)
    locs = centers[cls] + cfg.geo_spread * rng.standard_normal((n, 2))
    locs[:, 0] = np.clip(locs[:, 0], lat0, lat1)
    locs[:, 1] = np.clip(locs[:, 1], lon0, lon1)
    feats = prototypes[cls] + cfg.feature_noise_sigma * rng.standard_normal((n, cfg.feature_dim))
    scene = sample_dirichlet(scene_alpha[cls], rng)
    image = sample_dirichlet(image_alpha[cls], rng)
    counts = sample_poisson(count_rates[cls], rng)

    records = [
        GeoRecord(i, float(locs[i, 0]), float(locs[i, 1]), feats[i],
                  GroundSample(scene[i], image[i], counts[i]), int(cls[i]))
        for i in range(n)
    ]
    return World(cfg, records, prototypes, centers, scene_alpha, image_alpha, count_rates)


def split_dataset(records, fractions=DEFAULT_SPLIT, seed=0):
    """Seeded shuffle into (train, val, test); flooring remainders go to train."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ValueError(f"split fractions must be three positive numbers, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {sum(fractions)!r}")
    n = len(records)
    n_val = math.floor(n * fractions[1] + 1e-9)
    n_test = math.floor(n * fractions[2] + 1e-9)
    order = np.random.default_rng(seed).permutation(n)
    test = [records[i] for i in order[:n_test]]
    val = [records[i] for i in order[n_test:n_test + n_val]]
    train = [records[i] for i in order[n_test + n_val:]]
    return train, val, test


def record_dims(records):
    r = records[0]
    return {"d": len(r.feature), "k_scene": len(r.ground.scene_dist),
            "k_image": len(r.ground.image_dist), "k_counts": len(r.ground.counts)}


def save_records(records, path):
    if not records:
        raise ValueError("refusing to write an empty record file")
    header = {"format": RECORDS_FORMAT, "version": 1, "count": len(records), **record_dims(records)}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header) + "\n")
        for r in records:
            row = {
                "id": int(r.id), "lat": float(r.lat), "lon": float(r.lon),
                "feature": np.asarray(r.feature, dtype=np.float64).tolist(),
                "scene": np.asarray(r.ground.scene_dist, dtype=np.float64).tolist(),
                "image": np.asarray(r.ground.image_dist, dtype=np.float64).tolist(),
                "counts": np.asarray(r.ground.counts, dtype=np.int64).tolist(),
            }
            if r.latent_class is not None:
                row["latent_class"] = int(r.latent_class)
            fh.write(json.dumps(row) + "\n")


def _vector(row, key, dim, lineno, kind=float):
    if key not in row:
        raise RecordFormatError(f"line {lineno}: missing field '{key}'")
    vals = row[key]
    if not isinstance(vals, list):
        raise RecordFormatError(f"line {lineno}: field '{key}' must be a list")
    if len(vals) != dim:
        raise RecordFormatError(
            f"line {lineno}: field '{key}' has {len(vals)} components, header declares {dim}")
    if kind is int:
        if not all(isinstance(v, int) and not isinstance(v, bool) and v >= 0 for v in vals):
            raise RecordFormatError(f"line {lineno}: field '{key}' must hold non-negative integers")
        return np.asarray(vals, dtype=np.int64)
    arr = np.asarray(vals, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise RecordFormatError(f"line {lineno}: field '{key}' has non-finite entries")
    return arr


def _simplex(arr, key, lineno):
    if np.any(arr < 0):
        raise RecordFormatError(f"line {lineno}: field '{key}' has negative probabilities")
    total = arr.sum()
    if abs(total - 1.0) > SIMPLEX_TOL:
        raise RecordFormatError(
            f"line {lineno}: field '{key}' is not normalized (sums to {total!r})")
    return arr


def load_records(path):
    records, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        try:
            header = json.loads(first)
        except json.JSONDecodeError as exc:
            raise RecordFormatError(f"line 1: header is not JSON ({exc.msg})") from None
        if not isinstance(header, dict) or header.get("format") != RECORDS_FORMAT:
            raise RecordFormatError(f"line 1: not a {RECORDS_FORMAT} header")
        try:
            dims = {k: int(header[k]) for k in ("d", "k_scene", "k_image", "k_counts")}
        except (KeyError, TypeError, ValueError):
            raise RecordFormatError("line 1: header must declare d, k_scene, k_image, k_counts") from None
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            for key in ("id", "lat", "lon"):
                if key not in row:
                    raise RecordFormatError(f"line {lineno}: missing field '{key}'")
            rid = row["id"]
            if not isinstance(rid, int) or rid in seen:
                raise RecordFormatError(f"line {lineno}: field 'id' must be a unique integer")
            seen.add(rid)
            lat, lon = row["lat"], row["lon"]
            if not all(isinstance(v, (int, float)) and math.isfinite(v) for v in (lat, lon)):
                raise RecordFormatError(f"line {lineno}: fields 'lat'/'lon' must be finite numbers")
            ground = GroundSample(
                _simplex(_vector(row, "scene", dims["k_scene"], lineno), "scene", lineno),
                _simplex(_vector(row, "image", dims["k_image"], lineno), "image", lineno),
                _vector(row, "counts", dims["k_counts"], lineno, kind=int),
            )
            latent = row.get("latent_class")
            records.append(GeoRecord(rid, float(lat), float(lon),
                                     _vector(row, "feature", dims["d"], lineno), ground,
                                     None if latent is None else int(latent)))
    if "count" in header and int(header["count"]) != len(records):
        raise RecordFormatError(
            f"header declares {header['count']} records, file holds {len(records)}")
    return records
