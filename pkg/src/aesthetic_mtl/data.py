"""Dataset records, the CSV manifest format, splitting, and a synthetic generator.

Manifest format: UTF-8 CSV with the header ::

    id,path,fine_1..fine_5,color_1..color_5,harmony_1..harmony_5,overall_1..overall_5

one row per image. ``path`` is relative to the manifest's directory and names
either an image file or a row of a feature matrix written as
``<file>.npy#<row>``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, ManifestError
from .preprocess import FEATURE_GRID, load_image, preprocess
from .score_dist import LEVELS, N_LEVELS, ScoreDistribution, check_probs

DIMENSIONS = ("fineness", "colorfulness", "harmony", "overall")
COLUMN_PREFIX = {"fineness": "fine", "colorfulness": "color", "harmony": "harmony", "overall": "overall"}
MANIFEST_HEADER = ["id", "path"] + [f"{COLUMN_PREFIX[d]}_{c}" for d in DIMENSIONS for c in range(1, N_LEVELS + 1)]

# Seed streams: every random draw comes from default_rng([seed, STREAM, ...]).
STREAM_INIT = 1
STREAM_SHUFFLE = 2
STREAM_SYNTH = 3
STREAM_PATCH = 4


@dataclass
class SampleRecord:
    id: str
    targets: dict
    path: str | None = None
    pixels: np.ndarray | None = None
    features: np.ndarray | None = None
    scores: dict | None = None      # noise-free generating scores (synthetic data only)

    def __post_init__(self):
        missing = [d for d in DIMENSIONS if d not in self.targets]
        if missing:
            raise InvalidInputError(f"record {self.id!r} lacks targets for {missing}")
        self.targets = {d: t if isinstance(t, ScoreDistribution) else ScoreDistribution(t)
                        for d, t in ((d, self.targets[d]) for d in DIMENSIONS)}

    def target_matrix(self, dims=DIMENSIONS) -> np.ndarray:
        return np.stack([self.targets[d].probs for d in dims])


@dataclass
class SampleBatch:
    features: np.ndarray     # (B, F) in [0, 1]
    targets: np.ndarray      # (T, B, levels)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.targets = np.asarray(self.targets, dtype=float)
        if self.features.ndim != 2:
            raise InvalidInputError(f"features must be 2-D, got {self.features.shape}")
        if self.targets.ndim != 3 or self.targets.shape[1] != self.features.shape[0] \
                or self.targets.shape[2] != N_LEVELS:
            raise InvalidInputError(f"targets shape {self.targets.shape} does not match {self.features.shape[0]} rows")
        if self.features.size and (self.features.min() < 0 or self.features.max() > 1):
            raise InvalidInputError("features must lie in [0, 1]")
        t = self.targets
        if np.any(t < 0) or np.any(np.abs(t.sum(axis=2) - 1.0) > 1e-9):
            raise InvalidInputError("target rows must be probability distributions")

    def __len__(self):
        return self.features.shape[0]

    def take(self, idx) -> "SampleBatch":
        idx = np.asarray(idx)
        return SampleBatch(self.features[idx], self.targets[:, idx])


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.8
    val_frac: float = 0.1
    test_frac: float = 0.1
    seed: int = 0

    def __post_init__(self):
        fr = (self.train_frac, self.val_frac, self.test_frac)
        if min(fr) <= 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise InvalidInputError(f"split fractions {fr} must be positive and sum to 1")


def split(records: list, spec: SplitSpec = SplitSpec()):
    """Seeded shuffle, then contiguous train/val/test blocks.

    Validation and test sizes are floored; the remainder goes to train.
    """
    n = len(records)
    order = np.random.default_rng(spec.seed).permutation(n)
    n_val = math.floor(n * spec.val_frac + 1e-9)
    n_test = math.floor(n * spec.test_frac + 1e-9)
    n_train = n - n_val - n_test
    shuffled = [records[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:]


# ---------------------------------------------------------------------------
# manifest I/O

def _fmt(x: float) -> str:
    return repr(float(x))


def write_manifest(path, records) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for rec in records:
            row = [rec.id, rec.path or ""]
            for d in DIMENSIONS:
                row.extend(_fmt(p) for p in rec.targets[d].probs)
            w.writerow(row)
    return path


def load_manifest(path) -> list:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return []
    header = [h.strip() for h in rows[0]]
    if header != MANIFEST_HEADER:
        missing = [c for c in MANIFEST_HEADER if c not in header]
        extra = [c for c in header if c not in MANIFEST_HEADER]
        detail = []
        if missing:
            detail.append(f"missing columns {missing}")
        if extra:
            detail.append(f"unexpected columns {extra}")
        raise ManifestError("bad header: " + ("; ".join(detail) or "columns out of order"), line=1)

    records, seen = [], {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(MANIFEST_HEADER):
            raise ManifestError(f"expected {len(MANIFEST_HEADER)} fields, got {len(row)}", line=lineno)
        rid = row[0].strip()
        if not rid:
            raise ManifestError("empty id", line=lineno)
        if rid in seen:
            raise ManifestError(f"duplicate id {rid!r} (first seen on line {seen[rid]})", line=lineno)
        seen[rid] = lineno
        targets = {}
        for k, d in enumerate(DIMENSIONS):
            cells = row[2 + k * N_LEVELS: 2 + (k + 1) * N_LEVELS]
            try:
                vals = [float(c) for c in cells]
            except ValueError:
                raise ManifestError(f"row {rid!r}: non-numeric {d} probability in {cells}", line=lineno) from None
            try:
                targets[d] = ScoreDistribution(check_probs(vals, what=f"{d} distribution"))
            except InvalidInputError as exc:
                raise ManifestError(f"row {rid!r}: {exc}", line=lineno) from None
        records.append(SampleRecord(rid, targets, path=row[1].strip() or None))
    return records


class FeatureResolver:
    """Turns records into feature rows, caching feature matrices read from ``.npy`` files."""

    def __init__(self, base_dir=".", strategy: str = "pad-rescale", grid=FEATURE_GRID, seed: int = 0, **patch_kw):
        self.base_dir = Path(base_dir)
        self.strategy = strategy
        self.grid = grid
        self.seed = seed
        self.patch_kw = patch_kw
        self._arrays = {}

    def _matrix(self, file: Path) -> np.ndarray:
        if file not in self._arrays:
            if not file.is_file():
                raise InvalidInputError(f"feature file not found: {file}")
            self._arrays[file] = np.load(file, allow_pickle=False)
        return self._arrays[file]

    def rows(self, rec: SampleRecord, index: int = 0) -> np.ndarray:
        """Feature rows for one record; several when a multi-patch strategy is in use."""
        if rec.features is not None:
            return np.asarray(rec.features, dtype=float)[None, :]
        if rec.pixels is not None:
            pixels = rec.pixels
        elif rec.path:
            if "#" in rec.path:
                file, _, row = rec.path.rpartition("#")
                return np.asarray(self._matrix(self.base_dir / file)[int(row)], dtype=float)[None, :]
            pixels = load_image(self.base_dir / rec.path)
        else:
            raise InvalidInputError(f"record {rec.id!r} has no image, path or features")
        return preprocess(pixels, self.strategy, grid=self.grid, seed=[self.seed, STREAM_PATCH, index],
                          **self.patch_kw)

    def batch(self, records, dims=DIMENSIONS):
        """Stack all records into a SampleBatch plus the owning record index of each row."""
        feats, targets, owner = [], [], []
        for i, rec in enumerate(records):
            rows = self.rows(rec, i)
            feats.append(rows)
            targets.append(np.repeat(rec.target_matrix(dims)[:, None, :], rows.shape[0], axis=1))
            owner.extend([i] * rows.shape[0])
        if not feats:
            raise InvalidInputError("no records")
        return SampleBatch(np.concatenate(feats), np.concatenate(targets, axis=1)), np.array(owner)


# ---------------------------------------------------------------------------
# synthetic data

NOISE_LEVELS = {"none": 0.0, "low": 0.05, "medium": 0.15, "high": 0.3}


@dataclass(frozen=True)
class SynthProfile:
    """Loadings of each dimension on (common quality, harmony, own) latent directions."""

    loadings: dict = field(default_factory=lambda: {
        "fineness": (1.0, 0.1, 0.35),
        "colorfulness": (0.9, 0.25, 0.35),
        "harmony": (0.1, 1.0, 0.35),
        "overall": (1.0, 0.2, 0.25),
    })
    kernel_width: float = 0.7
    feature_shape: float = 0.3      # Beta(a, a) feature marginals; a < 1 spreads mass toward 0 and 1

    def __post_init__(self):
        if set(self.loadings) != set(DIMENSIONS):
            raise InvalidInputError(f"profile must give loadings for exactly {DIMENSIONS}")
        for d, l in self.loadings.items():
            if len(l) != 3 or not all(np.isfinite(l)) or not any(l):
                raise InvalidInputError(f"bad loadings for {d}: {l}")
        if self.kernel_width <= 0 or self.feature_shape <= 0:
            raise InvalidInputError("kernel width and feature shape must be positive")


PROFILES = {"default": SynthProfile()}


def synth_projections(feature_dim: int, profile: SynthProfile, seed: int) -> np.ndarray:
    """(4, feature_dim) generating projections, one row per dimension.

    The six latent directions (common, harmony, and one per dimension) have
    disjoint supports of ``feature_dim // 6`` features each; leftover features
    are pure distractors.
    """
    if feature_dim < 6:
        raise InvalidInputError("synthetic data needs feature_dim >= 6")
    rng = np.random.default_rng([seed, STREAM_SYNTH, 0])
    k = feature_dim // 6
    perm = rng.permutation(feature_dim)
    dirs = np.zeros((6, feature_dim))
    for j in range(6):
        idx = perm[j * k:(j + 1) * k]
        v = np.abs(rng.normal(size=k)) + 0.5
        dirs[j, idx] = v / np.linalg.norm(v)
    rows = []
    for t, d in enumerate(DIMENSIONS):
        a, b, c = profile.loadings[d]
        rows.append(a * dirs[0] + b * dirs[1] + c * dirs[2 + t])
    return np.array(rows)


def projection_to_score(s: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Affine map of projections ``x @ W.T`` onto [1, 5] using their exact range over the unit cube."""
    lo = np.minimum(W, 0).sum(axis=1)
    hi = np.maximum(W, 0).sum(axis=1)
    return 1.0 + 4.0 * (s - lo) / (hi - lo)


def score_to_distribution(mu: np.ndarray, width: float) -> np.ndarray:
    """Discretized Gaussian over the levels whose mean equals ``mu`` exactly.

    The center is found by bisection; the mean is monotone in it. Scores at
    (or within 1e-9 of) the ends collapse to a point mass.
    """
    mu = np.asarray(mu, dtype=float)
    flat = mu.ravel()
    lo = np.full(flat.shape, -40.0)
    hi = np.full(flat.shape, 46.0)

    def dist(center):
        logw = -((LEVELS[None, :] - center[:, None]) ** 2) / (2 * width ** 2)
        logw -= logw.max(axis=1, keepdims=True)
        w = np.exp(logw)
        return w / w.sum(axis=1, keepdims=True)

    for _ in range(100):
        mid = 0.5 * (lo + hi)
        m = dist(mid) @ LEVELS
        below = m < flat
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    p = dist(0.5 * (lo + hi))
    p[flat <= 1 + 1e-9] = np.eye(N_LEVELS)[0]
    p[flat >= 5 - 1e-9] = np.eye(N_LEVELS)[-1]
    return p.reshape(mu.shape + (N_LEVELS,))


def synth_generate(n: int, feature_dim: int = 48, profile="default", noise=0.05, seed: int = 0) -> list:
    """Synthetic records with correlated dimensions.

    Each record's features are drawn from its own generator seeded by
    ``(seed, record index)``. ``record.scores`` holds the noise-free generating
    score per dimension; targets are built from the noisy score, clipped to [1, 5].
    """
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    if isinstance(profile, str):
        if profile not in PROFILES:
            raise InvalidInputError(f"unknown synthetic profile {profile!r}")
        profile = PROFILES[profile]
    if isinstance(noise, str):
        if noise not in NOISE_LEVELS:
            raise InvalidInputError(f"unknown noise level {noise!r}; expected one of {list(NOISE_LEVELS)}")
        noise = NOISE_LEVELS[noise]
    if not np.isfinite(noise) or noise < 0:
        raise InvalidInputError("noise must be non-negative")

    W = synth_projections(feature_dim, profile, seed)
    X = np.empty((n, feature_dim))
    eps = np.empty((n, len(DIMENSIONS)))
    a = profile.feature_shape
    for i in range(n):
        rng = np.random.default_rng([seed, STREAM_SYNTH, 1, i])
        X[i] = rng.beta(a, a, size=feature_dim)
        eps[i] = rng.normal(size=len(DIMENSIONS))
    clean = projection_to_score(X @ W.T, W)
    noisy = np.clip(clean + noise * eps, 1.0, 5.0) if noise > 0 else clean
    dists = score_to_distribution(noisy, profile.kernel_width)

    records = []
    for i in range(n):
        rid = f"s{i:05d}"
        records.append(SampleRecord(
            rid,
            {d: dists[i, t] for t, d in enumerate(DIMENSIONS)},
            path=f"features.npy#{i}",
            features=X[i],
            scores={d: float(clean[i, t]) for t, d in enumerate(DIMENSIONS)},
        ))
    return records


def write_synth_dataset(out_dir, records) -> dict:
    """Write ``manifest.csv``, ``features.npy`` and ``scores.csv`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    X = np.stack([r.features for r in records])
    np.save(out / "features.npy", X, allow_pickle=False)
    manifest = write_manifest(out / "manifest.csv", records)
    scores = out / "scores.csv"
    with scores.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", *DIMENSIONS])
        for r in records:
            w.writerow([r.id, *(_fmt(r.scores[d]) for d in DIMENSIONS)])
    return {"manifest": manifest, "features": out / "features.npy", "scores": scores}


def read_scores(path) -> dict:
    """id -> {dimension: generating score} from a ``scores.csv`` file."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return {row["id"]: {d: float(row[d]) for d in DIMENSIONS} for row in csv.DictReader(fh)}
