# features/splitting.py

"""
Split construction and verification. The Original split is rebuilt from the
published index files; the Stratified Custom split is built by a greedy
rarity-first assignment. Alignment between splits is measured with the
Jensen-Shannon divergence (natural log) of pixel-level class distributions.
"""

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import rel_entr

from config import Config
from util.errors import EmptyMatrixError, ValidationError

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
MANIFEST_VERSION = 1
LN2 = math.log(2.0)


@dataclass
class ClassHistogram:
    pixel_counts: np.ndarray

    def __post_init__(self):
        self.pixel_counts = np.asarray(self.pixel_counts, dtype=np.int64)
        if self.pixel_counts.ndim != 1 or np.any(self.pixel_counts < 0):
            raise ValidationError("class histogram must be a 1-D vector of non-negative counts")

    @classmethod
    def zeros(cls, num_classes: int) -> "ClassHistogram":
        return cls(np.zeros(num_classes, dtype=np.int64))

    @classmethod
    def from_mask(cls, mask: np.ndarray, num_classes: int, ignore_label: int = Config.IGNORE_LABEL) -> "ClassHistogram":
        labels = mask[mask != ignore_label].astype(np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise ValidationError(f"mask labels outside [0, {num_classes})")
        return cls(np.bincount(labels, minlength=num_classes))

    @property
    def total(self) -> int:
        return int(self.pixel_counts.sum())

    def normalize(self) -> np.ndarray:
        if self.total == 0:
            raise EmptyMatrixError("cannot normalize an empty histogram")
        return self.pixel_counts / self.total

    def __add__(self, other: "ClassHistogram") -> "ClassHistogram":
        return ClassHistogram(self.pixel_counts + other.pixel_counts)

    def __eq__(self, other) -> bool:
        return isinstance(other, ClassHistogram) and np.array_equal(self.pixel_counts, other.pixel_counts)


def jsd(p: ClassHistogram, q: ClassHistogram) -> float:
    """JSD(P, Q) = KL(P||M)/2 + KL(Q||M)/2 with M = (P + Q)/2, natural log, clamped to [0, ln 2]."""
    if p.total == 0 or q.total == 0:
        raise EmptyMatrixError("JSD needs two non-empty histograms")
    if p.pixel_counts.shape != q.pixel_counts.shape:
        raise ValidationError("histograms have different class counts")
    pn, qn = p.normalize(), q.normalize()
    m = 0.5 * (pn + qn)
    value = 0.5 * float(np.sum(rel_entr(pn, m))) + 0.5 * float(np.sum(rel_entr(qn, m)))
    return min(max(value, 0.0), LN2)


@dataclass
class SplitManifest:
    assignments: dict  # sample_id -> split name, in input order
    ratios: tuple
    seed: int | None
    per_split_histograms: dict  # split name -> ClassHistogram
    jsd_train_val: float
    jsd_train_test: float
    method: str = "stratified"
    version: int = MANIFEST_VERSION
    realized: dict = field(default_factory=dict)

    def members(self, split: str) -> list[str]:
        return [sid for sid, s in self.assignments.items() if s == split]

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "method": self.method,
            "seed": self.seed,
            "ratios": list(self.ratios),
            "realized": self.realized,
            "jsd": {"train_val": self.jsd_train_val, "train_test": self.jsd_train_test, "log_base": "e"},
            "histograms": {k: v.pixel_counts.tolist() for k, v in self.per_split_histograms.items()},
            "assignments": self.assignments,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "SplitManifest":
        if data.get("version") != MANIFEST_VERSION:
            raise ValidationError(f"unsupported split manifest version {data.get('version')!r}")
        return cls(
            assignments=dict(data["assignments"]),
            ratios=tuple(data["ratios"]),
            seed=data.get("seed"),
            per_split_histograms={k: ClassHistogram(v) for k, v in data["histograms"].items()},
            jsd_train_val=float(data["jsd"]["train_val"]),
            jsd_train_test=float(data["jsd"]["train_test"]),
            method=data.get("method", "stratified"),
            realized=data.get("realized", {}),
        )


def parse_ratios(ratios) -> tuple[float, float, float]:
    if isinstance(ratios, str):
        try:
            ratios = [float(x) for x in ratios.split(",")]
        except ValueError:
            raise ValidationError(f"ratios must be three comma-separated numbers, got {ratios!r}")
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValidationError(f"ratios must be three non-negative fractions, got {list(ratios)}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"ratios must sum to 1, got {list(ratios)} (sum {sum(ratios):g})")
    return ratios


def allocate_counts(n: int, ratios) -> list[int]:
    """Largest-remainder allocation of n items into buckets; totals are exact."""
    raw = [n * r for r in ratios]
    base = [int(math.floor(x)) for x in raw]
    remainder = n - sum(base)
    order = sorted(range(len(ratios)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[:remainder]:
        base[i] += 1
    return base


def _split_histograms(assignments: dict, histograms: dict, num_classes: int) -> dict:
    out = {s: ClassHistogram.zeros(num_classes) for s in SPLITS}
    for sid, split in assignments.items():
        out[split] = out[split] + histograms[sid]
    return out


def _finish(assignments: dict, histograms: dict, ratios, seed, method: str) -> SplitManifest:
    num_classes = len(next(iter(histograms.values())).pixel_counts)
    per_split = _split_histograms(assignments, histograms, num_classes)
    n = len(assignments)
    realized = {s: sum(1 for v in assignments.values() if v == s) / n for s in SPLITS}
    manifest = SplitManifest(
        assignments=assignments,
        ratios=tuple(ratios),
        seed=seed,
        per_split_histograms=per_split,
        jsd_train_val=jsd(per_split["train"], per_split["val"]),
        jsd_train_test=jsd(per_split["train"], per_split["test"]),
        method=method,
        realized=realized,
    )
    logger.info(f"{method} split: {n} samples, JSD train/val={manifest.jsd_train_val:.5f} "
                f"train/test={manifest.jsd_train_test:.5f}")
    return manifest


def _check_samples(samples) -> dict:
    if len(samples) < 10:
        raise ValidationError(f"need at least 10 samples to split, got {len(samples)}")
    histograms = {}
    for sid, hist in samples:
        if sid in histograms:
            raise ValidationError(f"duplicate sample id {sid!r}")
        if hist.total == 0:
            raise ValidationError(f"sample {sid!r} has an empty class histogram")
        histograms[sid] = hist
    return histograms


def stratified_split(samples, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> SplitManifest:
    """
    Greedy rarity-first assignment. Samples are visited by descending rarity
    score max_c(f_sample[c] / f_global[c]); each goes to the split, among those
    with room left, whose pixel count for the sample's dominant rare class lags
    its target share the most. A seeded permutation breaks exact rarity ties.
    """
    ratios = parse_ratios(ratios)
    histograms = _check_samples(samples)
    ids = [sid for sid, _ in samples]
    counts = np.stack([histograms[sid].pixel_counts for sid in ids]).astype(np.float64)
    global_frac = counts.sum(axis=0) / counts.sum()
    sample_frac = counts / counts.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(global_frac > 0, sample_frac / np.where(global_frac > 0, global_frac, 1), 0.0)
    rarity = rel.max(axis=1)
    dominant = rel.argmax(axis=1)
    tiebreak = np.random.default_rng(seed).permutation(len(ids))
    order = sorted(range(len(ids)), key=lambda i: (-rarity[i], tiebreak[i]))

    capacity = allocate_counts(len(ids), ratios)
    filled = [0, 0, 0]
    split_pixels = np.zeros((3, counts.shape[1]))
    assigned_pixels = np.zeros(counts.shape[1])
    choice = {}
    for i in order:
        c = dominant[i]
        share = assigned_pixels[c] + counts[i, c]
        best, best_deficit = None, -math.inf
        for k in range(3):
            if filled[k] >= capacity[k]:
                continue
            deficit = ratios[k] * share - split_pixels[k, c]
            if deficit > best_deficit:
                best, best_deficit = k, deficit
        choice[ids[i]] = SPLITS[best]
        filled[best] += 1
        split_pixels[best] += counts[i]
        assigned_pixels += counts[i]

    assignments = {sid: choice[sid] for sid in ids}
    return _finish(assignments, histograms, ratios, seed, "stratified")


def random_split(samples, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> SplitManifest:
    """Uniformly random partition with exact counts; the baseline stratification is judged against."""
    ratios = parse_ratios(ratios)
    histograms = _check_samples(samples)
    ids = [sid for sid, _ in samples]
    perm = np.random.default_rng(seed).permutation(len(ids))
    n_train, n_val, _ = allocate_counts(len(ids), ratios)
    assignments = {}
    for rank, idx in enumerate(perm):
        split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
        assignments[ids[idx]] = split
    assignments = {sid: assignments[sid] for sid in ids}
    return _finish(assignments, histograms, ratios, seed, "random")


def load_index_split(index_ids: dict, histograms: dict) -> SplitManifest:
    """
    Rebuilds a published split (e.g. the Original 54/23/23 partition) from its
    per-split id lists. Ids missing from `histograms` (unrecovered images) are dropped.
    """
    assignments = {}
    dropped = 0
    for split in SPLITS:
        for sid in index_ids.get(split, []):
            if sid in assignments:
                raise ValidationError(f"sample {sid!r} listed in more than one index file")
            if sid not in histograms:
                dropped += 1
                continue
            assignments[sid] = split
    if not assignments:
        raise ValidationError("no indexed sample has a histogram")
    if dropped:
        logger.warning(f"{dropped} indexed samples are not present locally and were dropped")
    n = len(assignments)
    ratios = tuple(sum(1 for v in assignments.values() if v == s) / n for s in SPLITS)
    return _finish(assignments, histograms, ratios, None, "index")


@dataclass
class SplitReport:
    passed: bool
    threshold: float
    jsd_train_val: float | None
    jsd_train_test: float | None
    histograms_match: bool | None
    jsd_match: bool | None
    mismatched_splits: list
    missing: list

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def verify_split(manifest: SplitManifest, histogram_source, threshold: float = Config.JSD_THRESHOLD,
                 strict: bool = False) -> SplitReport:
    """
    Recomputes per-split histograms via histogram_source(sample_id) -> ClassHistogram
    or None (missing file) and compares them, and the JSDs, with the stored values.
    Passes iff everything recomputed matches and both JSDs are <= threshold.
    Missing masks are listed; they only fail the check when strict is set.
    """
    missing = []
    histograms = {}
    for sid in manifest.assignments:
        hist = histogram_source(sid)
        if hist is None:
            missing.append(sid)
        else:
            histograms[sid] = hist

    stored = manifest.per_split_histograms
    if missing:
        logger.warning(f"{len(missing)} masks are missing; histograms cannot be recomputed")
        hist_match, jsd_match, mismatched = None, None, []
        tv, tt = manifest.jsd_train_val, manifest.jsd_train_test
    else:
        num_classes = len(next(iter(stored.values())).pixel_counts)
        recomputed = _split_histograms(manifest.assignments, histograms, num_classes)
        mismatched = [s for s in SPLITS if recomputed[s] != stored.get(s)]
        hist_match = not mismatched
        tv = jsd(recomputed["train"], recomputed["val"])
        tt = jsd(recomputed["train"], recomputed["test"])
        jsd_match = tv == manifest.jsd_train_val and tt == manifest.jsd_train_test

    within = tv <= threshold and tt <= threshold
    consistent = (hist_match and jsd_match) if not missing else not strict
    return SplitReport(
        passed=bool(within and consistent),
        threshold=threshold,
        jsd_train_val=tv,
        jsd_train_test=tt,
        histograms_match=hist_match,
        jsd_match=jsd_match,
        mismatched_splits=mismatched,
        missing=missing,
    )
