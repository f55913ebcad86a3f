"""
Sparse binary feature space for app representations.

Types
-----
FeatureCategory    - named index range with a manipulability rule
FeatureSpace       - dimension d plus the categories partitioning [0, d)
SparseBinaryVector - x in {0,1}^d stored as sorted active indices
Perturbation       - delta in {-1,0,1}^d stored as index -> sign
LabeledDataset     - samples, real labels in [0,1], optional round tags
ManipulabilityMask - the eligible index set Gamma plus add-only flags

The text format read and written here is one sample per line::

    #d=<int>
    <label> <idx>:1 <idx>:1 ... [# round=<int>]
"""
import bisect
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Literal, Mapping, Optional, Sequence, TextIO, Tuple

import numpy as np
from pydantic import BaseModel, Field
from scipy import sparse
from sklearn.model_selection import train_test_split

from utils import DataError, SparseFormatError, make_rng

logger = logging.getLogger(__name__)

ADD_ONLY = "add-only"
ADD_AND_REMOVE = "add-and-remove"
Manipulability = Literal["add-only", "add-and-remove"]

_HEADER_RE = re.compile(r"^#\s*d\s*=\s*(\d+)\s*$")
_ROUND_RE = re.compile(r"^round\s*=\s*(-?\d+)$")


@dataclass(frozen=True)
class FeatureCategory:
    name: str
    start: int
    stop: int
    manipulability: Manipulability = ADD_AND_REMOVE

    @property
    def removable(self) -> bool:
        return self.manipulability == ADD_AND_REMOVE

    def __len__(self) -> int:
        return self.stop - self.start


@dataclass(frozen=True)
class FeatureSpace:
    """Dimension d and the named categories that partition [0, d)."""

    dimension: int
    categories: Tuple[FeatureCategory, ...]
    _starts: Tuple[int, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.dimension < 1:
            raise DataError(f"feature dimension must be >= 1, got {self.dimension}")
        if not self.categories:
            raise DataError("a feature space needs at least one category")
        names = [c.name for c in self.categories]
        if len(set(names)) != len(names):
            raise DataError(f"category names must be unique: {names}")
        ordered = sorted(self.categories, key=lambda c: c.start)
        cursor = 0
        for category in ordered:
            if category.manipulability not in (ADD_ONLY, ADD_AND_REMOVE):
                raise DataError(f"unknown manipulability {category.manipulability!r}")
            if category.start != cursor or category.stop <= category.start:
                raise DataError(f"categories must partition [0, {self.dimension}) without gaps or overlap")
            cursor = category.stop
        if cursor != self.dimension:
            raise DataError(f"categories cover [0, {cursor}) but dimension is {self.dimension}")
        object.__setattr__(self, "categories", tuple(ordered))
        object.__setattr__(self, "_starts", tuple(c.start for c in ordered))

    @classmethod
    def default(cls, dimension: int) -> "FeatureSpace":
        """Two categories: an add-only ``manifest`` block followed by a removable ``code`` block."""
        if dimension < 2:
            return cls(dimension, (FeatureCategory("code", 0, dimension, ADD_AND_REMOVE),))
        split = (dimension + 1) // 2
        return cls(dimension, (
            FeatureCategory("manifest", 0, split, ADD_ONLY),
            FeatureCategory("code", split, dimension, ADD_AND_REMOVE),
        ))

    def category_of(self, index: int) -> FeatureCategory:
        if not 0 <= index < self.dimension:
            raise DataError(f"feature index {index} outside [0, {self.dimension})")
        return self.categories[bisect.bisect_right(self._starts, index) - 1]

    def is_removable(self, index: int) -> bool:
        return self.category_of(index).removable

    def removable_flags(self) -> np.ndarray:
        flags = np.zeros(self.dimension, dtype=bool)
        for category in self.categories:
            if category.removable:
                flags[category.start:category.stop] = True
        return flags

    def manipulability_mask(self, categories: Optional[Sequence[str]] = None) -> "ManipulabilityMask":
        """Gamma over the named categories (every category when None)."""
        known = {c.name: c for c in self.categories}
        selected = list(known) if categories is None else list(categories)
        unknown = [name for name in selected if name not in known]
        if unknown:
            raise DataError(f"unknown feature categories: {unknown}")
        eligible: List[int] = []
        add_only: List[int] = []
        for name in selected:
            category = known[name]
            indices = range(category.start, category.stop)
            eligible.extend(indices)
            if not category.removable:
                add_only.extend(indices)
        return ManipulabilityMask(tuple(sorted(eligible)), frozenset(add_only), self.dimension)


@dataclass(frozen=True)
class ManipulabilityMask:
    eligible: Tuple[int, ...]
    add_only: frozenset
    dimension: int

    def __post_init__(self):
        if any(not 0 <= i < self.dimension for i in self.eligible):
            raise DataError("eligible indices must lie in [0, d)")

    def __len__(self) -> int:
        return len(self.eligible)

    def indices(self) -> np.ndarray:
        return np.asarray(self.eligible, dtype=np.int64)

    def allows_removal(self, index: int) -> bool:
        return index not in self.add_only


@dataclass(frozen=True)
class SparseBinaryVector:
    """A binary sample; ``active`` holds the indices set to 1, strictly increasing."""

    active: Tuple[int, ...]
    dimension: int

    def __post_init__(self):
        previous = -1
        for index in self.active:
            if index <= previous:
                raise DataError(f"active indices must be strictly increasing, got {index} after {previous}")
            previous = index
        if self.active and self.active[-1] >= self.dimension:
            raise DataError(f"feature index {self.active[-1]} outside [0, {self.dimension})")
        if self.active and self.active[0] < 0:
            raise DataError(f"negative feature index {self.active[0]}")

    @classmethod
    def from_indices(cls, indices: Iterable[int], dimension: int) -> "SparseBinaryVector":
        return cls(tuple(sorted({int(i) for i in indices})), dimension)

    @classmethod
    def from_dense(cls, values: np.ndarray) -> "SparseBinaryVector":
        values = np.asarray(values)
        return cls(tuple(int(i) for i in np.flatnonzero(values)), int(values.shape[0]))

    def __contains__(self, index: int) -> bool:
        position = bisect.bisect_left(self.active, index)
        return position < len(self.active) and self.active[position] == index

    def __len__(self) -> int:
        return len(self.active)

    def to_dense(self) -> np.ndarray:
        dense = np.zeros(self.dimension, dtype=np.float64)
        dense[list(self.active)] = 1.0
        return dense


@dataclass(frozen=True)
class Perturbation:
    """delta in {-1,0,1}^d; absent indices are 0."""

    entries: Mapping[int, int]
    dimension: int

    def __post_init__(self):
        for index, value in self.entries.items():
            if value not in (-1, 1):
                raise DataError(f"perturbation values must be -1 or +1, got {value} at {index}")
            if not 0 <= index < self.dimension:
                raise DataError(f"perturbation index {index} outside [0, {self.dimension})")
        object.__setattr__(self, "entries", dict(sorted(self.entries.items())))

    @classmethod
    def zero(cls, dimension: int) -> "Perturbation":
        return cls({}, dimension)

    @property
    def nonzero_count(self) -> int:
        return len(self.entries)

    def additions(self) -> List[int]:
        return [i for i, v in self.entries.items() if v > 0]

    def removals(self) -> List[int]:
        return [i for i, v in self.entries.items() if v < 0]

    def to_dense(self) -> np.ndarray:
        dense = np.zeros(self.dimension, dtype=np.int8)
        for index, value in self.entries.items():
            dense[index] = value
        return dense


@dataclass(frozen=True)
class LabeledDataset:
    samples: Tuple[SparseBinaryVector, ...]
    labels: Tuple[float, ...]
    space: FeatureSpace
    rounds: Optional[Tuple[Optional[int], ...]] = None

    def __post_init__(self):
        if len(self.samples) != len(self.labels):
            raise DataError(f"{len(self.samples)} samples but {len(self.labels)} labels")
        if self.rounds is not None and len(self.rounds) != len(self.samples):
            raise DataError("round tags must match the number of samples")
        if self.rounds is not None and all(tag is None for tag in self.rounds):
            object.__setattr__(self, "rounds", None)
        for label in self.labels:
            if not 0.0 <= label <= 1.0:
                raise DataError(f"labels must lie in [0, 1], got {label}")
        for sample in self.samples:
            if sample.dimension != self.space.dimension:
                raise DataError(f"sample dimension {sample.dimension} != feature space dimension {self.space.dimension}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def dimension(self) -> int:
        return self.space.dimension

    @property
    def is_discrete(self) -> bool:
        return all(label in (0.0, 1.0) for label in self.labels)

    def label_array(self) -> np.ndarray:
        return np.asarray(self.labels, dtype=np.float64)

    def hard_labels(self) -> np.ndarray:
        """Labels hardened at 0.5 (smoothed targets become 0/1)."""
        return (self.label_array() >= 0.5).astype(np.int64)

    def to_csr(self) -> sparse.csr_matrix:
        return samples_to_csr(self.samples, self.dimension)

    def subset(self, indices: Iterable[int]) -> "LabeledDataset":
        indices = [int(i) for i in indices]
        rounds = None if self.rounds is None else tuple(self.rounds[i] for i in indices)
        return LabeledDataset(
            tuple(self.samples[i] for i in indices),
            tuple(self.labels[i] for i in indices),
            self.space,
            rounds,
        )

    def with_labels(self, labels: Iterable[float]) -> "LabeledDataset":
        return LabeledDataset(self.samples, tuple(float(y) for y in labels), self.space, self.rounds)

    def malware(self) -> List[SparseBinaryVector]:
        return [x for x, y in zip(self.samples, self.hard_labels()) if y == 1]

    def goodware(self) -> List[SparseBinaryVector]:
        return [x for x, y in zip(self.samples, self.hard_labels()) if y == 0]


def samples_to_csr(samples: Sequence[SparseBinaryVector], dimension: int) -> sparse.csr_matrix:
    """Stack samples into an (n, d) CSR matrix of float64 ones."""
    indptr = np.zeros(len(samples) + 1, dtype=np.int64)
    for row, sample in enumerate(samples):
        if sample.dimension != dimension:
            raise DataError(f"sample dimension {sample.dimension} != {dimension}")
        indptr[row + 1] = indptr[row] + len(sample.active)
    indices = np.fromiter((i for s in samples for i in s.active), dtype=np.int64, count=int(indptr[-1]))
    data = np.ones(indices.shape[0], dtype=np.float64)
    return sparse.csr_matrix((data, indices, indptr), shape=(len(samples), dimension))


# ── Text format ─────────────────────────────────────────────────────────────

def _parse_label(token: str, line_number: int) -> float:
    try:
        label = float(token)
    except ValueError:
        raise SparseFormatError(line_number, f"label {token!r} is not a number")
    if not 0.0 <= label <= 1.0 or math.isnan(label):
        raise SparseFormatError(line_number, f"label {label} outside [0, 1]")
    return label


def parse_sparse_file(stream: TextIO, space: Optional[FeatureSpace] = None) -> LabeledDataset:
    """
    Parse the sparse text format into a LabeledDataset.

    The dimension comes from the ``#d=<int>`` header when present, otherwise
    1 + the largest index seen. Errors carry the 1-based line number.
    """
    declared: Optional[int] = None
    rows: List[Tuple[float, Tuple[int, ...], Optional[int]]] = []
    max_index = -1

    for line_number, raw in enumerate(stream, start=1):
        line = raw.strip()
        if not line:
            continue
        header = _HEADER_RE.match(line)
        if header:
            if rows or declared is not None:
                raise SparseFormatError(line_number, "the #d header must precede every sample")
            declared = int(header.group(1))
            if declared < 1:
                raise SparseFormatError(line_number, "declared dimension must be >= 1")
            continue
        if line.startswith("#"):
            raise SparseFormatError(line_number, f"unrecognised header {line!r}")

        body, _, comment = line.partition("#")
        round_tag = None
        if comment.strip():
            match = _ROUND_RE.match(comment.strip())
            if not match:
                raise SparseFormatError(line_number, f"unrecognised suffix {comment.strip()!r}")
            round_tag = int(match.group(1))

        tokens = body.split()
        if not tokens:
            raise SparseFormatError(line_number, "missing label")
        label = _parse_label(tokens[0], line_number)
        indices: List[int] = []
        for token in tokens[1:]:
            index_text, sep, value = token.partition(":")
            if sep != ":" or value != "1" or not (index_text.isascii() and index_text.isdigit()):
                raise SparseFormatError(line_number, f"malformed feature {token!r} (expected <idx>:1)")
            index = int(index_text)
            if indices and index <= indices[-1]:
                raise SparseFormatError(line_number, f"non-increasing indices ({indices[-1]} then {index})")
            if declared is not None and index >= declared:
                raise SparseFormatError(line_number, f"index {index} >= declared d={declared}")
            indices.append(index)
        if indices:
            max_index = max(max_index, indices[-1])
        rows.append((label, tuple(indices), round_tag))

    dimension = declared if declared is not None else max(max_index + 1, 1)
    if space is None:
        space = FeatureSpace.default(dimension)
    elif space.dimension != dimension:
        raise DataError(f"file dimension {dimension} != configured feature space dimension {space.dimension}")

    rounds = None
    if any(tag is not None for _, _, tag in rows):
        rounds = tuple(tag for _, _, tag in rows)
    logger.info("Parsed %d samples (d=%d)", len(rows), dimension)
    return LabeledDataset(
        tuple(SparseBinaryVector(indices, dimension) for _, indices, _ in rows),
        tuple(label for label, _, _ in rows),
        space,
        rounds,
    )


def _format_label(label: float) -> str:
    if label == 0.0:
        return "0"
    if label == 1.0:
        return "1"
    return repr(float(label))


def write_sparse_file(dataset: LabeledDataset, stream: TextIO) -> None:
    """Write *dataset* in the sparse text format (header always present, LF endings)."""
    stream.write(f"#d={dataset.dimension}\n")
    for position, (sample, label) in enumerate(zip(dataset.samples, dataset.labels)):
        parts = [_format_label(label)]
        parts.extend(f"{i}:1" for i in sample.active)
        if dataset.rounds is not None and dataset.rounds[position] is not None:
            parts.append(f"# round={dataset.rounds[position]}")
        stream.write(" ".join(parts) + "\n")


# ── Vector operations ───────────────────────────────────────────────────────

def apply_perturbation(x: SparseBinaryVector, delta: Perturbation) -> SparseBinaryVector:
    """clip(x + delta, 0, 1) on the active-set representation; *x* is left untouched."""
    if x.dimension != delta.dimension:
        raise DataError(f"dimension mismatch: sample {x.dimension}, perturbation {delta.dimension}")
    if not delta.entries:
        return x
    active = set(x.active)
    for index, value in delta.entries.items():
        if value > 0:
            active.add(index)
        else:
            active.discard(index)
    return SparseBinaryVector(tuple(sorted(active)), x.dimension)


def hamming_distance(x: SparseBinaryVector, other: SparseBinaryVector) -> int:
    if x.dimension != other.dimension:
        raise DataError(f"dimension mismatch: {x.dimension} vs {other.dimension}")
    return len(set(x.active).symmetric_difference(other.active))


# ── Synthetic data ──────────────────────────────────────────────────────────

class SynthSpec(BaseModel):
    """Planted-signature generator settings."""

    d: int = Field(default=200, ge=1)
    n_samples: int = Field(default=2000, ge=1)
    malware_ratio: float = Field(default=0.1, gt=0.0, lt=1.0)
    n_signature_features: int = Field(default=10, ge=1)
    noise_rate: float = Field(default=0.02, ge=0.0, le=1.0)
    n_rounds: int = Field(default=0, ge=0)
    drift_rate: float = Field(default=0.0, ge=0.0, le=1.0)


@dataclass(frozen=True)
class SignatureLayout:
    malicious: Tuple[int, ...]
    benign: Tuple[int, ...]
    drift: Tuple[int, ...]

    def signature_indices(self) -> frozenset:
        return frozenset(self.malicious) | frozenset(self.benign)


def signature_layout(spec: SynthSpec, seed: int) -> SignatureLayout:
    """Seeded placement of the malicious, benign and drift blocks in [0, d)."""
    s = spec.n_signature_features
    order = make_rng(seed, 0).permutation(spec.d)
    return SignatureLayout(
        tuple(sorted(int(i) for i in order[:s])),
        tuple(sorted(int(i) for i in order[s:2 * s])),
        tuple(int(i) for i in order[2 * s:3 * s]),
    )


def synth_generate(spec: SynthSpec, seed: int, space: Optional[FeatureSpace] = None) -> LabeledDataset:
    """
    Generate a planted-signature dataset.

    Malware activates each malicious signature index with probability 0.9 and
    each benign one with 0.1; goodware the reverse. Every other index is
    active with probability ``noise_rate``. Pure function of (spec, seed).
    """
    s = spec.n_signature_features
    if spec.d < 4 * s:
        raise DataError(f"infeasible synthetic spec: d={spec.d} < 4 * n_signature_features={4 * s}")
    if space is None:
        space = FeatureSpace.default(spec.d)
    elif space.dimension != spec.d:
        raise DataError(f"feature space dimension {space.dimension} != synthetic d={spec.d}")

    layout = signature_layout(spec, seed)
    malicious = np.asarray(layout.malicious)
    benign = np.asarray(layout.benign)
    drift = np.asarray(layout.drift)
    background = np.setdiff1d(np.arange(spec.d), np.concatenate([malicious, benign]))

    n_malware = int(round(spec.n_samples * spec.malware_ratio))
    labels = np.zeros(spec.n_samples, dtype=np.int64)
    labels[:n_malware] = 1
    rng = make_rng(seed, 1)
    labels = rng.permutation(labels)

    rounds: Optional[List[int]] = None
    if spec.n_rounds > 0:
        # chronological: sample position decides the round
        rounds = [int(i * spec.n_rounds // spec.n_samples) for i in range(spec.n_samples)]

    samples: List[SparseBinaryVector] = []
    for position, label in enumerate(labels):
        p_malicious, p_benign = (0.9, 0.1) if label == 1 else (0.1, 0.9)
        on_malicious = malicious[rng.random(s) < p_malicious]
        on_benign = benign[rng.random(s) < p_benign]
        if label == 1 and rounds is not None and spec.drift_rate > 0:
            swap_prob = min(1.0, rounds[position] * spec.drift_rate)
            slots = np.searchsorted(malicious, on_malicious)
            swapped = rng.random(on_malicious.shape[0]) < swap_prob
            on_malicious = np.concatenate([on_malicious[~swapped], drift[slots[swapped]]])
        n_noise = rng.binomial(background.shape[0], spec.noise_rate) if spec.noise_rate > 0 else 0
        on_noise = rng.choice(background, size=n_noise, replace=False) if n_noise else np.empty(0, dtype=np.int64)
        active = np.unique(np.concatenate([on_malicious, on_benign, on_noise]).astype(np.int64))
        samples.append(SparseBinaryVector(tuple(int(i) for i in active), spec.d))

    logger.info("Generated %d synthetic samples (%d malware, d=%d)", spec.n_samples, n_malware, spec.d)
    return LabeledDataset(
        tuple(samples),
        tuple(float(y) for y in labels),
        space,
        None if rounds is None else tuple(rounds),
    )


def split_dataset(dataset: LabeledDataset, test_fraction: float, seed: int) -> Tuple[LabeledDataset, LabeledDataset]:
    """Seeded (stratified when possible) split into (first, second) with ``test_fraction`` in the second."""
    if len(dataset) < 2:
        raise DataError("need at least 2 samples to split")
    positions = np.arange(len(dataset))
    first, second = train_test_split(
        positions,
        test_size=test_fraction,
        random_state=seed,
        stratify=_stratify_labels(dataset),
    )
    return dataset.subset(sorted(first)), dataset.subset(sorted(second))


def _stratify_labels(dataset: LabeledDataset) -> Optional[np.ndarray]:
    hard = dataset.hard_labels()
    counts: Dict[int, int] = {0: int((hard == 0).sum()), 1: int((hard == 1).sum())}
    if min(counts.values()) >= 2:
        return hard
    return None
