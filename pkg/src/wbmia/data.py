"""
Classification datasets and member/non-member split plans.

The synthetic generator stands in for Purchase100-style data: binary feature
vectors drawn around ``K`` random binary prototypes, one per class.
"""

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from wbmia import rng as _rng
from wbmia.errors import ArgumentError, FormatError


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        if self.features.ndim != 2 or len(self.features) < 1:
            raise ArgumentError("features must be a non-empty 2-D array")
        if self.labels.shape != (len(self.features),):
            raise ArgumentError("one label per record required")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ArgumentError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(self.features)):
            raise ArgumentError("features must be finite")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return self.features[idx], self.labels[idx]


def synth_purchase_like(n: int, d: int, K: int, cluster_spread: float, seed: int,
                        name: str = "synth-purchase") -> Dataset:
    """Binary records scattered around ``K`` random prototypes.

    Each record picks a class uniformly, copies that class's prototype and
    flips every bit independently with probability ``cluster_spread``.
    """
    if K < 2 or n < K or d < 1:
        raise ArgumentError(f"need n >= K >= 2 and d >= 1 (got n={n}, K={K}, d={d})")
    if not 0.0 <= cluster_spread <= 1.0:
        raise ArgumentError("cluster_spread is a flip probability in [0, 1]")
    gen = _rng.stream(seed, "synth")
    prototypes = gen.integers(0, 2, size=(K, d)).astype(np.float64)
    labels = gen.integers(0, K, size=n)
    flips = gen.random((n, d)) < cluster_spread
    features = np.abs(prototypes[labels] - flips)
    return Dataset(features, labels.astype(np.int64), K, name)


def load_csv(path, label_column: str, num_classes: int, name: str | None = None) -> Dataset:
    """Read a numeric CSV with a header row; ``label_column`` holds class indices."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise FormatError(f"{path}: no column named {label_column!r}")
        li = header.index(label_column)
        feats, labels = [], []
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}: row {rowno} has {len(row)} cells, header has {len(header)}")
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise FormatError(f"{path}: row {rowno} has a non-numeric cell") from None
            lab = vals[li]
            if not math.isfinite(lab) or lab != int(lab) or not 0 <= lab < num_classes:
                raise FormatError(f"{path}: row {rowno} label {row[li]!r} not in [0, {num_classes})")
            if not all(math.isfinite(v) for v in vals):
                raise FormatError(f"{path}: row {rowno} has a non-finite value")
            labels.append(int(lab))
            feats.append(vals[:li] + vals[li + 1:])
    if not labels:
        raise FormatError(f"{path}: no data rows")
    return Dataset(np.array(feats, dtype=np.float64), np.array(labels, dtype=np.int64),
                   num_classes, name or path.stem)


def write_csv(ds: Dataset, path, label_column: str = "label") -> Path:
    """Write ``ds`` as CSV with columns ``f0..f{d-1}`` then the label column."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{j}" for j in range(ds.dim)] + [label_column])
        for x, y in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])
    return path


@dataclass(frozen=True)
class SplitPlan:
    """Index sets into one :class:`Dataset`.

    ``target_train`` is the member set D. Attack member sets are drawn from
    D; attack non-member sets and ``target_test`` are drawn from outside D.
    ``finetune`` (D_delta) is disjoint from everything else.
    """

    target_train: np.ndarray
    target_test: np.ndarray
    attack_train_members: np.ndarray
    attack_train_nonmembers: np.ndarray
    attack_test_members: np.ndarray
    attack_test_nonmembers: np.ndarray
    finetune: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def check(self):
        """Raise ``ArgumentError`` if any declared disjointness is violated."""
        D = set(self.target_train.tolist())
        s = {k: set(getattr(self, k).tolist()) for k in (
            "target_test", "attack_train_members", "attack_train_nonmembers",
            "attack_test_members", "attack_test_nonmembers", "finetune")}
        for k in ("attack_train_members", "attack_test_members"):
            if not s[k] <= D:
                raise ArgumentError(f"{k} must be a subset of target_train")
        for k in ("attack_train_nonmembers", "attack_test_nonmembers", "finetune", "target_test"):
            if s[k] & D:
                raise ArgumentError(f"{k} overlaps target_train")
        if s["finetune"] & (s["attack_train_nonmembers"] | s["attack_test_nonmembers"] | s["target_test"]):
            raise ArgumentError("finetune set overlaps non-member or test sets")
        if s["attack_train_members"] & s["attack_test_members"]:
            raise ArgumentError("attack train/test members overlap")
        if s["attack_train_nonmembers"] & s["attack_test_nonmembers"]:
            raise ArgumentError("attack train/test non-members overlap")
        if len(self.attack_test_members) != len(self.attack_test_nonmembers):
            raise ArgumentError("attack test members and non-members must have equal size")
        return self

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        return cls(**{k: np.asarray(v, dtype=np.int64) for k, v in d.items()})


def make_split(n: int, train: int, test: int, attack_train_members: int,
               attack_train_nonmembers: int, attack_test: int, seed: int,
               finetune: int = 0, nonmembers_from_test: bool = False) -> SplitPlan:
    """Uniformly random disjoint split of ``range(n)``.

    Members come from the training set; ``attack_test`` is the size of each
    of the two balanced attack test sets. Non-members come from records
    outside training and test unless ``nonmembers_from_test`` is set, in which
    case they are carved out of the target test set.
    """
    if isinstance(n, Dataset):
        n = len(n)
    sizes = dict(train=train, test=test, attack_train_members=attack_train_members,
                 attack_train_nonmembers=attack_train_nonmembers, attack_test=attack_test,
                 finetune=finetune)
    for k, v in sizes.items():
        if v < 0:
            raise ArgumentError(f"{k} must be >= 0")
    if train < 1:
        raise ArgumentError("train set must be non-empty")
    if attack_train_members + attack_test > train:
        raise ArgumentError(
            f"member sets need {attack_train_members + attack_test} records, train has {train} "
            f"(deficit {attack_train_members + attack_test - train})")
    outside_nm = 0 if nonmembers_from_test else attack_train_nonmembers + attack_test
    need = train + test + finetune + outside_nm
    if need > n:
        raise ArgumentError(f"split needs {need} records, dataset has {n} (deficit {need - n})")
    if nonmembers_from_test and attack_train_nonmembers + attack_test > test:
        raise ArgumentError(
            f"non-member sets need {attack_train_nonmembers + attack_test} records, test has {test} "
            f"(deficit {attack_train_nonmembers + attack_test - test})")
    perm = _rng.stream(seed, "split").permutation(n)
    cut = np.cumsum([train, test, finetune, outside_nm])
    D, T, F, NM = np.split(perm[:cut[-1]], cut[:-1])
    if nonmembers_from_test:
        NM = T
    plan = SplitPlan(
        target_train=np.sort(D),
        target_test=np.sort(T),
        attack_train_members=np.sort(D[:attack_train_members]),
        attack_test_members=np.sort(D[attack_train_members:attack_train_members + attack_test]),
        attack_train_nonmembers=np.sort(NM[:attack_train_nonmembers]),
        attack_test_nonmembers=np.sort(NM[attack_train_nonmembers:attack_train_nonmembers + attack_test]),
        finetune=np.sort(F),
    )
    return plan.check()


def split_participants(indices, num_participants: int, size: int, seed: int,
                       overlap: bool = False) -> list[np.ndarray]:
    """Per-participant index sets of equal ``size`` drawn from ``indices``.

    Disjoint by default; with ``overlap`` each participant samples
    independently (without replacement within itself).
    """
    indices = np.asarray(indices, dtype=np.int64)
    gen = _rng.stream(seed, "participants")
    if overlap:
        if size > len(indices):
            raise ArgumentError(f"participant size {size} exceeds pool of {len(indices)}")
        return [np.sort(gen.choice(indices, size=size, replace=False)) for _ in range(num_participants)]
    if size * num_participants > len(indices):
        raise ArgumentError(
            f"{num_participants} disjoint participants of {size} need {size * num_participants} "
            f"records, pool has {len(indices)}")
    perm = gen.permutation(indices)
    return [np.sort(perm[i * size:(i + 1) * size]) for i in range(num_participants)]
