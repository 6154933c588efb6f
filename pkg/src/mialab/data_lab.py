"""Datasets, the MIAD binary format, bounds, augmentation and split plans."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Sequence, Tuple, Union

import numpy as np

MIAD_MAGIC = b"MIAD"
MIAD_VERSION = 1


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    x: np.ndarray  # (n, *shape) float64
    y: np.ndarray  # (n,) int64
    classes: int

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim < 2 or len(self.x) != len(self.y):
            raise ValueError("x must be (n, ...) with one label per example")
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.classes):
            raise ValueError("labels out of range")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("dataset contains non-finite values")

    def __len__(self):
        return len(self.y)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.x.shape[1:])

    @property
    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        return empirical_bounds(self)

    def subset(self, ids) -> "Dataset":
        ids = np.asarray(ids, dtype=np.int64)
        return Dataset(self.x[ids], self.y[ids], self.classes)


def synth_blobs(
    classes: int,
    per_class: int,
    dim: Union[int, Sequence[int]],
    spread: float,
    seed: int,
    separation: float = 1.0,
) -> Dataset:
    """Gaussian class clusters: mean ~ N(0, separation^2 I), x = mean + spread * N(0, I)."""
    if classes < 2:
        raise ValueError("classes must be at least 2")
    if per_class < 10:
        raise ValueError("per_class must be at least 10")
    if not spread > 0:
        raise ValueError("spread must be positive")
    shape = (int(dim),) if np.isscalar(dim) else tuple(int(d) for d in dim)
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((classes,) + shape) * separation
    y = np.repeat(np.arange(classes), per_class)
    x = means[y] + spread * rng.standard_normal((len(y),) + shape)
    x = x.astype(np.float32).astype(np.float64)  # exactly representable in MIAD files
    order = rng.permutation(len(y))
    return Dataset(x[order], y[order], classes)


def empirical_bounds(ds: Dataset) -> Tuple[np.ndarray, np.ndarray]:
    """Per-feature (min, max) over the dataset, both of the example shape."""
    if len(ds) == 0:
        raise ValueError("empty dataset has no bounds")
    return ds.x.min(axis=0), ds.x.max(axis=0)


def augment_flip(x: np.ndarray, apply: bool) -> np.ndarray:
    """Mirror a (C, H, W) image (or a batch of them) along the width axis."""
    x = np.asarray(x)
    if x.ndim not in (3, 4):
        raise ValueError(f"flip needs an image-shaped tensor (C, H, W), got {x.shape}")
    return x[..., ::-1].copy() if apply else x


# --------------------------------------------------------------------------
# MIAD files
# --------------------------------------------------------------------------


def save_dataset(ds: Dataset, path) -> None:
    n = len(ds)
    dims = ds.shape
    if ds.classes > 0xFFFF:
        raise ValueError("labels are stored as u16")
    header = MIAD_MAGIC + struct.pack("<IIII", MIAD_VERSION, n, ds.classes, len(dims))
    header += struct.pack(f"<{len(dims)}I", *dims)
    payload = header + ds.y.astype("<u2").tobytes() + ds.x.astype("<f4").tobytes()
    _atomic_write(Path(path), payload)


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != MIAD_MAGIC:
        raise DatasetFormatError("bad magic, not a MIAD file")
    if len(raw) < 20:
        raise DatasetFormatError("truncated header")
    version, n, classes, ndim = struct.unpack_from("<IIII", raw, 4)
    if version != MIAD_VERSION:
        raise DatasetFormatError(f"unsupported MIAD version {version}")
    off = 20
    if len(raw) < off + 4 * ndim:
        raise DatasetFormatError("truncated dims")
    dims = struct.unpack_from(f"<{ndim}I", raw, off)
    off += 4 * ndim
    per = int(np.prod(dims)) if ndim else 1
    need = off + 2 * n + 4 * n * per
    if len(raw) < need:
        raise DatasetFormatError(f"truncated payload: {len(raw)} bytes, expected {need}")
    if len(raw) > need:
        raise DatasetFormatError(f"trailing bytes: {len(raw)} bytes, expected {need}")
    y = np.frombuffer(raw, dtype="<u2", count=n, offset=off).astype(np.int64)
    off += 2 * n
    x = np.frombuffer(raw, dtype="<f4", count=n * per, offset=off).astype(np.float64)
    return Dataset(x.reshape((n,) + tuple(dims)), y, classes)


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


# --------------------------------------------------------------------------
# Split plans
# --------------------------------------------------------------------------


@dataclass
class SplitPlan:
    """Index sets into one dataset.

    ``members`` is the training half minus ``validation``; ``nonmembers`` is
    the held-out half. The attack splits hold ids drawn from those two.
    ``aux`` is an optional pool set aside before halving (shadow training).
    """

    members: np.ndarray
    nonmembers: np.ndarray
    validation: np.ndarray
    attack_val_members: np.ndarray
    attack_val_nonmembers: np.ndarray
    attack_test_members: np.ndarray
    attack_test_nonmembers: np.ndarray
    seed: int
    aux: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def sets(self) -> Dict[str, np.ndarray]:
        return {
            "members": self.members,
            "nonmembers": self.nonmembers,
            "validation": self.validation,
            "attack_val_members": self.attack_val_members,
            "attack_val_nonmembers": self.attack_val_nonmembers,
            "attack_test_members": self.attack_test_members,
            "attack_test_nonmembers": self.attack_test_nonmembers,
            "aux": self.aux,
        }

    @property
    def train_half(self) -> np.ndarray:
        return np.sort(np.concatenate([self.members, self.validation]))

    def attack_split(self, which: str) -> Tuple[np.ndarray, np.ndarray]:
        """``(ids, is_member)`` for ``"validation"`` or ``"test"``."""
        if which == "validation":
            m, nm = self.attack_val_members, self.attack_val_nonmembers
        elif which == "test":
            m, nm = self.attack_test_members, self.attack_test_nonmembers
        else:
            raise ValueError(f"unknown attack split {which!r}")
        ids = np.concatenate([m, nm])
        return ids, np.concatenate([np.ones(len(m), bool), np.zeros(len(nm), bool)])


def _stratified_take(ids_by_class, fraction, rng):
    """Take round(fraction * n_c) ids from each class; return (taken, rest) per class."""
    taken, rest = {}, {}
    for c, ids in ids_by_class.items():
        k = int(np.floor(fraction * len(ids) + 0.5))
        perm = rng.permutation(ids)
        taken[c], rest[c] = np.sort(perm[:k]), np.sort(perm[k:])
    return taken, rest


def _stratified_count(pool: np.ndarray, labels: np.ndarray, count: int, rng, what: str) -> np.ndarray:
    """Draw ``count`` ids from ``pool`` keeping class proportions (largest remainder)."""
    if count > len(pool):
        raise ValueError(f"{what}: need {count} ids but only {len(pool)} available")
    classes = np.unique(labels[pool])
    sizes = np.array([(labels[pool] == c).sum() for c in classes])
    quota = count * sizes / sizes.sum()
    base = np.floor(quota).astype(int)
    short = count - base.sum()
    order = np.lexsort((classes, -(quota - base)))
    base[order[:short]] += 1
    out = []
    for c, k in zip(classes, base):
        ids = pool[labels[pool] == c]
        out.append(rng.permutation(ids)[:k])
    return np.sort(np.concatenate(out)) if out else np.zeros(0, dtype=np.int64)


def stratified_split(
    ds: Dataset,
    seed: int,
    attack_val: int = 200,
    attack_test: int = 500,
    validation_fraction: float = 0.05,
    aux_fraction: float = 0.0,
) -> SplitPlan:
    """Halve the data per class, reserve validation, draw the attack splits.

    ``attack_val`` / ``attack_test`` are the member counts (and, separately,
    the non-member counts) of each attack split. Members come from the
    training half, non-members from the held-out half; the two attack splits
    never share an id.
    """
    rng = np.random.default_rng(seed)
    labels = ds.y
    by_class = {c: np.flatnonzero(labels == c) for c in range(ds.classes)}
    aux = np.zeros(0, dtype=np.int64)
    if aux_fraction > 0:
        aux_c, by_class = _stratified_take(by_class, aux_fraction, rng)
        aux = np.sort(np.concatenate(list(aux_c.values())))
    train_c, held_c = _stratified_take(by_class, 0.5, rng)
    val_c, mem_c = _stratified_take(train_c, validation_fraction, rng)
    for c in by_class:
        if not (labels == c).any():
            continue
        strata = [mem_c[c], held_c[c]]
        if validation_fraction > 0:
            strata.append(val_c[c])
        if aux_fraction > 0:
            strata.append(aux_c[c])
        if any(len(s) == 0 for s in strata):
            raise ValueError(f"class {c} has {(labels == c).sum()} examples, too few for every stratum")

    members = np.sort(np.concatenate(list(mem_c.values())))
    nonmembers = np.sort(np.concatenate(list(held_c.values())))
    validation = np.sort(np.concatenate(list(val_c.values())))

    av_m = _stratified_count(members, labels, attack_val, rng, "attack-validation members")
    av_n = _stratified_count(nonmembers, labels, attack_val, rng, "attack-validation non-members")
    at_m = _stratified_count(np.setdiff1d(members, av_m), labels, attack_test, rng, "attack-test members")
    at_n = _stratified_count(
        np.setdiff1d(nonmembers, av_n), labels, attack_test, rng, "attack-test non-members"
    )
    return SplitPlan(members, nonmembers, validation, av_m, av_n, at_m, at_n, seed, aux)
