"""Score tables and the interrogate-then-detect composition."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ..interrogation import InterrogationConfig, interrogate, interrogate_batch
from ..tensor_core import Model
from .base import Detector

SCORE_COLUMNS = ("sample_id", "is_member", "detector", "boosted", "score")
VALIDATION = "attack-validation"
TEST = "attack-test"


class ScoreTableError(ValueError):
    pass


@dataclass
class ScoreTable:
    """Per-sample scores; ``split`` records which attack split produced them."""

    sample_id: np.ndarray
    is_member: np.ndarray
    detector: np.ndarray
    boosted: np.ndarray
    score: np.ndarray
    split: Optional[str] = None

    def __post_init__(self):
        self.sample_id = np.asarray(self.sample_id, dtype=np.int64)
        self.is_member = np.asarray(self.is_member, dtype=bool)
        self.detector = np.asarray(self.detector, dtype=object)
        self.boosted = np.asarray(self.boosted, dtype=bool)
        self.score = np.asarray(self.score, dtype=np.float64)
        n = len(self.sample_id)
        if not all(len(a) == n for a in (self.is_member, self.detector, self.boosted, self.score)):
            raise ScoreTableError("column lengths differ")
        if not np.all(np.isfinite(self.score)):
            raise ScoreTableError("scores must be finite")
        keys = set()
        for sid, det, b in zip(self.sample_id, self.detector, self.boosted):
            k = (int(sid), det, bool(b))
            if k in keys:
                raise ScoreTableError(f"duplicate row for sample {sid}, detector {det}, boosted {int(b)}")
            keys.add(k)

    def __len__(self):
        return len(self.score)

    @classmethod
    def single(cls, detector: str, boosted: bool, sample_id, is_member, score, split=None) -> "ScoreTable":
        n = len(score)
        return cls(sample_id, is_member, [detector] * n, [boosted] * n, score, split)

    @classmethod
    def concat(cls, tables: Sequence["ScoreTable"]) -> "ScoreTable":
        splits = {t.split for t in tables}
        return cls(
            np.concatenate([t.sample_id for t in tables]),
            np.concatenate([t.is_member for t in tables]),
            np.concatenate([t.detector for t in tables]),
            np.concatenate([t.boosted for t in tables]),
            np.concatenate([t.score for t in tables]),
            splits.pop() if len(splits) == 1 else None,
        )

    def keys(self) -> List[Tuple[str, bool]]:
        seen = []
        for det, b in zip(self.detector, self.boosted):
            k = (str(det), bool(b))
            if k not in seen:
                seen.append(k)
        return seen

    def select(self, detector: str, boosted: bool) -> Tuple[np.ndarray, np.ndarray]:
        """``(scores, is_member)`` for one detector / boosted slice."""
        mask = (self.detector == detector) & (self.boosted == boosted)
        return self.score[mask], self.is_member[mask]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SCORE_COLUMNS)
        for row in zip(self.sample_id, self.is_member, self.detector, self.boosted, self.score):
            w.writerow([int(row[0]), int(row[1]), row[2], int(row[3]), repr(float(row[4]))])
        return buf.getvalue()

    def write(self, path) -> None:
        from ..data_lab import _atomic_write

        _atomic_write(Path(path), self.to_csv().encode())

    @classmethod
    def from_csv(cls, text: str, split: Optional[str] = None) -> "ScoreTable":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != SCORE_COLUMNS:
            raise ScoreTableError(f"row 1: expected header {','.join(SCORE_COLUMNS)}")
        cols = [[] for _ in SCORE_COLUMNS]
        for lineno, row in enumerate(rows[1:], start=2):
            if len(row) != len(SCORE_COLUMNS):
                raise ScoreTableError(f"row {lineno}: expected {len(SCORE_COLUMNS)} fields, got {len(row)}")
            try:
                sid = int(row[0])
                mem = _bit(row[1])
                boosted = _bit(row[3])
                score = float(row[4])
            except ValueError as exc:
                raise ScoreTableError(f"row {lineno}: {exc}") from None
            if not np.isfinite(score):
                raise ScoreTableError(f"row {lineno}: non-finite score")
            for c, v in zip(cols, (sid, mem, row[2], boosted, score)):
                c.append(v)
        try:
            return cls(*cols, split=split)
        except ScoreTableError as exc:
            raise ScoreTableError(f"malformed table: {exc}") from None

    @classmethod
    def read(cls, path, split: Optional[str] = None) -> "ScoreTable":
        return cls.from_csv(Path(path).read_text(), split)


def _bit(s: str) -> bool:
    if s not in ("0", "1"):
        raise ValueError(f"expected 0 or 1, got {s!r}")
    return s == "1"


def leakboost_attack(model: Model, x, y, icfg: InterrogationConfig, detector: Detector, bounds,
                     defense=None) -> float:
    """Score of ``detector`` on the interrogation image of ``x`` (label ``y`` unchanged)."""
    xg = interrogate(model, x, icfg, bounds, defense=defense)
    return detector.score(model, xg, y)


def leakboost_scores(model: Model, x, y, icfg: InterrogationConfig, detector: Detector, bounds,
                     sample_ids=None, defense=None) -> np.ndarray:
    """Batch form of ``leakboost_attack``; interrogation seeds follow ``sample_ids``."""
    sample_ids = np.arange(len(x)) if sample_ids is None else np.asarray(sample_ids)
    xg = interrogate_batch(model, x, icfg, bounds, sample_ids, defense=defense)
    return detector.scores(model, xg, np.asarray(y), sample_ids)
