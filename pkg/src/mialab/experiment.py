"""End-to-end pipeline: data, target and shadow training, detectors, attack splits, sweep."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import RunConfig
from .data_lab import Dataset, SplitPlan, empirical_bounds, load_dataset, stratified_split, synth_blobs
from .defense import Obfuscation
from .detectors import (
    TEST, VALIDATION, GlirDetector, IaDetector, LaeqDetector, LossDetector, ScoreTable, ShadowData,
    SifDetector, ia_fit,
)
from .detectors.base import Detector
from .evaluation import evaluate, report_rows, tune_select
from .interrogation import InterrogationConfig, interrogate_batch, run_interrogation, sample_seed
from .model_zoo import build_model
from .tensor_core import Model
from .trainer import accuracy, train

SHADOW_ID_STRIDE = 1_000_000  # keeps shadow query ids apart from target ids in seed derivation


def make_dataset(cfg: RunConfig) -> Dataset:
    src = cfg["data.source"]
    if src != "synth":
        return load_dataset(src)
    shape = cfg["data.shape"]
    dim = shape[0] if len(shape) == 1 else tuple(shape)
    return synth_blobs(cfg["data.classes"], cfg["data.per_class"], dim, cfg["data.spread"],
                       cfg.derived("data"), separation=cfg["data.separation"])


def make_split(cfg: RunConfig, ds: Dataset) -> SplitPlan:
    return stratified_split(ds, cfg.derived("split"), cfg["split.attack_val"], cfg["split.attack_test"],
                            cfg["split.validation_fraction"], cfg["split.aux_fraction"])


def train_target(cfg: RunConfig, ds: Dataset, split: SplitPlan) -> Tuple[Model, List[dict]]:
    model = build_model(cfg["run.arch"], ds.shape, ds.classes, cfg.derived("init"))
    return train(model, ds, split, cfg.train_config())


@dataclass
class Pipeline:
    """Everything the attack stage needs; built by ``prepare``."""

    cfg: RunConfig
    ds: Dataset
    split: SplitPlan
    model: Model
    history: List[dict] = field(default_factory=list)
    _shadows: Optional[List[Tuple[ShadowData, np.ndarray]]] = None

    @property
    def bounds(self):
        return empirical_bounds(self.ds)

    @property
    def defense(self) -> Optional[Obfuscation]:
        sigma = self.cfg["defense.sigma"]
        return Obfuscation(sigma, self.cfg.derived("defense")) if sigma > 0 else None

    def with_defense(self, sigma: float) -> "Pipeline":
        return replace(self, cfg=self.cfg.replace(defense__sigma=float(sigma)))

    def accuracies(self) -> Dict[str, float]:
        return {
            "train_acc": accuracy(self.model, self.ds, self.split.members),
            "test_acc": accuracy(self.model, self.ds, self.split.nonmembers),
        }

    def shadows(self) -> List[Tuple[ShadowData, np.ndarray]]:
        """Shadow models trained like the target on halves of the aux pool.

        Returns ``(ShadowData, query_ids)``; ids are offset per shadow so each
        query gets its own interrogation seed.
        """
        if self._shadows is None:
            if len(self.split.aux) == 0:
                raise ValueError("IA needs an aux pool: set split.aux_fraction > 0")
            pool = self.ds.subset(self.split.aux)
            vf = self.cfg["split.validation_fraction"]
            smallest = min(int((pool.y == c).sum()) for c in np.unique(pool.y)) // 2
            if np.floor(vf * smallest + 0.5) < 1:
                vf = 0.0  # pool too small to hold out a per-class validation set
            out = []
            for j in range(self.cfg["ia.shadows"]):
                sp = stratified_split(pool, self.cfg.derived("shadow-split", j), 0, 0, vf)
                m = build_model(self.cfg["run.arch"], pool.shape, pool.classes, self.cfg.derived("shadow-init", j))
                m, _ = train(m, pool, sp, self.cfg.train_config("shadow-train", j))
                local = np.concatenate([sp.members, sp.nonmembers])
                is_member = np.r_[np.ones(len(sp.members), bool), np.zeros(len(sp.nonmembers), bool)]
                ids = SHADOW_ID_STRIDE * (j + 1) + local
                out.append((ShadowData(m, pool.x[local], pool.y[local], is_member), ids))
            self._shadows = out
        return self._shadows

    def queries(self, which: str, boosted: bool, icfg: Optional[InterrogationConfig] = None):
        """``(ids, is_member, x, y)`` for an attack split, interrogated when ``boosted``."""
        ids, mem = self.split.attack_split(which)
        x, y = self.ds.x[ids], self.ds.y[ids]
        if boosted:
            x = interrogate_batch(self.model, x, icfg or self.cfg.interrogation_config(), self.bounds, ids,
                                  self.defense)
        return ids, mem, x, y


def prepare(cfg: RunConfig, ds: Optional[Dataset] = None, model: Optional[Model] = None) -> Pipeline:
    ds = make_dataset(cfg) if ds is None else ds
    split = make_split(cfg, ds)
    history: List[dict] = []
    if model is None:
        model, history = train_target(cfg, ds, split)
    elif model.spec.input_shape != ds.shape or model.spec.classes != ds.classes:
        raise ValueError("model does not match the dataset's input shape or class count")
    return Pipeline(cfg, ds, split, model, history)


# --------------------------------------------------------------------------
# Detectors
# --------------------------------------------------------------------------


def fit_glir(p: Pipeline, ids, mem, x, y) -> GlirDetector:
    return GlirDetector.fit(p.model, (x[mem], y[mem]), (x[~mem], y[~mem]), p.cfg["glir.d_sub"],
                            p.cfg["glir.tau"], p.cfg.derived("glir"), p.cfg["glir.mode"])


def fit_ia(p: Pipeline, boosted: bool, icfg: Optional[InterrogationConfig] = None) -> IaDetector:
    icfg = icfg or p.cfg.interrogation_config()
    shadows = []
    for sd, ids in p.shadows():
        if boosted:
            xg = interrogate_batch(sd.model, sd.x, icfg, p.bounds, ids, p.defense)
            sd = ShadowData(sd.model, xg, sd.y, sd.is_member)
        shadows.append(sd)
    meta = ia_fit(shadows, p.cfg.meta_config(), p.model.spec, p.defense)
    return IaDetector(meta, p.defense)


def build_detectors(p: Pipeline, boosted: bool, icfg: Optional[InterrogationConfig] = None,
                    names: Optional[Sequence[str]] = None) -> Dict[str, Detector]:
    """Detectors for one mode; calibrated ones are fitted on inputs of that mode.

    GLiR is calibrated on attack-validation queries, IA on shadow queries.
    """
    names = tuple(names or p.cfg["detectors.list"])
    out: Dict[str, Detector] = {}
    for name in names:
        if name == "GLiR":
            out[name] = fit_glir(p, *p.queries("validation", boosted, icfg))
        elif name == "loss":
            out[name] = LossDetector()
        elif name == "LAEQ":
            out[name] = LaeqDetector(p.cfg.laeq_spec())
        elif name == "SIF":
            out[name] = SifDetector(p.cfg.sif_spec())
        elif name == "IA":
            out[name] = fit_ia(p, boosted, icfg)
        else:
            raise ValueError(f"unknown detector {name!r}")
    return out


def score_queries(p: Pipeline, detectors: Dict[str, Detector], queries, boosted: bool, split_name: str) -> ScoreTable:
    ids, mem, x, y = queries
    tables = [ScoreTable.single(name, boosted, ids, mem, det.scores(p.model, x, y, ids), split_name)
              for name, det in detectors.items()]
    return ScoreTable.concat(tables)


def run_attack(p: Pipeline, icfg: Optional[InterrogationConfig] = None,
               names: Optional[Sequence[str]] = None) -> ScoreTable:
    """Attack-test scores for every detector, unboosted and boosted."""
    tables = []
    for boosted in (False, True):
        dets = build_detectors(p, boosted, icfg, names)
        tables.append(score_queries(p, dets, p.queries("test", boosted, icfg), boosted, TEST))
    return ScoreTable.concat(tables)


# --------------------------------------------------------------------------
# Hyperparameter sweep on attack-validation
# --------------------------------------------------------------------------


def _crossfit_glir(p: Pipeline, ids, mem, x, y) -> np.ndarray:
    """Two-fold GLiR scores: each half is scored by a fit on the other half."""
    fold = np.zeros(len(ids), dtype=int)
    for flag in (True, False):
        where = np.flatnonzero(mem == flag)
        fold[where[1::2]] = 1
    scores = np.zeros(len(ids))
    for k in (0, 1):
        fit_on, score_on = fold != k, fold == k
        det = fit_glir(p, ids[fit_on], mem[fit_on], x[fit_on], y[fit_on])
        scores[score_on] = det.scores(p.model, x[score_on], y[score_on], ids[score_on])
    return scores


def sweep_tables(p: Pipeline, grid: Optional[Sequence[InterrogationConfig]] = None,
                 detector: Optional[str] = None) -> List[Tuple[InterrogationConfig, ScoreTable]]:
    """Boosted attack-validation tables for every grid point.

    Configs differing only in ``steps`` share one interrogation run, kept at
    each step count. GLiR scores are two-fold cross-fitted so no query is
    scored by a fit that saw it.
    """
    grid = list(grid or p.cfg.sweep_grid())
    detector = detector or p.cfg["sweep.detector"]
    ids, mem, x, y = p.queries("validation", False)
    runs: Dict[InterrogationConfig, List[InterrogationConfig]] = {}
    for c in grid:
        runs.setdefault(replace(c, steps=1), []).append(c)
    out = {}
    for base, members in runs.items():
        longest = replace(base, steps=max(c.steps for c in members))
        seeds = [sample_seed(longest.seed, int(i)) for i in ids]
        res = run_interrogation(p.model, x, longest, p.bounds, seeds, [c.steps for c in members],
                                p.defense, ids)
        for c in members:
            xg = res.snapshots[c.steps]
            if detector == "GLiR":
                s = _crossfit_glir(p, ids, mem, xg, y)
            else:
                det = build_detectors(p, True, c, [detector])[detector]
                s = det.scores(p.model, xg, y, ids)
            out[c] = ScoreTable.single(detector, True, ids, mem, s, VALIDATION)
    return [(c, out[c]) for c in grid]


SWEEP_COLUMNS = ("label", "group", "steps", "lr", "clip", "auc", "tpr_at_1pct", "tpr_at_0p1pct", "pauc_at_1pct")


def sweep_csv(candidates, detector: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for c, t in candidates:
        r = evaluate(*t.select(detector, True))
        w.writerow([c.label(), c.group, c.steps, repr(c.lr), int(c.clip), repr(r.auc), repr(r.tpr_at_1pct),
                    repr(r.tpr_at_0p1pct), repr(r.pauc_at_1pct)])
    return buf.getvalue()


def run_sweep(p: Pipeline) -> Tuple[List[Tuple[InterrogationConfig, ScoreTable]], InterrogationConfig, RunConfig]:
    detector = p.cfg["sweep.detector"]
    candidates = sweep_tables(p, detector=detector)
    chosen = tune_select(candidates, detector, True)
    chosen_cfg = p.cfg.replace(interrogation__group=chosen.group, interrogation__steps=chosen.steps,
                               interrogation__lr=chosen.lr, interrogation__clip=chosen.clip)
    return candidates, chosen, chosen_cfg


# --------------------------------------------------------------------------
# Comparison
# --------------------------------------------------------------------------


def comparison_table(table: ScoreTable) -> str:
    """Plain-text boosted vs unboosted comparison, one line per detector."""
    rows = {(r["detector"], r["boosted"]): r for r in report_rows(table, 0)}
    dets = list(dict.fromkeys(d for d, _ in rows))
    head = f"{'detector':<8} {'AUC':>7} {'AUC+LB':>7} {'dAUC':>7} {'TPR@1%':>7} {'+LB':>7} {'pAUC@1%':>9} {'+LB':>9}"
    lines = [head, "-" * len(head)]
    for d in dets:
        u, b = rows.get((d, 0)), rows.get((d, 1))
        if u is None or b is None:
            continue
        lines.append(
            f"{d:<8} {u['auc']:7.4f} {b['auc']:7.4f} {b['auc'] - u['auc']:+7.4f} "
            f"{u['tpr_at_1pct']:7.4f} {b['tpr_at_1pct']:7.4f} {u['pauc_at_1pct']:9.6f} {b['pauc_at_1pct']:9.6f}"
        )
    return "\n".join(lines) + "\n"
