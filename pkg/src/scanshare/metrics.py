"""Scanpath and conditional-saliency metrics.

Sequence metrics (SS, SemSS) compare a generated scanpath with the ground
truth as label strings. Conditional metrics (cIG, cNSS, cAUC) score the
model's next-fixation map at every ground-truth step given the true prefix.
All maps live on the 1/4-resolution grid the model predicts on.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .data import CENTER, FREE_VIEWING, VISUAL_SEARCH, Fixation, ImageSample, Scanpath, TaskSpec, group_by_image
from .errors import InputError, MissingBaselineError

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-12
REPORT_COLUMNS = ("Method", "SemSS", "SS", "cIG", "cNSS", "cAUC")
REPORT_NOTE = ("# SS/SemSS = 1 - Levenshtein(a, b) / max(|a|, |b|); "
               "SS clusters fixations on a {n}x{n} grid; cIG in bits")


# --------------------------------------------------------------------------
# label sequences


def _points(scanpath) -> np.ndarray:
    if isinstance(scanpath, Scanpath):
        return scanpath.points()
    return np.array([[f.x, f.y] if isinstance(f, Fixation) else list(f) for f in scanpath], dtype=np.float64)


def grid_cells(cell_fraction: float) -> int:
    if not 0 < cell_fraction <= 1:
        raise InputError(f"cell_fraction must be in (0, 1], got {cell_fraction}")
    return math.ceil(1 / cell_fraction - 1e-9)


def cluster_fixations(scanpath, cell_fraction: float = 1 / 8) -> list[int]:
    """Row-major grid-cell label per fixation; x or y equal to 1 falls in the last cell."""
    n = grid_cells(cell_fraction)
    pts = _points(scanpath)
    cols = np.minimum(np.floor(pts[:, 0] / cell_fraction).astype(int), n - 1)
    rows = np.minimum(np.floor(pts[:, 1] / cell_fraction).astype(int), n - 1)
    return (rows * n + cols).tolist()


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance with unit insert, delete and substitute costs."""
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def sequence_score(a: Sequence, b: Sequence) -> float:
    if len(a) == 0 or len(b) == 0:
        raise InputError("sequence score needs two nonempty sequences")
    return 1.0 - edit_distance(a, b) / max(len(a), len(b))


def scanpath_sequence_score(pred, gt, cell_fraction: float = 1 / 8) -> float:
    return sequence_score(cluster_fixations(pred, cell_fraction), cluster_fixations(gt, cell_fraction))


def semantic_labels(scanpath, segmentation: np.ndarray) -> list[int]:
    """Segmentation label under each fixation (0 = background)."""
    h, w = segmentation.shape
    pts = _points(scanpath)
    cols = np.minimum((pts[:, 0] * w).astype(int), w - 1)
    rows = np.minimum((pts[:, 1] * h).astype(int), h - 1)
    return segmentation[rows, cols].astype(int).tolist()


def semantic_sequence_score(pred, gt, segmentation: np.ndarray) -> float:
    if segmentation is None:
        raise InputError("semantic sequence score needs a segmentation map")
    return sequence_score(semantic_labels(pred, segmentation), semantic_labels(gt, segmentation))


# --------------------------------------------------------------------------
# conditional saliency


def fixation_cell(fixation, shape: tuple[int, int]) -> tuple[int, int]:
    """(row, col) of the map cell containing a normalised fixation."""
    h, w = shape
    x, y = (fixation.x, fixation.y) if isinstance(fixation, Fixation) else fixation
    if not (0 <= x <= 1 and 0 <= y <= 1):
        raise InputError(f"fixation ({x}, {y}) outside the unit square")
    return min(int(y * h), h - 1), min(int(x * w), w - 1)


@dataclass
class DensityBaseline:
    condition: str
    prob: np.ndarray  # [h, w], positive, sums to 1
    count: int  # fixations that went into it


def build_density_baseline(scanpaths: Iterable[Scanpath], condition: str, shape: tuple[int, int],
                           sigma_fraction: float = 1 / 16, floor_eps: float = 1e-6,
                           skip_first: bool = True) -> DensityBaseline:
    """Gaussian-smoothed fixation density of one condition (``fv`` or ``vs:<target>``).

    Each fixation adds a unit-mass Gaussian with std ``sigma_fraction`` of
    the width. ``skip_first`` drops the enforced centre start, which no
    model ever has to predict.
    """
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    sigma = sigma_fraction * w
    acc = np.zeros((h, w))
    count = 0
    for sp in scanpaths:
        if sp.task.condition != condition:
            continue
        for f in sp.fixations[1 if skip_first else 0:]:
            r, c = fixation_cell(f, shape)
            g = np.exp(-((xx - c) ** 2 + (yy - r) ** 2) / (2 * sigma * sigma))
            acc += g / g.sum()
            count += 1
    if count == 0:
        raise MissingBaselineError(f"no training fixations for condition {condition!r}")
    acc = acc / acc.sum() + floor_eps
    return DensityBaseline(condition, acc / acc.sum(), count)


def build_density_baselines(scanpaths: Sequence[Scanpath], shape: tuple[int, int], **kw) -> dict[str, DensityBaseline]:
    """One baseline per condition, plus a pooled ``vs`` entry over all search targets.

    The pooled entry stands in for targets that never occur in training.
    """
    conditions = sorted({sp.task.condition for sp in scanpaths})
    out = {}
    for cond in conditions:
        try:
            out[cond] = build_density_baseline(scanpaths, cond, shape, **kw)
        except MissingBaselineError:
            continue
    search = [Scanpath(sp.image_id, TaskSpec.search(1), sp.fixations, sp.terminated)
              for sp in scanpaths if sp.task.kind == VISUAL_SEARCH]
    if search:
        pooled = build_density_baseline(search, "vs:1", shape, **kw)
        out[VISUAL_SEARCH] = DensityBaseline(VISUAL_SEARCH, pooled.prob, pooled.count)
    return out


def baseline_for(baselines: dict[str, DensityBaseline], task: TaskSpec) -> DensityBaseline:
    if task.condition in baselines:
        return baselines[task.condition]
    if task.kind in baselines:
        return baselines[task.kind]
    raise MissingBaselineError(f"no density baseline for condition {task.condition!r}")


def conditional_information_gain(model_probs, baseline) -> float:
    """Mean over fixations of log2 p_model - log2 p_baseline at the fixated cell.

    ``model_probs`` is a sequence of (prob_map, fixation); ``baseline`` is a
    :class:`DensityBaseline` or a map of the same shape.
    """
    base = baseline.prob if isinstance(baseline, DensityBaseline) else np.asarray(baseline)
    gains = []
    for prob, fix in model_probs:
        prob = np.asarray(prob)
        r, c = fixation_cell(fix, prob.shape)
        gains.append(math.log2(max(float(prob[r, c]), LOG_CLAMP)) - math.log2(max(float(base[r, c]), LOG_CLAMP)))
    if not gains:
        raise InputError("information gain needs at least one fixation")
    return float(np.mean(gains))


def conditional_nss(saliency_map, fixations) -> float:
    """Mean z-scored salience at the fixated cells (population std); 0 for a flat map."""
    s = np.asarray(saliency_map, dtype=np.float64)
    fixations = list(fixations)
    if not fixations:
        raise InputError("NSS needs at least one fixation")
    std = s.std()
    if std == 0:
        return 0.0
    z = (s - s.mean()) / std
    return float(np.mean([z[fixation_cell(f, s.shape)] for f in fixations]))


def conditional_auc(saliency_map, fixations) -> float:
    """ROC area separating fixated cells from all others, via mid-ranks (ties count half)."""
    s = np.asarray(saliency_map, dtype=np.float64)
    positive = np.zeros(s.shape, dtype=bool)
    for f in fixations:
        positive[fixation_cell(f, s.shape)] = True
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0:
        raise InputError("AUC needs at least one fixated cell")
    if n_neg == 0:
        raise InputError("AUC needs at least one non-fixated cell")
    ranks = rankdata(s.ravel())
    rank_sum = ranks[positive.ravel()].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


# --------------------------------------------------------------------------
# predictors


class Predictor(Protocol):
    def rollout(self, sample: ImageSample, task: TaskSpec) -> Scanpath: ...

    def conditional_maps(self, sample: ImageSample, scanpath: Scanpath) -> np.ndarray:
        """[len-1, h, w] next-fixation distributions given each true prefix."""
        ...


class ModelPredictor:
    """Adapts a trained model; caches one pyramid per (image, branch)."""

    def __init__(self, model, mode: str = "argmax", seed: int = 0):
        self.model, self.mode, self.seed = model, mode, seed
        self._pyramids: dict = {}

    def _pyramid(self, sample, branch):
        key = (sample.id, branch)
        if key not in self._pyramids:
            with ad.no_grad():
                self._pyramids[key] = self.model.pyramid(sample, branch)
        return self._pyramids[key]

    def rollout(self, sample, task):
        return self.model.rollout(sample, task, self.mode, self.seed, pyramid=self._pyramid(sample, task.kind))

    def conditional_maps(self, sample, scanpath):
        pyr = self._pyramid(sample, scanpath.task.kind)
        h, w = pyr.high_res.shape[1:]
        with ad.no_grad():
            logits, _ = self.model.teacher_forced(pyr, scanpath.fixations[:-1], scanpath.task)
            prob = ad.softmax(logits, -1).data.astype(np.float64)
        return prob.reshape(-1, h, w)


class UniformPredictor:
    """Chance baseline: uniform next-fixation maps and uniformly random rollouts.

    Rollouts stop with probability ``stop_prob`` after each fixation, capped
    at ``max_len``.
    """

    def __init__(self, grid_scale: int = 4, stop_prob: float = 0.5, max_len: int = 7, seed: int = 0):
        self.grid_scale, self.stop_prob, self.max_len, self.seed = grid_scale, stop_prob, max_len, seed

    def _shape(self, sample):
        return sample.height // self.grid_scale, sample.width // self.grid_scale

    def rollout(self, sample, task):
        h, w = self._shape(sample)
        rng = np.random.default_rng([self.seed, sum(map(ord, sample.id)), task.target or 0])
        fix = [Fixation(*CENTER)]
        terminated = False
        while len(fix) < self.max_len:
            if len(fix) > 1 and rng.random() < self.stop_prob:
                terminated = True
                break
            cell = int(rng.integers(h * w))
            r, c = divmod(cell, w)
            fix.append(Fixation((c + 0.5) / w, (r + 0.5) / h))
        return Scanpath(sample.id, task, fix, terminated)

    def conditional_maps(self, sample, scanpath):
        h, w = self._shape(sample)
        return np.full((len(scanpath) - 1, h, w), 1.0 / (h * w))


class GroundTruthPredictor:
    """Replays ground truth: rollouts are the true scanpaths, maps peak on the true next fixation."""

    def __init__(self, pairs, grid_scale: int = 4):
        self.grid_scale = grid_scale
        self.truth = {(s.id, sp.task): sp for s, sp in pairs}

    def rollout(self, sample, task):
        return self.truth[(sample.id, task)]

    def conditional_maps(self, sample, scanpath):
        h, w = sample.height // self.grid_scale, sample.width // self.grid_scale
        maps = np.zeros((len(scanpath) - 1, h, w))
        for t, f in enumerate(scanpath.fixations[1:]):
            maps[(t,) + fixation_cell(f, (h, w))] = 1.0
        return maps


# --------------------------------------------------------------------------
# evaluation


@dataclass
class MetricsReport:
    method: str
    semss: float | None
    ss: float
    cig: float | None
    cnss: float
    cauc: float
    num_scanpaths: int = 0
    num_fixations: int = 0
    semss_missing: bool = False
    notes: list = field(default_factory=list)

    def row(self) -> list[str]:
        def fmt(v):
            return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.4f}"
        return [self.method, fmt(self.semss), fmt(self.ss), fmt(self.cig), fmt(self.cnss), fmt(self.cauc)]

    def as_dict(self) -> dict:
        return {"method": self.method, "SemSS": self.semss, "SS": self.ss, "cIG": self.cig,
                "cNSS": self.cnss, "cAUC": self.cauc, "scanpaths": self.num_scanpaths,
                "fixations": self.num_fixations, "semss_missing": self.semss_missing}


def evaluate(predictor, pairs, task_kind: str, baselines: dict[str, DensityBaseline] | None = None,
             method: str = "model", cell_fraction: float = 1 / 8) -> MetricsReport:
    """Score ``predictor`` on every ``task_kind`` scanpath in ``pairs``.

    SS and SemSS compare one rollout per (image, task) with the truth.
    cIG, cNSS and cAUC average over every ground-truth step after the
    centre start. cIG is left empty without ``baselines``; SemSS is left
    empty (and flagged) when any image lacks segmentation.
    """
    units = group_by_image(pairs, task_kind)
    if not units:
        raise InputError(f"no {task_kind} scanpaths to evaluate")
    ss, semss, gains, nss, auc = [], [], [], [], []
    semss_missing = False
    n_fix = 0
    for sample, scanpaths in units:
        for gt in scanpaths:
            pred = predictor.rollout(sample, gt.task)
            ss.append(scanpath_sequence_score(pred, gt, cell_fraction))
            if sample.segmentation is None:
                semss_missing = True
            else:
                semss.append(semantic_sequence_score(pred, gt, sample.segmentation))
            if len(gt) < 2:
                continue
            maps = predictor.conditional_maps(sample, gt)
            base = baseline_for(baselines, gt.task) if baselines is not None else None
            for prob, fix in zip(maps, gt.fixations[1:]):
                n_fix += 1
                nss.append(conditional_nss(prob, [fix]))
                auc.append(conditional_auc(prob, [fix]))
                if base is not None:
                    gains.append(conditional_information_gain([(prob, fix)], base))
    if semss_missing:
        log.warning("segmentation missing for some images; SemSS omitted")
    mean = lambda xs: float(np.mean(xs)) if xs else float("nan")
    return MetricsReport(
        method=method,
        semss=None if semss_missing else mean(semss),
        ss=mean(ss),
        cig=mean(gains) if baselines is not None else None,
        cnss=mean(nss),
        cauc=mean(auc),
        num_scanpaths=len(ss),
        num_fixations=n_fix,
        semss_missing=semss_missing,
    )


def format_report(reports: Sequence[MetricsReport], cell_fraction: float = 1 / 8) -> str:
    buf = io.StringIO()
    buf.write(REPORT_NOTE.format(n=grid_cells(cell_fraction)) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in reports:
        writer.writerow(r.row())
    return buf.getvalue()


def write_report(reports: Sequence[MetricsReport], path, cell_fraction: float = 1 / 8) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(format_report(reports, cell_fraction))


def read_report(path) -> list[dict]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))
