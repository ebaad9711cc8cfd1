"""Co-teaching(+) student drivers and the count-based noisy-label cleansing pass."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .datasets import LabeledSet, UnlabeledSet
from .student import (
    StudentModel,
    StudentOptimizers,
    accuracy,
    discriminator_grads,
    feature_matching_loss,
    generate,
    sample_latent,
    supervised_terms,
    train_step_plain,
)
from .netcore import forward

MODES = ("pate", "coteach", "pate+", "pate++")
COUNT_RULES = ("decay", "scaled")

# slack for ratio * n products such as 0.3 * 10 = 3.0000000000000004
_CEIL_SLACK = 1e-9


def _ceil(x: float) -> int:
    return math.ceil(x - _CEIL_SLACK)


@dataclass(frozen=True)
class ScheduleParams:
    beta: float = 0.2
    ramp_epochs: int = 15

    def __post_init__(self):
        if not 0 <= self.beta < 1:
            raise ValueError(f"beta must be in [0, 1), got {self.beta}")
        if self.ramp_epochs < 1:
            raise ValueError("ramp_epochs must be >= 1")


def keep_ratio(epoch: float, params: ScheduleParams) -> float:
    """R(e) = 1 - beta * min(e / ramp, 1)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return 1.0 - params.beta * min(epoch / params.ramp_epochs, 1.0)


def disagreement_mask(preds1, preds2) -> np.ndarray:
    p1, p2 = np.asarray(preds1), np.asarray(preds2)
    if p1.shape != p2.shape:
        raise ValueError("prediction vectors differ in length")
    return np.flatnonzero(p1 != p2)


def small_loss_select(losses, candidates, ratio: float) -> np.ndarray:
    """The ceil(ratio * |candidates|) candidates with the smallest loss.

    Ties resolve towards the smaller index. Returned indices are sorted.
    """
    if not 0 < ratio <= 1:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    cand = np.asarray(candidates, dtype=np.int64)
    if cand.size == 0:
        return cand
    cand = np.sort(cand)
    n_keep = _ceil(ratio * len(cand))
    order = np.argsort(np.asarray(losses)[cand], kind="stable")
    return np.sort(cand[order[:n_keep]])


def flag_noisy(preds1, preds2, labels) -> np.ndarray:
    """Peers disagree and both differ from the observed label."""
    p1, p2, y = np.asarray(preds1), np.asarray(preds2), np.asarray(labels)
    return (p1 != p2) & (p1 != y) & (p2 != y)


@dataclass
class CountTable:
    counts: dict
    alpha: float = 0.9
    rule: str = "decay"

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.rule not in COUNT_RULES:
            raise ValueError(f"count rule must be one of {COUNT_RULES}")

    @classmethod
    def zeros(cls, ids, alpha=0.9, rule="decay") -> "CountTable":
        return cls({int(i): 0.0 for i in ids}, alpha, rule)


def update_counts(table: CountTable, epoch_flags: dict) -> CountTable:
    """End-of-epoch update with binary per-id flags.

    ``decay``:  T <- alpha * T + flag   (older epochs fade)
    ``scaled``: T <- T + alpha * flag   (literal line-by-line reading)
    """
    for i in table.counts:
        f = 1.0 if epoch_flags.get(i) else 0.0
        if table.rule == "decay":
            table.counts[i] = table.alpha * table.counts[i] + f
        else:
            table.counts[i] = table.counts[i] + table.alpha * f
    return table


@dataclass
class CleanseReport:
    removed: list
    counts: list
    tau: float
    n_labeled_san: int
    n_unlabeled_san: int

    def to_json(self) -> dict:
        return {
            "removed": self.removed,
            "counts": self.counts,
            "tau": self.tau,
            "n_labeled_san": self.n_labeled_san,
            "n_unlabeled_san": self.n_unlabeled_san,
        }


def select_removal(table: CountTable, tau: float, n_unlabeled: int = 0) -> CleanseReport:
    """Top ceil(tau * |M_l|) ids by count, ties to the smaller id."""
    if not 0 <= tau < 1:
        raise ValueError(f"tau must be in [0, 1), got {tau}")
    n = len(table.counts)
    n_remove = _ceil(tau * n) if tau > 0 else 0
    ranked = sorted(table.counts.items(), key=lambda kv: (-kv[1], kv[0]))[:n_remove]
    return CleanseReport(
        [i for i, _ in ranked], [c for _, c in ranked], tau, n - n_remove, n_unlabeled + n_remove
    )


def cleanse(labeled: LabeledSet, unlabeled: UnlabeledSet, report: CleanseReport):
    """Move the reported ids from the labeled set to the unlabeled pool, labels dropped."""
    removed = np.asarray(report.removed, dtype=np.int64)
    if not np.isin(removed, labeled.ids).all():
        raise ValueError("report names ids that are not in the labeled set")
    moving = np.isin(labeled.ids, removed)
    kept = labeled.subset(np.flatnonzero(~moving))
    gone = labeled.subset(np.flatnonzero(moving))
    pool = UnlabeledSet(
        np.vstack([unlabeled.examples.reshape(len(unlabeled), labeled.dim), gone.examples]),
        np.concatenate([unlabeled.ids, gone.ids]),
    )
    return kept, pool


@dataclass
class AlignedSets:
    labeled: LabeledSet
    unlabeled: UnlabeledSet
    # synthetic duplicate id -> id of the row it copies (identity for originals)
    origin: dict


def duplicate_to_match(labeled: LabeledSet, unlabeled: UnlabeledSet) -> AlignedSets:
    """Repeat the smaller set cyclically until both have the same size."""
    if len(labeled) == 0 or len(unlabeled) == 0:
        raise ValueError("both sets must be non-empty to align them")
    origin = {int(i): int(i) for i in labeled.ids}
    origin.update({int(i): int(i) for i in unlabeled.ids})
    n = max(len(labeled), len(unlabeled))
    next_id = int(max(labeled.ids.max(), unlabeled.ids.max())) + 1

    def extend(ids, size):
        idx = np.arange(n) % size
        new_ids = ids[idx].copy()
        fresh = np.arange(next_id, next_id + n - size)
        new_ids[size:] = fresh
        for f, src in zip(fresh.tolist(), ids[idx[size:]].tolist()):
            origin[f] = src
        return idx, new_ids

    if len(labeled) < n:
        idx, ids = extend(labeled.ids, len(labeled))
        labeled = LabeledSet(labeled.examples[idx], labeled.labels[idx], ids, labeled.n_classes)
    elif len(unlabeled) < n:
        idx, ids = extend(unlabeled.ids, len(unlabeled))
        unlabeled = UnlabeledSet(unlabeled.examples[idx], ids)
    return AlignedSets(labeled, unlabeled, origin)


# -- drivers -----------------------------------------------------------------

@dataclass(frozen=True)
class RobustConfig:
    batch_size: int = 100
    lr: float = 0.01
    optimizer: str = "adam"
    epochs: int = 30
    # Step 3 epochs for pate++; None reuses ``epochs``
    retrain_epochs: int | None = None
    beta: float = 0.2
    ramp_epochs: int = 15
    alpha: float = 0.9
    tau: float = 0.3
    count_rule: str = "decay"


@dataclass
class EpochMetrics:
    epoch: int
    keep_ratio: float
    sup_loss: list
    unsup_loss: list
    fm_loss: float
    test_acc: list
    train_acc: list
    disagreements: int = 0
    fallbacks: int = 0
    flagged: int = 0

    def to_json(self) -> dict:
        return dict(self.__dict__)


@dataclass
class TrainResult:
    model: StudentModel
    metrics: list = field(default_factory=list)
    fallbacks: int = 0
    report: CleanseReport | None = None
    step1_metrics: list = field(default_factory=list)
    table: CountTable | None = None

    def final_accuracy(self) -> dict:
        """Final-epoch test accuracy of D1, D2 and their max."""
        if not self.metrics:
            return {"d1": float("nan"), "d2": float("nan"), "max": float("nan")}
        a1, a2 = self.metrics[-1].test_acc
        return {"d1": a1, "d2": a2, "max": float(np.nanmax([a1, a2]))}


def _batches(n: int, B: int, rng):
    order = rng.permutation(n)
    return [order[s:s + B] for s in range(0, n, B)]


def _coteach_step(model, x_l, y_l, x_u, opts, rng, ratio, gated, probe=None):
    """One mini-batch of co-teaching (gated=False) or co-teaching+ (gated=True).

    Returns (StepStats-like tuple, preds1, preds2, used_fallback, n_disagree).
    """
    z = sample_latent(rng, len(x_u), model.latent_dim)
    x_g = generate(model.G, z).logits

    # losses and predictions come from the pre-update discriminators
    z1 = forward(model.D1, x_l).logits
    z2 = forward(model.D2, x_l).logits
    l1, _ = supervised_terms(z1, y_l)
    l2, _ = supervised_terms(z2, y_l)
    p1 = np.argmax(z1[:, :-1], axis=1)
    p2 = np.argmax(z2[:, :-1], axis=1)

    fallback = False
    if gated:
        cand = disagreement_mask(p1, p2)
        if cand.size == 0:
            cand, fallback = np.arange(len(y_l)), True
    else:
        cand = np.arange(len(y_l))
    sel1 = small_loss_select(l1, cand, ratio)
    sel2 = small_loss_select(l2, cand, ratio)

    # cross update: each discriminator learns from its peer's selection
    g1, s1, u1 = discriminator_grads(model.D1, x_l[sel2], y_l[sel2], x_u, x_g)
    g2, s2, u2 = discriminator_grads(model.D2, x_l[sel1], y_l[sel1], x_u, x_g)
    if probe is not None:
        probe.append({"sel1": sel1, "sel2": sel2, "grad_d1": g1, "grad_d2": g2, "cand": cand})
    opts.D1.step(model.D1, g1)
    opts.D2.step(model.D2, g2)
    fm, gg = feature_matching_loss(model.G, (model.D1, model.D2), x_u, z)
    opts.G.step(model.G, gg)
    return (s1, s2, u1, u2, fm), p1, p2, fallback, int(len(disagreement_mask(p1, p2)))


def _evaluate(model, x, y):
    if x is None or len(y) == 0:
        return [float("nan"), float("nan")]
    return [accuracy(model.D1, x, y), accuracy(model.D2, x, y)]


def run_pate_plus(
    model: StudentModel,
    labeled: LabeledSet,
    unlabeled: UnlabeledSet,
    cfg: RobustConfig,
    rng,
    mode: str = "pate+",
    test: LabeledSet | None = None,
    epochs: int | None = None,
    on_flags=None,
    probe=None,
) -> TrainResult:
    """Train ``model`` in place with the student loop for ``mode``.

    ``pate``: plain semi-supervised baseline on D1. ``coteach``: co-teaching
    over whole mini-batches. ``pate+``: co-teaching restricted to the
    peers' disagreement set, falling back to the whole batch when it is
    empty. ``on_flags(epoch, flagged_origin_ids)`` is called at every epoch
    end with the ids flagged by :func:`flag_noisy` during that epoch.
    """
    if mode not in ("pate", "coteach", "pate+"):
        raise ValueError(f"run_pate_plus handles pate / coteach / pate+, got {mode!r}")
    aligned = duplicate_to_match(labeled, unlabeled)
    L, U = aligned.labeled, aligned.unlabeled
    opts = StudentOptimizers.for_model(model, cfg.optimizer, cfg.lr)
    sched = ScheduleParams(cfg.beta, cfg.ramp_epochs)
    x_test = test.examples if test is not None else None
    y_test = test.labels if test is not None else np.zeros(0)
    result = TrainResult(model)
    n_epochs = cfg.epochs if epochs is None else epochs

    for e in range(n_epochs):
        ratio = keep_ratio(e, sched)
        sup1, sup2, uns1, uns2, fms = [], [], [], [], []
        flagged = set()
        n_dis = n_fb = 0
        lb = _batches(len(L), cfg.batch_size, rng)
        ub = _batches(len(U), cfg.batch_size, rng)
        for bl, bu in zip(lb, ub):
            x_l, y_l, x_u = L.examples[bl], L.labels[bl], U.examples[bu]
            if mode == "pate":
                st = train_step_plain(model, x_l, y_l, x_u, opts, rng)
                sup1.append(st.sup)
                uns1.append(st.unsup)
                fms.append(st.fm)
                continue
            (s1, s2, u1, u2, fm), p1, p2, fb, nd = _coteach_step(
                model, x_l, y_l, x_u, opts, rng, ratio, gated=(mode == "pate+"), probe=probe
            )
            sup1.append(s1)
            sup2.append(s2)
            uns1.append(u1)
            uns2.append(u2)
            fms.append(fm)
            n_fb += fb
            n_dis += nd
            if on_flags is not None:
                hit = flag_noisy(p1, p2, y_l)
                flagged.update(aligned.origin[int(i)] for i in L.ids[bl][hit])

        if on_flags is not None:
            on_flags(e, flagged)
        result.fallbacks += n_fb
        result.metrics.append(
            EpochMetrics(
                epoch=e + 1,
                keep_ratio=ratio,
                sup_loss=[_mean(sup1), _mean(sup2)],
                unsup_loss=[_mean(uns1), _mean(uns2)],
                fm_loss=_mean(fms),
                test_acc=_evaluate(model, x_test, y_test),
                train_acc=_evaluate(model, labeled.examples, labeled.labels),
                disagreements=n_dis,
                fallbacks=n_fb,
                flagged=len(flagged),
            )
        )
    return result


def _mean(xs) -> float:
    return float(np.mean(xs)) if xs else float("nan")


def run_pate_plusplus(
    model_factory,
    labeled: LabeledSet,
    unlabeled: UnlabeledSet,
    cfg: RobustConfig,
    rng_factory,
    test: LabeledSet | None = None,
) -> TrainResult:
    """Filter with a flag-counting PATE+ run, move the top-tau ids, retrain fresh.

    ``model_factory()`` must return a freshly initialised student and
    ``rng_factory()`` a fresh training stream; both are called once per stage
    so Step 3 starts from the same state a standalone PATE+ run would.
    """
    table = CountTable.zeros(labeled.ids, cfg.alpha, cfg.count_rule)

    def collect(epoch, flagged):
        update_counts(table, {i: True for i in flagged if i in table.counts})

    step1 = run_pate_plus(model_factory(), labeled, unlabeled, cfg, rng_factory(), "pate+", test, on_flags=collect)
    report = select_removal(table, cfg.tau, len(unlabeled))
    labeled_san, unlabeled_san = cleanse(labeled, unlabeled, report)
    epochs3 = cfg.retrain_epochs if cfg.retrain_epochs is not None else cfg.epochs
    final = run_pate_plus(model_factory(), labeled_san, unlabeled_san, cfg, rng_factory(), "pate+", test, epochs=epochs3)
    final.report = report
    final.step1_metrics = step1.metrics
    final.table = table
    return final


def removal_precision(report: CleanseReport, true_label: dict, observed_label: dict) -> float:
    """Fraction of removed ids whose observed label differs from the truth."""
    if not report.removed:
        return float("nan")
    wrong = sum(observed_label[i] != true_label[i] for i in report.removed)
    return wrong / len(report.removed)
