"""Teacher vote aggregation: tallies, Gaussian NoisyMax and the confident variant.

Noise comes from the caller's ``numpy.random.Generator`` (PCG64 + ziggurat
normals). Per query the confident aggregator draws one normal for the
consensus check and, only if the check passes, K normals for the answer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .accountant import ANSWER_SENSITIVITY, CHECK_SENSITIVITY, RdpLedger
from .datasets import LabeledSet, UnlabeledSet
from .netcore import DenseNet, predict_logits

MODES = ("gnmax", "confident-gnmax")


@dataclass(frozen=True)
class VoteHistogram:
    counts: np.ndarray
    n_teachers: int

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 1 or len(c) < 2:
            raise ValueError("a vote histogram needs at least two classes")
        if np.any(c < 0) or c.sum() != self.n_teachers:
            raise ValueError(f"counts must be non-negative and sum to {self.n_teachers}")
        object.__setattr__(self, "counts", c)

    @property
    def n_classes(self) -> int:
        return len(self.counts)


@dataclass(frozen=True)
class AggregationConfig:
    sigma_check: float = 150.0
    sigma_answer: float = 40.0
    # in teacher-count units; None means 0.7 * n_teachers
    consensus_threshold: float | None = None
    mode: str = "confident-gnmax"
    # optional (eps_max, delta) budget cap
    budget: tuple[float, float] | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.sigma_check < 0 or self.sigma_answer < 0:
            raise ValueError("noise scales must be non-negative")
        if self.consensus_threshold is not None and self.consensus_threshold < 0:
            raise ValueError("consensus threshold must be >= 0")

    def threshold_for(self, n_teachers: int) -> float:
        if self.consensus_threshold is None:
            return 0.7 * n_teachers
        return self.consensus_threshold


@dataclass(frozen=True)
class AggregationOutcome:
    label: int | None
    # (kind, sensitivity, sigma) in emission order
    events: tuple = ()

    @property
    def answered(self) -> bool:
        return self.label is not None


def tally(predictions, n_classes: int) -> VoteHistogram:
    p = np.asarray(predictions, dtype=np.int64)
    if np.any(p < 0) or np.any(p >= n_classes):
        raise ValueError(f"teacher prediction outside [0, {n_classes})")
    return VoteHistogram(np.bincount(p, minlength=n_classes), len(p))


def gnmax(hist: VoteHistogram, sigma: float, rng) -> int:
    """argmax of counts + N(0, sigma^2); ties go to the smallest class index."""
    if sigma == 0:
        return int(np.argmax(hist.counts))
    noisy = hist.counts + sigma * rng.standard_normal(hist.n_classes)
    return int(np.argmax(noisy))


def confident_gnmax(hist: VoteHistogram, cfg: AggregationConfig, rng) -> AggregationOutcome:
    check = ("check", CHECK_SENSITIVITY, cfg.sigma_check)
    top = hist.counts.max()
    noisy_top = top + (cfg.sigma_check * rng.standard_normal() if cfg.sigma_check else 0.0)
    if noisy_top < cfg.threshold_for(hist.n_teachers):
        return AggregationOutcome(None, (check,))
    label = gnmax(hist, cfg.sigma_answer, rng)
    return AggregationOutcome(label, (check, ("answer", ANSWER_SENSITIVITY, cfg.sigma_answer)))


def aggregate(hist: VoteHistogram, cfg: AggregationConfig, rng) -> AggregationOutcome:
    if cfg.mode == "gnmax":
        label = gnmax(hist, cfg.sigma_answer, rng)
        return AggregationOutcome(label, (("answer", ANSWER_SENSITIVITY, cfg.sigma_answer),))
    return confident_gnmax(hist, cfg, rng)


def teacher_votes(teachers: list[DenseNet], x) -> np.ndarray:
    """Predicted class of every teacher on every row: shape [n_teachers, n_rows]."""
    return np.stack([np.argmax(predict_logits(t, x), axis=1) for t in teachers])


@dataclass
class LabelingResult:
    labeled: LabeledSet
    remaining: UnlabeledSet
    ledger: RdpLedger
    answered: int = 0
    abstained: int = 0
    truncated: bool = False
    outcomes: list = field(default_factory=list)


def _worst_case_cost(ledger: RdpLedger, cfg: AggregationConfig) -> np.ndarray:
    cost = ledger.cost("answer", ANSWER_SENSITIVITY, cfg.sigma_answer)
    if cfg.mode == "confident-gnmax":
        cost = cost + ledger.cost("check", CHECK_SENSITIVITY, cfg.sigma_check)
    return cost


def label_public_data(
    teachers: list[DenseNet],
    queries: UnlabeledSet,
    cfg: AggregationConfig,
    rng,
    ledger: RdpLedger,
    n_classes: int,
    votes: np.ndarray | None = None,
) -> LabelingResult:
    """Label ``queries`` in id order with the private aggregator.

    Every emitted event goes into ``ledger`` (mutated in place). With a
    budget cap, labeling stops before a query whose worst-case cost would
    push epsilon past the cap; the rest stay unlabeled and the result is
    flagged as truncated. ``votes`` may be passed to skip teacher inference.
    """
    order = np.argsort(queries.ids, kind="stable")
    if votes is None:
        votes = teacher_votes(teachers, queries.examples) if len(queries) else np.zeros((len(teachers), 0), int)

    ans_idx, ans_labels, outcomes = [], [], []
    answered = abstained = 0
    truncated = False
    worst = _worst_case_cost(ledger, cfg)
    for i in order:
        if cfg.budget is not None:
            eps_max, delta = cfg.budget
            probe = RdpLedger(ledger.orders, ledger.eps_rdp + worst)
            if probe.to_dp(delta).epsilon > eps_max:
                truncated = True
                break
        hist = tally(votes[:, i], n_classes)
        out = aggregate(hist, cfg, rng)
        for kind, sens, sigma in out.events:
            ledger.record(kind, sens, sigma)
        outcomes.append(out)
        if out.answered:
            answered += 1
            ans_idx.append(i)
            ans_labels.append(out.label)
        else:
            abstained += 1

    ans_idx = np.asarray(ans_idx, dtype=np.int64)
    labeled = LabeledSet(
        queries.examples[ans_idx].reshape(len(ans_idx), queries.dim),
        np.asarray(ans_labels, dtype=np.int64),
        queries.ids[ans_idx],
        n_classes,
    )
    keep = np.setdiff1d(np.arange(len(queries)), ans_idx)
    return LabelingResult(
        labeled, queries.subset(keep), ledger, answered, abstained, truncated, outcomes
    )


def majority_vote(votes: np.ndarray, n_classes: int) -> np.ndarray:
    """Noiseless plurality label per column of a [n_teachers, n_rows] vote matrix."""
    return np.array([int(np.argmax(np.bincount(votes[:, j], minlength=n_classes))) for j in range(votes.shape[1])])

