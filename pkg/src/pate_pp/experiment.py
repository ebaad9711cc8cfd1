"""End-to-end runs: split, teachers, private labeling, student training, reports.

Every random stream is derived from the master seed via
:func:`pate_pp.seeding.rng_for` with a stage path, so stages can be rerun
in isolation.
"""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass

import numpy as np

from . import __version__
from .accountant import RdpLedger
from .aggregation import AggregationConfig, LabelingResult, label_public_data, majority_vote, teacher_votes
from .config import ExperimentConfig
from .datasets import (
    LabeledSet,
    NoiseMask,
    UnlabeledSet,
    inject_label_noise,
    load_csv,
    load_idx,
    partition_disjoint,
    split,
    synth_clusters,
)
from .netcore import fit_classifier, init_dense
from .robust import RobustConfig, TrainResult, removal_precision, run_pate_plus, run_pate_plusplus
from .seeding import derive_seed, rng_for
from .student import StudentArch, build_student

log = logging.getLogger(__name__)

ALL_MODES = ("pate", "coteach", "pate+", "pate++")


@dataclass
class DataBundle:
    sensitive: LabeledSet
    test: LabeledSet
    queries: LabeledSet  # true labels kept for evaluation only
    unlabeled: UnlabeledSet
    n_classes: int


def load_pool(cfg: ExperimentConfig, seed: int) -> LabeledSet:
    d = cfg.data
    if d.source == "synth":
        s = d.synth
        return synth_clusters(s.n_classes, s.n_per_class, s.dim, s.spread, derive_seed(seed, "synth"))
    if d.source == "idx":
        return load_idx(d.idx.images, d.idx.labels, d.idx.max_n, d.idx.n_classes)
    return load_csv(d.csv.path, d.csv.label_column)


def prepare_data(cfg: ExperimentConfig, seed: int) -> DataBundle:
    pool = load_pool(cfg, seed)
    d = cfg.data
    if d.n_public >= len(pool):
        raise ValueError(f"n_public={d.n_public} leaves no sensitive data in a pool of {len(pool)}")
    public, sensitive = split(pool, d.n_public, derive_seed(seed, "split"))
    test, student_pool = split(public, d.n_test)
    queries, rest = split(student_pool, d.n_queries)
    return DataBundle(sensitive, test, queries, rest.unlabeled(), pool.n_classes)


def train_teachers(cfg: ExperimentConfig, bundle: DataBundle, seed: int):
    t = cfg.teachers
    shards = partition_disjoint(bundle.sensitive, t.n_teachers, derive_seed(seed, "partition"))
    sizes = [bundle.sensitive.dim, *t.hidden, bundle.n_classes]
    acts = [t.activation] * len(t.hidden) + ["identity"]
    teachers = []
    for i, shard in enumerate(shards):
        net = init_dense(sizes, acts, rng_for(seed, "teacher", i, "init"))
        fit_classifier(net, shard.examples, shard.labels, t.epochs, t.batch_size,
                       rng_for(seed, "teacher", i, "train"), t.lr, t.optimizer)
        teachers.append(net)
    return teachers


def aggregation_config(cfg: ExperimentConfig, sigma_answer: float | None = None) -> AggregationConfig:
    a = cfg.aggregation
    budget = (a.budget.epsilon, a.budget.delta) if a.budget else None
    return AggregationConfig(
        sigma_check=a.sigma_check,
        sigma_answer=a.sigma_answer if sigma_answer is None else sigma_answer,
        consensus_threshold=a.threshold,
        mode=a.mode,
        budget=budget,
    )


@dataclass
class Labeled:
    result: LabelingResult
    labeled: LabeledSet  # after optional extra noise
    unlabeled: UnlabeledSet
    true_label: dict
    noise_mask: NoiseMask
    label_error_rate: float


def private_labels(cfg: ExperimentConfig, bundle: DataBundle, teachers, votes, seed: int,
                   sigma_answer: float | None = None) -> Labeled:
    agg = aggregation_config(cfg, sigma_answer)
    q = bundle.queries
    res = label_public_data(teachers, q.unlabeled(), agg, rng_for(seed, "aggregation"),
                            RdpLedger(), bundle.n_classes, votes=votes)
    labeled, mask = res.labeled, NoiseMask()
    if cfg.data.label_noise > 0 and len(labeled):
        labeled, mask = inject_label_noise(labeled, cfg.data.label_noise, derive_seed(seed, "label_noise"))
    truth = q.label_of()
    err = float(np.mean([truth[i] != y for i, y in zip(labeled.ids.tolist(), labeled.labels.tolist())])) \
        if len(labeled) else float("nan")
    pool = UnlabeledSet(
        np.vstack([res.remaining.examples.reshape(len(res.remaining), q.dim), bundle.unlabeled.examples]),
        np.concatenate([res.remaining.ids, bundle.unlabeled.ids]),
    )
    return Labeled(res, labeled, pool, truth, mask, err)


def robust_config(cfg: ExperimentConfig) -> RobustConfig:
    s, r = cfg.student, cfg.robust
    return RobustConfig(
        batch_size=s.batch_size, lr=s.lr, optimizer=s.optimizer, epochs=s.epochs,
        retrain_epochs=s.retrain_epochs, beta=r.beta, ramp_epochs=r.ramp_epochs,
        alpha=r.alpha, tau=r.tau, count_rule=r.count_rule,
    )


def train_student(cfg: ExperimentConfig, labeled: Labeled, test: LabeledSet, mode: str, seed: int) -> TrainResult:
    s = cfg.student
    arch = StudentArch(tuple(s.d_hidden), tuple(s.g_hidden), s.latent_dim)
    dim, K = test.dim, test.n_classes

    def factory():
        return build_student(dim, K, arch, rng_for(seed, "student", "g"), rng_for(seed, "student", "d1"),
                             rng_for(seed, "student", "d2"), seed=seed)

    def train_rng():
        return rng_for(seed, "student", "train")

    rcfg = robust_config(cfg)
    if len(labeled.labeled) == 0:
        raise RuntimeError("no query was answered by the aggregator; nothing to train the student on")
    if mode == "pate++":
        return run_pate_plusplus(factory, labeled.labeled, labeled.unlabeled, rcfg, train_rng, test)
    return run_pate_plus(factory(), labeled.labeled, labeled.unlabeled, rcfg, train_rng(), mode, test)


def _finite(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _finite(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_finite(v) for v in x]
    if isinstance(x, np.generic):
        return _finite(x.item())
    return x


def privacy_summary(ledger: RdpLedger, delta: float, n_answered: int, n_abstained: int, mode: str) -> dict:
    g = ledger.to_dp(delta)
    n_check = sum(e.kind == "check" for e in ledger.events)
    n_answer = sum(e.kind == "answer" for e in ledger.events)
    expected_check = (n_answered + n_abstained) if mode == "confident-gnmax" else 0
    return {
        "epsilon": g.epsilon,
        "delta": g.delta,
        "order": g.order,
        "n_check_events": n_check,
        "n_answer_events": n_answer,
        "reconciled": n_check == expected_check and n_answer == n_answered,
    }


def run_experiment(cfg: ExperimentConfig, config_echo: dict | None = None, ledger_path=None) -> dict:
    """Run one configured experiment and return the report dictionary."""
    t0 = time.perf_counter()
    seed = cfg.seed
    bundle = prepare_data(cfg, seed)
    log.info("training %d teachers", cfg.teachers.n_teachers)
    teachers = train_teachers(cfg, bundle, seed)
    votes = teacher_votes(teachers, bundle.queries.examples)
    lab = private_labels(cfg, bundle, teachers, votes, seed)
    if ledger_path is not None:
        lab.result.ledger.save(ledger_path)

    truth_q = bundle.queries.labels
    ensemble_err = float(np.mean(majority_vote(votes, bundle.n_classes) != truth_q))
    log.info("answered %d / %d queries", lab.result.answered, len(bundle.queries))

    result = train_student(cfg, lab, bundle.test, cfg.mode, seed)
    report = {
        "version": __version__,
        "seed": seed,
        "mode": cfg.mode,
        "config": config_echo if config_echo is not None else cfg.model_dump(mode="json"),
        "privacy": privacy_summary(lab.result.ledger, cfg.privacy.delta, lab.result.answered,
                                   lab.result.abstained, cfg.aggregation.mode),
        "aggregation": {
            "queries": len(bundle.queries),
            "answered": lab.result.answered,
            "abstained": lab.result.abstained,
            "truncated": lab.result.truncated,
            "label_error_rate": lab.label_error_rate,
            "ensemble_majority_error_rate": ensemble_err,
            "injected_noise": len(lab.noise_mask.original),
        },
        "student": {
            "n_labeled": len(lab.labeled),
            "n_unlabeled": len(lab.unlabeled),
            "final_accuracy": result.final_accuracy(),
            "fallbacks": result.fallbacks,
            "epochs": [m.to_json() for m in result.metrics],
        },
    }
    if result.report is not None:
        observed = lab.labeled.label_of()
        report["cleansing"] = {
            **result.report.to_json(),
            "precision": removal_precision(result.report, lab.true_label, observed),
            "base_noise_rate": lab.label_error_rate,
            "step1_epochs": [m.to_json() for m in result.step1_metrics],
        }
    report["wall_clock_s"] = time.perf_counter() - t0
    return _finite(report)


# -- sweeps ------------------------------------------------------------------

SIGMA_HEADER = ("sigma", "epsilon", "answered", "label_error_rate",
                "acc_pate", "acc_coteach", "acc_pate_plus", "acc_pate_plus_plus")
PARAM_HEADER = ("param", "value", "acc_pate", "acc_coteach", "acc_pate_plus", "acc_pate_plus_plus")


def repeat_seeds(cfg: ExperimentConfig) -> list[int]:
    if cfg.repeats == 1:
        return [cfg.seed]
    return [derive_seed(cfg.seed, "repeat", r) for r in range(cfg.repeats)]


def _nanmean(xs):
    xs = [x for x in xs if x is not None and not (isinstance(x, float) and math.isnan(x))]
    return float(np.mean(xs)) if xs else float("nan")


def sweep_sigma(cfg: ExperimentConfig, sigmas, modes=ALL_MODES) -> list[dict]:
    """One row per answer-noise scale, averaged over ``repeat_seeds``.

    Teachers are trained once per seed and reused for every sigma. Pass
    ``modes=()`` to skip student training and only measure labeling.
    """
    sigmas = [float(s) for s in sigmas]
    if len(sigmas) < 2:
        raise ValueError("a sigma sweep needs at least two values")
    acc = {(s, m): [] for s in sigmas for m in modes}
    eps = {s: [] for s in sigmas}
    answered = {s: [] for s in sigmas}
    err = {s: [] for s in sigmas}
    for seed in repeat_seeds(cfg):
        bundle = prepare_data(cfg, seed)
        teachers = train_teachers(cfg, bundle, seed)
        votes = teacher_votes(teachers, bundle.queries.examples)
        for s in sigmas:
            lab = private_labels(cfg, bundle, teachers, votes, seed, sigma_answer=s)
            eps[s].append(lab.result.ledger.to_dp(cfg.privacy.delta).epsilon)
            answered[s].append(lab.result.answered)
            err[s].append(lab.label_error_rate)
            for m in modes:
                acc[(s, m)].append(train_student(cfg, lab, bundle.test, m, seed).final_accuracy()["max"])
    rows = []
    for s in sigmas:
        row = {"sigma": s, "epsilon": _nanmean(eps[s]), "answered": _nanmean(answered[s]),
               "label_error_rate": _nanmean(err[s])}
        for m, col in zip(ALL_MODES, SIGMA_HEADER[4:]):
            row[col] = _nanmean(acc[(s, m)]) if m in modes else float("nan")
        rows.append(row)
    return rows


def sweep_param(cfg: ExperimentConfig, param: str, values, modes=ALL_MODES) -> list[dict]:
    """Seed-averaged per-mode accuracy for each value of ``beta`` or ``tau``."""
    if param not in ("beta", "tau"):
        raise ValueError(f"param must be 'beta' or 'tau', got {param!r}")
    values = [float(v) for v in values]
    if not values:
        raise ValueError("no values to sweep")
    # modes whose result cannot depend on the swept parameter are computed once
    independent = {"beta": {"pate"}, "tau": {"pate", "coteach", "pate+"}}[param]
    acc = {(v, m): [] for v in values for m in modes}
    for seed in repeat_seeds(cfg):
        bundle = prepare_data(cfg, seed)
        teachers = train_teachers(cfg, bundle, seed)
        votes = teacher_votes(teachers, bundle.queries.examples)
        lab = private_labels(cfg, bundle, teachers, votes, seed)
        cache = {}
        for v in values:
            vcfg = copy.deepcopy(cfg)
            setattr(vcfg.robust, param, v)
            for m in modes:
                if m in independent and m in cache:
                    a = cache[m]
                else:
                    a = train_student(vcfg, lab, bundle.test, m, seed).final_accuracy()["max"]
                    cache[m] = a
                acc[(v, m)].append(a)
    rows = []
    for v in values:
        row = {"param": param, "value": v}
        for m, col in zip(ALL_MODES, PARAM_HEADER[2:]):
            row[col] = _nanmean(acc[(v, m)]) if m in modes else float("nan")
        rows.append(row)
    return rows


def audit_privacy(ledger: RdpLedger, deltas) -> list[dict]:
    rows = []
    for d in deltas:
        g = ledger.to_dp(float(d))
        rows.append({"delta": g.delta, "epsilon": g.epsilon, "order": g.order})
    return rows
