import numpy as np
import pytest
from scipy.stats import norm

from pate_pp.accountant import RdpLedger
from pate_pp.aggregation import (
    AggregationConfig,
    VoteHistogram,
    confident_gnmax,
    gnmax,
    label_public_data,
    majority_vote,
    tally,
    teacher_votes,
)
from pate_pp.datasets import UnlabeledSet, partition_disjoint, split, synth_clusters
from pate_pp.netcore import fit_classifier, init_dense


class TestTally:
    def test_small(self):
        assert tally([0, 0, 1], 2).counts.tolist() == [2, 1]

    def test_unanimous(self):
        h = tally([3] * 9, 5)
        assert h.counts.tolist() == [0, 0, 0, 9, 0] and h.n_teachers == 9

    def test_matches_recount(self):
        rng = np.random.default_rng(0)
        votes = rng.integers(0, 10, size=250)
        expected = [sum(1 for v in votes if v == j) for j in range(10)]
        assert tally(votes, 10).counts.tolist() == expected

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            tally([0, 2], 2)

    def test_histogram_invariants(self):
        with pytest.raises(ValueError):
            VoteHistogram([1, 1], 3)
        with pytest.raises(ValueError):
            VoteHistogram([4], 4)


class TestGnmax:
    def test_sigma_zero_is_argmax_on_random_histograms(self):
        rng = np.random.default_rng(1)
        for _ in range(10_000):
            K = int(rng.integers(2, 11))
            counts = rng.multinomial(int(rng.integers(1, 300)), np.ones(K) / K)
            h = VoteHistogram(counts, int(counts.sum()))
            assert gnmax(h, 0.0, rng) == int(np.argmax(counts))

    def test_ties_go_to_smallest_index(self):
        assert gnmax(VoteHistogram([2, 5, 5], 12), 0.0, None) == 1

    def test_dominant_class_almost_always_wins(self):
        rng = np.random.default_rng(2)
        h = VoteHistogram([100, 0, 0], 100)
        wins = sum(gnmax(h, 1.0, rng) == 0 for _ in range(100_000))
        assert wins / 100_000 > 0.999

    def test_symmetric_pair(self):
        rng = np.random.default_rng(3)
        h = VoteHistogram([50, 50], 100)
        freq = np.mean([gnmax(h, 10.0, rng) == 0 for _ in range(100_000)])
        assert abs(freq - 0.5) <= 0.01


class TestConfident:
    def test_noiseless_pass(self):
        cfg = AggregationConfig(0.0, 0.0, 200.0)
        out = confident_gnmax(VoteHistogram([250] + [0] * 9, 250), cfg, None)
        assert out.answered and out.label == 0
        assert [e[0] for e in out.events] == ["check", "answer"]

    def test_noiseless_abstain(self):
        cfg = AggregationConfig(0.0, 0.0, 200.0)
        counts = [26, 25, 25, 25, 25, 25, 25, 25, 25, 24]
        out = confident_gnmax(VoteHistogram(counts, 250), cfg, None)
        assert not out.answered and [e[0] for e in out.events] == ["check"]

    def test_default_threshold(self):
        assert AggregationConfig().threshold_for(250) == pytest.approx(175.0)

    def test_pass_rate_matches_gaussian_cdf(self):
        rng = np.random.default_rng(4)
        cfg = AggregationConfig(150.0, 40.0, 175.0)
        h = VoteHistogram([250] + [0] * 9, 250)
        rate = np.mean([confident_gnmax(h, cfg, rng).answered for _ in range(100_000)])
        assert abs(rate - norm.cdf((250 - 175) / 150)) <= 0.01

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            AggregationConfig(mode="laplace")
        with pytest.raises(ValueError):
            AggregationConfig(sigma_check=-1.0)


def _fake_teachers_votes(n_teachers, n_queries, K, rng, agree=0.8):
    truth = rng.integers(0, K, size=n_queries)
    votes = np.where(rng.random((n_teachers, n_queries)) < agree, truth, rng.integers(0, K, (n_teachers, n_queries)))
    return truth, votes


class TestLabelPublicData:
    def _queries(self, n, dim=3, start=100):
        return UnlabeledSet(np.random.default_rng(0).random((n, dim)), np.arange(start, start + n))

    def test_no_queries(self):
        led = RdpLedger()
        res = label_public_data([], self._queries(0), AggregationConfig(), np.random.default_rng(0), led, 3,
                                votes=np.zeros((5, 0), dtype=int))
        assert len(res.labeled) == 0 and len(res.remaining) == 0
        assert np.all(led.eps_rdp == 0) and not led.events

    def test_noiseless_equals_majority(self):
        rng = np.random.default_rng(5)
        _, votes = _fake_teachers_votes(25, 40, 4, rng, agree=0.5)
        q = self._queries(40)
        res = label_public_data([], q, AggregationConfig(0.0, 0.0, 0.0), rng, RdpLedger(), 4, votes=votes)
        assert res.answered == 40
        assert res.labeled.labels.tolist() == majority_vote(votes, 4).tolist()

    def test_conservation_and_event_counts(self):
        rng = np.random.default_rng(6)
        _, votes = _fake_teachers_votes(50, 300, 5, rng, agree=0.6)
        q = self._queries(300)
        led = RdpLedger()
        res = label_public_data([], q, AggregationConfig(10.0, 5.0, 30.0), rng, led, 5, votes=votes)
        assert res.answered + res.abstained == 300
        assert 0 < res.answered < 300
        ids = set(res.labeled.ids.tolist()) | set(res.remaining.ids.tolist())
        assert ids == set(q.ids.tolist())
        assert not set(res.labeled.ids.tolist()) & set(res.remaining.ids.tolist())
        kinds = [e.kind for e in led.events]
        assert kinds.count("check") == 300 and kinds.count("answer") == res.answered
        for o in res.outcomes:
            assert len(o.events) == (2 if o.answered else 1)

    def test_labels_follow_id_order(self):
        rng = np.random.default_rng(7)
        _, votes = _fake_teachers_votes(10, 20, 3, rng, agree=1.0)
        q = UnlabeledSet(np.zeros((20, 2)), np.arange(20)[::-1])
        res = label_public_data([], q, AggregationConfig(1.0, 1.0, 0.0), rng, RdpLedger(), 3, votes=votes)
        assert res.labeled.ids.tolist() == sorted(res.labeled.ids.tolist())

    def test_budget_cap_truncates(self):
        rng = np.random.default_rng(8)
        _, votes = _fake_teachers_votes(50, 500, 4, rng)
        led = RdpLedger()
        cfg = AggregationConfig(20.0, 10.0, 0.0, budget=(12.0, 1e-5))
        res = label_public_data([], self._queries(500), cfg, rng, led, 4, votes=votes)
        assert res.truncated
        assert led.to_dp(1e-5).epsilon <= 12.0
        assert res.answered + res.abstained < 500
        assert len(res.labeled) + len(res.remaining) == 500

    def test_gnmax_mode_emits_only_answers(self):
        rng = np.random.default_rng(9)
        _, votes = _fake_teachers_votes(20, 30, 3, rng)
        led = RdpLedger()
        res = label_public_data([], self._queries(30), AggregationConfig(mode="gnmax", sigma_answer=3.0), rng, led, 3,
                                votes=votes)
        assert res.answered == 30 and {e.kind for e in led.events} == {"answer"}

    def test_real_teachers_are_accurate_at_low_noise(self):
        # recorded once with these seeds: 162 of 300 answered, error rate 0.0
        data = synth_clusters(4, 800, 2, 0.05, seed=10)
        queries, sensitive = split(data, 300)
        teachers = []
        for i, shard in enumerate(partition_disjoint(sensitive, 50, seed=11)):
            net = init_dense([2, 16, 4], ["relu", "identity"], np.random.default_rng(100 + i))
            teachers.append(fit_classifier(net, shard.examples, shard.labels, 30, 16, np.random.default_rng(i)))
        res = label_public_data(teachers, queries.unlabeled(), AggregationConfig(150.0, 5.0, 35.0),
                                np.random.default_rng(12), RdpLedger(), 4)
        truth = queries.label_of()
        err = np.mean([truth[i] != y for i, y in zip(res.labeled.ids.tolist(), res.labeled.labels.tolist())])
        assert res.answered > 0 and err < 0.05
        assert teacher_votes(teachers, queries.examples).shape == (50, 300)
