import numpy as np
import pytest

from isgdlab import data, metric, models, schemes


def snapshot(seed=0, n=20, dim=6):
    """Frozen (model, dataset) pair with nontrivial per-sample gradients."""
    ds = data.synthetic_blobs(n, dim, separation=2.0, seed=seed)
    model = models.Mlp([dim, 5, 2], np.random.default_rng(seed + 1))
    return model, ds


def full_gradnorm_scheme(model, ds):
    tab = models.grad_table(model, ds.inputs, ds.labels, store_grads=False)
    return schemes.gradient_norm_scheme(tab.norms)


class TestEvaluateStep:
    def test_gradnorm_candidate_scores_zero(self):
        model, ds = snapshot(1)
        candidate = full_gradnorm_scheme(model, ds)
        records = metric.evaluate_step(model, ds, candidate, m=ds.n, rng=np.random.default_rng(2))
        assert {r.divergence for r in records} == {"kl", "tv"}
        for r in records:
            assert r.d_p < 1e-12
            assert r.d_u > 0.0

    def test_uniform_candidate_ties_exactly(self):
        model, ds = snapshot(3)
        rng = np.random.default_rng(4)
        for _ in range(10):
            records = metric.evaluate_step(model, ds, schemes.uniform(ds.n), m=8, rng=rng)
            for r in records:
                assert r.d_p == r.d_u

    def test_midpoint_candidate_halves_tv(self):
        # TV is linear along the mix, so with the subset equal to the whole
        # set the candidate midpoint must land exactly halfway to uniform
        model, ds = snapshot(5)
        pgn = full_gradnorm_scheme(model, ds)
        mid = schemes.convex_mix(pgn, schemes.uniform(ds.n), 0.5)
        records = metric.evaluate_step(model, ds, mid, m=ds.n, rng=np.random.default_rng(6))
        tv = next(r for r in records if r.divergence == "tv")
        assert 0.0 < tv.d_p < tv.d_u
        np.testing.assert_allclose(tv.d_p, 0.5 * tv.d_u, rtol=1e-10)

    def test_callable_candidate(self):
        model, ds = snapshot(7)
        pgn = full_gradnorm_scheme(model, ds)
        records = metric.evaluate_step(
            model, ds, lambda idx: pgn[idx], m=ds.n, rng=np.random.default_rng(8)
        )
        for r in records:
            assert r.d_p < 1e-12

    def test_deterministic_given_rng_state(self):
        model, ds = snapshot(9)
        p = full_gradnorm_scheme(model, ds)
        a = metric.evaluate_step(model, ds, p, m=6, rng=np.random.default_rng(10))
        b = metric.evaluate_step(model, ds, p, m=6, rng=np.random.default_rng(10))
        assert a == b

    def test_zero_gradient_subset_flagged(self):
        # one-class data plus saturated logits: exp(-1000) underflows, so
        # every per-sample gradient is exactly zero
        rng = np.random.default_rng(11)
        ds = data.Dataset(rng.normal(size=(6, 2)), np.zeros(6, dtype=int), "one-class", 2)
        model = models.Mlp([2, 2])
        model._views[1][...] = [500.0, -500.0]
        records = metric.evaluate_step(
            model, ds, schemes.uniform(6), m=4, rng=np.random.default_rng(12)
        )
        for r in records:
            assert r.flagged
            assert r.d_p == r.d_u  # reference fell back to uniform

    def test_rejects_oversized_subset(self):
        model, ds = snapshot(13)
        with pytest.raises(ValueError, match="subset size"):
            metric.evaluate_step(model, ds, schemes.uniform(ds.n), m=ds.n + 1)

    def test_rejects_undersized_subset(self):
        model, ds = snapshot(14)
        with pytest.raises(ValueError, match="subset size"):
            metric.evaluate_step(model, ds, schemes.uniform(ds.n), m=1)

    def test_rejects_bad_callable_values(self):
        model, ds = snapshot(15)
        with pytest.raises(ValueError, match="strictly positive"):
            metric.evaluate_step(model, ds, lambda idx: np.zeros(idx.size), m=4)

    def test_larger_subsets_stabilize_uniform_distance(self):
        model, ds = snapshot(16, n=100, dim=4)
        pgn = full_gradnorm_scheme(model, ds)
        rng = np.random.default_rng(17)

        def tv_d_u(m):
            vals = []
            for _ in range(200):
                recs = metric.evaluate_step(model, ds, pgn, m=m, rng=rng, step=0)
                vals.append(next(r.d_u for r in recs if r.divergence == "tv"))
            return np.var(vals)

        assert tv_d_u(50) <= tv_d_u(10) * 1.1


class TestRecordValidation:
    def test_unknown_divergence(self):
        with pytest.raises(ValueError, match="divergence"):
            metric.SchemeQualityRecord(0, "hellinger", 0.1, 0.2, 8, False)

    def test_negative_distance(self):
        with pytest.raises(ValueError, match="nonnegative"):
            metric.SchemeQualityRecord(0, "kl", -0.1, 0.2, 8, False)

    def test_tiny_subset(self):
        with pytest.raises(ValueError, match=">= 2"):
            metric.SchemeQualityRecord(0, "kl", 0.1, 0.2, 1, False)


class TestAggregate:
    def records(self, values, divergence="tv"):
        return [
            metric.SchemeQualityRecord(i, divergence, v, 2 * v, 8, False)
            for i, v in enumerate(values)
        ]

    def test_single_record(self):
        out = metric.aggregate(self.records([0.25]))
        assert len(out) == 1
        s = out[0]
        assert s.count == 1
        assert s.d_p.mean == 0.25
        assert s.d_p.std == 0.0

    def test_hand_mean_and_population_std(self):
        s = metric.aggregate(self.records([0.1, 0.3]))[0]
        np.testing.assert_allclose(s.d_p.mean, 0.2, rtol=1e-15)
        np.testing.assert_allclose(s.d_p.std, 0.1, rtol=1e-12)

    def test_constant_records_zero_std(self):
        s = metric.aggregate(self.records([0.4, 0.4, 0.4]))[0]
        assert s.d_p.std == 0.0

    def test_histogram_counts_sum_to_records(self):
        rng = np.random.default_rng(18)
        s = metric.aggregate(self.records(rng.random(100)), bins=13)[0]
        assert s.d_p.hist_counts.sum() == 100
        assert s.d_u.hist_counts.sum() == 100
        assert len(s.d_p.hist_edges) == 14

    def test_groups_by_divergence(self):
        recs = self.records([0.1, 0.2], "kl") + self.records([0.3], "tv")
        out = metric.aggregate(recs)
        by_name = {s.divergence: s for s in out}
        assert by_name["kl"].count == 2
        assert by_name["tv"].count == 1

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="at least one"):
            metric.aggregate([])

    def test_summary_as_dict_round_trips_fields(self):
        s = metric.aggregate(self.records([0.1, 0.5, 0.9]))[0]
        d = metric.summary_as_dict(s)
        assert d["divergence"] == "tv"
        assert d["count"] == 3
        assert sum(d["d_p"]["hist_counts"]) == 3


class TestCsv:
    def test_round_trip(self, tmp_path):
        model, ds = snapshot(19)
        pgn = full_gradnorm_scheme(model, ds)
        rng = np.random.default_rng(20)
        records = []
        for step in range(5):
            records.extend(metric.evaluate_step(model, ds, pgn, m=6, rng=rng, step=step))
        path = tmp_path / "records.csv"
        metric.write_records_csv(records, path)
        back = metric.read_records_csv(path)
        assert back == records

    def test_header(self, tmp_path):
        path = tmp_path / "records.csv"
        metric.write_records_csv([], path)
        assert path.read_text().strip() == "step,divergence,d_p,d_u,m,flagged"
