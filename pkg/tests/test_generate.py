import numpy as np
import pytest

from ctrlrec import generate as G
from ctrlrec import model as M
from ctrlrec.corpus import synth_dataset
from ctrlrec.objectives import ObjectivePoint


POINT = ObjectivePoint(0.5, 0.5)


def make_model(vocab=20, seed=0, scale=0.1, horizon=5):
    cfg = M.ModelConfig(num_users=4, vocab=vocab, d_model=8, layers=1,
                        n_heads=2, horizon=horizon, max_hist=6, seed=1)
    m = M.Model(cfg)
    rng = np.random.default_rng(seed)
    for k in m.params:
        m.params[k] = m.params[k] + rng.normal(scale=scale, size=m.params[k].shape)
    return m


class TestGenerateBatch:
    def test_shapes_and_determinism(self):
        m = make_model()
        items, lps = G.generate_batch(m, [0, 1], [[1, 2], []], POINT, 5)
        items2, lps2 = G.generate_batch(m, [0, 1], [[1, 2], []], POINT, 5)
        assert items.shape == (2, 5) and lps.shape == (2, 5)
        assert np.array_equal(items, items2)
        assert np.array_equal(lps, lps2)

    def test_forbid_repeats(self):
        m = make_model(horizon=10)
        items, _ = G.generate_batch(m, [0], [[1]], POINT, 10)
        assert len(set(items[0].tolist())) == 10

    def test_repeats_allowed_when_disabled(self):
        # with a zero decoder all logits tie, so argmax always picks item 0
        m = make_model()
        m.params["dec_w"] = np.zeros_like(m.params["dec_w"])
        m.params["dec_b"] = np.zeros_like(m.params["dec_b"])
        items, _ = G.generate_batch(m, [0], [[1]], POINT, 4,
                                    forbid_repeats=False)
        assert items[0].tolist() == [0, 0, 0, 0]

    def test_exclude_history(self):
        m = make_model(horizon=8)
        hist = [3, 7, 11]
        items, _ = G.generate_batch(m, [0], [hist], POINT, 8,
                                    exclude_history=True)
        assert not set(items[0].tolist()) & set(hist)

    def test_infeasible_horizon(self):
        m = make_model(vocab=20)
        with pytest.raises(G.InfeasibleError):
            G.generate_batch(m, [0], [[1]], POINT, 21)

    def test_low_temperature_matches_greedy(self):
        m = make_model()
        g, _ = G.generate_batch(m, [0, 1], [[1], [2]], POINT, 5)
        s, _ = G.generate_batch(m, [0, 1], [[1], [2]], POINT, 5,
                                mode="sample", temperature=1e-6, seed=3)
        assert np.array_equal(g, s)

    def test_logit_shift_invariance(self):
        m = make_model()
        a_items, a_lps = G.generate_batch(m, [0], [[1]], POINT, 5)
        m.params["dec_b"] = m.params["dec_b"] + 7.5
        b_items, b_lps = G.generate_batch(m, [0], [[1]], POINT, 5)
        assert np.array_equal(a_items, b_items)
        assert np.allclose(a_lps, b_lps)

    def test_logprobs_valid(self):
        m = make_model()
        _, lps = G.generate_batch(m, [0], [[1]], POINT, 5)
        assert (lps <= 1e-12).all()

    def test_batch_matches_singletons(self):
        m = make_model()
        batch, _ = G.generate_batch(m, [0, 2], [[1, 5], [3]], POINT, 5)
        solo0, _ = G.generate_batch(m, [0], [[1, 5]], POINT, 5)
        solo2, _ = G.generate_batch(m, [2], [[3]], POINT, 5)
        assert np.array_equal(batch[0], solo0[0])
        assert np.array_equal(batch[1], solo2[0])

    def test_point_changes_output(self):
        m = make_model(scale=0.5)
        a, _ = G.generate_batch(m, [0], [[1]], ObjectivePoint(1.0, 0.0), 5)
        b, _ = G.generate_batch(m, [0], [[1]], ObjectivePoint(0.0, 1.0), 5)
        assert not np.array_equal(a, b)


class TestRequestWrapper:
    def test_mode_validation(self):
        with pytest.raises(ValueError):
            G.GenRequest(0, (), POINT, 5, mode="beam")
        with pytest.raises(ValueError):
            G.GenRequest(0, (), POINT, 5, mode="sample", temperature=0.0)

    def test_scored_result(self):
        ds, oracle = synth_dataset(num_users=4, num_items=20, num_categories=4,
                                   traj_len=8, latent_rank=2, seed=0)
        m = make_model()
        req = G.GenRequest(0, (1, 2), POINT, 5)
        res = G.generate(m, req, oracle=oracle, catalog=ds.catalog)
        assert len(res.items) == 5 and len(res.stepwise_logprobs) == 5
        rate, div = res.realized
        assert np.isclose(rate, sum(oracle.rate(0, i) for i in res.items))
        assert 0.0 <= div <= 1.0

    def test_unscored_result(self):
        m = make_model()
        res = G.generate(m, G.GenRequest(1, (), POINT, 3))
        assert res.realized == ()


class TestScoreSequence:
    def test_cross_module_consistency(self):
        from ctrlrec.objectives import FutureWindow, cumulative_rating, diversity
        ds, oracle = synth_dataset(num_users=4, num_items=20, num_categories=4,
                                   traj_len=8, latent_rank=2, seed=1)
        items = [0, 5, 9, 13]
        rate, div = G.score_sequence(oracle, ds.catalog, 2, items)
        fw = FutureWindow(tuple(items), tuple(oracle.rate(2, i) for i in items))
        assert rate == cumulative_rating(fw)
        assert div == diversity(fw, ds.catalog)

    def test_single_item(self):
        ds, oracle = synth_dataset(num_users=4, num_items=20, num_categories=4,
                                   traj_len=8, latent_rank=2, seed=1)
        rate, div = G.score_sequence(oracle, ds.catalog, 0, [4])
        assert rate == oracle.rate(0, 4) and div == 0.0

    def test_empty_rejected(self):
        ds, oracle = synth_dataset(num_users=4, num_items=20, num_categories=4,
                                   traj_len=8, latent_rank=2, seed=1)
        with pytest.raises(ValueError):
            G.score_sequence(oracle, ds.catalog, 0, [])
