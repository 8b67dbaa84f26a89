import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import cmcl.autodiff as ad
from cmcl.errors import ContractError, DivergenceError, InsufficientSamplesError
from cmcl.losses import (
    DomainBatch,
    domain_features,
    kl_categorical,
    kl_decomposition_check,
    loss_cdl,
    loss_ce,
    loss_cemm,
    loss_cov,
    loss_dsc,
    loss_mean,
    loss_mm,
    posterior_alignment_diag,
)
from cmcl.model import CmclModel
from cmcl.rng import substream

RNG = np.random.default_rng(42)


def toy_model(input_dim=3, hidden=(4,), d=4, k=3, n=2, zero_heads=False, seed=0):
    model = CmclModel.create(input_dim, hidden, d, k, n, substream(seed, 3))
    if not zero_heads:
        for clf in [*model.domain_classifiers, model.global_classifier]:
            clf.W.value = 0.6 * RNG.normal(size=clf.W.value.shape)
    return model


def toy_batches(model, b=5):
    return [
        DomainBatch(i, RNG.normal(size=(b, model.input_dim)), RNG.integers(0, model.class_count, b))
        for i in range(model.num_domains)
    ]


def log_softmax_rows(logits):
    m = logits.max(axis=1, keepdims=True)
    return logits - (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))


class TestLossCe:
    def test_uniform_prediction_value(self):
        model = toy_model(zero_heads=True)
        batches = toy_batches(model)
        n, k = model.num_domains, model.class_count
        assert float(loss_ce(model, batches).value) == pytest.approx((n + 1) * np.log(k), abs=1e-12)

    def test_perfect_posteriors_approach_zero(self):
        # huge margins on the true class drive the loss toward 0
        model = toy_model(input_dim=2, hidden=(), d=2, k=2)
        model.extractor.layers[0].weight.value = np.eye(2)
        for clf in [*model.domain_classifiers, model.global_classifier]:
            clf.W.value = 200.0 * np.array([[1.0, 0.0], [-1.0, 0.0]])
        x = np.array([[1.0, 0.0], [-1.0, 0.0]])
        y = np.array([0, 1])
        batches = [DomainBatch(i, x, y) for i in range(model.num_domains)]
        assert float(loss_ce(model, batches).value) == pytest.approx(0.0, abs=1e-12)

    def test_matches_double_loop_oracle(self):
        model = toy_model(n=2)
        batches = toy_batches(model, b=4)
        heads = [*model.domain_classifiers, model.global_classifier]
        total = 0.0
        count = 0
        for batch in batches:
            z = model.extractor.forward_array(batch.x)
            count += len(batch)
            for head in heads:
                lp = log_softmax_rows(z @ head.W.value.T)
                for r in range(len(batch)):
                    total += lp[r, batch.y[r]]
        oracle = -total / count
        assert float(loss_ce(model, batches).value) == pytest.approx(oracle, abs=1e-12)

    def test_empty_batch_list_rejected(self):
        with pytest.raises(ContractError):
            loss_ce(toy_model(), [])

    def test_wrong_batch_count_rejected(self):
        model = toy_model(n=3)
        with pytest.raises(ContractError):
            loss_ce(model, toy_batches(model)[:2])


class TestLossMean:
    def test_identical_features_zero(self):
        f = RNG.normal(size=(4, 3))
        assert float(loss_mean([f, f.copy()]).value) == 0.0

    def test_hand_value(self):
        # N=2, d=2, means (0,0) and (1,1): (2/(2*1*2)) * 2 = 1
        f1 = np.zeros((2, 2))
        f2 = np.ones((2, 2))
        assert float(loss_mean([f1, f2]).value) == pytest.approx(1.0, abs=1e-15)

    def test_permutation_invariance(self):
        feats = [RNG.normal(size=(4, 3)) for _ in range(3)]
        v1 = float(loss_mean(feats).value)
        v2 = float(loss_mean([feats[2], feats[0], feats[1]]).value)
        assert v1 == pytest.approx(v2, abs=1e-15)

    def test_matches_pair_loop_oracle(self):
        feats = [RNG.normal(size=(5, 4)) for _ in range(3)]
        means = [f.mean(axis=0) for f in feats]
        acc = 0.0
        for i in range(3):
            for j in range(i + 1, 3):
                acc += np.sum((means[i] - means[j]) ** 2)
        oracle = 2.0 / (3 * 2 * 4) * acc
        assert float(loss_mean(feats).value) == pytest.approx(oracle, abs=1e-12)

    def test_single_domain_rejected(self):
        with pytest.raises(ContractError):
            loss_mean([RNG.normal(size=(4, 3))])


class TestLossCov:
    def test_identical_features_zero(self):
        f = RNG.normal(size=(4, 3))
        assert float(loss_cov([f, f.copy()]).value) == 0.0

    def test_hand_value(self):
        # C1 = [[2,2],[2,2]], C2 = 0: (2/(2*1*4)) * 16 = 4
        f1 = np.array([[0.0, 0.0], [2.0, 2.0]])
        f2 = np.array([[1.0, 1.0], [1.0, 1.0]])
        assert float(loss_cov([f1, f2]).value) == pytest.approx(4.0, abs=1e-12)

    def test_translation_invariance(self):
        feats = [RNG.normal(size=(5, 3)) for _ in range(2)]
        v1 = float(loss_cov(feats).value)
        shift = RNG.normal(size=(1, 3))
        v2 = float(loss_cov([f + shift for f in feats]).value)
        assert v1 == pytest.approx(v2, rel=1e-9)

    def test_insufficient_samples(self):
        with pytest.raises(InsufficientSamplesError):
            loss_cov([RNG.normal(size=(1, 3)), RNG.normal(size=(4, 3))])


class TestLossMm:
    def test_zero_weights_zero(self):
        feats = [RNG.normal(size=(4, 3)) for _ in range(2)]
        assert float(loss_mm(feats, 0.0, 0.0).value) == 0.0

    def test_weighted_combination(self):
        feats = [RNG.normal(size=(4, 3)) for _ in range(2)]
        lm = float(loss_mean(feats).value)
        lc = float(loss_cov(feats).value)
        assert float(loss_mm(feats, 0.001, 0.01).value) == pytest.approx(
            0.001 * lm + 0.01 * lc, rel=1e-12
        )


class TestLossDsc:
    def test_zero_heads_value(self):
        model = toy_model(zero_heads=True)
        batches = toy_batches(model)
        n, k = model.num_domains, model.class_count
        assert float(loss_dsc(model, batches).value) == pytest.approx(n * np.log(k), abs=1e-12)

    def test_extractor_gradient_exactly_zero(self):
        model = toy_model()
        batches = toy_batches(model)
        loss = loss_dsc(model, batches)
        ext_params = list(model.extractor.named_parameters().values())
        grads = ad.backward(loss, ext_params)
        for node in ext_params:
            assert np.array_equal(grads[node], np.zeros_like(node.value))

    def test_head_gradients_nonzero(self):
        model = toy_model()
        batches = toy_batches(model)
        grads = ad.backward(loss_dsc(model, batches), list(model.domain_parameters().values()))
        for g in grads.values():
            assert np.any(g != 0)

    def test_matches_loop_oracle(self):
        model = toy_model(n=2)
        batches = toy_batches(model, b=4)
        total = 0.0
        for batch, head in zip(batches, model.domain_classifiers):
            z = model.extractor.forward_array(batch.x)
            lp = log_softmax_rows(z @ head.W.value.T)
            total -= np.mean([lp[r, batch.y[r]] for r in range(len(batch))])
        assert float(loss_dsc(model, batches).value) == pytest.approx(total, abs=1e-12)


class TestLossCdl:
    def test_zero_heads_value(self):
        # each domain contributes ((N-1) + 1) * log K
        model = toy_model(n=2, zero_heads=True)
        batches = toy_batches(model)
        k = model.class_count
        assert float(loss_cdl(model, batches).value) == pytest.approx(
            2 * 2 * np.log(k), abs=1e-12
        )

    def test_single_domain_trains_global_only(self):
        model = toy_model(n=1, zero_heads=True)
        batches = toy_batches(model)
        k = model.class_count
        assert float(loss_cdl(model, batches).value) == pytest.approx(np.log(k), abs=1e-12)

    def test_domain_head_gradients_exactly_zero(self):
        model = toy_model(n=3)
        batches = toy_batches(model)
        grads = ad.backward(loss_cdl(model, batches), list(model.domain_parameters().values()))
        for node, g in grads.items():
            assert np.array_equal(g, np.zeros_like(node.value))

    def test_extractor_and_global_gradients_nonzero(self):
        model = toy_model()
        batches = toy_batches(model)
        params = model.extractor_and_global_parameters()
        grads = ad.backward(loss_cdl(model, batches), list(params.values()))
        assert np.any(grads[params["global.W"]] != 0)
        assert any(np.any(g != 0) for g in grads.values())

    def test_matches_double_loop_oracle(self):
        model = toy_model(n=3)
        batches = toy_batches(model, b=4)
        total = 0.0
        for i, batch in enumerate(batches):
            z = model.extractor.forward_array(batch.x)
            domain_sum = 0.0
            for j, head in enumerate(model.domain_classifiers):
                if j == i:
                    continue
                lp = log_softmax_rows(z @ head.W.value.T)
                domain_sum += sum(lp[r, batch.y[r]] for r in range(len(batch)))
            lp_g = log_softmax_rows(z @ model.global_classifier.W.value.T)
            domain_sum += sum(lp_g[r, batch.y[r]] for r in range(len(batch)))
            total -= domain_sum / len(batch)
        assert float(loss_cdl(model, batches).value) == pytest.approx(total, abs=1e-12)


class TestLossCemm:
    def test_components_recombine(self):
        model = toy_model()
        batches = toy_batches(model)
        total, parts = loss_cemm(model, batches, 0.7, 0.3)
        expected = (
            float(parts["ce"].value)
            + 0.7 * float(parts["mean"].value)
            + 0.3 * float(parts["cov"].value)
        )
        assert float(total.value) == pytest.approx(expected, rel=1e-12)

    def test_zero_lambdas_equal_ce_bitwise(self):
        model = toy_model()
        batches = toy_batches(model)
        total, parts = loss_cemm(model, batches, 0.0, 0.0)
        assert float(total.value) == float(parts["ce"].value)


class TestKl:
    def test_self_divergence_zero(self):
        p = np.abs(RNG.normal(size=5))
        p /= p.sum()
        assert kl_categorical(p, p) == pytest.approx(0.0, abs=1e-15)

    def test_hand_value(self):
        # p = (1, 0), q = (1/2, 1/2): 1 * log(1 / 0.5) = log 2
        assert kl_categorical([1.0, 0.0], [0.5, 0.5]) == pytest.approx(np.log(2.0), abs=1e-15)

    @given(st.integers(0, 100_000))
    @settings(max_examples=100, deadline=None)
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(2, 10))
        p = rng.dirichlet(np.ones(k))
        q = rng.dirichlet(np.ones(k))
        assert kl_categorical(p, q) >= -1e-12

    def test_infinite_divergence_detected(self):
        with pytest.raises(DivergenceError):
            kl_categorical([0.5, 0.5], [1.0, 0.0])

    def test_not_a_distribution_rejected(self):
        with pytest.raises(ContractError):
            kl_categorical([0.5, 0.2], [0.5, 0.5])


class TestKlDecomposition:
    def test_uniform_first_term(self):
        k = 5
        p = np.full(k, 1.0 / k)
        q = RNG.dirichlet(np.ones(k))
        neg_entropy, _ = kl_decomposition_check(p, q)
        assert neg_entropy == pytest.approx(-np.log(k), abs=1e-12)

    def test_one_hot_first_term_zero(self):
        p = np.array([0.0, 1.0, 0.0])
        q = np.array([0.2, 0.5, 0.3])
        neg_entropy, cross = kl_decomposition_check(p, q)
        assert neg_entropy == 0.0
        assert cross == pytest.approx(-np.log(0.5), abs=1e-15)

    def test_identity_on_1000_random_pairs(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            k = int(rng.integers(2, 11))
            p = rng.dirichlet(np.ones(k))
            q = rng.dirichlet(np.ones(k))
            neg_entropy, cross = kl_decomposition_check(p, q)
            assert abs((neg_entropy + cross) - kl_categorical(p, q)) <= 1e-10


class TestAlignmentDiag:
    def test_equal_heads_zero(self):
        model = toy_model(n=3, zero_heads=True)
        w = RNG.normal(size=model.global_classifier.W.value.shape)
        for clf in model.domain_classifiers:
            clf.W.value = w.copy()
        assert posterior_alignment_diag(model, RNG.normal(size=(10, 3))) == pytest.approx(
            0.0, abs=1e-15
        )

    def test_symmetric_under_relabeling(self):
        model = toy_model(n=3)
        probe = RNG.normal(size=(8, 3))
        v1 = posterior_alignment_diag(model, probe)
        model.domain_classifiers.reverse()
        v2 = posterior_alignment_diag(model, probe)
        assert v1 == pytest.approx(v2, rel=1e-12)

    def test_matches_per_row_kl_oracle(self):
        model = toy_model(n=2)
        probe = RNG.normal(size=(6, 3))
        z = model.extractor.forward_array(probe)
        lps = [log_softmax_rows(z @ c.W.value.T) for c in model.domain_classifiers]
        total = 0.0
        for r in range(len(probe)):
            p = np.exp(lps[0][r])
            q = np.exp(lps[1][r])
            total += 0.5 * (kl_categorical(p, q) + kl_categorical(q, p))
        oracle = total / len(probe)
        assert posterior_alignment_diag(model, probe) == pytest.approx(oracle, rel=1e-9)

    def test_needs_two_domains(self):
        with pytest.raises(ContractError):
            posterior_alignment_diag(toy_model(n=1), RNG.normal(size=(4, 3)))


class TestConcurrentEvaluation:
    def test_losses_are_pure_across_threads(self):
        # distinct tapes over shared (unmutated) leaves evaluate independently
        from concurrent.futures import ThreadPoolExecutor

        model = toy_model(n=3)
        batches = toy_batches(model, b=6)
        expected = float(loss_ce(model, batches).value)

        def evaluate(_):
            return float(loss_ce(model, batches).value)

        with ThreadPoolExecutor(max_workers=8) as pool:
            results = list(pool.map(evaluate, range(32)))
        assert all(r == expected for r in results)


class TestLossProperties:
    def test_losses_nonnegative_and_finite(self):
        for _ in range(10):
            model = toy_model(n=int(RNG.integers(2, 4)))
            batches = toy_batches(model, b=int(RNG.integers(2, 6)))
            feats = domain_features(model, batches)
            values = [
                float(loss_ce(model, batches).value),
                float(loss_mean(feats).value),
                float(loss_cov(feats).value),
                float(loss_dsc(model, batches).value),
                float(loss_cdl(model, batches).value),
            ]
            assert all(np.isfinite(v) and v >= 0 for v in values)

    def test_moment_losses_zero_iff_moments_match(self):
        f = RNG.normal(size=(6, 3))
        assert float(loss_mean([f, f.copy()]).value) <= 1e-18
        assert float(loss_cov([f, f.copy()]).value) <= 1e-18
        g = f + 0.5
        assert float(loss_mean([f, g]).value) > 1e-9
        assert float(loss_cov([f, g]).value) <= 1e-18
