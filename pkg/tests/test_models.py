import math

import numpy as np
import pytest
from scipy import stats

import oracles
from fairsvi import autodiff as ad
from fairsvi.autodiff import Tensor
from fairsvi.distributions import RngStream
from fairsvi.errors import ContractError, DomainError, TrainingDivergence
from fairsvi.models import (
    GaussianMixture,
    GMMHyper,
    InferenceNet,
    NaiveBayes,
    assign_hard,
    build_model,
    categorical_kl_uniform,
    fair_objective,
    load_checkpoint,
    posterior,
    save_checkpoint,
)


def small(kind, splits, seed=0, **kwargs):
    kwargs.setdefault("widths", (8,))
    return build_model(kind, splits.train, RngStream(seed), K=None if kind == "sp" else 2, **kwargs)


def zero_nets(model):
    for net in model.nets():
        for name, p in net.params.items():
            p.data = np.ones_like(p.data) if name.endswith("bn_gamma") else np.zeros_like(p.data)


class TestInferenceNet:
    def test_parameter_names_and_shapes(self):
        net = InferenceNet(5, 3, widths=(4, 2), rng=RngStream(0), name="q")
        shapes = {k: v.shape for k, v in net.params.items()}
        assert shapes == {
            "q.W0": (5, 4), "q.b0": (4,), "q.W1": (4, 2), "q.b1": (2,),
            "q.W2": (2, 3), "q.b2": (3,), "q.bn_gamma": (3,), "q.bn_beta": (3,),
        }  # fmt: skip
        assert [w.shape for w in net.weights()] == [(5, 4), (4, 2), (2, 3)]

    def test_without_batch_norm(self):
        net = InferenceNet(3, 2, widths=(4,), batch_norm=False, rng=RngStream(0))
        assert not any("bn" in k for k in net.params)
        assert net.buffers() == {}

    def test_training_updates_running_stats_eval_does_not(self):
        net = InferenceNet(3, 2, widths=(4,), dropout=0.0, rng=RngStream(0))
        x = np.random.default_rng(0).normal(size=(16, 3))
        before = net.running_mean.copy()
        net(x, training=False)
        np.testing.assert_array_equal(net.running_mean, before)
        net(x, training=True, rng=RngStream(1))
        assert not np.array_equal(net.running_mean, before)

    def test_eval_mode_is_deterministic(self):
        net = InferenceNet(3, 2, rng=RngStream(0))
        x = np.ones((2, 3))
        np.testing.assert_array_equal(net(x).data, net(x).data)

    def test_invalid_options(self):
        with pytest.raises(DomainError):
            InferenceNet(2, 2, activation="tanh", rng=RngStream(0))
        with pytest.raises(DomainError):
            InferenceNet(2, 2, dropout=1.0, rng=RngStream(0))


class TestPosterior:
    def test_uniform_logits(self):
        net = InferenceNet(2, 4, widths=(3,), batch_norm=False)  # zero weights
        np.testing.assert_allclose(posterior(net, np.ones((3, 2))), 0.25)

    def test_dominant_logit(self):
        probs = ad.softmax(Tensor([[10.0, 0.0, 0.0]])).data
        assert probs[0, 0] > 0.999
        assert assign_hard(probs)[0] == 0

    def test_ties_go_to_lowest_class(self):
        assert list(assign_hard([[0.5, 0.5], [0.2, 0.8]])) == [0, 1]

    def test_kl_to_uniform(self):
        assert categorical_kl_uniform(np.log(np.full((2, 3), 1 / 3))).data == pytest.approx([0.0, 0.0])
        p = np.array([0.7, 0.2, 0.1])
        assert categorical_kl_uniform(np.log(p)).item() == pytest.approx((p * np.log(p * 3)).sum())


class TestFairObjective:
    def test_hand_arithmetic(self):
        assert fair_objective(-3.0 * 5, 0.5, 2.0, 5).item() == pytest.approx(4.0)

    def test_zero_lambda_is_negative_mean_elbo(self):
        assert fair_objective(-12.0, 0.9, 0.0, 4).item() == pytest.approx(3.0)


class TestNaiveBayes:
    def test_uniform_posterior_has_zero_kl(self, nb_splits):
        model = small("nb", nb_splits)
        zero_nets(model)
        terms = model.elbo(model.make_batch(nb_splits.train).take(np.arange(10)), 0.5, RngStream(0))
        assert terms.parts["kl"].item() == pytest.approx(0.0, abs=1e-12)

    def test_single_class_reduces_to_reconstruction(self, nb_splits):
        model = build_model("nb", nb_splits.train, RngStream(0), K=1, widths=(4,))
        batch = model.make_batch(nb_splits.train).take(np.arange(10))
        terms = model.elbo(batch, 0.5, RngStream(1), prior_scale=0.3)
        np.testing.assert_allclose(terms.z.data, 1.0)
        want = terms.parts["reconstruction"].item() + 0.3 * terms.parts["hyperprior"].item()
        assert terms.total.item() == pytest.approx(want)

    def test_log_marginal_matches_enumeration(self, nb_splits):
        model = small("nb", nb_splits, seed=3)
        batch = model.make_batch(nb_splits.dev).take(np.arange(12))
        mu = model.params.mu.data
        sigma = np.log1p(np.exp(model.params.sigma_raw.data))
        probs = [oracles.logistic_normal_mean_mc(mu[:, s:e], sigma[:, s:e]) for _, s, e in model.blocks]
        codes = [[int(np.argmax(x[s:e])) for _, s, e in model.blocks] for x in batch.x]
        want = oracles.nb_log_evidence(codes, probs, model.K)
        np.testing.assert_allclose(model.log_marginal(batch), want, atol=1e-2)

    def test_identical_class_likelihoods(self, nb_splits):
        model = small("nb", nb_splits)
        model.params.mu.data[1] = model.params.mu.data[0]
        model.params.sigma_raw.data[1] = model.params.sigma_raw.data[0]
        batch = model.make_batch(nb_splits.dev).take(np.arange(5))
        log_y = model.params.log_probs_mean()
        np.testing.assert_allclose(model.log_marginal(batch), batch.x @ log_y[0], atol=1e-12)

    def test_nan_logits_diverge(self, nb_splits):
        model = small("nb", nb_splits)
        model.net.params["q_z.W0"].data[0, 0] = np.nan
        with pytest.raises(TrainingDivergence) as info:
            model.elbo(model.make_batch(nb_splits.train), 0.5, RngStream(0))
        assert info.value.term == "log_pi"

    def test_elbo_is_seed_deterministic(self, nb_splits):
        model = small("nb", nb_splits)
        batch = model.make_batch(nb_splits.train).take(np.arange(20))
        a = model.elbo(batch, 0.5, RngStream(4), training=False).total.item()
        b = model.elbo(batch, 0.5, RngStream(4), training=False).total.item()
        assert a == b

    def test_mismatched_blocks(self, nb_splits, gmm_splits):
        model = small("nb", nb_splits)
        other = nb_splits.train.subset(np.arange(5))
        other.vocab = dict(other.vocab, x0=other.vocab["x0"] + ["extra"])
        with pytest.raises(ContractError):
            model.make_batch(other)


class TestGaussianMixture:
    def test_single_component_zero_factor(self):
        hyper = GMMHyper.default(np.array([[0.5, -1.0]]))
        model = GaussianMixture(hyper, rng=RngStream(0), widths=(3,))
        model.params.C.data[:] = 0.0
        x = np.random.default_rng(0).normal(size=(6, 2))
        terms = model.elbo(type("B", (), {"x": x})(), 0.5, RngStream(1), prior_scale=1.0)
        mu = model.params.mu.data[0]
        want = stats.norm.logpdf(x - mu).sum() + terms.parts["hyperprior"].item()
        assert terms.total.item() == pytest.approx(want)

    def test_hyperprior_matches_scipy(self, gmm_splits):
        model = small("gmm", gmm_splits)
        h = model.params.hyper
        want = sum(
            stats.multivariate_normal(h.mu[k], h.cov).logpdf(model.params.mu.data[k])
            + stats.invwishart(df=h.nu, scale=h.psi).logpdf(model.params.covariance(k))
            for k in range(model.K)
        )
        assert model.params.log_hyperprior().item() == pytest.approx(want, rel=1e-10)

    def test_log_marginal_matches_scipy(self, gmm_splits):
        model = small("gmm", gmm_splits, seed=2)
        batch = model.make_batch(gmm_splits.dev)
        want = oracles.gmm_log_evidence(batch.x, model.params.mu.data, model.params.C.data)
        np.testing.assert_allclose(model.log_marginal(batch), want, rtol=1e-10)

    def test_low_rank_factor(self, gmm_splits):
        model = small("gmm", gmm_splits, rank=1)
        assert model.params.C.shape == (2, 2, 1)


class TestSpecialPurpose:
    def test_matching_prior_gives_zero_kl(self, sp_splits):
        model = small("sp", sp_splits)
        zero_nets(model)
        terms = model.elbo(model.make_batch(sp_splits.train).take(np.arange(10)), 0.5, RngStream(0))
        assert terms.parts["prior_z"].item() + terms.parts["entropy_z"].item() == pytest.approx(0.0, abs=1e-10)

    def test_equal_coefficients_cut_regression_gradient(self, sp_splits):
        model = small("sp", sp_splits)
        model.params.beta_z.data[:] = 0.7
        model.params.beta_u.data[:] = -0.2
        batch = model.make_batch(sp_splits.train).take(np.arange(16))
        terms = model.elbo(batch, 0.5, RngStream(0))
        nets = {**model.q_z.params, **model.q_u.params}
        grads = ad.gradients(terms.parts["regression"], nets)
        for g in grads.values():
            np.testing.assert_allclose(g, 0.0, atol=1e-12)

    def test_log_marginal_matches_enumeration(self, sp_splits):
        model = small("sp", sp_splits, seed=1)
        batch = model.make_batch(sp_splits.dev).take(np.arange(10))
        p = model.params
        sigma_u = np.log1p(np.exp(p.sigma_u_raw.data))
        n_age = model.n_age
        age = oracles.logistic_normal_mean_mc(p.mu_u.data[:, :n_age], sigma_u[:, :n_age])
        charge = oracles.logistic_normal_mean_mc(p.mu_u.data[:, n_age:], sigma_u[:, n_age:])
        want = oracles.sp_log_evidence(
            batch.t, batch.a, batch.c, model.prior_probs(batch), age, charge,
            p.beta0.data[0], p.beta_z.data, p.beta_u.data, p.beta_c.data,
            float(np.log1p(np.exp(p.sigma_t_raw.data[0]))),
        )  # fmt: skip
        np.testing.assert_allclose(model.log_marginal(batch), want, atol=1e-2)

    def test_prediction_of_concentrated_posterior(self, sp_splits):
        model = small("sp", sp_splits)
        batch = model.make_batch(sp_splits.dev).take(np.arange(6))
        for net, k in ((model.q_z, 2), (model.q_u, 1)):
            zero_nets_single(net)
            net.params[f"{net.name}.bn_beta"].data[k] = 50.0
        p = model.params
        want = p.beta0.data[0] + p.beta_z.data[2] + p.beta_u.data[1] + p.beta_c.data[batch.c]
        np.testing.assert_allclose(model.predict(batch), want, atol=1e-9)

    def test_prediction_without_latent_effects(self, sp_splits):
        model = small("sp", sp_splits)
        model.params.beta_z.data[:] = 0.0
        model.params.beta_u.data[:] = 0.0
        batch = model.make_batch(sp_splits.dev)
        want = model.params.beta0.data[0] + model.params.beta_c.data[batch.c]
        np.testing.assert_allclose(model.predict(batch), want)

    def test_prior_net_has_no_batch_norm_and_no_l2(self, sp_splits):
        model = small("sp", sp_splits)
        assert not model.params.prior_net.batch_norm
        for W in model.params.prior_net.weights():
            W.data = W.data * 0.0 + 100.0
        expected = sum(float((W.data**2).sum()) for net in (model.q_z, model.q_u) for W in net.weights())
        assert model.l2_penalty().item() == pytest.approx(expected)

    def test_three_risk_classes_only(self, sp_splits):
        with pytest.raises(DomainError):
            build_model("sp", sp_splits.train, RngStream(0), K=2)


def zero_nets_single(net):
    for name, p in net.params.items():
        p.data = np.ones_like(p.data) if name.endswith("bn_gamma") else np.zeros_like(p.data)
    net.running_mean[:] = 0.0
    net.running_var[:] = 1.0


class TestCheckpoint:
    @pytest.mark.parametrize("kind", ["nb", "gmm", "sp"])
    def test_round_trip(self, kind, nb_splits, gmm_splits, sp_splits, tmp_path):
        splits = {"nb": nb_splits, "gmm": gmm_splits, "sp": sp_splits}[kind]
        model = small(kind, splits, seed=5, batch_norm=kind != "gmm")
        batch = model.make_batch(splits.train)
        model.elbo(batch, 0.5, RngStream(0))  # move running statistics off their defaults
        path = tmp_path / "model.npz"
        save_checkpoint(model, path, {"note": "x"})
        loaded, meta = load_checkpoint(path)
        assert meta["metadata"] == {"note": "x"}
        a, b = model.state_dict(), loaded.state_dict()
        assert a.keys() == b.keys()
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])
        dev = model.make_batch(splits.dev)
        np.testing.assert_array_equal(model.posterior(dev), loaded.posterior(dev))
        np.testing.assert_array_equal(model.log_marginal(dev), loaded.log_marginal(dev))

    def test_wrong_format(self, nb_splits, tmp_path):
        path = tmp_path / "bad.npz"
        np.savez(path, __meta__=np.array('{"format": "other"}'))
        with pytest.raises(ContractError):
            load_checkpoint(path)

    def test_unexpected_entry(self, nb_splits):
        model = small("nb", nb_splits)
        with pytest.raises(ContractError):
            model.load_state_dict({"nope": np.zeros(1)})


def test_unknown_kind(nb_splits):
    with pytest.raises(DomainError):
        build_model("hmm", nb_splits.train, RngStream(0))


def test_naive_bayes_direct_construction():
    model = NaiveBayes([("a", 0, 2), ("b", 2, 5)], K=3, rng=RngStream(0), widths=(4,))
    assert model.params.mu.shape == (3, 5)
    assert math.isfinite(model.params.log_hyperprior().item())
