import numpy as np
import pytest

from core.exceptions import ModelError
from core.ndcore import Parameter, backward, no_grad
from pipeline.data import EncoderNormalizer
from pipeline.inference import (AdamState, AdamW, VariationalParams, adam_step, elbo,
                                 elbo_minibatch, particle_seeds, particle_terms,
                                 reweighted_objective, reweighting, sample_posterior)
from pipeline.models import GenerativeParams
from tests.gradcheck import numerical_grad

LATENT = 3


def build(ds, kind="sams", mode="mean-field"):
    gp = GenerativeParams(kind, ds.n_genes, ds.n_perturbations, LATENT, decoder_hidden=(5,),
                          likelihood="counts", seed=1, median_library=ds.median_library())
    vp = VariationalParams(kind, mode, ds.n_genes, ds.n_perturbations, LATENT,
                           encoder_hidden=(5,), embedding_hidden=(4,), seed=2)
    return gp, vp, EncoderNormalizer.fit(ds)(ds.X)


@pytest.fixture
def train_ds(count_ds):
    return count_ds.subset("train")


class TestVariationalFamily:
    def test_mean_field_parameters(self, train_ds):
        _, vp, _ = build(train_ds)
        names = set(vp.named_parameters())
        assert {"q.mask_logits", "q.embedding_mean", "q.embedding_scale"} <= names
        assert vp.encoder.in_dim == train_ds.n_genes

    def test_correlated_parameters(self, train_ds):
        _, vp, _ = build(train_ds, mode="corr-both")
        names = set(vp.named_parameters())
        assert "q.embedding_mean" not in names
        assert any(n.startswith("q.embedding_net.") for n in names)
        assert vp.encoder.in_dim == train_ds.n_genes + LATENT

    def test_cpa_has_no_mask_logits(self, train_ds):
        _, vp, _ = build(train_ds, kind="cpa")
        assert "q.mask_logits" not in vp.named_parameters()
        np.testing.assert_array_equal(vp.mask_probabilities(), np.ones((3, LATENT)))

    def test_conditional_encoder_sees_dosage(self, train_ds):
        _, vp, _ = build(train_ds, kind="conditional")
        assert vp.encoder.in_dim == train_ds.n_genes + train_ds.n_perturbations
        assert vp.mask_probabilities() is None
        assert vp.embedding_means() is None

    def test_conditional_rejects_correlated_modes(self, train_ds):
        with pytest.raises(ModelError):
            build(train_ds, kind="conditional", mode="corr-z")

    def test_unknown_mode(self, train_ds):
        with pytest.raises(ModelError):
            build(train_ds, mode="full-rank")

    def test_hard_masks_follow_logits(self, train_ds):
        gp, vp, X_enc = build(train_ds)
        vp.mask_logits.data = np.array([[2.0, -2.0, 0.5]] * 3)
        sample = sample_posterior(X_enc, train_ds.D, vp, seed=0, hard_masks=True)
        np.testing.assert_array_equal(sample.latents.M.data, [[1.0, 0.0, 1.0]] * 3)
        np.testing.assert_array_equal(vp.hard_masks(), [[1.0, 0.0, 1.0]] * 3)

    def test_correlated_embedding_means_depend_on_masks(self, train_ds):
        _, vp, _ = build(train_ds, mode="corr-e")
        a = vp.embedding_means(np.zeros((3, LATENT)))
        b = vp.embedding_means(np.ones((3, LATENT)))
        assert a.shape == (3, LATENT)
        assert not np.allclose(a, b)


class TestObjective:
    def test_full_batch_matches_elbo(self, train_ds):
        gp, vp, X_enc = build(train_ds)
        X, D, l = train_ds.X, train_ds.D, train_ds.library_sizes
        n_t = D.sum(axis=0)
        with no_grad():
            minibatch = elbo_minibatch(np.arange(len(X)), X, X_enc, D, l, vp, gp, n_t, seed=3)
            full = elbo(X, X_enc, D, l, vp, gp, seed=3)
        assert minibatch.item() == pytest.approx(full.item(), rel=1e-12)

    def test_exhaustive_batches_recover_the_full_objective(self, train_ds):
        gp, vp, X_enc = build(train_ds)
        X, D, l = train_ds.X, train_ds.D, train_ds.library_sizes
        n_t = D.sum(axis=0)
        with no_grad():
            terms = particle_terms(X, X_enc, D, l, vp, gp, seed=4)
            batches = np.array_split(np.random.default_rng(0).permutation(len(X)), 5)
            total = sum(reweighted_objective(terms.subset(b), D[b], n_t).item() for b in batches)
        assert total == pytest.approx(terms.total().item(), rel=1e-10)

    def test_reweighting(self):
        D_batch = np.array([[1, 0, 1], [1, 0, 0]])
        np.testing.assert_allclose(reweighting(D_batch, np.array([4, 2, 8])), [0.5, 0.0, 0.125])

    def test_orphan_perturbation(self):
        with pytest.raises(ModelError):
            reweighting(np.array([[0, 1]]), np.array([3, 0]))

    def test_same_seed_same_estimate(self, train_ds):
        gp, vp, X_enc = build(train_ds)
        X, D, l = train_ds.X, train_ds.D, train_ds.library_sizes
        with no_grad():
            a = elbo(X, X_enc, D, l, vp, gp, particles=2, seed=7).item()
            b = elbo(X, X_enc, D, l, vp, gp, particles=2, seed=7).item()
            c = elbo(X, X_enc, D, l, vp, gp, particles=2, seed=8).item()
        assert a == b
        assert a != c

    def test_spread_shrinks_with_particle_count(self, train_ds):
        gp, vp, X_enc = build(train_ds)
        X, D, l = train_ds.X, train_ds.D, train_ds.library_sizes
        spread = {}
        with no_grad():
            for particles in (1, 4, 16, 64):
                estimates = [elbo(X, X_enc, D, l, vp, gp, particles=particles, seed=rep).item()
                             for rep in range(60)]
                spread[particles] = np.std(estimates, ddof=1)
        assert spread[1] > spread[4] > spread[16] > spread[64]
        # 1 / sqrt(P) scaling predicts a ratio of 8
        assert 5.0 <= spread[1] / spread[64] <= 12.0

    @pytest.mark.parametrize("masks_off", [False, True])
    def test_corr_z_reduces_to_mean_field(self, train_ds, masks_off):
        gp, _, X_enc = build(train_ds)
        X, D, l = train_ds.X, train_ds.D, train_ds.library_sizes
        mean_field = VariationalParams("sams", "mean-field", train_ds.n_genes,
                                       train_ds.n_perturbations, LATENT, encoder_hidden=(), seed=4)
        corr_z = VariationalParams("sams", "corr-z", train_ds.n_genes, train_ds.n_perturbations,
                                   LATENT, encoder_hidden=(), seed=5)
        if masks_off:
            mean_field.mask_logits.data = np.full((3, LATENT), -50.0)
        for name in ("mask_logits", "embedding_mean", "embedding_scale"):
            getattr(corr_z, name).data = getattr(mean_field, name).data.copy()
        source, target = mean_field.encoder.layers[0], corr_z.encoder.layers[0]
        # with masks off the offset input is zero, so its weights may stay random
        weight = target.weight.data.copy() if masks_off else np.zeros_like(target.weight.data)
        weight[:train_ds.n_genes] = source.weight.data
        target.weight.data = weight
        target.bias.data = source.bias.data.copy()

        with no_grad():
            expected = elbo(X, X_enc, D, l, mean_field, gp, particles=3, seed=6).item()
            reduced = elbo(X, X_enc, D, l, corr_z, gp, particles=3, seed=6).item()
        assert reduced == pytest.approx(expected, rel=1e-12)

    def test_empty_rows(self, train_ds):
        gp, vp, _ = build(train_ds)
        empty = np.zeros((0, train_ds.n_genes))
        assert elbo(empty, empty, np.zeros((0, 3)), None, vp, gp).item() == 0.0

    def test_needs_a_particle(self, train_ds):
        gp, vp, X_enc = build(train_ds)
        with pytest.raises(ModelError):
            elbo_minibatch(np.arange(2), train_ds.X, X_enc, train_ds.D, train_ds.library_sizes,
                           vp, gp, train_ds.D.sum(axis=0), particles=0)

    @pytest.mark.parametrize("kind,mode", [("sams", "mean-field"), ("sams", "corr-e"),
                                           ("sams", "corr-z"), ("sams", "corr-both"),
                                           ("cpa", "corr-both"), ("conditional", "mean-field")])
    def test_every_parameter_receives_a_gradient(self, train_ds, kind, mode):
        gp, vp, X_enc = build(train_ds, kind=kind, mode=mode)
        X, D, l = train_ds.X, train_ds.D, train_ds.library_sizes
        objective = elbo_minibatch(np.arange(8), X, X_enc, D, l, vp, gp, D.sum(axis=0), seed=0)
        grads = backward(-objective)
        for p in [*vp.parameters(), *gp.parameters()]:
            assert p in grads, p.name
            assert np.all(np.isfinite(grads[p]))

    @pytest.mark.parametrize("mode", ["mean-field", "corr-both"])
    def test_elbo_gradient_matches_finite_differences(self, train_ds, mode):
        gp, vp, X_enc = build(train_ds, mode=mode)
        rows = np.arange(5)
        X, D, l = train_ds.X[rows], train_ds.D[rows], train_ds.library_sizes[rows]
        grads = backward(elbo(X, X_enc[rows], D, l, vp, gp, seed=11))

        # mask logits only reach the objective through the straight-through estimator
        params = {**gp.named_parameters(), **vp.named_parameters()}
        params.pop("q.mask_logits", None)
        for name, param in params.items():
            original = param.data.copy()

            def objective(values):
                param.data = values
                with no_grad():
                    return elbo(X, X_enc[rows], D, l, vp, gp, seed=11).item()

            numeric = numerical_grad(objective, original)
            param.data = original
            np.testing.assert_allclose(grads[param], numeric, rtol=1e-4, atol=1e-5, err_msg=name)

    def test_particle_seeds_are_fixed(self):
        assert particle_seeds(5, 3) == particle_seeds(5, 3)
        assert len(set(particle_seeds(5, 3))) == 3
        assert particle_seeds([5, 1], 1) != particle_seeds([5, 2], 1)


class TestAdamW:
    def test_first_step_moves_by_learning_rate(self):
        p = Parameter(np.array([1.0, 1.0]), name="p")
        adam_step([p], {p: np.array([2.0, -0.5])}, AdamState(), lr=0.1, wd=0.0)
        np.testing.assert_allclose(p.data, [0.9, 1.1], atol=1e-8)

    def test_decay_without_gradient(self):
        weight = Parameter(np.array([2.0]), name="w", decay=True)
        bias = Parameter(np.array([2.0]), name="b")
        adam_step([weight, bias], {}, AdamState(), lr=0.1, wd=0.5)
        np.testing.assert_allclose(weight.data, [2.0 * (1 - 0.05)])
        np.testing.assert_array_equal(bias.data, [2.0])

    def test_no_decay_no_gradient_is_a_no_op(self):
        weight = Parameter(np.array([2.0]), name="w", decay=True)
        adam_step([weight], {}, AdamState(), lr=0.1, wd=0.0)
        np.testing.assert_array_equal(weight.data, [2.0])

    def test_quadratic_bowl(self):
        p = Parameter(np.array([0.0, 10.0]), name="p")
        optimizer = AdamW([p], lr=0.1, weight_decay=0.0)
        for _ in range(2000):
            diff = p - np.array([3.0, -1.0])
            optimizer.step(backward((diff * diff).sum()))
        np.testing.assert_allclose(p.data, [3.0, -1.0], atol=0.05)
        assert optimizer.state.step == 2000

    def test_state_arrays_round_trip(self):
        p = Parameter(np.array([1.0]), name="p")
        optimizer = AdamW([p], lr=0.1)
        optimizer.step({p: np.array([1.0])})
        restored = AdamW([p], lr=0.1)
        restored.load_state_arrays(optimizer.state.step, optimizer.state_arrays())
        assert restored.state.step == 1
        np.testing.assert_array_equal(restored.state.m["p"], optimizer.state.m["p"])
        np.testing.assert_array_equal(restored.state.v["p"], optimizer.state.v["p"])

    def test_duplicate_names(self):
        with pytest.raises(ModelError):
            AdamW([Parameter(0.0, name="a"), Parameter(1.0, name="a")])
