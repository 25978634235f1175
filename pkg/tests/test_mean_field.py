import math

import numpy as np
import pytest

from dyntree._numeric import InferenceError
from dyntree.mean_field import (
    MeanFieldOptions,
    embed_in_structured,
    mf_fit,
    mf_free_energy,
    mf_init,
    mf_update_means,
    mf_update_mu,
)
from dyntree.model import Evidence, ParentMenu, build_layered_model, diagonal_cpt
from dyntree.oracle import exact_posterior
from dyntree.svi import FitOptions, svi_fit, svi_free_energy

from brute import instance


def _uniform(model):
    m = model.num_states
    return model.replace(cpts={k: np.full((m, m), 1 / m) for k in model.cpts},
                         root_priors=np.full(model.root_priors.shape, 1 / m))


class TestMeans:
    def test_uniform_cpts(self):
        model, ev = instance(0, [2, 3, 3], 3)
        state = mf_fit(_uniform(model), ev)
        np.testing.assert_allclose(state.hidden_marginals(), 1 / 3, atol=1e-12)

    def test_single_node_prior(self):
        model = build_layered_model([1, 1], 2, root_prior_spec=[0.3, 0.7])
        state = mf_init(model, Evidence([0]))
        mf_update_means(state, model)
        np.testing.assert_allclose(state.means[0][0], [0.3, 0.7], rtol=1e-14)

    def test_chain_grid_search(self):
        cpt = diagonal_cpt(2, 0.9)
        model = build_layered_model([1, 1], 2, cpt_spec=cpt, root_prior_spec=[0.3, 0.7])
        state = mf_fit(model, Evidence([0]), MeanFieldOptions(tolerance=1e-12))

        def energy(p):
            m = np.array([p, 1 - p])
            with np.errstate(divide="ignore", invalid="ignore"):
                ent = np.nansum(m * np.log(m))
            return ent - m @ np.log([0.3, 0.7]) - m @ np.log(cpt[0])

        grid = np.linspace(0, 1, 100_001)
        best = grid[np.argmin([energy(p) for p in grid])]
        assert state.means[0][0, 0] == pytest.approx(best, abs=1e-3)
        assert state.free_energy == pytest.approx(energy(best), abs=1e-6)

    def test_impossible_under_factorization(self):
        model = build_layered_model([1, 2], 2, cpt_spec=np.eye(2))
        state = mf_init(model, Evidence([0, 1]))
        with pytest.raises(InferenceError):
            mf_update_means(state, model)


class TestMu:
    def test_uniform_cpt_keeps_prior(self):
        model = build_layered_model([2, 1], 2, [ParentMenu((0, 1), (0.6, 0.4))])
        state = mf_init(model, Evidence([1]))
        mf_update_mu(state, model)
        np.testing.assert_allclose(state.mu[1][0], [0.6, 0.4], rtol=1e-14)

    def test_singleton(self):
        model = build_layered_model([1, 1], 2, cpt_spec=diagonal_cpt(2, 0.9))
        state = mf_init(model, Evidence([1]))
        mf_update_mu(state, model)
        np.testing.assert_array_equal(state.mu[1], [[1.0]])

    def test_hand_example(self):
        cpt = np.array([[0.7, 0.4], [0.3, 0.6]])
        model = build_layered_model([2, 1], 2, [ParentMenu((0, 1), (0.6, 0.4))], cpt)
        state = mf_init(model, Evidence([1]))
        state.means[0] = np.array([[0.2, 0.8], [0.9, 0.1]])
        mf_update_mu(state, model)
        w = np.array([
            0.6 * math.exp(0.2 * math.log(0.3) + 0.8 * math.log(0.6)),
            0.4 * math.exp(0.9 * math.log(0.3) + 0.1 * math.log(0.6)),
        ])
        np.testing.assert_allclose(state.mu[1][0], w / w.sum(), rtol=1e-14)


class TestFreeEnergy:
    def test_zero_for_uniform_prior(self):
        model = _uniform(build_layered_model([2, 2, 2], 2))
        state = mf_init(model, Evidence([0, 1]), perturbation=0.0)
        # no information anywhere: only the data term of the two leaves remains
        assert mf_free_energy(state, model) == pytest.approx(2 * math.log(2), abs=1e-14)

    @pytest.mark.parametrize("seed", range(6))
    def test_embedding_identity(self, seed):
        model, ev = instance(seed, [2, 3, 3], 3, max_menu=3)
        state = mf_fit(model, ev, rng=np.random.default_rng(seed))
        embedded = embed_in_structured(state, model)
        assert svi_free_energy(embedded, model) == pytest.approx(mf_free_energy(state, model), abs=1e-12)
        np.testing.assert_allclose(embedded.means[1], state.means[1], atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_upper_bound(self, seed):
        model, ev = instance(seed, [2, 3, 3], 3)
        state = mf_fit(model, ev, rng=np.random.default_rng(0))
        assert state.free_energy >= -exact_posterior(model, ev).log_evidence - 1e-9


class TestFit:
    def test_singleton_uniform_one_iteration(self):
        model = _uniform(build_layered_model([1, 2, 2], 2, [ParentMenu((0,), (1.0,))] * 2
                                             + [ParentMenu((0,), (1.0,)), ParentMenu((1,), (1.0,))]))
        state = mf_fit(model, Evidence([0, 1]))
        np.testing.assert_allclose(state.hidden_marginals(), 0.5, atol=1e-12)
        assert len(state.free_energy_trace) <= 2

    @pytest.mark.parametrize("seed", range(10))
    def test_monotone(self, seed):
        model, ev = instance(seed, [2, 3, 3, 4], 3, max_menu=3, concentration=0.5)
        state = mf_fit(model, ev, MeanFieldOptions(tolerance=1e-10), np.random.default_rng(seed))
        assert np.all(np.diff(state.free_energy_trace) <= 1e-9)
        assert not state.diagnostics

    def test_seeded(self):
        model, ev = instance(3, [2, 3, 3], 2)
        a = mf_fit(model, ev, rng=np.random.default_rng(5))
        b = mf_fit(model, ev, rng=np.random.default_rng(5))
        assert a.free_energy_trace == b.free_energy_trace

    @pytest.mark.parametrize("seed", range(5))
    def test_nesting(self, seed):
        model, ev = instance(seed, [2, 3, 3], 3, max_menu=3)
        state = mf_fit(model, ev, MeanFieldOptions(tolerance=1e-10), np.random.default_rng(seed))
        refined = svi_fit(model, ev, FitOptions(max_passes=1), init=embed_in_structured(state, model))
        assert refined.free_energy <= state.free_energy + 1e-9

    def test_options_validated(self):
        with pytest.raises(ValueError):
            MeanFieldOptions(inner_iters=0)
        with pytest.raises(ValueError):
            MeanFieldOptions(tolerance=-1)
