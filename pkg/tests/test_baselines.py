import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fixtures import backdoor_trial, noisy_permutation_trial
from oracles import random_discrete_mixture, random_erm_with_shared_minimiser, sample_posterior
from poisontrace.attacks import attack_success_rate
from poisontrace.baselines import (FiniteERM, MixtureSpec, UnlearnConfig, approx_unlearn,
                                   argmin_set, erm_brute_force, event_loss,
                                   leave_one_out_argmin, mixture_posterior, mixture_weights_at,
                                   true_unlearning_scores, unlearned_mixtures,
                                   unlearned_posteriors, unlearned_posteriors_backdoor,
                                   unlearning_scores, unlearning_targets)
from poisontrace.core import LabeledDataset, MisclassificationEvent, OwnerPartition, make_blobs
from poisontrace.evalkit import TrialResult, mean_ap
from poisontrace.influence import traceback
from poisontrace.trainer import DivergenceError, TrainConfig, train_with_checkpoints


def two_component(rng, C=3, zero_clean=False):
    alpha = rng.uniform(0.2, 0.8)
    beta = rng.uniform(0.01, 0.99) * min(alpha, 1 - alpha)
    dens = rng.uniform(0.1, 2.0, size=2)
    if zero_clean:
        dens[0] = 0.0
    post = rng.dirichlet(np.ones(C), size=2)
    return MixtureSpec(dens, post, np.array([alpha, 1 - alpha]), beta)


class TestUnlearnConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            UnlearnConfig(lr=-1)
        with pytest.raises(ValueError):
            UnlearnConfig(epochs=0)


@pytest.fixture(scope="module")
def small():
    ds = make_blobs(300, 5, 3, seed=0)
    model, _ = train_with_checkpoints(ds, TrainConfig(epochs=3, hidden=8, num_checkpoints=1,
                                                      projection_dim=4, lr=0.05))
    return ds, model


class TestApproxUnlearn:
    def test_targets(self, small):
        ds, _ = small
        t = unlearning_targets(ds, [0, 5])
        np.testing.assert_allclose(t[[0, 5]], 1 / 3)
        np.testing.assert_array_equal(t[1], np.eye(3)[ds.y[1]])

    def test_zero_rate_leaves_model(self, small):
        ds, model = small
        out = approx_unlearn(model, np.arange(50), ds, UnlearnConfig(lr=0.0, epochs=3))
        np.testing.assert_array_equal(out.flatten(), model.flatten())

    def test_index_check_and_divergence(self, small):
        ds, model = small
        with pytest.raises(IndexError):
            approx_unlearn(model, [300], ds, UnlearnConfig())
        broken = model.copy()
        broken.classifier[0, 0] = np.nan
        with np.errstate(all="ignore"), pytest.raises(DivergenceError):
            approx_unlearn(broken, [0], ds, UnlearnConfig(epochs=1))

    def test_identical_owners_score_equally(self):
        base = make_blobs(40, 4, 2, seed=1)
        joint = LabeledDataset(np.tile(base.X, (4, 1)), np.tile(base.y, 4), 2)
        part = OwnerPartition(tuple(np.arange(4 * 40).reshape(4, 40)), 160)
        model, _ = train_with_checkpoints(joint, TrainConfig(epochs=2, hidden=4, num_checkpoints=1,
                                                             projection_dim=2, lr=0.05))
        event = MisclassificationEvent(base.X[0], 1 - int(base.y[0]))
        # Full-batch steps make every owner's run see the same multiset of rows.
        rep = unlearning_scores(model, part, joint, event, UnlearnConfig(batch_size=160))
        np.testing.assert_allclose(rep.scores, rep.scores[0], rtol=0, atol=1e-12)
        tied = np.round(rep.scores, 9)
        np.testing.assert_array_equal(np.lexsort((np.arange(4), -tied)), [0, 1, 2, 3])

    def test_unlearning_poisoned_owner_removes_backdoor(self):
        trial = backdoor_trial(1, 1)
        cfg = UnlearnConfig(seed=1)
        mal = int(np.flatnonzero(trial.partition.malicious_flags)[0])
        joint = trial.outcome.dataset
        before = attack_success_rate(trial.model, trial.outcome.events)
        after = attack_success_rate(approx_unlearn(trial.model, trial.partition.index_sets[mal],
                                                   joint, cfg), trial.outcome.events)
        assert before - after >= 0.5
        benign = next(o for o in range(10) if o != mal)
        kept = approx_unlearn(trial.model, trial.partition.index_sets[benign], joint, cfg)
        assert abs(kept.accuracy(trial.heldout) - trial.model.accuracy(trial.heldout)) <= 0.02


class TestUnlearningScores:
    def test_report_shape_and_workers(self):
        trial = backdoor_trial(0, 1)
        ev = trial.events[0]
        cfg = UnlearnConfig(seed=0, epochs=1)
        a = unlearning_scores(trial.model, trial.partition, trial.outcome.dataset, ev, cfg)
        b = unlearning_scores(trial.model, trial.partition, trial.outcome.dataset, ev, cfg,
                              workers=3)
        np.testing.assert_array_equal(a.scores, b.scores)
        assert a.params["method"] == "unlearning" and "objective" in a.params
        u = approx_unlearn(trial.model, trial.partition.index_sets[2], trial.outcome.dataset, cfg)
        assert a.scores[2] == pytest.approx(event_loss(u, ev) - event_loss(trial.model, ev))

    def test_single_poisoned_owner_ranked_first(self):
        hits = 0
        for seed in range(20):
            trial = backdoor_trial(seed, 1)
            rep = unlearning_scores(trial.model, trial.partition, trial.outcome.dataset,
                                    trial.events[0], UnlearnConfig(seed=seed), workers=4)
            hits += trial.partition.malicious_flags[rep.ranking[0]]
        assert hits >= 18

    def test_noisy_permutation_two_owners_evade_unlearning(self):
        grad, unl = [], []
        for seed in range(20):
            trial = noisy_permutation_trial(seed, n_malicious=2)
            ev = trial.events[0]
            flags = trial.partition.malicious_flags
            grad.append(TrialResult(traceback(trial.record, trial.partition, ev, k=16).scores, flags))
            rep = unlearning_scores(trial.model, trial.partition, trial.outcome.dataset, ev,
                                    UnlearnConfig(seed=seed), workers=4)
            unl.append(TrialResult(rep.scores, flags))
        assert mean_ap(unl) < mean_ap(grad)


class TestMixturePosterior:
    def test_symmetric_average(self):
        spec = MixtureSpec([0.3, 0.3], [[0.2, 0.8], [0.6, 0.4]], [0.5, 0.5])
        assert mixture_posterior(spec, 0) == pytest.approx(0.4)

    def test_zero_density_component(self):
        for a in (0.1, 0.9):
            spec = MixtureSpec([0.0, 1.3], [[1.0, 0.0], [0.25, 0.75]], [a, 1 - a])
            assert mixture_posterior(spec, 1) == pytest.approx(0.75)
        with pytest.raises(ValueError):
            mixture_weights_at(MixtureSpec([0.0, 0.0], [[1, 0], [0, 1]], [0.5, 0.5]))

    def test_validation(self):
        with pytest.raises(ValueError):
            MixtureSpec([1.0], [[0.5, 0.6]], [1.0])
        with pytest.raises(ValueError):
            MixtureSpec([1.0, 1.0], [[0.5, 0.5], [0.5, 0.5]], [0.7, 0.7])

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2 ** 31))
    def test_convex_and_normalised(self, seed):
        rng = np.random.default_rng(seed)
        k, C = int(rng.integers(1, 5)), int(rng.integers(2, 6))
        spec = MixtureSpec(rng.uniform(0, 2, k) + 1e-3, rng.dirichlet(np.ones(C), size=k),
                           rng.dirichlet(np.ones(k)))
        vals = np.array([mixture_posterior(spec, y) for y in range(C)])
        assert abs(vals.sum() - 1) <= 1e-12
        assert np.all(vals >= spec.posteriors.min(axis=0) - 1e-15)
        assert np.all(vals <= spec.posteriors.max(axis=0) + 1e-15)

    def test_monte_carlo(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            w, dens, post = random_discrete_mixture(rng)
            x0 = 0
            spec = MixtureSpec(dens[:, x0], post[:, x0], w)
            est, se = sample_posterior(rng, w, dens, post, x0, 10 ** 6)
            assert abs(mixture_posterior(spec, 0) - est[0]) <= 3 * se[0]


class TestUnlearnedPosteriors:
    def test_uniform_is_fixed_point(self):
        u = np.full(3, 1 / 3)
        spec = MixtureSpec([0.7, 1.1], [u, u], [0.6, 0.4], beta=0.2)
        for y in range(3):
            np.testing.assert_allclose(unlearned_posteriors(spec, y), (1 / 3, 1 / 3))

    def test_plugged_example(self):
        spec = MixtureSpec([0.0, 1.0], [[0.4, 0.6], [1.0, 0.0]], [0.6, 0.4], beta=0.2)
        np.testing.assert_allclose(unlearned_posteriors_backdoor(spec, 0), (0.75, 1.0))
        np.testing.assert_allclose(unlearned_posteriors(spec, 0), (0.75, 1.0))

    def test_preconditions(self):
        with pytest.raises(ValueError):
            unlearned_posteriors(MixtureSpec([1, 1], [[1, 0], [0, 1]], [0.5, 0.5], beta=0.6), 0)
        with pytest.raises(ValueError):
            unlearned_posteriors(MixtureSpec([1, 1], [[1, 0], [0, 1]], [0.5, 0.5]), 0)
        with pytest.raises(ValueError):
            unlearned_posteriors_backdoor(
                MixtureSpec([1, 1], [[1, 0], [0, 1]], [0.5, 0.5], beta=0.1), 0)
        with pytest.raises(ValueError):
            unlearned_posteriors(MixtureSpec([0, 0], [[1, 0], [0, 1]], [0.5, 0.5], beta=0.1), 0)

    def test_simplified_matches_general(self):
        rng = np.random.default_rng(1)
        for _ in range(500):
            spec = two_component(rng, C=int(rng.integers(2, 6)), zero_clean=True)
            for y in range(spec.num_classes):
                np.testing.assert_allclose(unlearned_posteriors(spec, y),
                                           unlearned_posteriors_backdoor(spec, y),
                                           rtol=0, atol=1e-12)

    def test_normalised_and_mixture_form(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            spec = two_component(rng, C=4)
            vals = np.array([unlearned_posteriors(spec, y) for y in range(4)])
            np.testing.assert_allclose(vals.sum(axis=0), 1.0, atol=1e-12)
            nu_p, nu_c = unlearned_mixtures(spec)
            for y in range(4):
                np.testing.assert_allclose(vals[y], (mixture_posterior(nu_p, y),
                                                     mixture_posterior(nu_c, y)), atol=1e-12)

    def test_monte_carlo(self):
        rng = np.random.default_rng(4)
        C = 3
        uniform = np.full(C, 1 / C)
        for _ in range(20):
            _, dens, post = random_discrete_mixture(rng, components=2, C=C)
            alpha = rng.uniform(0.2, 0.8)
            beta = rng.uniform(0.05, 0.95) * min(alpha, 1 - alpha)
            spec = MixtureSpec(dens[:, 0], post[:, 0], np.array([alpha, 1 - alpha]), beta)
            nu_p, nu_c = unlearned_posteriors(spec, 0)
            # Unlearned rows keep their features and carry uniform labels.
            relabel = np.broadcast_to(uniform, post[0].shape)
            mix_post = np.stack([post[0], relabel, post[1]])
            est, se = sample_posterior(rng, np.array([alpha, beta, 1 - alpha - beta]),
                                       dens[[0, 1, 1]], mix_post, 0, 10 ** 6)
            assert abs(nu_p - est[0]) <= 3 * se[0]
            est, se = sample_posterior(rng, np.array([alpha - beta, beta, 1 - alpha]),
                                       dens[[0, 0, 1]], np.stack([post[0], relabel, post[1]]),
                                       0, 10 ** 6)
            assert abs(nu_c - est[0]) <= 3 * se[0]


class TestFiniteERM:
    def test_examples(self):
        erm = FiniteERM([0, 0, 1], [0, 1, 0])
        for a in (0.1, 0.3, 0.5, 0.9):
            assert erm_brute_force(erm, a) == frozenset({0}) == erm.shared_argmin()
        split = FiniteERM([0, 1], [1, 0])
        assert split.shared_argmin() == frozenset()
        assert erm_brute_force(split, 0.3) == {1} and erm_brute_force(split, 0.7) == {0}
        assert erm_brute_force(FiniteERM([2.0], [5.0]), 0.5) == {0}

    def test_validation(self):
        with pytest.raises(ValueError):
            FiniteERM([], [])
        with pytest.raises(ValueError):
            FiniteERM([-1.0], [0.0])
        with pytest.raises(ValueError):
            FiniteERM([np.inf], [0.0])
        with pytest.raises(ValueError):
            erm_brute_force(FiniteERM([0.0], [0.0]), 1.0)

    def test_argmin_set_ties(self):
        assert argmin_set([1.0, 0.5, 0.5 + 1e-15, 2.0]) == {1, 2}

    def test_shared_minimisers_win_for_every_alpha(self):
        rng = np.random.default_rng(0)
        alphas = np.linspace(0.01, 0.99, 25)
        for _ in range(1000):
            erm = random_erm_with_shared_minimiser(rng)
            shared = erm.shared_argmin()
            assert shared
            for a in alphas:
                assert erm_brute_force(erm, a) == shared

    def test_duplicated_poison_owner_blinds_true_unlearning(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            erm = random_erm_with_shared_minimiser(rng)
            clean_owners = int(rng.integers(1, 5))
            table = np.vstack([np.tile(erm.loss_clean, (clean_owners, 1)),
                               np.tile(erm.loss_poison, (2, 1))])
            full = leave_one_out_argmin(table)
            for j in (clean_owners, clean_owners + 1):
                assert leave_one_out_argmin(table, j) == full
            ev = rng.uniform(0, 1, erm.size)
            scores = true_unlearning_scores(table, ev)
            np.testing.assert_array_equal(scores[clean_owners:], 0.0)

    def test_duplication_hides_a_detectable_poison(self):
        # Model 1 is the poisoned one; the event is misclassified only under it.
        clean, poison = [0.0, 2.0], [6.0, 0.0]
        ev = np.array([5.0, 0.0])
        single = np.array([clean, clean, poison])
        assert leave_one_out_argmin(single) == {1}
        np.testing.assert_array_equal(true_unlearning_scores(single, ev), [0.0, 0.0, 5.0])
        doubled = np.array([clean, clean, poison, poison])
        np.testing.assert_array_equal(true_unlearning_scores(doubled, ev), 0.0)
