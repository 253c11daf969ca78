import numpy as np
import pytest

from verivqa import corpus as C
from verivqa.autodiff import Tape, grad_check
from verivqa.model import Model, ModelConfig, predict_scores
from verivqa.params import ParamStore, fingerprint
from verivqa.predictor import (DivergenceError, TrainConfig, pretrain,
                               topk_candidates, vqa_loss, vqa_loss_batch)

TINY = ModelConfig(hidden=6, embed=5, att_hidden=4, ver_hidden=6, pred_hidden=6)
LOG2 = 0.6931471805599453


def small_corpus(seed=6, train=50, test=20):
    cfg = C.GenConfig(seed=seed, num_train=train, num_test=test,
                      num_attributes=6, n_obj=5, d_obj=6, evidence_count=2)
    return C.generate_corpus(cfg)


class TestPredict:
    def test_zeroed_final_layer_gives_half(self):
        rng = np.random.default_rng(0)
        from verivqa.encoders import init_base_params

        store = init_base_params(TINY, 11, 4, 5, rng)
        store.set_("pred.w2", np.zeros_like(store["pred.w2"]))
        store.set_("pred.b2", np.zeros_like(store["pred.b2"]))
        tape = Tape()
        L = tape.leaves_from(store)
        scores = predict_scores(tape, L, tape.const(rng.standard_normal((3, 6))))
        np.testing.assert_allclose(scores.value, 0.5, atol=0)

    def test_scores_strictly_inside_unit_interval(self):
        rng = np.random.default_rng(1)
        from verivqa.encoders import init_base_params

        store = init_base_params(TINY, 11, 4, 5, rng)
        tape = Tape()
        L = tape.leaves_from(store)
        s = predict_scores(tape, L, tape.const(rng.standard_normal((8, 6)) * 5)).value
        assert np.all(s > 0.0) and np.all(s < 1.0)

    def test_bce_of_predictor_gradient(self):
        rng = np.random.default_rng(2)
        from verivqa.encoders import init_base_params

        full = init_base_params(TINY, 11, 4, 5, rng)
        store = ParamStore()
        for name in full.names():
            if name.startswith("pred."):
                store.create(name, full[name] * 4.0)
        fused = rng.standard_normal((2, 6))
        targets = rng.uniform(0.1, 0.9, size=(2, 4))

        def build(tape, L):
            s = predict_scores(tape, L, tape.const(fused))
            return tape.bce_soft(s, targets).sum()

        assert grad_check(build, store) <= 1e-4


class TestVqaLoss:
    def test_perfect_predictions_near_zero(self):
        loss = vqa_loss(np.array([1 - 1e-9, 1e-9, 1e-9]), np.array([1.0, 0, 0]))
        assert loss == pytest.approx(0.0, abs=1e-5)

    def test_all_half_all_zero_targets_closed_form(self):
        loss = vqa_loss(np.full(4, 0.5), np.zeros(4))
        assert loss == pytest.approx(4 * LOG2, abs=1e-12)

    def test_against_high_precision_oracle(self):
        # mpmath (50 digits) over dist [.9,.2,.5,.05], targets [1,0,1/3,0]
        loss = vqa_loss(np.array([0.9, 0.2, 0.5, 0.05]),
                        np.array([1.0, 0.0, 1.0 / 3.0, 0.0]))
        assert loss == pytest.approx(1.0729445419195318998, abs=1e-12)

    def test_unlisted_answers_count_as_zero_target(self):
        corpus = small_corpus()
        model = Model.initialize(corpus, TINY, seed=1)
        ex = corpus[0]
        t = model.target_vector(ex)
        assert t.shape == (len(model.answer_space),)
        listed = {model.answer_space.id_of(a) for a, _ in ex.answers}
        for a in range(len(t)):
            if a not in listed:
                assert t[a] == 0.0


class TestTopK:
    def test_full_k_is_permutation(self):
        scores = np.random.default_rng(0).uniform(size=9)
        got = [a for a, _ in topk_candidates(scores, 9)]
        assert sorted(got) == list(range(9))

    def test_k_one_is_argmax(self):
        scores = np.array([0.1, 0.7, 0.3])
        assert topk_candidates(scores, 1)[0][0] == 1

    def test_tie_breaks_to_lower_index(self):
        scores = np.array([0.2, 0.9, 0.9, 0.1])
        assert [a for a, _ in topk_candidates(scores, 2)] == [1, 2]

    def test_out_of_range_k_rejected(self):
        with pytest.raises(ValueError):
            topk_candidates(np.ones(3), 0)
        with pytest.raises(ValueError):
            topk_candidates(np.ones(3), 4)

    def test_consistent_with_full_sort_on_random_vectors(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            scores = rng.choice([0.1, 0.25, 0.5, 0.8], size=12)
            k = int(rng.integers(1, 13))
            got = topk_candidates(scores, k)
            ranking = sorted(range(12), key=lambda a: (-scores[a], a))
            assert [a for a, _ in got] == ranking[:k]
            assert all(s == scores[a] for a, s in got)


class TestPretrain:
    def test_zero_epochs_returns_initialization(self):
        corpus = small_corpus()
        hyper = TrainConfig(epochs=0, seed=3)
        model = pretrain(corpus, hyper, model_cfg=TINY)
        fresh = Model.initialize(corpus, TINY, 3)
        for name in fresh.store.names():
            assert np.array_equal(model.store[name], fresh.store[name])

    def test_loss_decreases_on_small_corpus(self):
        corpus = small_corpus()
        logs = []
        pretrain(corpus, TrainConfig(epochs=30, batch_size=16, lr=2e-3, seed=3),
                 model_cfg=TINY, log=logs.append)
        assert logs[-1]["train_loss"] < logs[0]["train_loss"]

    def test_defaults_echoed_into_checkpoint(self):
        corpus = small_corpus()
        hyper = TrainConfig(epochs=0)
        model = pretrain(corpus, hyper, model_cfg=TINY)
        echo = model.store.meta["pretrain_config"]
        assert echo["lr"] == 5e-4
        assert echo["batch_size"] == 384
        assert echo["epochs"] == 0

    def test_bit_reproducible(self):
        corpus = small_corpus()
        hyper = TrainConfig(epochs=3, batch_size=16, seed=11)
        a = pretrain(corpus, hyper, model_cfg=TINY)
        b = pretrain(corpus, hyper, model_cfg=TINY)
        assert fingerprint(a.store) == fingerprint(b.store)

    def test_empty_train_split_rejected(self):
        corpus = [ex for ex in small_corpus() if ex.split == "test"]
        with pytest.raises(ValueError):
            pretrain(corpus, TrainConfig(epochs=1), model_cfg=TINY)
