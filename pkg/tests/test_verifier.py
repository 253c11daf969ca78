import math

import numpy as np
import pytest

from verivqa import corpus as C
from verivqa import encoders
from verivqa.autodiff import Tape, grad_check
from verivqa.model import Model, ModelConfig
from verivqa.params import ParamStore, fingerprint
from verivqa.predictor import TrainConfig, pretrain
from verivqa.retrieval import CompetingSet, RetrievalContext, build_index
from verivqa.verifier import (FinetuneConfig, NegativeSample,
                              VerificationLossBreakdown, finetune,
                              most_supportive, sample_negative_answer, verify,
                              verification_loss)

TINY = ModelConfig(hidden=6, embed=5, att_hidden=4, ver_hidden=6, pred_hidden=6)
LOG2 = math.log(2.0)


def small_corpus(seed=8, train=40, test=10):
    cfg = C.GenConfig(seed=seed, num_train=train, num_test=test,
                      num_attributes=6, n_obj=5, d_obj=6, evidence_count=2)
    return C.generate_corpus(cfg)


@pytest.fixture(scope="module")
def pipeline():
    corpus = small_corpus()
    model = pretrain(corpus, TrainConfig(epochs=2, batch_size=16, seed=4),
                     model_cfg=TINY)
    index = build_index(corpus, model)
    tuned = finetune(corpus, index, model.store,
                     FinetuneConfig(epochs=1, batch_size=8, seed=4))
    return corpus, model, index, tuned


def _verifier_store(rng, num_answers=6):
    store = encoders.init_base_params(TINY, 13, num_answers, 6, rng)
    encoders.add_verifier_params(store, TINY, num_answers, rng)
    return store


def _zero_head(store):
    store.set_("ver.head.w2", np.zeros_like(store["ver.head.w2"]))
    store.set_("ver.head.b2", np.zeros_like(store["ver.head.b2"]))


class TestVerify:
    def test_zeroed_head_gives_half(self):
        rng = np.random.default_rng(0)
        store = _verifier_store(rng)
        _zero_head(store)
        s = verify(rng.standard_normal(6), rng.standard_normal(6),
                   encoders.embed_answer(2, 6), rng.standard_normal(6), store)
        assert s == 0.5

    def test_score_strictly_inside_unit_interval(self):
        rng = np.random.default_rng(1)
        store = _verifier_store(rng)
        for _ in range(20):
            s = verify(rng.standard_normal(6) * 3, rng.standard_normal(6) * 3,
                       encoders.embed_answer(int(rng.integers(6)), 6),
                       rng.standard_normal(6) * 3, store)
            assert 0.0 < s < 1.0

    def test_neg_log_score_gradient(self):
        rng = np.random.default_rng(2)
        from verivqa.gradcheck import _component_checks

        checks = dict(_component_checks(np.random.default_rng(0)))
        point, build = checks["component:verifier"](rng)
        assert grad_check(build, point) <= 1e-4


class TestSampleNegative:
    def test_single_eligible_chosen_with_probability_one(self):
        rng = np.random.default_rng(0)
        scores = np.array([0.9, 0.4, 0.3])
        soft = {0: 1.0, 1: 1.0, 2: 0.0}
        for _ in range(10):
            neg = sample_negative_answer(scores, soft, rng)
            assert neg.answer_id == 2
            assert neg.probability == 1.0

    def test_sampling_distribution_matches_scores(self):
        # eligible predicted scores 0.3 and 0.1 -> probabilities 0.75 / 0.25
        rng = np.random.default_rng(1)
        scores = np.array([0.9, 0.3, 0.1])
        soft = {0: 1.0}
        counts = {1: 0, 2: 0}
        n = 100_000
        for _ in range(n):
            counts[sample_negative_answer(scores, soft, rng).answer_id] += 1
        assert counts[1] / n == pytest.approx(0.75, abs=0.01)
        assert counts[2] / n == pytest.approx(0.25, abs=0.01)

    def test_boundary_point_six_is_ineligible(self):
        rng = np.random.default_rng(2)
        scores = np.array([0.5, 0.5])
        neg = sample_negative_answer(scores, {0: 0.59999, 1: 1.0}, rng)
        assert neg.answer_id == 0
        # exactly 0.6 fails the strict inequality
        assert sample_negative_answer(scores, {0: 0.6, 1: 1.0}, rng) is None

    def test_no_eligible_signals_none(self):
        rng = np.random.default_rng(3)
        assert sample_negative_answer(np.ones(2) * 0.5, {0: 1.0, 1: 0.7},
                                      rng) is None


class TestMostSupportive:
    def _setup(self, rng):
        corpus = small_corpus()
        model = Model.initialize(corpus, TINY, seed=5)
        encoders.add_verifier_params(model.store, TINY,
                                     len(model.answer_space), rng)
        members = [([4, 5, 6], "train-00001", 0.1),
                   ([7, 8], "train-00002", 0.2),
                   ([9, 10, 11], "train-00003", 0.3)]
        cs = CompetingSet(1, members)
        q = rng.standard_normal(TINY.hidden)
        v = rng.standard_normal(TINY.hidden)
        a = encoders.embed_answer(1, len(model.answer_space))
        return model, cs, q, v, a

    def test_singleton_returns_that_member(self):
        rng = np.random.default_rng(4)
        model, cs, q, v, a = self._setup(rng)
        single = CompetingSet(1, cs.members[:1])
        member, score, idx = most_supportive(single, q, v, a, model)
        assert member == cs.members[0]
        assert idx == 0

    def test_matches_exhaustive_recompute(self):
        rng = np.random.default_rng(5)
        model, cs, q, v, a = self._setup(rng)
        member, score, idx = most_supportive(cs, q, v, a, model)
        per_member = []
        for toks, _, _ in cs.members:
            phi = encoders.encode_explanation(toks, model.store)
            per_member.append(verify(q, v, a, phi, model.store))
        assert idx == int(np.argmax(per_member))
        assert score == pytest.approx(max(per_member), abs=1e-12)

    def test_permutation_invariant_score(self):
        rng = np.random.default_rng(6)
        model, cs, q, v, a = self._setup(rng)
        _, score, _ = most_supportive(cs, q, v, a, model)
        shuffled = CompetingSet(1, list(reversed(cs.members)))
        _, score2, _ = most_supportive(shuffled, q, v, a, model)
        assert score == pytest.approx(score2, abs=1e-12)

    def test_empty_set_signals_none(self):
        rng = np.random.default_rng(7)
        model, cs, q, v, a = self._setup(rng)
        assert most_supportive(CompetingSet(1, []), q, v, a, model) is None


class TestVerificationLoss:
    def test_default_lambda_is_ten(self):
        assert FinetuneConfig().lam == 10.0

    def test_zeroed_head_closed_form(self, pipeline):
        corpus, model, index, tuned = pipeline
        work = Model.from_store(tuned.store.copy())
        _zero_head(work.store)
        ctx = RetrievalContext(index, work)
        train = C.train_split(corpus)
        rng = np.random.default_rng(0)
        bd = verification_loss(train[0], train[:4], ctx, work, rng)
        assert not bd.neg_missing and not bd.set_empty
        # every score is exactly 0.5, so l_m = log 2 and each of the five
        # active negative terms is log 2
        for value in (bd.l_m, bd.l_r_q, bd.l_r_v, bd.l_r_a, bd.l_r_x, bd.l_r_ax):
            assert value == pytest.approx(LOG2, abs=1e-12)
        assert bd.total == pytest.approx(15 * LOG2, abs=1e-12)

    def test_breakdown_identity_exact(self, pipeline):
        corpus, model, index, tuned = pipeline
        ctx = RetrievalContext(index, tuned)
        train = C.train_split(corpus)
        rng = np.random.default_rng(1)
        for i in range(5):
            bd = verification_loss(train[i], train[:6], ctx, tuned, rng)
            recombined = VerificationLossBreakdown.combine(
                bd.lam, bd.l_m, bd.l_r_q, bd.l_r_v, bd.l_r_a, bd.l_r_x, bd.l_r_ax)
            assert bd.total == recombined  # bit-exact
            for v in (bd.l_m, bd.l_r_q, bd.l_r_v, bd.l_r_a, bd.l_r_x, bd.l_r_ax):
                assert v >= 0.0

    def test_recomposition_from_raw_verify_calls(self, pipeline):
        corpus, model, index, tuned = pipeline
        ctx = RetrievalContext(index, tuned)
        train = C.train_split(corpus)
        rng = np.random.default_rng(2)
        example, other = train[3], train[5]
        bd = verification_loss(example, [other], ctx, tuned, rng)
        assert bd.sampled_negative is not None

        # recompute every component from first principles
        def enc_q(ex):
            return encoders.encode_question(tuned.question_tokens(ex),
                                            tuned.store)

        def enc_v(ex, q):
            return encoders.encode_visual(ex.objects, q, tuned.store)[0]

        q = enc_q(example)
        v = enc_v(example, q)
        qo = enc_q(other)
        vo = enc_v(other, qo)
        a_gold = encoders.embed_answer(tuned.gold_answer_id(example),
                                       len(tuned.answer_space))
        phi_gold = encoders.encode_explanation(
            tuned.explanation_tokens(example.explanation), tuned.store)
        a_neg = encoders.embed_answer(bd.sampled_negative,
                                      len(tuned.answer_space))
        cs = ctx.competing_set(example, bd.sampled_negative, k=8)

        s_gold = verify(q, v, a_gold, phi_gold, tuned.store)
        s_q = verify(qo, v, a_gold, phi_gold, tuned.store)
        s_v = verify(q, vo, a_gold, phi_gold, tuned.store)
        s_a = verify(q, v, a_neg, phi_gold, tuned.store)
        _, s_x, _ = most_supportive(cs, q, v, a_gold, tuned)
        _, s_ax, _ = most_supportive(cs, q, v, a_neg, tuned)

        assert bd.l_m == pytest.approx(-math.log(s_gold), rel=1e-9)
        assert bd.l_r_q == pytest.approx(-math.log(1 - s_q), rel=1e-9)
        assert bd.l_r_v == pytest.approx(-math.log(1 - s_v), rel=1e-9)
        assert bd.l_r_a == pytest.approx(-math.log(1 - s_a), rel=1e-9)
        assert bd.l_r_x == pytest.approx(-math.log(1 - s_x), rel=1e-9)
        assert bd.l_r_ax == pytest.approx(-math.log(1 - s_ax), rel=1e-9)

    def test_missing_negative_flags_and_zeroes(self, pipeline):
        corpus, model, index, tuned = pipeline
        ctx = RetrievalContext(index, tuned)
        train = C.train_split(corpus)
        example = train[0]
        # make every answer ineligible (soft >= 0.6 everywhere)
        rigged = C.VQAExample(
            id=example.id, question=example.question, objects=example.objects,
            answers=[(a, 3) for a in tuned.answer_space.answers],
            explanation=example.explanation, split="train")
        rng = np.random.default_rng(3)
        bd = verification_loss(rigged, train[1:3], ctx, tuned, rng)
        assert bd.neg_missing
        assert bd.sampled_negative is None
        assert bd.l_r_a == 0.0 and bd.l_r_x == 0.0 and bd.l_r_ax == 0.0
        assert bd.l_m > 0.0 and bd.l_r_q > 0.0 and bd.l_r_v > 0.0

    def test_single_example_batch_rejected(self, pipeline):
        corpus, model, index, tuned = pipeline
        ctx = RetrievalContext(index, tuned)
        rng = np.random.default_rng(4)
        with pytest.raises(ValueError):
            verification_loss(C.train_split(corpus)[0], [], ctx, tuned, rng)


class TestFinetune:
    def test_zero_epochs_params_unchanged(self, pipeline):
        corpus, model, index, _ = pipeline
        tuned = finetune(corpus, index, model.store,
                         FinetuneConfig(epochs=0, seed=4))
        for name in model.store.names():
            assert np.array_equal(tuned.store[name], model.store[name])

    def test_lr_schedule_factor(self):
        from verivqa.optim import decayed_lr

        assert decayed_lr(5e-4, 12) == pytest.approx(5e-4 * 0.8 ** 2)

    def test_fixed_vqa_freezes_predictor_and_encoders(self, pipeline):
        corpus, model, index, _ = pipeline
        tuned = finetune(corpus, index, model.store,
                         FinetuneConfig(epochs=1, batch_size=8, seed=4,
                                        fixed_vqa=True))
        for name in model.store.names():
            if name.startswith(("ver.", "x_gru.")):
                continue
            assert np.array_equal(tuned.store[name], model.store[name]), name
        changed = [n for n in tuned.store.names()
                   if n.startswith(("ver.", "x_gru."))
                   and not np.array_equal(tuned.store[n], model.store[n]
                                          if n in model.store else 0)]
        assert changed

    def test_deterministic_given_seed(self, pipeline):
        corpus, model, index, _ = pipeline
        a = finetune(corpus, index, model.store,
                     FinetuneConfig(epochs=1, batch_size=8, seed=9))
        b = finetune(corpus, index, model.store,
                     FinetuneConfig(epochs=1, batch_size=8, seed=9))
        assert fingerprint(a.store) == fingerprint(b.store)

    def test_stale_index_rejected(self, pipeline):
        from verivqa.retrieval import ExplanationIndex, StaleIndexError

        corpus, model, index, _ = pipeline
        stale = ExplanationIndex(index.embeddings, index.ids,
                                 index.answer_scores, index.expl_tokens,
                                 "f" * 64)
        with pytest.raises(StaleIndexError):
            finetune(corpus, stale, model.store, FinetuneConfig(epochs=1))

    def test_log_identity_holds_every_step(self, pipeline):
        corpus, model, index, _ = pipeline
        records = []
        finetune(corpus, index, model.store,
                 FinetuneConfig(epochs=2, batch_size=8, seed=4),
                 log=records.append)
        assert records
        for rec in records:
            recombined = VerificationLossBreakdown.combine(
                rec["lam"], rec["l_m"], rec["l_r_q"], rec["l_r_v"],
                rec["l_r_a"], rec["l_r_x"], rec["l_r_ax"])
            assert rec["total"] == recombined
            assert rec["sampled_negatives"]
