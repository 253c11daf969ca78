"""Finite-difference gradient audit for every op kind and trained component.

Each entry draws `points` random parameter points, compares reverse-mode
gradients against central differences (step 1e-5), and reports the worst
relative error.  Inputs near activation kinks (relu, max ties, the BCE
clamp) are kept away from the kink so the finite-difference quotient is
meaningful.
"""
from __future__ import annotations

import numpy as np

from . import encoders, generator
from .autodiff import Tape, grad_check
from .model import ModelConfig, predict_scores
from .params import ParamStore
from .predictor import vqa_loss_batch
from .verifier import (project_answer, project_explanation, verify_head,
                       verifier_projections)

FD_STEP = 1e-5


def _store(rng, **arrays):
    st = ParamStore()
    for name, arr in arrays.items():
        st.create(name, arr)
    return st


def _away_from_zero(rng, *shape, low=0.1, high=1.0):
    mag = rng.uniform(low, high, size=shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return mag * sign


def _op_checks(rng):
    checks = []

    def add(name, maker):
        checks.append((f"op:{name}", maker))

    add("matmul", lambda r: (_store(r, a=r.standard_normal((3, 4)),
                                    b=r.standard_normal((4, 2))),
                             lambda t, L: (L["a"] @ L["b"]).sum()))
    add("add", lambda r: (_store(r, a=r.standard_normal((3, 4)),
                                 b=r.standard_normal(4)),
                          lambda t, L: ((L["a"] + L["b"]) * t.const(
                              r.standard_normal((3, 4)))).sum()))
    add("adds", lambda r: (_store(r, a=r.standard_normal((2, 3))),
                           lambda t, L: ((L["a"] + 1.7) * (L["a"] + 1.7)).sum()))
    add("mul", lambda r: (_store(r, a=r.standard_normal((3, 4)),
                                 b=r.standard_normal((3, 4))),
                          lambda t, L: (L["a"] * L["b"]).sum()))
    add("muls", lambda r: (_store(r, a=r.standard_normal((3, 4))),
                           lambda t, L: (L["a"] * -0.35).sum()))
    add("concat", lambda r: (_store(r, a=r.standard_normal((2, 3)),
                                    b=r.standard_normal((2, 2))),
                             lambda t, L: (t.concat([L["a"], L["b"]], axis=-1)
                                           * t.const(r.standard_normal((2, 5)))
                                           ).sum()))
    add("sigmoid", lambda r: (_store(r, a=r.standard_normal((3, 3))),
                              lambda t, L: L["a"].sigmoid().sum()))
    add("tanh", lambda r: (_store(r, a=r.standard_normal((3, 3))),
                           lambda t, L: L["a"].tanh().sum()))
    add("relu", lambda r: (_store(r, a=_away_from_zero(r, 3, 3)),
                           lambda t, L: L["a"].relu().sum()))
    add("softmax", lambda r: (_store(r, a=r.standard_normal((2, 5))),
                              lambda t, L: (L["a"].softmax(axis=-1) * t.const(
                                  r.standard_normal((2, 5)))).sum()))
    add("amax", lambda r: (_store(r, a=_spread(r, (3, 5))),
                           lambda t, L: L["a"].amax(axis=1).sum()))
    add("mean", lambda r: (_store(r, a=r.standard_normal((4, 3))),
                           lambda t, L: (L["a"].mean(axis=0) * t.const(
                               r.standard_normal(3))).sum()))
    add("sum", lambda r: (_store(r, a=r.standard_normal((4, 3))),
                          lambda t, L: (L["a"].sum(axis=1) * t.const(
                              r.standard_normal(4))).sum()))
    add("lookup", lambda r: (_store(r, table=r.standard_normal((6, 3))),
                             lambda t, L, ids=r.integers(0, 6, size=(2, 4)):
                             (t.lookup(L["table"], ids) * t.const(
                                 r.standard_normal((2, 4, 3)))).sum()))
    add("pick", lambda r: (_store(r, a=r.standard_normal((3, 5))),
                           lambda t, L, ids=r.integers(0, 5, size=3):
                           t.pick(L["a"], ids).sum()))
    add("step_select", lambda r: (_store(r, a=r.standard_normal((3, 4, 2))),
                                  lambda t, L, st=r.integers(0, 4, size=3):
                                  t.step_select(L["a"], st).sum()))
    add("reshape", lambda r: (_store(r, a=r.standard_normal((3, 4))),
                              lambda t, L: (L["a"].reshape(2, 6) * t.const(
                                  r.standard_normal((2, 6)))).sum()))
    add("bce", lambda r: (_store(r, p=r.uniform(0.05, 0.95, size=(3, 4))),
                          lambda t, L, tt=r.uniform(0, 1, size=(3, 4)):
                          t.bce_soft(L["p"], tt).sum()))
    add("gru", lambda r: (_store(r, x=r.standard_normal((2, 4, 3)),
                                 w=r.standard_normal((3, 9)) * 0.5,
                                 u=r.standard_normal((3, 9)) * 0.5,
                                 b=r.standard_normal(9) * 0.2),
                          lambda t, L: (t.gru(L["x"], L["w"], L["u"], L["b"])
                                        * t.const(r.standard_normal((2, 4, 3)))
                                        ).sum()))
    return checks


def _spread(rng, shape):
    """Values with pairwise gaps > 10 * FD_STEP along the last axis, so the
    argmax cannot flip inside a finite-difference step."""
    base = rng.standard_normal(shape)
    along = np.argsort(base, axis=-1)
    ranks = np.argsort(along, axis=-1)
    return base + ranks * 1e-2


TINY = ModelConfig(hidden=6, embed=5, att_hidden=4, ver_hidden=6, pred_hidden=6)
GEN_TINY = ModelConfig(hidden=5, embed=4, att_hidden=3, ver_hidden=4,
                       pred_hidden=4)


def _scaled(store, factor=8.0):
    """Inflate init-scale parameters so hidden states and gradients are
    O(1); near-zero gradients drown in finite-difference roundoff."""
    for name in store.names():
        store.set_(name, store[name] * factor)
    return store


def _component_checks(rng):
    vocab, answers, n_obj, d_obj = 9, 3, 3, 5
    checks = []

    def base_params(r, cfg=TINY):
        return _scaled(encoders.init_base_params(cfg, vocab, answers, d_obj, r))

    def question(r):
        store = base_params(r)
        ids = r.integers(0, vocab, size=(2, 3))
        lengths = np.array([3, 2])
        weight = r.standard_normal((2, TINY.hidden))

        def build(t, L):
            q = encoders.encode_question_batch(t, L, ids, lengths)
            return (q * t.const(weight)).sum()
        return _subset(store, ("word_emb", "q_gru.")), build

    def explanation(r):
        store = base_params(r)
        ids = r.integers(0, vocab, size=(2, 4))
        lengths = np.array([4, 2])
        weight = r.standard_normal((2, TINY.hidden))

        def build(t, L):
            phi = encoders.encode_explanation_batch(t, L, ids, lengths)
            return (phi * t.const(weight)).sum()
        return _subset(store, ("word_emb", "x_gru.")), build

    def visual(r):
        store = base_params(r)
        objects = r.standard_normal((2, n_obj, d_obj))
        q = r.standard_normal((2, TINY.hidden))
        weight = r.standard_normal((2, TINY.hidden))

        def build(t, L):
            v, _ = encoders.encode_visual_batch(t, L, objects, t.const(q))
            return (v * t.const(weight)).sum()
        return _subset(store, ("att.", "v_proj.")), build

    def predictor(r):
        fused = r.standard_normal((2, TINY.hidden))
        targets = r.uniform(0, 1, size=(2, answers))
        for _ in range(50):  # relu pre-activations must clear the kink
            store = base_params(r)
            pre = fused @ store["pred.w1"] + store["pred.b1"]
            if np.abs(pre).min() > 1e-3:
                break
        else:
            raise RuntimeError("no kink-free predictor point found")

        def build(t, L):
            scores = predict_scores(t, L, t.const(fused))
            return vqa_loss_batch(t, scores, targets).mean()
        return _subset(store, ("pred.",)), build

    def verifier(r):
        q = r.standard_normal((2, TINY.hidden))
        v = r.standard_normal((2, TINY.hidden))
        phi = r.standard_normal((2, TINY.hidden))
        onehot = np.zeros((2, answers))
        onehot[np.arange(2), r.integers(0, answers, size=2)] = 1.0
        for _ in range(50):
            store = encoders.init_base_params(TINY, vocab, answers, d_obj, r)
            encoders.add_verifier_params(store, TINY, answers, r)
            _scaled(store)
            fq = q @ store["ver.fq.w"] + store["ver.fq.b"]
            fv = v @ store["ver.fv.w"] + store["ver.fv.b"]
            fa = onehot @ store["ver.fa.w"] + store["ver.fa.b"]
            fx = phi @ store["ver.fx.w"] + store["ver.fx.b"]
            z = np.concatenate([fq, fv, fa, fx], axis=-1)
            pre = z @ store["ver.head.w1"] + store["ver.head.b1"]
            if np.abs(pre).min() > 1e-3:
                break
        else:
            raise RuntimeError("no kink-free verifier point found")

        def build(t, L):
            fq, fv = verifier_projections(t, L, t.const(q), t.const(v))
            fa = project_answer(t, L, onehot)
            fx = project_explanation(t, L, t.const(phi))
            s = verify_head(t, L, fq, fv, fa, fx)
            return t.bce_soft(s, np.ones(2)).mean()
        return _subset(store, ("ver.",)), build

    def gen_component(r):
        # a singleton retrieval set keeps the max-pool away from tie kinks,
        # which break the finite-difference quotient; the pooling max gets
        # its own margin-guarded check below
        cfg = GEN_TINY
        store = _scaled(
            generator.init_generator_params(cfg, vocab, answers, d_obj, r))
        b, td = 2, 3
        q = r.standard_normal((b, cfg.hidden))
        objects = r.standard_normal((b, n_obj, d_obj))
        a_onehot = np.zeros((b, answers))
        a_onehot[np.arange(b), r.integers(0, answers, size=b)] = 1.0
        mem_ids = r.integers(0, vocab, size=(b, 1, 3))
        mem_len = np.full((b, 1), 3, dtype=np.int64)
        mem_mask = np.ones((b, 1))
        in_ids = r.integers(0, vocab, size=(b, td))
        targets = r.integers(0, vocab, size=(b, td))
        mask = np.ones((b, td))

        def build(t, L):
            x = generator.pool_retrieved_graph(t, L, mem_ids, mem_len, mem_mask)
            ans = t.const(a_onehot) @ L["gen.ans_emb"]
            u_feat = generator.question_gated_objects(t, L, objects, t.const(q))
            return generator.teacher_forced_loss(
                t, L, (t.const(q), ans, x, u_feat), in_ids, targets, mask)
        return store, build

    def pooling(r):
        cfg = GEN_TINY
        mem_ids = r.integers(0, vocab, size=(1, 2, 3))
        mem_ids[0, 1, 0] = (mem_ids[0, 0, 0] + 1) % vocab  # distinct members
        mem_len = np.full((1, 2), 3, dtype=np.int64)
        mem_mask = np.ones((1, 2))
        weight = r.standard_normal((1, cfg.hidden))

        def build(t, L):
            x = generator.pool_retrieved_graph(t, L, mem_ids, mem_len, mem_mask)
            return (x * t.const(weight)).sum()

        for _ in range(50):  # reject points whose max margin could flip
            store = _scaled(
                generator.init_generator_params(cfg, vocab, answers, d_obj, r))
            sub = _subset(store, ("gen.word_emb", "gen.ret_gru."))
            tape = Tape()
            L = tape.leaves_from(sub)
            emb = tape.lookup(L["gen.word_emb"], mem_ids.reshape(2, 3))
            hs = tape.gru(emb, L["gen.ret_gru.w"], L["gen.ret_gru.u"],
                          L["gen.ret_gru.b"])
            phi = tape.step_select(hs, mem_len.reshape(2) - 1).value
            if np.abs(phi[0] - phi[1]).min() > 1e-3:
                return sub, build
        raise RuntimeError("could not find a tie-free pooling point")

    checks.append(("component:question-encoder", question))
    checks.append(("component:explanation-encoder", explanation))
    checks.append(("component:visual-attention", visual))
    checks.append(("component:predictor", predictor))
    checks.append(("component:verifier", verifier))
    checks.append(("component:generator", gen_component))
    checks.append(("component:retrieval-pooling", pooling))
    return checks


def _subset(store, prefixes):
    sub = ParamStore()
    for name, arr in store.items():
        if any(name.startswith(p) for p in prefixes):
            sub.create(name, arr)
    return sub


def run_gradcheck(seed=7, points=100):
    """Worst finite-difference relative error per op kind and component."""
    master = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    table = []
    for ci, (name, maker) in enumerate(_op_checks(master)
                                       + _component_checks(master)):
        worst = 0.0
        for p in range(points):
            rng = np.random.default_rng(np.random.SeedSequence([seed, 5, ci, p]))
            point, build = maker(rng)
            worst = max(worst, grad_check(build, point, step=FD_STEP))
        table.append((name, worst))
    return table
