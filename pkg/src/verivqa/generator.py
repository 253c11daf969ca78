"""Retrieval-conditioned explanation generation.

The decoder is a two-layer recurrent network in the style of attention
captioners: layer one consumes the previous word embedding together with
the frozen question vector, an answer embedding, and x, the max-pooled
encoding of the retrieved explanations for the conditioning answer; an
attention over question-gated object features feeds layer two, which
projects to the vocabulary.  Cells are GRUs, matching the rest of the
system.  Training teacher-forces the gold explanation conditioned on
retrieved explanations for the correct answer (the example's own
explanation is never retrievable for itself).
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import encoders
from ._kernels import gru_cell
from .autodiff import Tape
from .corpus import BOS, EOS, train_split
from .model import Model, retrieval_fingerprint
from .optim import Adam
from .params import ParamStore, fingerprint
from .retrieval import RetrievalContext


@dataclass
class DecodeConfig:
    mode: str = "beam"      # beam | sample
    beam_size: int = 2
    max_len: int = 20
    temperature: float = 1.0
    seed: int = 0

    def validate(self):
        if self.mode not in ("beam", "sample"):
            raise ValueError(f"unknown decode mode {self.mode!r}")
        if self.beam_size < 1 or self.max_len < 1:
            raise ValueError("beam_size and max_len must be >= 1")


@dataclass
class GeneratorTrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 25
    seed: int = 1
    k_exp: int = 8

    def to_dict(self):
        return asdict(self)


def init_generator_params(cfg, vocab_size, num_answers, d_obj, rng):
    store = ParamStore()
    h, e, ha = cfg.hidden, cfg.embed, cfg.att_hidden

    def u(name, *shape):
        store.create(name, encoders.uniform_init(rng, *shape))

    u("gen.word_emb", vocab_size, e)
    u("gen.ret_gru.w", e, 3 * h)
    u("gen.ret_gru.u", h, 3 * h)
    u("gen.ret_gru.b", 3 * h)
    u("gen.uatt.wq", h, ha)
    u("gen.uatt.wo", d_obj, ha)
    u("gen.uatt.b", ha)
    u("gen.uatt.w", ha, 1)
    u("gen.uproj.w", d_obj, h)
    u("gen.uproj.b", h)
    u("gen.ans_emb", num_answers, h)
    u("gen.l1.w", e + 3 * h, 3 * h)
    u("gen.l1.u", h, 3 * h)
    u("gen.l1.b", 3 * h)
    u("gen.datt.wu", h, ha)
    u("gen.datt.wh", h, ha)
    u("gen.datt.b", ha)
    u("gen.datt.w", ha, 1)
    u("gen.l2.w", 2 * h, 3 * h)
    u("gen.l2.u", h, 3 * h)
    u("gen.l2.b", 3 * h)
    u("gen.out.w", h, vocab_size)
    u("gen.out.b", vocab_size)
    return store


class GeneratorModel:
    """Generator parameters bound to the frozen base model they condition on."""

    def __init__(self, store, base_model):
        self.store = store
        self.base = base_model
        expected = store.meta.get("base_fingerprint")
        actual = retrieval_fingerprint(base_model.store)
        if expected is not None and expected != actual:
            raise ValueError(
                "generator checkpoint was trained against a different base "
                f"checkpoint ({expected[:12]}... vs {actual[:12]}...)")

    @property
    def cfg(self):
        return self.base.cfg

    @property
    def vocab(self):
        return self.base.vocab


# ---------------------------------------------------------------------------
# conditioning features


def pool_retrieved_graph(tape, L, mem_ids, mem_len, mem_mask):
    """Max-pool member encodings; (B, K, T) ids -> (B, H).

    Padded slots are pushed far negative before the max so they never win;
    a fully empty set yields the zero vector.
    """
    b, k, _ = mem_ids.shape
    emb = tape.lookup(L["gen.word_emb"], mem_ids.reshape(b * k, -1))
    hs = tape.gru(emb, L["gen.ret_gru.w"], L["gen.ret_gru.u"], L["gen.ret_gru.b"])
    phi = tape.step_select(hs, mem_len.reshape(b * k) - 1)
    phi = phi.reshape(b, k, -1)
    mask = tape.const(mem_mask[:, :, None])
    shift = tape.const((mem_mask[:, :, None] - 1.0) * 1e9)
    pooled = (phi * mask + shift).amax(axis=1)
    empty = tape.const((mem_mask.sum(axis=1) > 0).astype(np.float64)[:, None])
    return pooled * empty


def pool_retrieved(token_lists, store):
    """Numpy pooled encoding of one competing set (empty set rejected)."""
    if not token_lists:
        raise ValueError("cannot pool an empty competing set")
    tape = Tape()
    L = tape.leaves_from(store)
    ids, lengths = encoders.pad_token_batch(token_lists)
    mem_ids = ids[None]
    mem_len = lengths[None]
    mem_mask = np.ones((1, len(token_lists)))
    return pool_retrieved_graph(tape, L, mem_ids, mem_len, mem_mask).value[0]


def question_gated_objects(tape, L, objects, q):
    """Question-attended per-object features U (B, N, H)."""
    obj = objects if hasattr(objects, "tape") else tape.const(objects)
    b, n, _ = obj.shape
    qa = (q @ L["gen.uatt.wq"]).reshape(b, 1, -1)
    oa = obj @ L["gen.uatt.wo"]
    logits = ((qa + oa + L["gen.uatt.b"]).tanh() @ L["gen.uatt.w"]).reshape(b, n)
    gate = logits.softmax(axis=-1).reshape(b, n, 1)
    proj = obj @ L["gen.uproj.w"] + L["gen.uproj.b"]
    return proj * gate


def _decoder_attention(tape, L, u_feat, h1):
    """Per-step attention over U; h1 is (B, Td, H), returns (B, Td, H)."""
    b, n, _ = u_feat.shape
    td = h1.shape[1]
    uw = (u_feat @ L["gen.datt.wu"]).reshape(b, 1, n, -1)
    hw = (h1 @ L["gen.datt.wh"])
    hw = hw.reshape(b, td, 1, hw.shape[-1])
    logits = ((uw + hw + L["gen.datt.b"]).tanh() @ L["gen.datt.w"]).reshape(b, td, n)
    beta = logits.softmax(axis=-1)
    return beta @ u_feat


def teacher_forced_loss(tape, L, batch_feats, in_ids, targets, target_mask):
    """Mean next-token negative log likelihood (nats per token)."""
    q_const, ans_vec, x_vec, u_feat = batch_feats
    b, td = in_ids.shape
    emb = tape.lookup(L["gen.word_emb"], in_ids)
    ctx = tape.concat([q_const, ans_vec, x_vec], axis=-1)
    ctx_b = ctx.reshape(b, 1, ctx.shape[-1]).broadcast_to((b, td, ctx.shape[-1]))
    l1_in = tape.concat([emb, ctx_b], axis=-1)
    h1 = tape.gru(l1_in, L["gen.l1.w"], L["gen.l1.u"], L["gen.l1.b"])
    att = _decoder_attention(tape, L, u_feat, h1)
    l2_in = tape.concat([att, h1], axis=-1)
    h2 = tape.gru(l2_in, L["gen.l2.w"], L["gen.l2.u"], L["gen.l2.b"])
    probs = (h2 @ L["gen.out.w"] + L["gen.out.b"]).softmax(axis=-1)
    p_gold = tape.pick(probs, targets)
    mask = tape.const(target_mask)
    nll = tape.bce_soft(p_gold, np.ones_like(target_mask)) * mask
    return nll.sum() * (1.0 / target_mask.sum())


# ---------------------------------------------------------------------------
# training


def _frozen_question_vectors(base_model, examples):
    from .model import retrieval_view

    view = retrieval_view(base_model.store)
    ids, lengths = encoders.pad_token_batch(
        [base_model.question_tokens(ex) for ex in examples])
    tape = Tape()
    L = tape.leaves_from(view)
    return encoders.encode_question_batch(tape, L, ids, lengths).value


def train_generator(corpus, index, base_model, hyper, seed=None, log=None):
    """Teacher-forced training against gold explanations.

    Conditioning retrieval uses the frozen pretraining embeddings; the
    query example itself is excluded from its own conditioning set.
    """
    seed = hyper.seed if seed is None else seed
    ctx = RetrievalContext(index, base_model)
    train = train_split(corpus)
    ctx.prime_queries(train)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 47]))
    d_obj = train[0].objects.shape[1]
    store = init_generator_params(base_model.cfg, len(base_model.vocab),
                                  len(base_model.answer_space), d_obj, rng)
    store.meta["base_fingerprint"] = retrieval_fingerprint(base_model.store)
    store.meta["generator_config"] = {**hyper.to_dict(), "seed": seed}
    gen = GeneratorModel(store, base_model)

    q_all = _frozen_question_vectors(base_model, train)
    gold_ids = [base_model.gold_answer_id(ex) for ex in train]
    opt = Adam(store, store.names())

    from .predictor import _batches, DivergenceError

    for epoch in range(hyper.epochs):
        losses = []
        for step, idx in enumerate(_batches(len(train), hyper.batch_size, rng)):
            examples = [train[i] for i in idx]
            tape = Tape()
            L = tape.leaves_from(store)
            feats, in_ids, targets, mask = _prepare_tf_batch(
                tape, L, gen, ctx, examples, q_all[idx],
                [gold_ids[i] for i in idx], hyper.k_exp)
            loss = teacher_forced_loss(tape, L, feats, in_ids, targets, mask)
            value = float(loss.value)
            if not np.isfinite(value):
                raise DivergenceError(f"loss diverged at epoch {epoch} step {step}")
            grads = tape.backward(loss)
            opt.step(grads, lambda name: hyper.lr)
            losses.append(value)
        if log is not None:
            log({"phase": "train-generator", "epoch": epoch,
                 "nats_per_token": float(np.mean(losses))})
    return gen


def _prepare_tf_batch(tape, L, gen, ctx, examples, q_np, answer_ids, k_exp):
    base = gen.base
    b = len(examples)
    a_onehot = np.zeros((b, len(base.answer_space)))
    a_onehot[np.arange(b), answer_ids] = 1.0
    ans_vec = tape.const(a_onehot) @ L["gen.ans_emb"]

    member_lists = [
        ctx.competing_set(ex, aid, k=k_exp,
                          exclude_self=ex.split == "train").token_lists()
        for ex, aid in zip(examples, answer_ids)]
    t_max = max((len(t) for lists in member_lists for t in lists), default=1)
    k = max(max((len(l) for l in member_lists), default=1), 1)
    mem_ids = np.zeros((b, k, t_max), dtype=np.int64)
    mem_len = np.ones((b, k), dtype=np.int64)
    mem_mask = np.zeros((b, k))
    for i, lists in enumerate(member_lists):
        for j, toks in enumerate(lists):
            mem_ids[i, j, : len(toks)] = toks
            mem_len[i, j] = max(len(toks), 1)
            mem_mask[i, j] = 1.0
    x_vec = pool_retrieved_graph(tape, L, mem_ids, mem_len, mem_mask)

    q_const = tape.const(q_np)
    objects = np.stack([ex.objects for ex in examples])
    u_feat = question_gated_objects(tape, L, objects, q_const)

    gold_tokens = [base.explanation_tokens(ex.explanation) for ex in examples]
    td = max(len(t) for t in gold_tokens) + 1
    in_ids = np.full((b, td), 0, dtype=np.int64)
    targets = np.zeros((b, td), dtype=np.int64)
    mask = np.zeros((b, td))
    for i, toks in enumerate(gold_tokens):
        seq_in = [BOS] + toks
        seq_out = toks + [EOS]
        in_ids[i, : len(seq_in)] = seq_in
        targets[i, : len(seq_out)] = seq_out
        mask[i, : len(seq_out)] = 1.0
    return (q_const, ans_vec, x_vec, u_feat), in_ids, targets, mask


# ---------------------------------------------------------------------------
# decoding


class _DecoderKernel:
    """Forward-only per-step decoder over plain numpy arrays."""

    def __init__(self, gen, example, answer_id, member_token_lists):
        base = gen.base
        store = gen.store
        self.store = store
        h = base.cfg.hidden
        self.h = h
        q = _frozen_question_vectors(base, [example])[0]
        a_onehot = encoders.embed_answer(answer_id, len(base.answer_space))
        ans = a_onehot @ store["gen.ans_emb"]
        if member_token_lists:
            x = pool_retrieved(member_token_lists, store)
        else:
            x = np.zeros(h)
        self.ctx = np.concatenate([q, ans, x])[None, :]

        obj = example.objects
        qa = q @ store["gen.uatt.wq"]
        oa = obj @ store["gen.uatt.wo"]
        logits = np.tanh(qa + oa + store["gen.uatt.b"]) @ store["gen.uatt.w"]
        gate = _softmax_np(logits[:, 0])
        self.u_feat = (obj @ store["gen.uproj.w"] + store["gen.uproj.b"]) \
            * gate[:, None]
        self.uw = self.u_feat @ store["gen.datt.wu"]

    def initial_state(self):
        return np.zeros((1, self.h)), np.zeros((1, self.h))

    def step(self, token, state):
        s = self.store
        h1, h2 = state
        emb = s["gen.word_emb"][token][None, :]
        l1_in = np.concatenate([emb, self.ctx], axis=1)
        h1 = gru_cell(l1_in, h1, s["gen.l1.w"], s["gen.l1.u"], s["gen.l1.b"])
        att_logits = np.tanh(self.uw + h1 @ s["gen.datt.wh"]
                             + s["gen.datt.b"]) @ s["gen.datt.w"]
        beta = _softmax_np(att_logits[:, 0])
        att = (beta[:, None] * self.u_feat).sum(axis=0, keepdims=True)
        l2_in = np.concatenate([att, h1], axis=1)
        h2 = gru_cell(l2_in, h2, s["gen.l2.w"], s["gen.l2.u"], s["gen.l2.b"])
        logits = (h2 @ s["gen.out.w"] + s["gen.out.b"])[0]
        logp = logits - _logsumexp_np(logits)
        return logp, (h1, h2)


def _softmax_np(x):
    z = x - x.max()
    e = np.exp(z)
    return e / e.sum()


def _logsumexp_np(x):
    m = x.max()
    return m + np.log(np.exp(x - m).sum())


def generate_explanation(gen, example, answer_id, member_token_lists, decode_cfg):
    """Decode one explanation; returns (token_ids, total_logprob)."""
    decode_cfg.validate()
    kernel = _DecoderKernel(gen, example, answer_id, member_token_lists)
    if decode_cfg.mode == "beam":
        return beam_decode(kernel, decode_cfg.beam_size, decode_cfg.max_len)
    rng = np.random.default_rng(decode_cfg.seed)
    return sample_decode(kernel, decode_cfg.max_len, decode_cfg.temperature, rng)


def beam_decode(kernel, beam_size, max_len):
    """Beam search by total log probability, no length penalty.

    The greedy trajectory is tracked alongside the ranked beams and
    competes for the final answer, so a wider beam can never return a
    sequence scoring below the greedy decode.  (Plain beam search does not
    guarantee that: the greedy prefix can be evicted mid-way while the
    surviving beams finish worse.)
    """
    start = kernel.initial_state()
    beams = [((), 0.0, start, False)]  # tokens, logp, state, finished
    greedy = ((), 0.0, start, False)
    for _ in range(max_len):
        if all(b[3] for b in beams) and greedy[3]:
            break
        candidates = []
        for tokens, logp, state, finished in beams:
            if finished:
                candidates.append((tokens, logp, state, True))
                continue
            prev = tokens[-1] if tokens else BOS
            logps, new_state = kernel.step(prev, state)
            order = np.argsort(-logps, kind="stable")[: max(beam_size, 2)]
            for tok in order:
                tok = int(tok)
                candidates.append((tokens + (tok,), logp + float(logps[tok]),
                                   new_state, tok == EOS))
        candidates.sort(key=lambda c: (-c[1], c[0]))
        beams = candidates[:beam_size]
        if beam_size == 1:
            greedy = beams[0]  # identical trajectories, skip the extra pass
        elif not greedy[3]:
            tokens, logp, state, _ = greedy
            prev = tokens[-1] if tokens else BOS
            logps, new_state = kernel.step(prev, state)
            tok = int(np.argmax(logps))
            greedy = (tokens + (tok,), logp + float(logps[tok]), new_state,
                      tok == EOS)
    best = max(beams + [greedy], key=lambda c: (c[1], c[0]))
    tokens = [t for t in best[0] if t != EOS]
    return tokens, best[1]


def sample_decode(kernel, max_len, temperature, rng):
    state = kernel.initial_state()
    tokens = []
    logp_total = 0.0
    prev = BOS
    for _ in range(max_len):
        logps, state = kernel.step(prev, state)
        probs = _softmax_np(logps / temperature)
        tok = int(rng.choice(probs.size, p=probs))
        logp_total += float(logps[tok])
        if tok == EOS:
            break
        tokens.append(tok)
        prev = tok
    return tokens, logp_total


def sample_explanation_set(gen, example, candidate_ids, member_tokens,
                           n=8, seed=0, max_len=20):
    """n sampled explanations per answer candidate (the generated X_a).

    Pass a distinct seed per example; streams are further split per
    candidate so candidate order does not matter.
    """
    out = {}
    for aid in candidate_ids:
        members = member_tokens(example, aid)
        kernel = _DecoderKernel(gen, example, aid, members)
        rng = np.random.default_rng(np.random.SeedSequence([seed, aid]))
        seqs = []
        for _ in range(n):
            tokens, _ = sample_decode(kernel, max_len, 1.0, rng)
            seqs.append(tokens)
        out[aid] = seqs
    return out
