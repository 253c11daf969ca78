"""Verification scoring S(Q, V, a, x) and its contrastive training.

One positive term (the matching human explanation) and five negative
replacements: question, visual, answer, explanation, and answer plus
explanation.  The total is lam * l_m + the five negative terms; lam
defaults to 10 because each step sees one positive against five
negatives.  Fine-tuning optimizes this verification loss plus a small
weight on the joint answer-and-explanation loss, with the learning rate
decayed by 0.8 every 5 epochs.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from . import encoders
from .autodiff import Tape
from .corpus import train_split, test_split
from .model import Model, retrieval_fingerprint, freeze_retrieval_params
from .optim import Adam, decayed_lr
from .params import fingerprint
from .retrieval import SOFT_FILTER, RetrievalContext

DEFAULT_LAMBDA = 10.0
DEFAULT_VQAE_WEIGHT = 0.1

VQA_PARAM_PREFIXES = ("word_emb", "q_gru.", "att.", "q_proj.", "v_proj.", "pred.")


@dataclass
class NegativeSample:
    answer_id: int
    probability: float
    best_wrong_explanation: list | None = None
    best_wrong_score: float | None = None


@dataclass
class VerificationLossBreakdown:
    l_m: float
    l_r_q: float
    l_r_v: float
    l_r_a: float
    l_r_x: float
    l_r_ax: float
    lam: float
    total: float
    neg_missing: bool = False
    set_empty: bool = False
    sampled_negative: int | None = None

    @staticmethod
    def combine(lam, l_m, l_r_q, l_r_v, l_r_a, l_r_x, l_r_ax):
        """The one place the six components are summed; tests recompute
        exactly this left-to-right fold."""
        return ((((lam * l_m + l_r_q) + l_r_v) + l_r_a) + l_r_x) + l_r_ax

    def to_dict(self):
        return asdict(self)


def sample_negative_answer(scores, soft_by_id, rng):
    """Draw one wrong answer proportionally to the predicted scores.

    Eligible answers have gold soft score strictly below 0.6.  Returns
    None when no answer qualifies.
    """
    scores = np.asarray(scores)
    eligible = np.array([a for a in range(scores.size)
                         if soft_by_id.get(a, 0.0) < SOFT_FILTER], dtype=np.int64)
    if eligible.size == 0:
        return None
    probs = scores[eligible].astype(np.float64)
    probs = probs / probs.sum()
    pick = int(rng.choice(eligible.size, p=probs))
    return NegativeSample(int(eligible[pick]), float(probs[pick]))


# ---------------------------------------------------------------------------
# scoring graphs


def verifier_projections(tape, L, q, v):
    fq = q @ L["ver.fq.w"] + L["ver.fq.b"]
    fv = v @ L["ver.fv.w"] + L["ver.fv.b"]
    return fq, fv


def project_answer(tape, L, onehot):
    a = onehot if hasattr(onehot, "tape") else tape.const(onehot)
    return a @ L["ver.fa.w"] + L["ver.fa.b"]


def project_explanation(tape, L, phi):
    return phi @ L["ver.fx.w"] + L["ver.fx.b"]


def verify_head(tape, L, fq, fv, fa, fx):
    """Fused two-layer head over the four projected inputs -> score(s)."""
    z = tape.concat([fq, fv, fa, fx], axis=-1)
    h = (z @ L["ver.head.w1"] + L["ver.head.b1"]).relu()
    s = h @ L["ver.head.w2"] + L["ver.head.b2"]
    return s.reshape(s.shape[:-1]).sigmoid()


def verify(q, v, answer_onehot, expl_encoding, store):
    """Score one (Q, V, a, x) tuple; inputs are plain vectors."""
    tape = Tape()
    L = tape.leaves_from(store)
    fq, fv = verifier_projections(
        tape, L, tape.const(np.asarray(q)[None]), tape.const(np.asarray(v)[None]))
    fa = project_answer(tape, L, np.asarray(answer_onehot)[None])
    fx = project_explanation(tape, L, tape.const(np.asarray(expl_encoding)[None]))
    return float(verify_head(tape, L, fq, fv, fa, fx).value[0])


def most_supportive(competing_set, q, v, answer_onehot, model):
    """Member of the set with the highest verification score.

    Ties go to the lowest member index.  Returns None for an empty set
    (caller decides how to handle the missing explanation).
    """
    if len(competing_set) == 0:
        return None
    store = model.store
    tape = Tape()
    L = tape.leaves_from(store)
    ids, lengths = encoders.pad_token_batch(competing_set.token_lists())
    phi = encoders.encode_explanation_batch(tape, L, ids, lengths)
    n = len(competing_set)
    fq, fv = verifier_projections(
        tape, L,
        tape.const(np.broadcast_to(np.asarray(q), (n, len(q))).copy()),
        tape.const(np.broadcast_to(np.asarray(v), (n, len(v))).copy()))
    fa = project_answer(
        tape, L, np.broadcast_to(np.asarray(answer_onehot),
                                 (n, len(answer_onehot))).copy())
    fx = project_explanation(tape, L, phi)
    scores = verify_head(tape, L, fq, fv, fa, fx).value
    best = int(np.argmax(scores))
    return competing_set.members[best], float(scores[best]), best


# ---------------------------------------------------------------------------
# batched training graph


@dataclass
class BatchArrays:
    """Plumbing for one fine-tuning step, all plain numpy."""
    examples: list
    gold_ids: np.ndarray          # (B,)
    gold_onehot: np.ndarray       # (B, A)
    gx_ids: np.ndarray            # (B, Tx)
    gx_len: np.ndarray            # (B,)
    qperm: np.ndarray             # (B,)
    vperm: np.ndarray             # (B,)
    neg_ids: np.ndarray           # (B,) -1 when missing
    neg_onehot: np.ndarray        # (B, A)
    neg_flag: np.ndarray          # (B,) 0/1
    mem_ids: np.ndarray           # (B, K, Tm)
    mem_len: np.ndarray           # (B, K)
    mem_mask: np.ndarray          # (B, K) 0/1
    set_flag: np.ndarray          # (B,) 0/1


def build_verification_graph(tape, L, nodes, batch, lam):
    """Extend a base-forward graph with the six-term verification loss.

    Returns (per_example, means, total, vqae_vec) where per_example maps
    component names to (B,) Vars and means to scalar Vars.
    """
    B = len(batch.examples)
    K = batch.mem_ids.shape[1]
    q, v, scores = nodes["q"], nodes["v"], nodes["scores"]

    phi_gold = encoders.encode_explanation_batch(tape, L, batch.gx_ids, batch.gx_len)
    mem_flat_ids = batch.mem_ids.reshape(B * K, -1)
    mem_flat_len = batch.mem_len.reshape(B * K)
    phi_mem = encoders.encode_explanation_batch(
        tape, L, mem_flat_ids, mem_flat_len).reshape(B, K, -1)

    fq, fv = verifier_projections(tape, L, q, v)
    fa_gold = project_answer(tape, L, batch.gold_onehot)
    fa_neg = project_answer(tape, L, batch.neg_onehot)
    fx_gold = project_explanation(tape, L, phi_gold)
    fx_mem = project_explanation(tape, L, phi_mem)

    p = fx_mem.shape[-1]
    fq_m = fq.reshape(B, 1, p).broadcast_to((B, K, p))
    fv_m = fv.reshape(B, 1, p).broadcast_to((B, K, p))
    fag_m = fa_gold.reshape(B, 1, p).broadcast_to((B, K, p))
    fan_m = fa_neg.reshape(B, 1, p).broadcast_to((B, K, p))

    s_gold = verify_head(tape, L, fq, fv, fa_gold, fx_gold)
    s_qrep = verify_head(tape, L, tape.lookup(fq, batch.qperm), fv, fa_gold, fx_gold)
    s_vrep = verify_head(tape, L, fq, tape.lookup(fv, batch.vperm), fa_gold, fx_gold)
    s_arep = verify_head(tape, L, fq, fv, fa_neg, fx_gold)
    s_x_members = verify_head(tape, L, fq_m, fv_m, fag_m, fx_mem)    # (B, K)
    s_ax_members = verify_head(tape, L, fq_m, fv_m, fan_m, fx_mem)   # (B, K)

    mask = tape.const(batch.mem_mask)
    mask_shift = tape.const(batch.mem_mask - 1.0)  # padded slots -> -1
    s_x_star = (s_x_members * mask + mask_shift).amax(axis=1)
    s_ax_star = (s_ax_members * mask + mask_shift).amax(axis=1)

    neg_flag = tape.const(batch.neg_flag)
    set_flag = tape.const(batch.set_flag)
    ones = np.ones(B)
    zeros = np.zeros(B)
    per_example = {
        "l_m": tape.bce_soft(s_gold, ones),
        "l_r_q": tape.bce_soft(s_qrep, zeros),
        "l_r_v": tape.bce_soft(s_vrep, zeros),
        "l_r_a": tape.bce_soft(s_arep, zeros) * neg_flag,
        "l_r_x": tape.bce_soft(s_x_star, zeros) * set_flag,
        "l_r_ax": tape.bce_soft(s_ax_star, zeros) * set_flag,
    }
    means = {k: vec.mean() for k, vec in per_example.items()}
    total = ((((means["l_m"] * lam + means["l_r_q"]) + means["l_r_v"])
              + means["l_r_a"]) + means["l_r_x"]) + means["l_r_ax"]

    # joint answer-and-explanation loss (per example)
    safe_neg = np.where(batch.neg_ids < 0, 0, batch.neg_ids)
    p_gold = tape.pick(scores, batch.gold_ids)
    p_neg = tape.pick(scores, safe_neg)
    j1 = tape.bce_soft(p_gold * s_gold, ones)
    j2 = tape.bce_soft(p_neg * s_ax_star, zeros) * set_flag
    vqae_vec = j1 + j2

    extras = {"s_gold": s_gold, "s_ax_star": s_ax_star, "s_x_star": s_x_star}
    return per_example, means, total, vqae_vec, extras


def make_batch_arrays(model, examples, scores_np, rng, member_tokens, k_exp=8):
    """Assemble the numpy plumbing for one step.

    `member_tokens(example, answer_id)` returns the candidate explanation
    token lists for the sampled wrong answer (retrieved by default).
    """
    B = len(examples)
    A = len(model.answer_space)
    gold_ids = np.array([model.gold_answer_id(ex) for ex in examples], dtype=np.int64)
    gold_onehot = np.zeros((B, A))
    gold_onehot[np.arange(B), gold_ids] = 1.0

    gx = [model.explanation_tokens(ex.explanation) for ex in examples]
    gx_ids, gx_len = encoders.pad_token_batch(gx)

    if B >= 2:
        qperm = np.array([_other_index(B, i, rng) for i in range(B)], dtype=np.int64)
        vperm = np.array([_other_index(B, i, rng) for i in range(B)], dtype=np.int64)
    else:
        raise ValueError("replacement losses need a batch of at least 2 examples")

    neg_ids = np.full(B, -1, dtype=np.int64)
    neg_onehot = np.zeros((B, A))
    neg_flag = np.zeros(B)
    soft_by_id = []
    for i, ex in enumerate(examples):
        soft = {model.answer_space.id_of(t): s for t, s in ex.soft_scores.items()}
        soft_by_id.append(soft)
        neg = sample_negative_answer(scores_np[i], soft, rng)
        if neg is not None:
            neg_ids[i] = neg.answer_id
            neg_onehot[i, neg.answer_id] = 1.0
            neg_flag[i] = 1.0

    member_lists = []
    for i, ex in enumerate(examples):
        if neg_flag[i]:
            member_lists.append(member_tokens(ex, int(neg_ids[i]))[:k_exp])
        else:
            member_lists.append([])
    t_max = max((len(t) for lists in member_lists for t in lists), default=1)
    mem_ids = np.zeros((B, k_exp, t_max), dtype=np.int64)
    mem_len = np.ones((B, k_exp), dtype=np.int64)
    mem_mask = np.zeros((B, k_exp))
    for i, lists in enumerate(member_lists):
        for j, toks in enumerate(lists):
            mem_ids[i, j, : len(toks)] = toks
            mem_len[i, j] = max(len(toks), 1)
            mem_mask[i, j] = 1.0
    set_flag = (mem_mask.sum(axis=1) > 0).astype(np.float64)

    return BatchArrays(list(examples), gold_ids, gold_onehot, gx_ids, gx_len,
                       qperm, vperm, neg_ids, neg_onehot, neg_flag,
                       mem_ids, mem_len, mem_mask, set_flag)


def _other_index(n, i, rng):
    j = int(rng.integers(n - 1))
    return j if j < i else j + 1


def verification_loss(example, batch_examples, ctx, model, rng,
                      lam=DEFAULT_LAMBDA, k_exp=8, member_tokens=None):
    """Six-component loss for one example, replacements drawn from the
    accompanying batch.  Returns a VerificationLossBreakdown."""
    examples = [example] + [ex for ex in batch_examples if ex.id != example.id]
    if len(examples) < 2:
        raise ValueError("need at least one other example for Q'/V' replacement")
    if member_tokens is None:
        member_tokens = retrieved_member_tokens(ctx, k_exp)
    tape = Tape()
    L = tape.leaves_from(model.store)
    nodes = model.base_forward(tape, L, examples)
    batch = make_batch_arrays(model, examples, nodes["scores"].value, rng,
                              member_tokens, k_exp=k_exp)
    per_example, _, _, _, _ = build_verification_graph(tape, L, nodes, batch, lam)
    vals = {k: float(vec.value[0]) for k, vec in per_example.items()}
    total = VerificationLossBreakdown.combine(
        lam, vals["l_m"], vals["l_r_q"], vals["l_r_v"],
        vals["l_r_a"], vals["l_r_x"], vals["l_r_ax"])
    return VerificationLossBreakdown(
        lam=lam, total=total, **vals,
        neg_missing=not bool(batch.neg_flag[0]),
        set_empty=bool(batch.neg_flag[0]) and not bool(batch.set_flag[0]),
        sampled_negative=int(batch.neg_ids[0]) if batch.neg_flag[0] else None)


def retrieved_member_tokens(ctx, k_exp=8):
    def provider(example, answer_id):
        cs = ctx.competing_set(example, answer_id, k=k_exp,
                               exclude_self=example.split == "train")
        return cs.token_lists()
    return provider


# ---------------------------------------------------------------------------
# fine-tuning loop


@dataclass
class FinetuneConfig:
    lr: float = 5e-4
    verifier_lr: float = 5e-4
    batch_size: int = 64
    epochs: int = 40
    seed: int = 1
    lam: float = DEFAULT_LAMBDA
    vqae_weight: float = DEFAULT_VQAE_WEIGHT
    k_exp: int = 8
    fixed_vqa: bool = False
    explanations: str = "retrieved"
    lr_decay: float = 0.8
    lr_decay_every: int = 5

    def to_dict(self):
        return asdict(self)


def is_vqa_param(name):
    return any(name.startswith(p) for p in VQA_PARAM_PREFIXES)


def finetune(corpus, index, pretrained, hyper, rng_seed=None, log=None,
             member_tokens=None):
    """Fine-tune with the verification loss plus the weighted joint loss.

    Returns a new Model.  The retrieval encoders are frozen into the
    checkpoint first, so the index stays valid and later evaluation embeds
    queries consistently.  With fixed_vqa only verifier-side parameters
    (projections, head, and the explanation encoder) are updated.
    """
    seed = hyper.seed if rng_seed is None else rng_seed
    model = Model.from_store(pretrained.copy())
    if retrieval_fingerprint(model.store) != index.fingerprint:
        from .retrieval import StaleIndexError
        raise StaleIndexError(
            "fine-tuning requires the index built from this checkpoint")
    if "retrieval_fingerprint" not in model.store.meta:
        freeze_retrieval_params(model.store)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 31]))
    if not any(n.startswith("ver.") for n in model.store.names()):
        encoders.add_verifier_params(model.store, model.cfg,
                                     len(model.answer_space), rng)
    model.store.meta["finetune_config"] = {**hyper.to_dict(), "seed": seed}
    model.store.meta["fixed_vqa"] = hyper.fixed_vqa

    ctx = RetrievalContext(index, model)
    train = train_split(corpus)
    ctx.prime_queries(train)
    if member_tokens is None:
        member_tokens = retrieved_member_tokens(ctx, hyper.k_exp)

    trainable = [n for n in model.store.names()
                 if not n.startswith("frozen_retrieval.")]
    if hyper.fixed_vqa:
        trainable = [n for n in trainable
                     if n.startswith("ver.") or n.startswith("x_gru.")]
    opt = Adam(model.store, trainable)

    def lr_for_epoch(epoch):
        decay = decayed_lr(1.0, epoch, hyper.lr_decay, hyper.lr_decay_every)
        vqa_lr = hyper.lr * decay
        ver_lr = hyper.verifier_lr * decay
        return lambda name: ver_lr if (name.startswith("ver.")
                                       or name.startswith("x_gru.")) else vqa_lr

    from .predictor import _batches

    for epoch in range(hyper.epochs):
        lr_fn = lr_for_epoch(epoch)
        for step, idx in enumerate(_batches(len(train), hyper.batch_size, rng)):
            examples = [train[i] for i in idx]
            tape = Tape()
            L = tape.leaves_from(model.store)
            nodes = model.base_forward(tape, L, examples)
            batch = make_batch_arrays(model, examples, nodes["scores"].value,
                                      rng, member_tokens, k_exp=hyper.k_exp)
            per_example, means, total, vqae_vec, _ = build_verification_graph(
                tape, L, nodes, batch, hyper.lam)
            vqae = vqae_vec.mean()
            joint = total + hyper.vqae_weight * vqae
            value = float(joint.value)
            if not np.isfinite(value):
                from .predictor import DivergenceError
                raise DivergenceError(
                    f"loss diverged at epoch {epoch} step {step}")
            grads = tape.backward(joint)
            opt.step(grads, lr_fn)
            if log is not None:
                log({
                    "phase": "finetune", "epoch": epoch, "step": step,
                    "lam": hyper.lam,
                    **{k: float(v.value) for k, v in means.items()},
                    "total": float(total.value),
                    "vqae": float(vqae.value),
                    "joint": value,
                    "sampled_negatives": batch.neg_ids.tolist(),
                    "omitted_negative": int(len(examples) - batch.neg_flag.sum()),
                    "omitted_explanation": int(batch.neg_flag.sum()
                                               - batch.set_flag.sum()),
                })
    return model


def write_training_log(records, path):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True))
            fh.write("\n")
