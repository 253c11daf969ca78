"""Model bundle: configuration, parameter init, and shared batch forward."""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import encoders
from .corpus import RESERVED_TOKENS, AnswerSpace, Vocabulary, tokenize, train_split
from .params import ParamStore, fingerprint


@dataclass
class ModelConfig:
    hidden: int = 64
    embed: int = 64
    att_hidden: int = 64
    ver_hidden: int = 64
    pred_hidden: int = 64
    max_q_len: int = 14
    max_x_len: int = 16

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


RETRIEVAL_PARAM_NAMES = (
    "word_emb", "q_gru.w", "q_gru.u", "q_gru.b",
    "att.wq", "att.wo", "att.b", "att.w",
    "q_proj.w", "q_proj.b", "v_proj.w", "v_proj.b",
)

FROZEN_PREFIX = "frozen_retrieval."


class Model:
    """A ParamStore plus the corpus-derived vocab/answer space and config."""

    def __init__(self, store, cfg, vocab, answer_space):
        self.store = store
        self.cfg = cfg
        self.vocab = vocab
        self.answer_space = answer_space

    @classmethod
    def initialize(cls, corpus, cfg, seed):
        train = train_split(corpus)
        if not train:
            raise ValueError("train split is empty")
        texts = [ex.question for ex in train] + [ex.explanation for ex in train]
        vocab = Vocabulary.build(texts)
        answer_space = AnswerSpace.build(train)
        d_obj = train[0].objects.shape[1]
        rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
        store = encoders.init_base_params(
            cfg, len(vocab), len(answer_space), d_obj, rng)
        store.meta["model_config"] = cfg.to_dict()
        store.meta["vocab"] = vocab.id_to_token[len(RESERVED_TOKENS):]
        store.meta["answers"] = answer_space.answers
        store.meta["d_obj"] = d_obj
        return cls(store, cfg, vocab, answer_space)

    @classmethod
    def from_store(cls, store):
        cfg = ModelConfig.from_dict(store.meta["model_config"])
        vocab = Vocabulary(store.meta["vocab"])
        answer_space = AnswerSpace(store.meta["answers"])
        return cls(store, cfg, vocab, answer_space)

    # -- tokenization -------------------------------------------------------
    def question_tokens(self, example):
        return tokenize(example.question, self.vocab, self.cfg.max_q_len)

    def explanation_tokens(self, text):
        return tokenize(text, self.vocab, self.cfg.max_x_len)

    def gold_answer_id(self, example):
        """Highest-soft-score answer, ties to the lower answer index."""
        best, best_score = None, -1.0
        for text, _ in example.answers:
            s = example.soft_scores[text]
            idx = self.answer_space.id_of(text)
            if s > best_score or (s == best_score and idx < best):
                best, best_score = idx, s
        return best

    def target_vector(self, example):
        t = np.zeros(len(self.answer_space))
        for text, _ in example.answers:
            if text in self.answer_space.index:
                t[self.answer_space.id_of(text)] = example.soft_scores[text]
        return t

    # -- batched forward ----------------------------------------------------
    def base_forward(self, tape, L, examples):
        """Encode a batch and predict answer scores.

        Returns a dict of graph nodes: q, v, alpha, qp, fused, scores.
        """
        ids, lengths = encoders.pad_token_batch(
            [self.question_tokens(ex) for ex in examples])
        objects = np.stack([ex.objects for ex in examples])
        q = encoders.encode_question_batch(tape, L, ids, lengths)
        v, alpha = encoders.encode_visual_batch(tape, L, objects, q)
        qp = encoders.project_question(tape, L, q)
        fused = encoders.qv_embedding(qp, v)
        scores = predict_scores(tape, L, fused)
        return {"q": q, "v": v, "alpha": alpha, "qp": qp,
                "fused": fused, "scores": scores}

    def fingerprint(self):
        return fingerprint(self.store)


def predict_scores(tape, L, fused):
    """Two-layer feed-forward head with sigmoid outputs, one per answer."""
    hidden = (fused @ L["pred.w1"] + L["pred.b1"]).relu()
    return (hidden @ L["pred.w2"] + L["pred.b2"]).sigmoid()


def retrieval_view(store):
    """Parameters to embed retrieval queries with.

    A fine-tuned checkpoint carries frozen copies of the pretraining
    encoders; before fine-tuning the live entries are the same thing.
    """
    sub = ParamStore()
    frozen = any(n.startswith(FROZEN_PREFIX) for n in store.names())
    for name in RETRIEVAL_PARAM_NAMES:
        src = FROZEN_PREFIX + name if frozen else name
        sub.create(name, store[src])
    return sub


def retrieval_fingerprint(store):
    """Fingerprint of the checkpoint the retrieval embeddings come from."""
    return store.meta.get("retrieval_fingerprint") or fingerprint(store)


def freeze_retrieval_params(store):
    """Copy the retrieval encoders under the frozen prefix and bind the
    current fingerprint, so later stages can validate index consistency."""
    fp = fingerprint(store)
    for name in RETRIEVAL_PARAM_NAMES:
        store.create(FROZEN_PREFIX + name, store[name].copy())
    store.meta["retrieval_fingerprint"] = fp
    return fp
