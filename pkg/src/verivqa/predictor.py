"""Base answer predictor: soft-score BCE pretraining and top-k extraction."""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .autodiff import Tape
from .corpus import test_split, train_split
from .model import Model, ModelConfig
from .optim import Adam


@dataclass
class TrainConfig:
    lr: float = 5e-4
    batch_size: int = 384
    epochs: int = 30
    hidden: int = 64
    seed: int = 1

    def to_dict(self):
        return asdict(self)


class DivergenceError(RuntimeError):
    pass


def vqa_loss_batch(tape, scores, targets):
    """Per-example sum of soft-target BCE over the whole answer space."""
    return tape.bce_soft(scores, targets).sum(axis=1)


def vqa_loss(scores, target_scores):
    """Scalar loss for one example (numpy in, float out)."""
    tape = Tape()
    s = tape.const(np.asarray(scores)[None, :])
    t = np.asarray(target_scores)[None, :]
    return float(vqa_loss_batch(tape, s, t).value[0])


def topk_candidates(scores, k):
    """Top-k answer ids by score, descending; ties to the lower id."""
    scores = np.asarray(scores)
    if not 1 <= k <= scores.size:
        raise ValueError(f"k={k} outside [1, {scores.size}]")
    order = np.argsort(-scores, kind="stable")[:k]
    return [(int(i), float(scores[i])) for i in order]


def _batches(n, batch_size, rng):
    """Shuffled index batches; a trailing singleton is merged backwards."""
    perm = rng.permutation(n)
    out = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) == 1:
        out[-2] = np.concatenate([out[-2], out[-1]])
        out.pop()
    return out


def heldout_accuracy(model, examples, batch_size=256):
    """Soft-score accuracy of argmax predictions, in percent."""
    total = 0.0
    for i in range(0, len(examples), batch_size):
        chunk = examples[i : i + batch_size]
        tape = Tape()
        L = tape.leaves_from(model.store)
        scores = model.base_forward(tape, L, chunk)["scores"].value
        picks = np.argmax(scores, axis=1)
        for ex, a in zip(chunk, picks):
            text = model.answer_space.answers[a]
            total += ex.soft_scores.get(text, 0.0)
    return 100.0 * total / len(examples)


def pretrain(corpus, hyper, seed=None, model_cfg=None, log=None):
    """Train the base predictor with minibatch Adam on the soft-score loss.

    Returns a Model whose store echoes the effective configuration.  The
    held-out split is only used for per-epoch reporting.
    """
    seed = hyper.seed if seed is None else seed
    cfg = model_cfg or ModelConfig(hidden=hyper.hidden, embed=hyper.hidden)
    train = train_split(corpus)
    heldout = test_split(corpus)
    model = Model.initialize(corpus, cfg, seed)
    model.store.meta["pretrain_config"] = {**hyper.to_dict(), "seed": seed}

    rng = np.random.default_rng(np.random.SeedSequence([seed, 23]))
    targets = np.stack([model.target_vector(ex) for ex in train])
    opt = Adam(model.store, model.store.names())

    for epoch in range(hyper.epochs):
        losses = []
        for step, idx in enumerate(_batches(len(train), hyper.batch_size, rng)):
            tape = Tape()
            L = tape.leaves_from(model.store)
            nodes = model.base_forward(tape, L, [train[i] for i in idx])
            loss = vqa_loss_batch(tape, nodes["scores"], targets[idx]).mean()
            value = float(loss.value)
            if not np.isfinite(value):
                raise DivergenceError(f"loss diverged at epoch {epoch} step {step}")
            grads = tape.backward(loss)
            opt.step(grads, lambda name: hyper.lr)
            losses.append(value)
        if log is not None:
            log({"phase": "pretrain", "epoch": epoch,
                 "train_loss": float(np.mean(losses)),
                 "heldout_accuracy": heldout_accuracy(model, heldout)
                 if heldout else None})
    return model
