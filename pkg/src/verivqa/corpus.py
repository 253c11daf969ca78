"""Data model, tokenization, JSONL corpus I/O, and the synthetic generator.

The synthetic corpus poses "what material is this object" questions.  Each
example has a latent attribute (the answer); the question embeds a hint
word that matches the attribute only with probability `shortcut_strength`,
a random subset of the object vectors carries the attribute prototype, and
the explanation always states the attribute outright.  Question priors are
therefore an unreliable shortcut, the visual evidence is noisy but real,
and an oracle that reads explanations is perfect.  The generative model is
simple enough that the optimal predictor from question and objects alone
can be computed exactly (`bayes_accuracy`).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

ATTRIBUTE_WORDS = (
    "wooden", "metallic", "plastic", "glassy", "ceramic", "rubbery",
    "leathery", "woolen", "silken", "velvety", "marble", "granite",
    "sandy", "icy", "golden", "silvery", "copper", "bronze", "crimson",
    "azure", "emerald", "amber", "ivory", "ebony", "scarlet", "turquoise",
    "magenta", "olive", "maroon", "beige", "coral", "indigo", "violet",
    "charcoal", "pearly", "ruby", "sapphire", "jade", "obsidian", "quartz",
)

QUESTION_TEMPLATES = (
    "what is the big object made of maybe {hint}",
    "what material is this thing i would guess {hint}",
    "which material is shown here could it be {hint}",
    "tell me the material of the object possibly {hint}",
)

EXPLANATION_TEMPLATES = (
    "the object is clearly {attr} by its texture",
    "you can tell it is {attr} from the surface",
    "its finish shows that the object is {attr}",
    "the grain and shine say the object is {attr}",
)


class CorpusError(Exception):
    pass


def soft_score(human_count, annotator_total=10):
    """Annotator-agreement soft score: min(count / 3, 1)."""
    if human_count < 0:
        raise ValueError("negative annotator count")
    if human_count > annotator_total:
        raise ValueError("count exceeds annotator total")
    return min(human_count / 3.0, 1.0)


@dataclass
class VQAExample:
    id: str
    question: str
    objects: np.ndarray  # (n_obj, d_obj)
    answers: list  # [(text, count), ...]
    explanation: str
    split: str

    @property
    def soft_scores(self):
        return {text: soft_score(count) for text, count in self.answers}

    def __eq__(self, other):
        return (self.id == other.id and self.question == other.question
                and np.array_equal(self.objects, other.objects)
                and self.answers == other.answers
                and self.explanation == other.explanation
                and self.split == other.split)


class Vocabulary:
    """Token <-> id map with reserved PAD/BOS/EOS/UNK slots."""

    def __init__(self, tokens):
        self.id_to_token = list(RESERVED_TOKENS) + list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise CorpusError("duplicate tokens in vocabulary")

    @classmethod
    def build(cls, texts):
        seen = set()
        for text in texts:
            seen.update(text.lower().split())
        return cls(sorted(seen))

    def __len__(self):
        return len(self.id_to_token)

    def encode_token(self, token):
        return self.token_to_id.get(token, UNK)

    def decode(self, ids):
        words = []
        for i in ids:
            if i in (PAD, BOS, EOS):
                continue
            words.append(self.id_to_token[i])
        return " ".join(words)


class AnswerSpace:
    """Stable ordered list of answer strings."""

    def __init__(self, answers):
        self.answers = list(answers)
        if len(set(self.answers)) != len(self.answers):
            raise CorpusError("duplicate answers in answer space")
        self.index = {a: i for i, a in enumerate(self.answers)}

    @classmethod
    def build(cls, examples):
        seen = set()
        for ex in examples:
            for text, _ in ex.answers:
                seen.add(text)
        return cls(sorted(seen))

    def __len__(self):
        return len(self.answers)

    def id_of(self, text):
        return self.index[text]


def tokenize(text, vocab, max_len=14):
    """Lowercase, whitespace-split, truncate, map OOV to UNK."""
    words = text.lower().split()[:max_len]
    return [vocab.encode_token(w) for w in words]


@dataclass
class GenConfig:
    seed: int = 1
    num_train: int = 5000
    num_test: int = 1000
    num_attributes: int = 32
    shortcut_strength: float = 0.5
    n_obj: int = 36
    d_obj: int = 64
    evidence_count: int = 4
    signal_scale: float = 2.6
    hint_credit_prob: float = 0.5
    num_question_templates: int = 4
    num_explanation_templates: int = 4

    def validate(self):
        if not 0.0 <= self.shortcut_strength <= 1.0:
            raise CorpusError("shortcut_strength must lie in [0, 1]")
        if self.evidence_count > self.n_obj:
            raise CorpusError("evidence_count exceeds n_obj")
        if self.num_attributes < 2:
            raise CorpusError("need at least two attributes")
        if min(self.num_train, self.num_test, self.n_obj, self.d_obj) < 1:
            raise CorpusError("all sizes must be positive")
        if not 1 <= self.num_question_templates <= len(QUESTION_TEMPLATES):
            raise CorpusError("num_question_templates out of range")
        if not 1 <= self.num_explanation_templates <= len(EXPLANATION_TEMPLATES):
            raise CorpusError("num_explanation_templates out of range")


def attribute_words(cfg):
    words = list(ATTRIBUTE_WORDS)
    while len(words) < cfg.num_attributes:
        words.append(f"material{len(words)}")
    return words[: cfg.num_attributes]


def attribute_prototypes(cfg):
    """Unit-norm prototype directions, fixed by the corpus seed."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    protos = rng.standard_normal((cfg.num_attributes, cfg.d_obj))
    return protos / np.linalg.norm(protos, axis=1, keepdims=True)


def generate_corpus(cfg):
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    words = attribute_words(cfg)
    protos = attribute_prototypes(cfg)
    k = cfg.num_attributes

    examples = []
    for split, count in (("train", cfg.num_train), ("test", cfg.num_test)):
        for i in range(count):
            z = int(rng.integers(k))
            if rng.random() < cfg.shortcut_strength:
                hint = z
            else:
                hint = int(rng.integers(k - 1))
                if hint >= z:
                    hint += 1
            q_tpl = QUESTION_TEMPLATES[rng.integers(cfg.num_question_templates)]
            x_tpl = EXPLANATION_TEMPLATES[rng.integers(cfg.num_explanation_templates)]
            answers = [(words[z], 3)]
            if hint != z and rng.random() < cfg.hint_credit_prob:
                answers.append((words[hint], 1))
            objects = rng.standard_normal((cfg.n_obj, cfg.d_obj))
            ev = rng.choice(cfg.n_obj, size=cfg.evidence_count, replace=False)
            objects[ev] += cfg.signal_scale * protos[z]
            examples.append(VQAExample(
                id=f"{split}-{i:05d}",
                question=q_tpl.format(hint=words[hint]),
                objects=objects,
                answers=answers,
                explanation=x_tpl.format(attr=words[z]),
                split=split,
            ))
    return examples


def train_split(examples):
    return [ex for ex in examples if ex.split == "train"]


def test_split(examples):
    return [ex for ex in examples if ex.split == "test"]


# ---------------------------------------------------------------------------
# JSONL persistence


def save_corpus(examples, path):
    with open(path, "w") as fh:
        for ex in examples:
            rec = {
                "id": ex.id,
                "question": ex.question,
                "objects": ex.objects.tolist(),
                "answers": [{"text": t, "count": c} for t, c in ex.answers],
                "explanation": ex.explanation,
                "split": ex.split,
            }
            fh.write(json.dumps(rec))
            fh.write("\n")


def load_corpus(path):
    examples = []
    shape = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {lineno}: invalid JSON ({exc})") from exc
            for key in ("id", "question", "objects", "answers", "explanation", "split"):
                if key not in rec:
                    raise CorpusError(f"line {lineno}: missing field {key!r}")
            if rec["split"] not in ("train", "test"):
                raise CorpusError(f"line {lineno}: bad split {rec['split']!r}")
            try:
                objects = np.array(rec["objects"], dtype=np.float64)
            except ValueError as exc:
                raise CorpusError(f"line {lineno}: ragged object matrix") from exc
            if objects.ndim != 2:
                raise CorpusError(f"line {lineno}: objects must be 2-D")
            if shape is None:
                shape = objects.shape
            elif objects.shape != shape:
                raise CorpusError(
                    f"line {lineno}: object shape {objects.shape} != {shape}")
            answers = []
            for a in rec["answers"]:
                if not isinstance(a, dict) or "text" not in a or "count" not in a:
                    raise CorpusError(f"line {lineno}: malformed answers entry")
                answers.append((a["text"], int(a["count"])))
            if not any(soft_score(c) > 0 for _, c in answers):
                raise CorpusError(f"line {lineno}: no answer with positive soft score")
            if rec["split"] == "train" and not rec["explanation"].strip():
                raise CorpusError(f"line {lineno}: train example without explanation")
            examples.append(VQAExample(
                id=rec["id"], question=rec["question"], objects=objects,
                answers=answers, explanation=rec["explanation"], split=rec["split"]))
    return examples


# ---------------------------------------------------------------------------
# exact oracles over the generative model


def hint_of(example, cfg):
    """Index of the hint attribute named in the question."""
    words = attribute_words(cfg)
    index = {w: i for i, w in enumerate(words)}
    hits = [index[w] for w in example.question.lower().split() if w in index]
    if len(hits) != 1:
        raise CorpusError(f"example {example.id}: expected exactly one hint word")
    return hits[0]


def explanation_attribute(example, cfg):
    """Index of the attribute stated in the explanation (oracle reader)."""
    words = attribute_words(cfg)
    index = {w: i for i, w in enumerate(words)}
    hits = [index[w] for w in example.explanation.lower().split() if w in index]
    if len(hits) != 1:
        raise CorpusError(f"example {example.id}: expected exactly one attribute word")
    return hits[0]


def posterior_from_inputs(example, cfg, protos=None):
    """Exact posterior over the latent attribute given question and objects.

    The evidence subset is unknown, so the object likelihood marginalizes
    over all subsets of the stated size; the sum reduces to an elementary
    symmetric polynomial of per-object likelihood ratios, evaluated by DP.
    """
    if protos is None:
        protos = attribute_prototypes(cfg)
    k = cfg.num_attributes
    alpha = cfg.signal_scale
    logw = alpha * (protos @ example.objects.T) - 0.5 * alpha * alpha  # (K, N)
    mx = logw.max(axis=1, keepdims=True)
    w = np.exp(logw - mx)
    m = cfg.evidence_count
    esym = np.zeros((k, m + 1))
    esym[:, 0] = 1.0
    for i in range(cfg.n_obj):
        for j in range(min(i + 1, m), 0, -1):
            esym[:, j] += w[:, i] * esym[:, j - 1]
    loglik = np.log(esym[:, m] + 1e-300) + m * mx[:, 0]

    hint = hint_of(example, cfg)
    s = cfg.shortcut_strength
    with np.errstate(divide="ignore"):
        logprior = np.full(k, np.log((1.0 - s) / (k - 1)) if s < 1.0 else -np.inf)
        logprior[hint] = np.log(s) if s > 0.0 else -np.inf
    logpost = logprior + loglik
    logpost -= logpost.max()
    post = np.exp(logpost)
    post /= post.sum()
    return post, hint


def bayes_accuracy(examples, cfg):
    """Soft-score accuracy of the exact posterior predictor, in percent.

    The predictor maximizes the expected soft score, which adds the partial
    hint credit on top of the attribute posterior.
    """
    protos = attribute_prototypes(cfg)
    words = attribute_words(cfg)
    total = 0.0
    for ex in examples:
        post, hint = posterior_from_inputs(ex, cfg, protos)
        escore = post.copy()
        escore[hint] += cfg.hint_credit_prob * (1.0 / 3.0) * (1.0 - post[hint])
        choice = int(np.argmax(escore))
        total += ex.soft_scores.get(words[choice], 0.0)
    return 100.0 * total / len(examples)
