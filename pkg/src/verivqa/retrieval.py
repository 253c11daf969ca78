"""Training-set explanation index and filtered nearest-neighbor retrieval.

The index stores one row per training example: its joint q*v embedding
under a fixed checkpoint, its answer soft scores, and its explanation
token ids.  Retrieval for an answer candidate keeps rows whose soft score
for that answer exceeds 0.6 (strict), sorts by L2 distance with ties
broken by example id, and returns the closest k.  Queries must be
embedded by the same checkpoint the index was built from; this is
enforced through a content fingerprint.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import encoders
from .autodiff import Tape
from .corpus import train_split
from .model import retrieval_view, retrieval_fingerprint

SOFT_FILTER = 0.6
INDEX_VERSION = 1


class StaleIndexError(Exception):
    pass


class IndexFormatError(Exception):
    pass


@dataclass
class CompetingSet:
    """Up to k supporting explanations for one answer candidate."""
    answer_id: int
    members: list  # [(token_ids, source_example_id, distance), ...] ascending

    def __len__(self):
        return len(self.members)

    def token_lists(self):
        return [m[0] for m in self.members]


class ExplanationIndex:
    def __init__(self, embeddings, ids, answer_scores, expl_tokens, fingerprint):
        self.embeddings = np.asarray(embeddings, dtype=np.float64)
        self.ids = list(ids)
        self.answer_scores = list(answer_scores)  # one dict answer_id -> score per row
        self.expl_tokens = [list(t) for t in expl_tokens]
        self.fingerprint = fingerprint
        if not (len(self.ids) == len(self.answer_scores)
                == len(self.expl_tokens) == self.embeddings.shape[0]):
            raise IndexFormatError("row collections disagree in length")
        self._id_rank = {ex_id: i for i, ex_id in enumerate(sorted(self.ids))}
        self._eligible_cache = {}

    def __len__(self):
        return len(self.ids)

    def eligible_rows(self, answer_id):
        rows = self._eligible_cache.get(answer_id)
        if rows is None:
            rows = np.array([i for i, sc in enumerate(self.answer_scores)
                             if sc.get(answer_id, 0.0) > SOFT_FILTER], dtype=np.int64)
            self._eligible_cache[answer_id] = rows
        return rows


def embed_queries(store, examples, model):
    """Joint q*v embeddings for a list of examples under `store`."""
    out = np.empty((len(examples), model.cfg.hidden))
    for start in range(0, len(examples), 256):
        chunk = examples[start : start + 256]
        tape = Tape()
        L = tape.leaves_from(store)
        ids, lengths = encoders.pad_token_batch(
            [model.question_tokens(ex) for ex in chunk])
        objects = np.stack([ex.objects for ex in chunk])
        q = encoders.encode_question_batch(tape, L, ids, lengths)
        v, _ = encoders.encode_visual_batch(tape, L, objects, q)
        qp = encoders.project_question(tape, L, q)
        out[start : start + len(chunk)] = encoders.qv_embedding(qp, v).value
    return out


def build_index(corpus, model):
    """One embedding pass over the train split under the model's retrieval
    parameters (the pretraining encoders)."""
    train = train_split(corpus)
    if not train:
        raise ValueError("cannot build an index from an empty train split")
    view = retrieval_view(model.store)
    emb = embed_queries(view, train, model)
    answer_scores = []
    for ex in train:
        answer_scores.append({model.answer_space.id_of(t): ex.soft_scores[t]
                              for t, _ in ex.answers})
    tokens = [model.explanation_tokens(ex.explanation) for ex in train]
    return ExplanationIndex(emb, [ex.id for ex in train], answer_scores,
                            tokens, retrieval_fingerprint(model.store))


def retrieve(index, query_embedding, answer_id, k=8, exclude_id=None):
    """Exact filtered k-NN: soft score strictly above 0.6, L2 order, ties
    by ascending example id, the query's own row excluded."""
    rows = index.eligible_rows(answer_id)
    if exclude_id is not None and rows.size:
        keep = [i for i in rows if index.ids[i] != exclude_id]
        rows = np.array(keep, dtype=np.int64)
    if rows.size == 0:
        return CompetingSet(answer_id, [])
    diff = index.embeddings[rows] - np.asarray(query_embedding)
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    ranks = np.array([index._id_rank[index.ids[i]] for i in rows])
    order = np.lexsort((ranks, dist))[:k]
    members = [(index.expl_tokens[rows[j]], index.ids[rows[j]], float(dist[j]))
               for j in order]
    return CompetingSet(answer_id, members)


class RetrievalContext:
    """Binds an index to a checkpoint, validating the fingerprint once.

    Query embeddings use the frozen pretraining encoders carried by the
    checkpoint, so they match the index rows; lookups are memoized per
    (example, answer) pair.
    """

    def __init__(self, index, model):
        expected = retrieval_fingerprint(model.store)
        if index.fingerprint != expected:
            raise StaleIndexError(
                f"index fingerprint {index.fingerprint[:12]}... does not match "
                f"checkpoint retrieval fingerprint {expected[:12]}...")
        self.index = index
        self.model = model
        self._view = retrieval_view(model.store)
        self._query_cache = {}
        self._set_cache = {}

    def query_embedding(self, example):
        emb = self._query_cache.get(example.id)
        if emb is None:
            emb = embed_queries(self._view, [example], self.model)[0]
            self._query_cache[example.id] = emb
        return emb

    def prime_queries(self, examples):
        emb = embed_queries(self._view, examples, self.model)
        for ex, e in zip(examples, emb):
            self._query_cache[ex.id] = e

    def competing_set(self, example, answer_id, k=8, exclude_self=True):
        key = (example.id, answer_id, k, exclude_self)
        cs = self._set_cache.get(key)
        if cs is None:
            cs = retrieve(self.index, self.query_embedding(example), answer_id,
                          k=k, exclude_id=example.id if exclude_self else None)
            self._set_cache[key] = cs
        return cs


def competing_sets_for(example, ctx, scores, k_ans=10, k_exp=8, exclude_self=True):
    """Top-k answer candidates each paired with their retrieved set."""
    from .predictor import topk_candidates

    cands = topk_candidates(scores, min(k_ans, len(scores)))
    return {aid: ctx.competing_set(example, aid, k=k_exp, exclude_self=exclude_self)
            for aid, _ in cands}


# ---------------------------------------------------------------------------
# persistence: JSON header line, packed embeddings, then row metadata JSONL


def save_index(index, path):
    emb = np.ascontiguousarray(index.embeddings, dtype="<f8")
    header = {
        "index_version": INDEX_VERSION,
        "fingerprint": index.fingerprint,
        "rows": int(emb.shape[0]),
        "dim": int(emb.shape[1]),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode())
        fh.write(b"\n")
        fh.write(emb.tobytes())
        for i in range(emb.shape[0]):
            rec = {
                "id": index.ids[i],
                "answer_scores": {str(a): s for a, s in index.answer_scores[i].items()},
                "expl_tokens": index.expl_tokens[i],
            }
            fh.write(json.dumps(rec, sort_keys=True).encode())
            fh.write(b"\n")


def load_index(path):
    with open(path, "rb") as fh:
        try:
            header = json.loads(fh.readline().decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise IndexFormatError(f"unreadable index header: {exc}") from exc
        if header.get("index_version") != INDEX_VERSION:
            raise IndexFormatError(
                f"unsupported index version {header.get('index_version')}")
        rows, dim = header["rows"], header["dim"]
        raw = fh.read(rows * dim * 8)
        if len(raw) != rows * dim * 8:
            raise IndexFormatError("truncated embedding payload")
        emb = np.frombuffer(raw, dtype="<f8").reshape(rows, dim).copy()
        ids, answer_scores, tokens = [], [], []
        for _ in range(rows):
            rec = json.loads(fh.readline().decode())
            ids.append(rec["id"])
            answer_scores.append({int(a): s for a, s in rec["answer_scores"].items()})
            tokens.append(rec["expl_tokens"])
    return ExplanationIndex(emb, ids, answer_scores, tokens, header["fingerprint"])
