"""Explanation-reweighted inference, ablation run modes, and reports.

Run modes
---------
base                  argmax of the base predictor; no explanations.
no-reweight           fine-tuned model, but the final answer ignores the
                      verification scores (argmax P).
reweighted-retrieved  P~(a) = P(a) * max member verification score, with
                      retrieved competing sets.
reweighted-generated  same, with sampled generator explanations.
fixed-vqa             reweighted-retrieved against a checkpoint whose VQA
                      side was frozen during fine-tuning.
human-rr              the correct answer's set is replaced by the
                      example's own human explanation.
human-ra              every candidate's set is replaced by human text:
                      the example's own explanation for the correct
                      answer, the nearest same-answer training
                      explanation for the others (interpretation flagged
                      in the report).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import encoders
from .autodiff import Tape
from .metrics import bleu4, rouge_l
from .predictor import topk_candidates
from .verifier import (verifier_projections, project_answer,
                       project_explanation, verify_head)

MODES = ("base", "no-reweight", "reweighted-retrieved", "reweighted-generated",
         "fixed-vqa", "human-rr", "human-ra")

RA_NOTE = ("human-ra substitutes, per candidate, the human explanation of "
           "the nearest same-answer training example; the correct answer "
           "uses the example's own explanation")


class MissingArtifact(Exception):
    pass


def reweight(dist_topk, s_max, flagged=()):
    """P~(a) = P(a) * s_max(a) over the candidate list.

    Every candidate needs an s_max entry; a candidate may instead be in
    `flagged` (empty competing set), which pins its score to 0.
    """
    out = []
    for aid, p in dist_topk:
        if aid in s_max:
            s = s_max[aid]
        elif aid in flagged:
            s = 0.0
        else:
            raise KeyError(f"candidate {aid} has no verification score and "
                           f"is not flagged")
        out.append((aid, p * s))
    return out


def final_answer(reweighted, best_members=None):
    """Argmax of the reweighted list, ties to the lower answer id."""
    if not reweighted:
        raise ValueError("empty candidate list")
    best_aid, _ = max(reweighted, key=lambda t: (t[1], -t[0]))
    member = None if best_members is None else best_members.get(best_aid)
    return best_aid, member


def vqa_accuracy(predictions, examples, answer_space):
    """Mean gold soft score of the predicted answers, in percent."""
    total = 0.0
    for ex in examples:
        if ex.id not in predictions:
            raise ValueError(f"missing prediction for example {ex.id}")
        text = answer_space.answers[predictions[ex.id]]
        total += ex.soft_scores.get(text, 0.0)
    return 100.0 * total / len(examples)


@dataclass
class EvalReport:
    mode: str
    accuracy: float
    num_examples: int
    mean_verification_score: float | None
    bleu4: float | None
    rouge_l: float | None
    per_answer_type: dict | None
    empty_set_candidates: int
    seed: int
    k_ans: int
    k_exp: int
    config_echo: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def _require_verifier(model):
    if "ver.head.w2" not in model.store:
        raise MissingArtifact("checkpoint has no verifier parameters; "
                              "run finetune first")


def _member_sets_for_mode(example, mode, cand_ids, model, ctx, generator,
                          seed, k_exp):
    """Token lists per candidate under the mode's explanation source."""
    exclude = example.split == "train"
    gold = model.gold_answer_id(example)
    own = model.explanation_tokens(example.explanation)
    sets = {}
    for aid in cand_ids:
        if mode in ("no-reweight", "reweighted-retrieved", "fixed-vqa"):
            sets[aid] = ctx.competing_set(example, aid, k=k_exp,
                                          exclude_self=exclude).token_lists()
        elif mode == "human-rr":
            if aid == gold and own:
                sets[aid] = [own]
            else:
                sets[aid] = ctx.competing_set(example, aid, k=k_exp,
                                              exclude_self=exclude).token_lists()
        elif mode == "human-ra":
            if aid == gold and own:
                sets[aid] = [own]
            else:
                sets[aid] = ctx.competing_set(example, aid, k=1,
                                              exclude_self=exclude).token_lists()
        else:
            raise ValueError(f"no member sets for mode {mode}")
    return sets


def _score_member_sets(model, q_np, v_np, sets):
    """Verification scores per candidate set for one example.

    Returns (s_max, best_tokens, best_score, flagged) where s_max maps
    answer ids to the max member score and flagged holds candidates with
    empty sets.
    """
    num_answers = len(model.answer_space)
    rows_tokens, rows_aid, offsets = [], [], {}
    for aid, token_lists in sets.items():
        offsets[aid] = (len(rows_tokens), len(token_lists))
        for toks in token_lists:
            rows_tokens.append(toks if toks else [0])
            rows_aid.append(aid)
    s_max, best_tokens, best_score = {}, {}, {}
    flagged = set()
    if rows_tokens:
        tape = Tape()
        L = tape.leaves_from(model.store)
        ids, lengths = encoders.pad_token_batch(rows_tokens)
        phi = encoders.encode_explanation_batch(tape, L, ids, lengths)
        n = len(rows_tokens)
        onehot = np.zeros((n, num_answers))
        onehot[np.arange(n), rows_aid] = 1.0
        fq, fv = verifier_projections(
            tape, L,
            tape.const(np.repeat(q_np[None], n, axis=0)),
            tape.const(np.repeat(v_np[None], n, axis=0)))
        fa = project_answer(tape, L, onehot)
        fx = project_explanation(tape, L, phi)
        scores = verify_head(tape, L, fq, fv, fa, fx).value
    for aid, token_lists in sets.items():
        start, count = offsets[aid]
        if count == 0:
            flagged.add(aid)
            continue
        chunk = scores[start : start + count]
        best = int(np.argmax(chunk))
        s_max[aid] = float(chunk[best])
        best_tokens[aid] = token_lists[best]
        best_score[aid] = float(chunk[best])
    return s_max, best_tokens, best_score, flagged


def evaluate(examples, model, ctx=None, mode="base", k_ans=10, k_exp=8,
             generator=None, seed=0, dump_path=None, batch_size=64):
    """Run one evaluation mode over a split and assemble the report."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {MODES}")
    if mode != "base":
        _require_verifier(model)
        if ctx is None:
            raise MissingArtifact(f"mode {mode} needs an explanation index")
    if mode == "reweighted-generated" and generator is None:
        raise MissingArtifact("mode reweighted-generated needs a generator "
                              "checkpoint")
    if mode == "fixed-vqa" and not model.store.meta.get("fixed_vqa"):
        raise MissingArtifact("mode fixed-vqa needs a checkpoint fine-tuned "
                              "with --fixed-vqa")

    num_answers = len(model.answer_space)
    k_ans_eff = min(k_ans, num_answers)
    records = []
    predictions = {}
    ver_scores, bleus, rouges = [], [], []
    empty_count = 0

    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        tape = Tape()
        L = tape.leaves_from(model.store)
        nodes = model.base_forward(tape, L, chunk)
        scores_np = nodes["scores"].value
        q_np = nodes["q"].value
        v_np = nodes["v"].value

        for bi, ex in enumerate(chunk):
            idx = start + bi
            dist_topk = topk_candidates(scores_np[bi], k_ans_eff)
            flags = []
            if mode == "base":
                chosen = dist_topk[0][0]
                rec_topk = [{"answer": model.answer_space.answers[aid],
                             "p": p, "s_max": None, "p_tilde": None}
                            for aid, p in dist_topk]
                expl_text = None
            else:
                cand_ids = [aid for aid, _ in dist_topk]
                if mode == "reweighted-generated":
                    from .verifier import retrieved_member_tokens
                    provider = retrieved_member_tokens(ctx, k_exp)
                    from .generator import sample_explanation_set
                    sets = sample_explanation_set(
                        generator, ex, cand_ids, provider, n=k_exp,
                        seed=int(np.random.SeedSequence([seed, idx])
                                 .generate_state(1)[0]))
                else:
                    sets = _member_sets_for_mode(ex, mode, cand_ids, model,
                                                 ctx, generator, seed, k_exp)
                s_max, best_tokens, _, flagged = _score_member_sets(
                    model, q_np[bi], v_np[bi], sets)
                empty_count += len(flagged)
                tilde = reweight(dist_topk, s_max, flagged)
                if mode == "no-reweight":
                    chosen = dist_topk[0][0]
                else:
                    chosen, _ = final_answer(tilde)
                expl_tokens = best_tokens.get(chosen)
                expl_text = (model.vocab.decode(expl_tokens)
                             if expl_tokens is not None else None)
                if chosen in s_max:
                    ver_scores.append(s_max[chosen])
                if expl_tokens is not None and ex.explanation:
                    ref = model.explanation_tokens(ex.explanation)
                    bleus.append(bleu4(expl_tokens, [ref]))
                    rouges.append(rouge_l(expl_tokens, ref))
                smax_by = {aid: s_max.get(aid) for aid, _ in dist_topk}
                tilde_by = dict(tilde)
                rec_topk = [{"answer": model.answer_space.answers[aid],
                             "p": p, "s_max": smax_by[aid],
                             "p_tilde": tilde_by[aid]}
                            for aid, p in dist_topk]
                flags = sorted(model.answer_space.answers[a] for a in flagged)

            predictions[ex.id] = chosen
            records.append({
                "id": ex.id,
                "mode": mode,
                "topk": rec_topk,
                "chosen": model.answer_space.answers[chosen],
                "explanation_text": expl_text,
                "gold_score_of_chosen": ex.soft_scores.get(
                    model.answer_space.answers[chosen], 0.0),
                "flags": flags,
            })

    accuracy = vqa_accuracy(predictions, examples, model.answer_space)
    notes = [RA_NOTE] if mode == "human-ra" else []
    report = EvalReport(
        mode=mode,
        accuracy=accuracy,
        num_examples=len(examples),
        mean_verification_score=(float(np.mean(ver_scores))
                                 if ver_scores else None),
        bleu4=float(np.mean(bleus)) if bleus else None,
        rouge_l=float(np.mean(rouges)) if rouges else None,
        per_answer_type=None,
        empty_set_candidates=empty_count,
        seed=seed,
        k_ans=k_ans,
        k_exp=k_exp,
        config_echo={"checkpoint_meta": _jsonable(model.store.meta)},
        notes=notes,
    )
    if dump_path is not None:
        with open(dump_path, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True))
                fh.write("\n")
    return report, records


def _jsonable(obj):
    return json.loads(json.dumps(obj, default=str))
