"""Command-line entry point for the full pipeline.

Subcommands: gen-corpus, pretrain, build-index, finetune, train-generator,
infer, eval, gradcheck.  Every subcommand derives all randomness from
--seed, echoes its effective configuration into the artifacts it writes,
and exits 0 on success, 2 on usage errors, 1 on runtime failures (with a
single machine-parsable error line on stderr).
"""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

CONFIG_KEYS = {"lr", "batch_size", "epochs", "hidden", "seed"}


def _load_config(path):
    """key=value config file; unknown keys are rejected."""
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, _, raw = line.partition("=")
            key = key.strip()
            if key not in CONFIG_KEYS:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            raw = raw.strip()
            values[key] = int(raw) if key in ("batch_size", "epochs", "hidden",
                                              "seed") else float(raw)
    return values


def _add_common(p, out=True):
    p.add_argument("--seed", type=int, default=1)
    if out:
        p.add_argument("--out", required=True)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="verivqa",
        description="Answer verification with competing explanations.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate a synthetic corpus")
    _add_common(p)
    p.add_argument("--num-train", type=int, default=5000)
    p.add_argument("--num-test", type=int, default=1000)
    p.add_argument("--attributes", type=int, default=32)
    p.add_argument("--shortcut", type=float, default=0.5)
    p.add_argument("--n-obj", type=int, default=36)
    p.add_argument("--d-obj", type=int, default=64)
    p.add_argument("--evidence", type=int, default=4)
    p.add_argument("--signal", type=float, default=2.6)

    p = sub.add_parser("pretrain", help="train the base answer predictor")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--log", default=None)

    p = sub.add_parser("build-index", help="embed the train split for retrieval")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("finetune", help="verification fine-tuning")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=10.0)
    p.add_argument("--vqae-weight", type=float, default=0.1)
    p.add_argument("--k-exp", type=int, default=8)
    p.add_argument("--fixed-vqa", action="store_true")
    p.add_argument("--explanations", choices=("retrieved", "generated"),
                   default="retrieved")
    p.add_argument("--generator", default=None)
    p.add_argument("--log", default=None)

    p = sub.add_parser("train-generator", help="train the explanation generator")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--epochs", type=int, default=25)
    p.add_argument("--k-exp", type=int, default=8)
    p.add_argument("--log", default=None)

    for name, help_text in (("infer", "dump per-example predictions"),
                            ("eval", "evaluate a run mode and write a report")):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        p.add_argument("--corpus", required=True)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--index", default=None)
        p.add_argument("--mode", default="base",
                       choices=("base", "no-reweight", "reweighted-retrieved",
                                "reweighted-generated", "fixed-vqa",
                                "human-rr", "human-ra"))
        p.add_argument("--split", default="test", choices=("train", "test"))
        p.add_argument("--k-ans", type=int, default=10)
        p.add_argument("--k-exp", type=int, default=8)
        p.add_argument("--generator", default=None)
        if name == "eval":
            p.add_argument("--dump", default=None)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--points", type=int, default=100)
    p.add_argument("--out", default=None)
    return parser


def _resolve_train_config(args, defaults):
    from .predictor import TrainConfig

    values = dict(defaults)
    if args.config:
        values.update(_load_config(args.config))
    for key, attr in (("lr", "lr"), ("batch_size", "batch"),
                      ("epochs", "epochs"), ("hidden", "hidden")):
        flag = getattr(args, attr, None)
        if flag is not None:
            values[key] = flag
    values["seed"] = args.seed
    return TrainConfig(**values)


def _open_log(path):
    records = []
    return records, (records.append if path else None)


def _write_log(records, path):
    if path:
        from .verifier import write_training_log
        write_training_log(records, path)


def _load_model(path):
    import os

    from .model import Model
    from .params import load_checkpoint

    if not os.path.exists(path):
        raise FileNotFoundError(f"missing checkpoint: {path}")
    store, _ = load_checkpoint(path)
    return Model.from_store(store)


def _load_index_file(path):
    import os

    from .retrieval import load_index

    if not os.path.exists(path):
        raise FileNotFoundError(f"missing index: {path}")
    return load_index(path)


def run(argv):
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.command == "gen-corpus":
        from .corpus import GenConfig, generate_corpus, save_corpus

        cfg = GenConfig(seed=args.seed, num_train=args.num_train,
                        num_test=args.num_test, num_attributes=args.attributes,
                        shortcut_strength=args.shortcut, n_obj=args.n_obj,
                        d_obj=args.d_obj, evidence_count=args.evidence,
                        signal_scale=args.signal)
        save_corpus(generate_corpus(cfg), args.out)
        print(f"wrote corpus to {args.out}")
        return 0

    if args.command == "pretrain":
        from .corpus import load_corpus
        from .params import save_checkpoint
        from .predictor import TrainConfig, pretrain

        corpus = load_corpus(args.corpus)
        hyper = _resolve_train_config(args, TrainConfig().to_dict())
        records, log = _open_log(args.log)
        model = pretrain(corpus, hyper, log=log or (lambda rec: print(
            f"epoch {rec['epoch']}: loss {rec['train_loss']:.4f} "
            f"heldout {rec['heldout_accuracy']}")))
        _write_log(records, args.log)
        save_checkpoint(model.store, args.out)
        print(f"wrote checkpoint to {args.out}")
        return 0

    if args.command == "build-index":
        from .corpus import load_corpus
        from .retrieval import build_index, save_index

        corpus = load_corpus(args.corpus)
        model = _load_model(args.checkpoint)
        index = build_index(corpus, model)
        save_index(index, args.out)
        print(f"wrote index ({len(index)} rows) to {args.out}")
        return 0

    if args.command == "finetune":
        from .corpus import load_corpus
        from .params import save_checkpoint
        from .verifier import FinetuneConfig, finetune

        corpus = load_corpus(args.corpus)
        model = _load_model(args.checkpoint)
        index = _load_index_file(args.index)
        values = {}
        if args.config:
            values.update(_load_config(args.config))
        hyper = FinetuneConfig(
            lr=args.lr if args.lr is not None else values.get("lr", 5e-4),
            verifier_lr=args.lr if args.lr is not None else values.get("lr", 5e-4),
            batch_size=args.batch if args.batch is not None
            else values.get("batch_size", 64),
            epochs=args.epochs if args.epochs is not None
            else values.get("epochs", 40),
            seed=args.seed, lam=args.lam, vqae_weight=args.vqae_weight,
            k_exp=args.k_exp, fixed_vqa=args.fixed_vqa,
            explanations=args.explanations)
        member_tokens = None
        if args.explanations == "generated":
            member_tokens = _generated_member_tokens(args, model, index)
        records, log = _open_log(args.log)
        tuned = finetune(corpus, index, model.store, hyper, log=log,
                         member_tokens=member_tokens)
        _write_log(records, args.log)
        save_checkpoint(tuned.store, args.out)
        print(f"wrote checkpoint to {args.out}")
        return 0

    if args.command == "train-generator":
        from .corpus import load_corpus
        from .generator import GeneratorTrainConfig, train_generator
        from .params import save_checkpoint

        corpus = load_corpus(args.corpus)
        model = _load_model(args.checkpoint)
        index = _load_index_file(args.index)
        hyper = GeneratorTrainConfig(lr=args.lr, batch_size=args.batch,
                                     epochs=args.epochs, seed=args.seed,
                                     k_exp=args.k_exp)
        records, log = _open_log(args.log)
        gen = train_generator(corpus, index, model, hyper, log=log)
        _write_log(records, args.log)
        save_checkpoint(gen.store, args.out)
        print(f"wrote generator checkpoint to {args.out}")
        return 0

    if args.command in ("infer", "eval"):
        from .corpus import load_corpus, test_split, train_split
        from .evaluate import evaluate
        from .retrieval import RetrievalContext

        corpus = load_corpus(args.corpus)
        examples = (test_split if args.split == "test" else train_split)(corpus)
        model = _load_model(args.checkpoint)
        ctx = None
        if args.mode != "base":
            if args.index is None:
                raise FileNotFoundError("missing index: --index is required "
                                        f"for mode {args.mode}")
            ctx = RetrievalContext(_load_index_file(args.index), model)
        generator = None
        if args.mode == "reweighted-generated":
            if args.generator is None:
                raise FileNotFoundError("missing generator checkpoint: "
                                        "--generator is required")
            from .generator import GeneratorModel
            from .params import load_checkpoint
            gstore, _ = load_checkpoint(args.generator)
            generator = GeneratorModel(gstore, model)
        dump = args.out if args.command == "infer" else getattr(args, "dump", None)
        report, _ = evaluate(examples, model, ctx=ctx, mode=args.mode,
                             k_ans=args.k_ans, k_exp=args.k_exp,
                             generator=generator, seed=args.seed,
                             dump_path=dump)
        if args.command == "eval":
            with open(args.out, "w") as fh:
                fh.write(report.to_json())
                fh.write("\n")
            print(f"mode {args.mode}: accuracy {report.accuracy:.2f} "
                  f"({report.num_examples} examples) -> {args.out}")
        else:
            print(f"mode {args.mode}: wrote predictions to {args.out}")
        return 0

    if args.command == "gradcheck":
        from .gradcheck import run_gradcheck

        table = run_gradcheck(seed=args.seed, points=args.points)
        width = max(len(name) for name, _ in table)
        ok = True
        for name, err in table:
            status = "ok" if err <= 1e-4 else "FAIL"
            print(f"{name:<{width}}  {err:.3e}  {status}")
            ok = ok and err <= 1e-4
        if args.out:
            with open(args.out, "w") as fh:
                json.dump({"seed": args.seed, "points": args.points,
                           "max_rel_error": {n: e for n, e in table}},
                          fh, sort_keys=True, indent=2)
                fh.write("\n")
        if not ok:
            raise RuntimeError("gradient check exceeded 1e-4")
        return 0

    raise AssertionError(f"unhandled command {args.command}")


def _generated_member_tokens(args, model, index):
    from .generator import GeneratorModel, sample_explanation_set
    from .params import load_checkpoint
    from .retrieval import RetrievalContext
    from .verifier import retrieved_member_tokens

    if args.generator is None:
        raise FileNotFoundError("missing generator checkpoint: --generator is "
                                "required with --explanations generated")
    gstore, _ = load_checkpoint(args.generator)
    gen = GeneratorModel(gstore, model)
    ctx = RetrievalContext(index, model)
    provider = retrieved_member_tokens(ctx, args.k_exp)
    cache = {}

    def member_tokens(example, answer_id):
        key = (example.id, answer_id)
        if key not in cache:
            sets = sample_explanation_set(
                gen, example, [answer_id], provider, n=args.k_exp,
                seed=int(np.random.SeedSequence(
                    [args.seed, hash(example.id) & 0x7FFFFFFF]).generate_state(1)[0]))
            cache[key] = sets[answer_id]
        return cache[key]

    return member_tokens


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        return run(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 0
    except Exception as exc:
        message = str(exc).replace("\n", " ")
        print(f"error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
