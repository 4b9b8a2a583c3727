"""Command-line entry point: ``readfuse <command> [options]``.

Every command accepts ``--config FILE`` (JSON object of option values); options
given on the command line take precedence.  The resolved configuration is
echoed to stderr as one JSON line before any work starts.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import data
from .data import ExternalWordSet, ToyTaskSpec, Vocabulary
from .evaluation import (ModelEntry, bleu, discriminator_metrics, global_scores, sweep,
                         translate)
from .model import VARIANTS, get_variant
from .seq2seq import ModelConfig
from .training import (Checkpoint, TrainConfig, gradient_check, load_checkpoint, save_checkpoint,
                       train)

log = logging.getLogger("readfuse")


class CommandError(Exception):
    pass


# -- files written by datagen -------------------------------------------------------

def _paths(root: Path) -> dict[str, Path]:
    return {
        "train": root / "train.txt", "test": root / "test.txt",
        "train_ext": root / "train.ext.jsonl", "test_ext": root / "test.ext.jsonl",
        "src_vocab": root / "src.vocab", "tgt_vocab": root / "tgt.vocab",
        "lexicon": root / "lexicon.tsv", "manifest": root / "manifest.json",
    }


def _write_vocab(path: Path, vocab: Vocabulary) -> None:
    path.write_text("".join(t + "\n" for t in vocab.to_list()), encoding="utf-8")


def _read_vocab(path: Path) -> Vocabulary:
    return Vocabulary.from_list(path.read_text(encoding="utf-8").split("\n")[:-1])


@contextmanager
def _outputs(*paths):
    """Remove the listed files if the body fails."""
    try:
        yield
    except BaseException:
        for p in paths:
            if p is not None and Path(p).exists():
                Path(p).unlink()
        raise


# -- commands ---------------------------------------------------------------------

def cmd_datagen(a) -> None:
    spec = ToyTaskSpec(source_vocab_size=a.vocab_size, min_len=a.min_len, max_len=a.max_len,
                       swap_prob=a.swap_prob, form_noise=a.form_noise,
                       corpus_size=a.size + a.test_size, seed=a.seed)
    pairs = data.generate_toy_corpus(spec)
    train_pairs, test_pairs = pairs[: a.size], pairs[a.size:]
    sv = data.build_vocabulary([s for s, _ in pairs], a.vocab_size * 4 + 5)
    tv = data.build_vocabulary([t for _, t in pairs], a.vocab_size * 4 + 5)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    p = _paths(out)
    with _outputs(*p.values()):
        data.write_corpus(p["train"], train_pairs)
        data.write_corpus(p["test"], test_pairs)
        _write_vocab(p["src_vocab"], sv)
        _write_vocab(p["tgt_vocab"], tv)
        enc_train = data.encode_pairs(train_pairs, sv, tv)
        enc_test = data.encode_pairs(test_pairs, sv, tv)
        data.write_external(p["train_ext"], [t.external for t in
                                             data.synthesize_dataset(enc_train, tv, a.v_ratio, seed=a.seed)], tv)
        data.write_external(p["test_ext"], [t.external for t in
                                            data.synthesize_dataset(enc_test, tv, a.v_ratio, seed=a.seed + 1)], tv)
        data.build_toy_lexicon(spec, seed=a.seed).save(p["lexicon"])
        p["manifest"].write_text(json.dumps({"spec": vars(spec), "checksum": spec.checksum(pairs),
                                             "train": len(train_pairs), "test": len(test_pairs)},
                                            indent=1, default=str))
    print(f"wrote {len(train_pairs)} training and {len(test_pairs)} test pairs to {out} "
          f"(checksum {spec.checksum(pairs)[:12]})")


def _load_split(root: Path, split: str):
    p = _paths(root)
    for key in (split, f"{split}_ext", "src_vocab", "tgt_vocab"):
        if not p[key].exists():
            raise CommandError(f"missing data file {p[key]} (run datagen first)")
    sv, tv = _read_vocab(p["src_vocab"]), _read_vocab(p["tgt_vocab"])
    pairs = data.encode_pairs(data.read_corpus(p[split]), sv, tv)
    ext = data.read_external(p[f"{split}_ext"], tv)
    if len(ext) != len(pairs):
        raise CommandError(f"{p[split]} and {p[split + '_ext']} differ in length")
    return pairs, ext, sv, tv


def cmd_train(a) -> None:
    pairs, ext, sv, tv = _load_split(Path(a.data), "train")
    triples = [data.TrainingTriple(p, e) for p, e in zip(pairs, ext)]
    mcfg = ModelConfig(len(sv), len(tv), emb=a.emb, hidden=a.hidden, attn=a.attn)
    tcfg = TrainConfig(flag=a.flag, lambda_global=a.lambda_global, lambda_local=a.lambda_local,
                       batch_size=a.batch_size, epochs=a.epochs, seed=a.seed)
    out = Path(a.out)
    trace_path = out.with_name(out.name + ".trace.jsonl")
    with _outputs(out, trace_path):
        with trace_path.open("w") as fh:
            def on_epoch(epoch, record):
                fh.write(json.dumps(record) + "\n")
                fh.flush()
                print(f"epoch {epoch}: " + " ".join(f"{k}={v:.4f}" for k, v in record.items() if k != "epoch"),
                      file=sys.stderr)
            result = train(triples, tv, mcfg, tcfg, on_epoch=on_epoch)
        save_checkpoint(out, Checkpoint(result.params, mcfg, vars(tcfg), sv, tv,
                                        {"data": str(a.data), "trace": result.trace}))
    print(f"wrote {out}")


def _open_checkpoint(path) -> Checkpoint:
    if not Path(path).exists():
        raise CommandError(f"checkpoint {path} not found")
    return load_checkpoint(path)


def _read_external_file(path, n: int, vocab: Vocabulary) -> list[ExternalWordSet]:
    sets = data.read_external(path, vocab)
    if len(sets) != n:
        raise CommandError(f"{path} has {len(sets)} external sets for {n} sentences")
    return sets


def _fmt_trace(res, vocab: Vocabulary, ext: ExternalWordSet | None) -> str:
    parts = []
    if res.global_scores is not None and ext is not None:
        parts.append("D: " + " ".join(f"{vocab.token(w)}={d:.2f}" for w, d in zip(ext.words, res.global_scores)))
    if res.betas:
        parts.append("beta: " + " ".join(f"{b:.2f}" for b in res.betas))
    return " | ".join(parts)


def cmd_translate(a) -> None:
    ck = _open_checkpoint(a.checkpoint)
    lines = Path(a.input).read_text(encoding="utf-8").splitlines()
    sources = []
    for k, line in enumerate(lines):
        words = line.split("|||")[0].split()
        if not words:
            raise CommandError(f"{a.input}:{k + 1}: empty source sentence")
        sources.append(ck.src_vocab.encode(words))
    ext = _read_external_file(a.external, len(sources), ck.tgt_vocab) if a.external else None
    res = translate(ck.params, ck.variant, ck.tgt_vocab, sources, ext, beam_width=a.beam)
    text = "".join(" ".join(ck.tgt_vocab.decode(r.tokens)) + "\n" for r in res)
    if a.output:
        with _outputs(a.output):
            Path(a.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if a.trace:
        for i, r in enumerate(res):
            print(f"[{i}] {'' if r.finished else '(unfinished) '}{_fmt_trace(r, ck.tgt_vocab, ext[i] if ext else None)}",
                  file=sys.stderr)


def cmd_evaluate(a) -> None:
    ck = _open_checkpoint(a.checkpoint)
    pairs, ext, _, tv = _load_split(Path(a.data), a.split)
    if tv != ck.tgt_vocab:
        raise CommandError("target vocabulary of the data does not match the checkpoint")
    refs = [p.target for p in pairs]
    res = translate(ck.params, ck.variant, tv, [p.source for p in pairs],
                    None if a.no_external else ext, beam_width=a.beam, references=refs)
    hyps = [tv.decode(r.tokens) for r in res]
    report = bleu(hyps, [tv.decode(t) for t in refs])
    out = {"flag": ck.variant.name, "bleu": round(report.bleu, 4), "bp": round(report.brevity_penalty, 4),
           "precisions": [round(p, 4) for p in report.precisions],
           "hyp_len": report.hyp_len, "ref_len": report.ref_len,
           "unfinished": sum(not r.finished for r in res)}
    if ck.variant.global_mode == "learned" and not a.no_external:
        scores, labels = global_scores(ck.params, ck.variant, tv, pairs, ext)
        m = discriminator_metrics(scores, labels)
        out.update(precision=round(m.precision, 4), recall=round(m.recall, 4), f1=round(m.f1, 4))
    print(json.dumps(out))
    if a.hypotheses:
        with _outputs(a.hypotheses):
            Path(a.hypotheses).write_text("".join(" ".join(h) + "\n" for h in hyps), encoding="utf-8")


def cmd_sweep(a) -> None:
    root = Path(a.data)
    pairs, _, sv, tv = _load_split(root, "test")
    models = {}
    for item in a.checkpoint:
        name, _, path = item.rpartition("=")
        ck = _open_checkpoint(path)
        if ck.tgt_vocab != tv:
            raise CommandError(f"{path}: target vocabulary does not match {root}")
        models[name or ck.variant.name] = ModelEntry(ck.params, ck.variant)
    if a.limit:
        pairs = pairs[: a.limit]
    if a.mode == "ratio":
        grid = [(v, p) for v in a.v_ratios for p in a.p_ratios]
        report = sweep(models, pairs, tv, grid=grid, seed=a.seed, beam_width=a.beam)
    else:
        lex_path = _paths(root)["lexicon"]
        lexicon = data.NoisyLexicon.load(lex_path) if lex_path.exists() else None
        report = sweep(models, pairs, tv, scenarios=a.scenarios, lexicon=lexicon, src_vocab=sv,
                       seed=a.seed, beam_width=a.beam)
    text = report.to_text()
    if a.out:
        out = Path(a.out)
        jl = out.with_suffix(".jsonl")
        with _outputs(out, jl):
            out.write_text(text)
            jl.write_text(report.to_jsonl())
    sys.stdout.write(text)


def cmd_gradcheck(a) -> None:
    flags = list(VARIANTS) if a.flag == "all" else [a.flag]
    worst = 0.0
    for f in flags:
        err = gradient_check(f, sample_count=a.samples, seed=a.seed)
        worst = max(worst, err)
        print(f"{f:<14} max relative error {err:.3e}")
    if worst >= a.tolerance:
        raise CommandError(f"gradient check failed: {worst:.3e} >= {a.tolerance:g}")


def cmd_repl(a, stdin=None) -> None:
    stdin = stdin or sys.stdin
    ck = _open_checkpoint(a.checkpoint)
    sv, tv = ck.src_vocab, ck.tgt_vocab
    print("enter a source sentence; then suggest target words, one line at a time. "
          "An empty line starts a new sentence.")
    src, words = None, []
    for line in stdin:
        toks = line.split()
        if not toks:
            src, words = None, []
            continue
        if src is None:
            unknown = [t for t in toks if t not in sv]
            if unknown:
                log.warning("unknown source words mapped to <unk>: %s", " ".join(unknown))
            src = sv.encode(toks)
        else:
            for t in toks:
                if t not in tv or tv.id(t) < len(data.RESERVED):
                    log.warning("suggestion %r is not a target word; mapped to <unk>", t)
                    t = data.UNK
                if tv.id(t) not in words:
                    words.append(tv.id(t))
        ext = ExternalWordSet(tuple(words), tv.null_id, "user") if words else None
        res = translate(ck.params, ck.variant, tv, [src], [ext] if ext else None, beam_width=a.beam)[0]
        print(" ".join(tv.decode(res.tokens)))
        trace = _fmt_trace(res, tv, ext)
        if trace:
            print("  " + trace)


# -- argument parsing ---------------------------------------------------------------

def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="readfuse", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def command(name, fn, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="JSON file of option values; command-line options win")
        p.set_defaults(func=fn)
        return p

    p = command("datagen", cmd_datagen, "generate the toy corpus and synthetic external words")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--size", type=int, default=10_000)
    p.add_argument("--test-size", type=int, default=500)
    p.add_argument("--vocab-size", type=int, default=50)
    p.add_argument("--min-len", type=int, default=5)
    p.add_argument("--max-len", type=int, default=15)
    p.add_argument("--swap-prob", type=float, default=0.1)
    p.add_argument("--form-noise", type=float, default=0.2)
    p.add_argument("--v-ratio", type=float, default=1.0)

    p = command("train", cmd_train, "train one model variant and write a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--flag", default="final", choices=list(VARIANTS))
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lambda-global", type=float, default=0.1)
    p.add_argument("--lambda-local", type=float, default=0.1)
    p.add_argument("--emb", type=int, default=32)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--attn", type=int, default=64)

    p = command("translate", cmd_translate, "decode source sentences with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="one source sentence per line")
    p.add_argument("--external", help="JSONL external word sets, one per input line")
    p.add_argument("--output")
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--trace", action="store_true", help="print D values and gate traces to stderr")

    p = command("evaluate", cmd_evaluate, "BLEU and discriminator metrics on a data split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--no-external", action="store_true")
    p.add_argument("--hypotheses", help="write decoded sentences here")

    p = command("sweep", cmd_sweep, "BLEU over a ratio grid or the simulated scenarios")
    p.add_argument("--checkpoint", action="append", required=True, help="[name=]path, repeatable")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", default="ratio", choices=["ratio", "scenario"])
    p.add_argument("--v-ratios", type=_floats, default=[1.0])
    p.add_argument("--p-ratios", type=_floats, default=[0.1, 0.3, 0.5, 0.7, 0.9])
    p.add_argument("--scenarios", type=lambda s: s.split(","), default=list(data.SCENARIOS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--limit", type=int, default=0, help="use only the first N test sentences")
    p.add_argument("--out")

    p = command("gradcheck", cmd_gradcheck, "finite-difference check of the joint loss")
    p.add_argument("--flag", default="all", choices=["all", *VARIANTS])
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-3)

    p = command("repl", cmd_repl, "interactive translation with user-suggested words")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--beam", type=int, default=5)
    return ap


def parse_args(argv) -> argparse.Namespace:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            ap.error(f"cannot read config {args.config}: {exc}")
        if not isinstance(cfg, dict):
            ap.error("config file must hold a JSON object")
        known = set(vars(args))
        unknown = sorted(k for k in cfg if k.replace("-", "_") not in known)
        if unknown:
            ap.error(f"unknown config keys: {', '.join(unknown)}")
        # reparse with the file's values as defaults so explicit flags still win
        sub = ap._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
        for action in sub._actions:
            if action.dest in cfg or action.dest.replace("_", "-") in cfg:
                action.required = False
        args = ap.parse_args(argv)
    return args


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    resolved = {k: v for k, v in vars(args).items() if k not in ("func", "config", "verbose")}
    print("config " + json.dumps(resolved, sort_keys=True), file=sys.stderr)
    try:
        args.func(args)
    except KeyboardInterrupt:
        print("error: interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # one-line cause, no traceback
        if args.verbose:
            log.exception("failed")
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
