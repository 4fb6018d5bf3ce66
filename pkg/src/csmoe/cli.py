"""Command-line entry point: ``csmoe <subcommand> ...``.

Exit status is 0 on success, 1 on a runtime failure (one ``error: Kind: message``
line on stderr) and 2 on usage errors.
"""

from __future__ import annotations

import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

from . import __version__  # noqa: E402

log = logging.getLogger("csmoe")


class UsageError(Exception):
    """Bad arguments discovered after parsing; reported with exit status 2."""


def _strategy(value: str) -> str:
    from .training import StrategyError, strategy_flags

    try:
        strategy_flags(value)
    except StrategyError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return value


def _parse_set(items: list[str]) -> dict:
    """``a.b=1`` pairs to a nested override dict; values parse as JSON when possible."""
    out: dict = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return out


def _resolved(args, extra: dict | None = None):
    from .config import load_config

    overrides = _parse_set(args.set or [])
    if extra:
        overrides.setdefault("run", {}).update(extra)
    return load_config(args.config, overrides)


def _write_resolved(cfg, out_dir: Path, command: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    data = {"command": command, "version": __version__, **cfg.to_dict()}
    text = json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    (out_dir / "resolved_config.json").write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .config import merge
    from .synthdata import gen_corpus, write_corpus

    cfg = _resolved(args)
    if args.seed is not None:
        cfg.synth = merge(cfg.synth, {"seed": args.seed})
    corpus = gen_corpus(cfg.synth)
    out = Path(args.out)
    write_corpus(corpus, out)
    _write_resolved(cfg, out, "gen-data")
    print(f"wrote {sum(len(v) for v in corpus.splits.values())} utterances to {out}")
    return 0


def cmd_train(args) -> int:
    from .synthdata import read_corpus
    from .training import run_pipeline

    extra = {"strategy": args.strategy} if args.strategy else {}
    if args.seed is not None:
        extra["seed"] = args.seed
    cfg = _resolved(args, extra)
    corpus = read_corpus(args.corpus)
    cfg.synth = corpus.spec
    out = Path(args.out)
    _write_resolved(cfg, out, "train")
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as fh:

        def on_step(rec):
            fh.write(rec.to_json() + "\n")
            if rec.step % args.log_every == 0:
                log.info("%s step %d loss %.4f lr %.2e", rec.stage, rec.step, rec.loss, rec.lr)

        res = run_pipeline(corpus, cfg.run, out, resume_from=args.resume, on_step=on_step)
    for name, path in res.checkpoints.items():
        print(f"{name}\t{path}")
    return 0


def _load_model(path):
    from .numerics import load_checkpoint
    from .training import model_from_checkpoint

    return model_from_checkpoint(load_checkpoint(path))


def cmd_decode(args) -> int:
    from .synthdata import read_corpus, read_utterances
    from .training import prepare, transcribe

    model, settings = _load_model(args.model)
    corpus = read_corpus(args.corpus)
    utts = read_utterances(args.utts) if args.utts else corpus[args.split]
    examples = prepare(utts, corpus.spec, model.vocab, model.connector.cfg.factor)
    hyps = transcribe(model, examples, settings.inference_mode(), args.max_len or settings.decode_max_len)
    lines = "".join(f"{u.id}\t{h}\n" for u, h in zip(utts, hyps))
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(lines, encoding="utf-8")
    else:
        sys.stdout.write(lines)
    return 0


def cmd_score(args) -> int:
    from .evaluation import read_pairs, score

    report = score(read_pairs(args.ref), read_pairs(args.hyp))
    if args.json:
        Path(args.json).write_text(report.to_json() + "\n", encoding="utf-8")
    print(report.to_text())
    return 0


def cmd_tokenize(args) -> int:
    from .tokenizer import Vocab, decode, encode_idit, encode_plain, normalize, train_bpe

    if args.vocab:
        vocab = Vocab.load(args.vocab)
    elif args.model:
        vocab = _load_model(args.model)[0].vocab
    else:
        from .synthdata import SynthSpec, gen_corpus
        from .training import TokenizerConfig

        corpus = gen_corpus(SynthSpec())
        vocab = train_bpe([u.text for u in corpus["train"]], TokenizerConfig().target_vocab)
    ids = encode_idit(args.text, vocab) if args.idit else encode_plain(normalize(args.text), vocab)
    for t in ids:
        print(f"{t}\t{vocab.piece(t).decode('utf-8', errors='backslashreplace')!r}")
    print(f"# {len(ids)} tokens, decoded: {decode(ids, vocab, errors='replace')}")
    return 0


def cmd_inspect_router(args) -> int:
    from .connector import RoutingMode, downsample
    from .synthdata import read_corpus, render_frames

    model, settings = _load_model(args.model)
    corpus = read_corpus(args.corpus)
    try:
        utt = corpus.find(args.utt)
    except KeyError:
        raise UsageError(f"no utterance with id {args.utt!r}") from None
    X = downsample(render_frames(utt, corpus.spec).values, model.connector.cfg.factor)
    mode = RoutingMode(args.mode) if args.mode else settings.inference_mode()
    n = len(model.connector.experts)
    print("\t".join(["frame_index"] + [f"p{j + 1}" for j in range(n)] + ["selected"]))
    for i, probs, sel in model.connector.inspect(X, mode, utt.lang):
        print("\t".join([str(i)] + [f"{p:.6f}" for p in probs] + [str(sel + 1)]))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="csmoe", description="MoE-connector speech LM for code-switching ASR (desk scale)")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="JSON config file (sections: synth, run)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field, e.g. run.stage1.steps=500")

    g = sub.add_parser("gen-data", help="write a synthetic corpus directory")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    with_config(g)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="pretrain the base LM, then run both training stages")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--strategy", type=_strategy, help="A-F or four 0/1 flags (s1 idit, s1 lse, s2 idit, s2 lse)")
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="stage-1 checkpoint; runs stage 2 only")
    t.add_argument("--log-every", type=int, default=100)
    with_config(t)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("decode", help="greedy transcription; writes id<TAB>text lines")
    d.add_argument("--model", required=True)
    d.add_argument("--corpus", required=True)
    d.add_argument("--split", default="test")
    d.add_argument("--utts", help="JSONL utterance file to decode instead of a corpus split")
    d.add_argument("--max-len", type=int)
    d.add_argument("--out")
    d.set_defaults(func=cmd_decode)

    s = sub.add_parser("score", help="CER / WER / MER of hypotheses against references")
    s.add_argument("--ref", required=True, help="id<TAB>text file or corpus JSONL")
    s.add_argument("--hyp", required=True)
    s.add_argument("--json", help="also write the report as JSON")
    s.set_defaults(func=cmd_score)

    k = sub.add_parser("tokenize", help="show token ids and pieces")
    k.add_argument("text")
    k.add_argument("--idit", action="store_true", help="interruption-token encoding")
    src = k.add_mutually_exclusive_group()
    src.add_argument("--vocab")
    src.add_argument("--model")
    k.set_defaults(func=cmd_tokenize)

    r = sub.add_parser("inspect-router", help="per-frame expert probabilities and selections (TSV)")
    r.add_argument("--model", required=True)
    r.add_argument("--corpus", required=True)
    r.add_argument("--utt", required=True)
    r.add_argument("--mode", choices=["lse", "dense"])
    r.set_defaults(func=cmd_inspect_router)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (OSError, ValueError, RuntimeError, ArithmeticError, KeyError) as exc:
        from .config import ConfigError

        if isinstance(exc, ConfigError):
            print(f"error: ConfigError: {exc}", file=sys.stderr)
            return 2
        msg = " ".join(str(exc).split()) or exc.__class__.__name__
        print(f"error: {exc.__class__.__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
