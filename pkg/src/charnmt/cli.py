"""Command-line surface: build-vocab, train, translate, score, analyze.

Every command is batch-oriented and deterministic given the seeds in its
inputs; diagnostics go to stderr and the exit code is 0 exactly when all
declared outputs were written.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .alignment import alignment_report, collect_alignments
from .bleu import corpus_bleu
from .data import (
    ParallelCorpus,
    TransliterationTable,
    UNK_ID,
    Vocabulary,
    build_vocab,
    batch_from_rows,
    encode_pair,
    load_parallel,
    mix_corpora,
    transliterate,
)
from .decoding import DecodeConfig, beam_decode, greedy_decode_batch
from .model import ModelConfig, build_params, extract_cross_attention
from .training import TrainConfig, checkpoint_load, checkpoint_save, train

_MODEL_DEFAULTS = {
    "encoder_kind": "standard",
    "d_model": 512,
    "n_layers": 6,
    "n_heads": 8,
    "d_ff": 0,
    "conv_windows": [3, 5, 7],
    "fuse_window": 3,
    "dropout": 0.1,
    "max_len": 512,
}
_TRAIN_DEFAULTS = {
    "epochs": 10,
    "max_tokens": 4096,
    "warmup": 400,
    "seed": 0,
    "label_smoothing": 0.1,
    "clip_norm": 1.0,
    "bleu_mode": "whitespace",
    "early_stop_bleu": 0.0,
}
_DATA_DEFAULTS = {
    "corpora": [],   # [{"src": path, "tgt": path, "lang": name}, ...]
    "val": [],
    "vocab": None,   # path to an existing vocabulary file, else built
    "translit": None,
    "min_count": 1,
}
_EVAL_DEFAULTS = {
    "strategy": "greedy",
    "beam_size": 1,
    "max_len_ratio": 3.0,
    "length_penalty": 0.0,
}
_ANALYZE_DEFAULTS = {"n": 500, "grid": [32, 32], "k": 10, "reg": 1e-4}
_CORPUS_ENTRY_KEYS = ("src", "tgt", "lang")


def resolve_run_config(doc: dict) -> dict:
    """Merge a run-config document over the documented defaults.

    Unknown keys anywhere in the document are collected and rejected in a
    single error so every typo surfaces at once.
    """
    sections = {"model": _MODEL_DEFAULTS, "train": _TRAIN_DEFAULTS,
                "data": _DATA_DEFAULTS, "eval": _EVAL_DEFAULTS,
                "analyze": _ANALYZE_DEFAULTS}
    if not isinstance(doc, dict):
        raise ValueError("config root must be a JSON object")
    for name in doc:
        if name in sections and not isinstance(doc[name], dict):
            raise ValueError(f"config section '{name}' must be an object")
    offenders = [name for name in doc if name not in sections]
    resolved = {}
    for name, defaults in sections.items():
        given = doc.get(name, {})
        offenders += [f"{name}.{key}" for key in given if key not in defaults]
        resolved[name] = {**defaults, **{k: v for k, v in given.items() if k in defaults}}
    for listname in ("corpora", "val"):
        entries = resolved["data"][listname]
        if not isinstance(entries, list):
            raise ValueError(f"data.{listname} must be a list of corpus entries")
        for i, entry in enumerate(entries):
            offenders += [f"data.{listname}[{i}].{key}" for key in entry
                          if key not in _CORPUS_ENTRY_KEYS]
    if offenders:
        raise ValueError("unknown config keys: " + ", ".join(sorted(offenders)))
    return resolved


def _load_table(path) -> TransliterationTable | None:
    return TransliterationTable.from_tsv(path) if path else None


def _load_entry(entry: dict, table: TransliterationTable | None) -> ParallelCorpus:
    corpus = load_parallel(entry["src"], entry["tgt"], entry.get("lang", ""))
    if table is not None:
        corpus.pairs = [(transliterate(src, table), tgt) for src, tgt in corpus.pairs]
    return corpus


def _read_input_lines(path) -> list[str]:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def _write_lines(path, lines: list[str]) -> None:
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def cmd_build_vocab(args) -> None:
    if len(args.src) != len(args.tgt):
        raise ValueError(f"{len(args.src)} source files vs {len(args.tgt)} target files")
    table = _load_table(args.translit)
    corpora = [_load_entry({"src": s, "tgt": t}, table)
               for s, t in zip(args.src, args.tgt)]
    vocab = build_vocab(corpora, args.min_count)
    vocab.save(args.out)
    print(f"vocab size {vocab.size}")


def cmd_train(args) -> None:
    cfg = resolve_run_config(json.loads(Path(args.config).read_text(encoding="utf-8")))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(
        json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    data = cfg["data"]
    table = _load_table(data["translit"])
    corpora = [_load_entry(e, table) for e in data["corpora"]]
    if not corpora:
        raise ValueError("data.corpora is empty; nothing to train on")
    train_cfg = TrainConfig(**cfg["train"])
    mixed = mix_corpora(corpora, train_cfg.seed)
    vocab = (Vocabulary.load(data["vocab"]) if data["vocab"]
             else build_vocab(corpora, data["min_count"]))
    vocab.save(out / "vocab.txt")
    model_cfg = ModelConfig(vocab_size=vocab.size, **cfg["model"])
    params = build_params(model_cfg, train_cfg.seed)
    val_sets = {e.get("lang") or f"val{i}": _load_entry(e, table)
                for i, e in enumerate(data["val"])}
    log = train(params, model_cfg, train_cfg, mixed, vocab,
                val_sets=val_sets or None, out_dir=out)
    log.write_csv(out / "train_log.csv")
    if val_sets:
        log.write_curves_csv(out / "bleu_curves.csv")


def cmd_translate(args) -> None:
    bundle = checkpoint_load(args.ckpt)
    table = _load_table(args.translit)
    lines = _read_input_lines(args.infile)
    if table is not None:
        lines = [transliterate(line, table) for line in lines]
    unknown = sum(1 for line in lines for ch in line
                  if bundle.vocab.id_for(ch) == UNK_ID)
    if unknown:
        print(f"note: {unknown} characters outside the checkpoint vocabulary "
              f"were encoded as UNK", file=sys.stderr)
    if args.beam >= 2:
        dcfg = DecodeConfig(strategy="beam", beam_size=args.beam)
        hyps = [beam_decode(bundle.params, bundle.config, line, bundle.vocab, dcfg)
                for line in lines]
    else:
        hyps = greedy_decode_batch(bundle.params, bundle.config, lines, bundle.vocab,
                                   DecodeConfig())
    _write_lines(args.out, hyps)
    if args.dump_attn:
        from .alignment import dump_matrix

        dump_dir = Path(args.dump_attn)
        dump_dir.mkdir(parents=True, exist_ok=True)
        for i, (src, hyp) in enumerate(zip(lines, hyps), start=1):
            batch = batch_from_rows([encode_pair(src, hyp, bundle.vocab)])
            amap = extract_cross_attention(batch, bundle.params, bundle.config)[0]
            dump_matrix(amap.matrix, dump_dir / f"line{i}.txt")


def cmd_score(args) -> None:
    hyps = _read_input_lines(args.hyp)
    refs = _read_input_lines(args.ref)
    score = corpus_bleu(hyps, refs, tokenizer=args.tokenizer, smooth=args.smooth)
    print(f"BLEU {score:.2f}")


def cmd_analyze(args) -> None:
    srcs = _read_input_lines(args.src)
    refs = _read_input_lines(args.ref)
    if len(srcs) != len(refs):
        raise ValueError(f"{len(srcs)} source lines vs {len(refs)} reference lines")
    pairs = list(zip(srcs, refs))
    sets = []
    for path in (args.ckpt_a, args.ckpt_b):
        bundle = checkpoint_load(path)
        sets.append(collect_alignments(bundle.params, bundle.config, pairs,
                                       bundle.vocab, n=args.n, seed=args.seed,
                                       model_tag=Path(path).stem,
                                       language_tag=args.lang))
    report = alignment_report(sets[0], sets[1], grid=(args.grid, args.grid),
                              k=args.k, reg=args.reg, csv_path=args.out,
                              dump_dir=args.dump_attn)
    print(f"rho_mean {report.rho_mean:.6f}")


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="charnmt",
        description="Character-level NMT lab: train, translate, score, and "
                    "compare attention alignments.")
    sub = p.add_subparsers(dest="command", required=True)

    pv = sub.add_parser("build-vocab", help="build a shared character vocabulary")
    pv.add_argument("--src", nargs="+", required=True)
    pv.add_argument("--tgt", nargs="+", required=True)
    pv.add_argument("--out", required=True)
    pv.add_argument("--translit", default=None, help="TSV latinization table for sources")
    pv.add_argument("--min-count", type=int, default=1, dest="min_count")
    pv.set_defaults(func=cmd_build_vocab)

    pt = sub.add_parser("train", help="train a model from a JSON run config")
    pt.add_argument("--config", required=True)
    pt.add_argument("--out", required=True)
    pt.set_defaults(func=cmd_train)

    px = sub.add_parser("translate", help="decode a file line by line")
    px.add_argument("--ckpt", required=True)
    px.add_argument("--in", required=True, dest="infile")
    px.add_argument("--out", required=True)
    px.add_argument("--beam", type=int, default=1, help="beam size; 1 means greedy")
    px.add_argument("--translit", default=None)
    px.add_argument("--dump-attn", default=None, dest="dump_attn")
    px.set_defaults(func=cmd_translate)

    ps = sub.add_parser("score", help="corpus BLEU of a hypothesis file")
    ps.add_argument("--hyp", required=True)
    ps.add_argument("--ref", required=True)
    ps.add_argument("--tokenizer", choices=("whitespace", "char"), default="whitespace")
    ps.add_argument("--smooth", action="store_true")
    ps.set_defaults(func=cmd_score)

    pa = sub.add_parser("analyze", help="CCA between two models' attention alignments")
    pa.add_argument("--ckpt-a", required=True, dest="ckpt_a")
    pa.add_argument("--ckpt-b", required=True, dest="ckpt_b")
    pa.add_argument("--src", required=True)
    pa.add_argument("--ref", required=True)
    pa.add_argument("--n", type=int, default=500)
    pa.add_argument("--seed", type=int, default=0)
    pa.add_argument("--grid", type=int, default=32)
    pa.add_argument("--k", type=int, default=10)
    pa.add_argument("--reg", type=float, default=1e-4)
    pa.add_argument("--lang", default="")
    pa.add_argument("--out", required=True)
    pa.add_argument("--dump-attn", default=None, dest="dump_attn")
    pa.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ValueError, OSError, RuntimeError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
