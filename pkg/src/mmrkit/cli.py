"""Batch pipeline: ingest -> stats -> bpe-train -> encode -> train -> generate -> render.

Every command reads an optional ``key=value`` config file (``--config``)
whose keys name ModelConfig, TrainConfig or SampleConfig fields; ``--set
key=value`` overrides it. Exit status is 0 on success, 1 on bad input and
2 on an internal failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import codec
from .bpe import MergeVocab, extract_mulpies, tokens_per_mulpi, train
from .chords import ChordLabel, detect_measure_chords
from .model import MMRDecoder, ModelConfig, make_batch
from .runner import SampleConfig, TrainConfig, finite_diff_check, generate, train_loop
from .score_io import corpus_stats, read_midi, score_from_json, score_to_json, write_midi

logger = logging.getLogger("mmrkit")

MIDI_SUFFIXES = (".mid", ".midi")
TOKEN_SUFFIX = ".tok"
GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def read_config(path: str | None, overrides: list[str]) -> dict[str, str]:
    values: dict[str, str] = {}
    lines = Path(path).read_text(encoding="utf-8").splitlines() if path else []
    for raw in lines + list(overrides):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"config line without '=': {raw!r}")
        values[key.strip()] = value.strip()
    known = {f.name for cls in (ModelConfig, TrainConfig, SampleConfig) for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return values


def _build(cls, values: dict[str, str]):
    kwargs = {}
    for f in fields(cls):
        if f.name in values:
            raw = values[f.name]
            kwargs[f.name] = type(f.default)(raw) if not isinstance(f.default, str) else raw
    return cls(**kwargs)


def _require(args, *names):
    for name in names:
        if getattr(args, name) is None:
            raise UsageError(f"missing required flag --{name.replace('_', '-')}")


def _need_seed(values):
    if "seed" not in values:
        raise UsageError("a seed is required (seed=... in --config or --set seed=...)")


def _files(directory: str, suffixes) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise UsageError(f"not a directory: {directory}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in suffixes)


def _load_score(path: Path):
    if path.suffix.lower() in MIDI_SUFFIXES:
        return read_midi(path)
    return score_from_json(path.read_text(encoding="utf-8"))


def _scores(directory: str):
    paths = _files(directory, MIDI_SUFFIXES + (".json",))
    return [(p, _load_score(p)) for p in paths]


def _load_tokens(path) -> list:
    return codec.parse_tokens(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(args, values):
    _require(args, "input", "output")
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    errors = []
    for path in _files(args.input, MIDI_SUFFIXES):
        try:
            score = read_midi(path)
        except ValueError as exc:
            errors.append(f"{path.name}\t{exc}")
            continue
        (out / (path.stem + ".json")).write_text(score_to_json(score), encoding="utf-8")
    (out / "errors.txt").write_text("".join(e + "\n" for e in errors), encoding="utf-8")
    logger.info("ingested into %s, %d errors", out, len(errors))


def cmd_stats(args, values):
    _require(args, "input")
    text = corpus_stats(_files(args.input, MIDI_SUFFIXES)).to_text()
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_bpe_train(args, values):
    _require(args, "scores", "vocab")
    cfg = _build(ModelConfig, values)
    size = args.size if args.size is not None else cfg.n_pitchsets
    bag = []
    for path, score in _scores(args.scores):
        bag.extend(extract_mulpies(score, path.name))
    vocab = train(bag, size, min_freq=args.min_freq)
    vocab.save(args.vocab)
    logger.info("%d merges; %.3f tokens per mulpi", len(vocab.merges), tokens_per_mulpi(vocab, bag))


def cmd_encode(args, values):
    _require(args, "scores", "vocab", "output")
    vocab = MergeVocab.load(args.vocab)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    for path, score in _scores(args.scores):
        tokens = codec.encode(score, detect_measure_chords(score), vocab)
        (out / (path.stem + TOKEN_SUFFIX)).write_text(codec.format_tokens(tokens), encoding="utf-8")


def cmd_train(args, values):
    _require(args, "tokens", "checkpoint")
    _need_seed(values)
    mcfg, tcfg = _build(ModelConfig, values), _build(TrainConfig, values)
    corpus = [_load_tokens(p) for p in _files(args.tokens, (TOKEN_SUFFIX,))]
    if not corpus:
        raise UsageError(f"no {TOKEN_SUFFIX} files in {args.tokens}")
    _, lines = train_loop(mcfg, tcfg, corpus, checkpoint=args.checkpoint)
    log_path = args.log or str(Path(args.checkpoint).with_suffix(".loss.txt"))
    Path(log_path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def cmd_generate(args, values):
    _require(args, "checkpoint", "vocab", "output")
    _need_seed(values)
    scfg = _build(SampleConfig, values)
    if args.mode:
        scfg = SampleConfig(**{**scfg.__dict__, "mode": args.mode})
    model = MMRDecoder.load(args.checkpoint)
    vocab = MergeVocab.load(args.vocab)
    n_ps = min(len(vocab), model.cfg.n_pitchsets)
    condition = None
    if scfg.mode == "prime":
        _require(args, "prime")
        condition = _load_tokens(args.prime)
    elif scfg.mode == "chord-sequence":
        _require(args, "chords")
        text = Path(args.chords).read_text(encoding="utf-8")
        condition = [ChordLabel.from_name(line) for line in text.splitlines() if line.strip()]
    tokens = generate(model, scfg, n_ps, condition)
    Path(args.output).write_text(codec.format_tokens(tokens), encoding="utf-8")


def cmd_render(args, values):
    _require(args, "tokens", "vocab", "output")
    vocab = MergeVocab.load(args.vocab)
    score = codec.decode(_load_tokens(args.tokens), vocab)
    Path(args.output).write_bytes(write_midi(score, args.tempo))


def cmd_gradcheck(args, values):
    if args.checkpoint:
        model = MMRDecoder.load(args.checkpoint)
    else:
        cfg = _build(ModelConfig, {"embed_dim": "8", "layers": "1", "heads": "2",
                                   "event_vocab": "521", "measure_positions": "8", **values})
        model = MMRDecoder(cfg)
    if args.tokens:
        seq = _load_tokens(args.tokens)[:32]
    else:
        seq = _demo_tokens()
    report = finite_diff_check(model, make_batch([seq], model.cfg), h=args.h)
    text = report.to_text()
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if report.worst[1] > GRADCHECK_TOL:
        raise AssertionError(f"gradient check failed: {report.worst}")


def _demo_tokens():
    from .score_io import NoteEvent, QuantizedScore, Track

    score = QuantizedScore(
        (Track(0, (NoteEvent(0, 60, 8), NoteEvent(0, 64, 8), NoteEvent(8, 67, 4))),
         Track(40, (NoteEvent(4, 55, 8),))),
        (32,),
    )
    return codec.encode(score, detect_measure_chords(score))


COMMANDS = {
    "ingest": cmd_ingest,
    "stats": cmd_stats,
    "bpe-train": cmd_bpe_train,
    "encode": cmd_encode,
    "train": cmd_train,
    "generate": cmd_generate,
    "render": cmd_render,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mmrkit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    specs = {
        "ingest": ["input", "output"],
        "stats": ["input", "output"],
        "bpe-train": ["scores", "vocab"],
        "encode": ["scores", "vocab", "output"],
        "train": ["tokens", "checkpoint", "log"],
        "generate": ["checkpoint", "vocab", "output", "prime", "chords"],
        "render": ["tokens", "vocab", "output"],
        "gradcheck": ["checkpoint", "tokens", "output"],
    }
    for name, flags in specs.items():
        p = sub.add_parser(name)
        p.add_argument("--config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        for flag in flags:
            p.add_argument(f"--{flag}")
        if name == "bpe-train":
            p.add_argument("--size", type=int)
            p.add_argument("--min-freq", type=int, default=2)
        if name == "generate":
            p.add_argument("--mode", choices=["unconditional", "prime", "chord-sequence"])
        if name == "render":
            p.add_argument("--tempo", type=float, default=120.0)
        if name == "gradcheck":
            p.add_argument("--h", type=float, default=1e-4)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        values = read_config(args.config, args.set)
        COMMANDS[args.command](args, values)
    except (UsageError, ValueError, KeyError, OSError) as exc:
        print(f"mmrkit {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"mmrkit {args.command}: internal error: {exc!r}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
