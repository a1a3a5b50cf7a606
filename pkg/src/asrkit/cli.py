"""Command line front end: featurize, train, decode, bench.

Every flag can also come from a flags file (`--flagsfile path`, one
`--flag=value` per line, `#` comments); explicit command line flags win.
Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import resource
import sys
import tempfile
import time

import numpy as np

from . import features as feat
from .criterion import make_criterion
from .data import load_manifest
from .decoder import DecodeOptions, build_trie, decode, dump_emissions, load_emissions
from .errors import AsrkitError, DecodeError, UsageError
from .lexicon import encode_repetitions, load_lexicon, load_tokens
from .lm import load_arpa
from .trainer import (
    STAGES,
    TrainConfig,
    build_network,
    edit_distance,
    format_epoch_line,
    load_checkpoint,
    parse_arch,
    restore_parameters,
    run_training,
)


# --- flags ----------------------------------------------------------------------

def expand_flagsfile(argv: list) -> list:
    """Splice flagsfile tokens in right after the subcommand.

    Later argparse occurrences override earlier ones, so tokens typed on the
    command line (which stay behind the spliced block) take precedence.
    """
    out = list(argv)
    path = None
    i = 0
    while i < len(out):
        tok = out[i]
        if tok == "--flagsfile":
            if i + 1 >= len(out):
                raise UsageError("--flagsfile needs a path")
            path = out[i + 1]
            del out[i : i + 2]
        elif tok.startswith("--flagsfile="):
            path = tok.split("=", 1)[1]
            del out[i]
        else:
            i += 1
    if path is None:
        return out
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read flags file: {exc}") from exc
    tokens = []
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if not text.startswith("--"):
            raise UsageError(f"{path}:{lineno}: flags file lines must start with --")
        tokens.append(text)
    if not out:
        return tokens
    return [out[0]] + tokens + out[1:]


def _add_feature_flags(p: argparse.ArgumentParser, kinds=("mfsc", "mfcc", "spectrum")):
    p.add_argument("--feature", choices=kinds, default="mfsc")
    p.add_argument("--windowms", type=float, default=25.0)
    p.add_argument("--hopms", type=float, default=10.0)
    p.add_argument("--mels", type=int, default=40)
    p.add_argument("--cepstra", type=int, default=13)
    p.add_argument("--window", choices=("hamming", "hanning"), default="hamming")
    p.add_argument("--normalize", action="store_true",
                   help="per-utterance mean/variance normalization")


def _feature_config(args) -> feat.FeatureConfig:
    kind = {"spectrum": "power_spectrum"}.get(args.feature, args.feature)
    return feat.FeatureConfig(
        feature_kind=kind,
        window_ms=args.windowms,
        hop_ms=args.hopms,
        num_mel_filters=args.mels,
        num_cepstra=args.cepstra,
        window_function=args.window,
        normalize=args.normalize,
    )


def _add_decode_flags(p: argparse.ArgumentParser):
    p.add_argument("--emissions", help="emissions file or directory of .emit files")
    p.add_argument("--model", help="checkpoint to compute emissions from audio")
    p.add_argument("--input", help="manifest: audio for --model, references for WER")
    p.add_argument("--tokens", required=True)
    p.add_argument("--lexicon", required=True)
    p.add_argument("--lm", help="ARPA language model")
    p.add_argument("--lmweight", type=float, default=0.0)
    p.add_argument("--wordscore", type=float, default=0.0)
    p.add_argument("--beamsize", type=int, default=50)
    p.add_argument("--beamthreshold", type=float, default=float("inf"))
    p.add_argument("--nbest", type=int, default=1)
    p.add_argument("--criterion", choices=("ctc", "asg"), default="ctc")
    p.add_argument("--silencetoken", default="|")
    p.add_argument("--merge", choices=("max", "logadd"), default="max")
    p.add_argument("--wordboundary", choices=("terminal", "silence"))
    p.add_argument("--no-smear", action="store_true", dest="no_smear")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="asrkit",
        description="End-to-end speech recognition toolkit: features, training, decoding.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("featurize", help="extract features from a WAV file")
    p.add_argument("--input", required=True, help="input WAV file")
    p.add_argument("--out", required=True, help="output feature matrix path")
    _add_feature_flags(p)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="train, continue, or fork a model")
    p.add_argument("--mode", choices=("train", "continue", "fork"), default="train")
    p.add_argument("--arch", help="architecture file (train mode)")
    p.add_argument("--train", required=True, dest="train_manifest")
    p.add_argument("--valid", dest="valid_manifest")
    p.add_argument("--tokens", required=True)
    p.add_argument("--lexicon")
    p.add_argument("--checkpoint", help="source checkpoint for continue/fork")
    p.add_argument("--criterion", choices=("ctc", "asg"), default="ctc")
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--batchsize", type=int, default=4)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rundir", required=True)
    p.add_argument("--prefetch", type=int, default=2, help="featurizer threads")
    p.add_argument("--queue", type=int, default=2, help="prefetch queue capacity")
    p.add_argument("--no-shuffle", action="store_true", dest="no_shuffle")
    p.add_argument("--overwrite", action="store_true")
    _add_feature_flags(p, kinds=("mfsc", "mfcc", "spectrum", "raw"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="beam-search decode emissions or audio")
    _add_decode_flags(p)
    _add_feature_flags(p, kinds=("mfsc", "mfcc", "spectrum", "raw"))
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("bench", help="timing benchmarks")
    p.add_argument("--what", choices=("train-breakdown", "decode-latency"), required=True)
    p.add_argument("--out", help="write CSV here instead of stdout")
    p.add_argument("--mode", choices=("train", "continue", "fork"), default="train")
    p.add_argument("--arch")
    p.add_argument("--train", dest="train_manifest")
    p.add_argument("--valid", dest="valid_manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--batchsize", type=int, default=4)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rundir")
    p.add_argument("--prefetch", type=int, default=2)
    p.add_argument("--queue", type=int, default=2)
    p.add_argument("--no-shuffle", action="store_true", dest="no_shuffle")
    p.add_argument("--overwrite", action="store_true")
    p.add_argument("--emissions")
    p.add_argument("--model")
    p.add_argument("--input")
    p.add_argument("--tokens")
    p.add_argument("--lexicon")
    p.add_argument("--lm")
    p.add_argument("--lmweight", type=float, default=0.0)
    p.add_argument("--wordscore", type=float, default=0.0)
    p.add_argument("--beamsize", type=int, default=50)
    p.add_argument("--beamthreshold", type=float, default=float("inf"))
    p.add_argument("--nbest", type=int, default=1)
    p.add_argument("--criterion", choices=("ctc", "asg"), default="ctc")
    p.add_argument("--silencetoken", default="|")
    p.add_argument("--merge", choices=("max", "logadd"), default="max")
    p.add_argument("--wordboundary", choices=("terminal", "silence"))
    p.add_argument("--no-smear", action="store_true", dest="no_smear")
    _add_feature_flags(p, kinds=("mfsc", "mfcc", "spectrum", "raw"))
    p.set_defaults(func=cmd_bench)

    return parser


# --- subcommands -----------------------------------------------------------------

def cmd_featurize(args) -> int:
    config = _feature_config(args)
    audio = feat.load_wav(args.input)
    mat = feat.featurize(audio, config)
    dump_emissions(mat, args.out)
    print(f"T={mat.shape[0]} D={mat.shape[1]}")
    return 0


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        train_manifest=args.train_manifest,
        tokens=args.tokens,
        rundir=args.rundir,
        arch=args.arch,
        valid_manifest=args.valid_manifest,
        lexicon=args.lexicon,
        checkpoint=args.checkpoint,
        mode=args.mode,
        criterion=args.criterion,
        lr=args.lr,
        momentum=args.momentum,
        batch_size=args.batchsize,
        epochs=args.epochs,
        workers=args.workers,
        seed=args.seed,
        prefetch_workers=args.prefetch,
        prefetch_queue=args.queue,
        shuffle=not args.no_shuffle,
        overwrite=args.overwrite,
        feature=_feature_config(args),
    )


def cmd_train(args) -> int:
    run_training(_train_config(args), on_epoch=lambda s: print(format_epoch_line(s), flush=True))
    return 0


def _prepare_lexicon(args, table):
    lexicon = load_lexicon(args.lexicon, table)
    if args.criterion == "asg" and table.rep_id is not None:
        lexicon = {
            word: [encode_repetitions(s, table) for s in spellings]
            for word, spellings in lexicon.items()
        }
    return lexicon


def _decode_setup(args):
    """Shared by decode and bench: build (table, criterion, trie, lm, options)."""
    table = load_tokens(args.tokens)
    criterion = make_criterion(args.criterion, table)
    lm = None
    if args.lm:
        lm = load_arpa(args.lm)
    elif args.lmweight > 0:
        raise UsageError("--lmweight > 0 needs --lm")
    lexicon = _prepare_lexicon(args, table)
    trie = build_trie(lexicon, table, lm, smear=not args.no_smear)
    silence_id = table.ids.get(args.silencetoken)
    options = DecodeOptions(
        lm_weight=args.lmweight,
        word_score=args.wordscore,
        beam_size=args.beamsize,
        beam_threshold=args.beamthreshold,
        silence_id=silence_id,
        criterion_kind=args.criterion,
        merge_mode=args.merge,
        word_boundary=args.wordboundary,
        nbest=max(args.nbest, 1),
    )
    return table, criterion, trie, lm, options


def _decode_inputs(args, table, criterion):
    """Yield (utt_id, emissions, transitions, reference words or None)."""
    refs = {}
    entries = None
    if args.input:
        entries = load_manifest(args.input)
        refs = {e.utt_id: e.transcript.split() for e in entries}

    if args.emissions:
        transitions = None
        if args.criterion == "asg":
            transitions = _transitions_for(args, criterion)
        if os.path.isdir(args.emissions):
            names = sorted(n for n in os.listdir(args.emissions) if n.endswith(".emit"))
            if not names:
                raise DecodeError(f"no .emit files in {args.emissions!r}")
            for name in names:
                uid = name[: -len(".emit")]
                e = load_emissions(os.path.join(args.emissions, name))
                yield uid, e, transitions, refs.get(uid)
        else:
            uid = os.path.splitext(os.path.basename(args.emissions))[0]
            e = load_emissions(args.emissions)
            yield uid, e, transitions, refs.get(uid)
        return

    if not args.model:
        raise UsageError("decode needs --emissions or --model")
    if entries is None:
        raise UsageError("--model decoding needs an --input manifest")
    state = load_checkpoint(args.model)
    network = build_network(parse_arch(state.arch_text), seed=0)
    restore_parameters(state, network, criterion, optimizer=None, mode="fork")
    transitions = None
    if args.criterion == "asg":
        transitions = criterion.params()["criterion.transitions"].value.data
    config = _feature_config(args)
    for entry in entries:
        audio = feat.load_wav(entry.audio_path)
        mat = feat.featurize(audio, config)
        emissions = network.forward(mat).value.data
        yield entry.utt_id, emissions, transitions, refs.get(entry.utt_id)


def _transitions_for(args, criterion):
    if args.model:
        state = load_checkpoint(args.model)
        arr = state.tensors.get("criterion.transitions")
        if arr is not None:
            return arr
    return np.zeros((criterion.n_outputs, criterion.n_outputs), dtype=np.float32)


def _check_width(uid, emissions, criterion, args):
    if emissions.shape[1] != criterion.n_outputs:
        raise DecodeError(
            f"utterance {uid!r}: emissions have {emissions.shape[1]} columns but the "
            f"token set ({args.tokens}) implies {criterion.n_outputs} for {args.criterion}"
        )


def cmd_decode(args) -> int:
    table, criterion, trie, lm, options = _decode_setup(args)
    dist = 0
    ref_len = 0
    have_refs = False
    for uid, emissions, transitions, ref in _decode_inputs(args, table, criterion):
        _check_width(uid, emissions, criterion, args)
        result = decode(emissions, trie, lm, options, transitions=transitions)
        print(f"{uid}\t{' '.join(result.words)}")
        if ref is not None:
            have_refs = True
            dist += edit_distance(ref, result.words)
            ref_len += len(ref)
    if have_refs and ref_len:
        print(f"WER {dist / ref_len:.6f}")
    return 0


def _write_csv(rows, out_path):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for row in rows:
        writer.writerow(row)
    text = buf.getvalue()
    if out_path:
        with open(out_path, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def cmd_bench(args) -> int:
    if args.what == "train-breakdown":
        for flag in ("arch", "train_manifest", "tokens", "rundir"):
            if not getattr(args, flag):
                if flag == "rundir":
                    args.rundir = tempfile.mkdtemp(prefix="asrkit-bench-")
                else:
                    raise UsageError(f"train-breakdown needs --{flag.replace('_manifest', '')}")
        history = run_training(_train_config(args))
        stage_ms = history[-1].stage_ms
        rows = [("stage", "mean_ms")]
        rows += [(stage, f"{stage_ms[stage]:.3f}") for stage in STAGES]
        _write_csv(rows, args.out)
        return 0

    # decode-latency: strictly sequential decoding, one row per utterance
    if not args.tokens or not args.lexicon:
        raise UsageError("decode-latency needs --tokens and --lexicon")
    table, criterion, trie, lm, options = _decode_setup(args)
    rows = [("utt_id", "ms", "peak_rss_mb")]
    times = []
    peak = 0.0
    for uid, emissions, transitions, _ in _decode_inputs(args, table, criterion):
        _check_width(uid, emissions, criterion, args)
        t0 = time.perf_counter()
        decode(emissions, trie, lm, options, transitions=transitions)
        ms = 1000.0 * (time.perf_counter() - t0)
        rss_mb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0
        peak = max(peak, rss_mb)
        times.append(ms)
        rows.append((uid, f"{ms:.3f}", f"{rss_mb:.1f}"))
    if not times:
        raise DecodeError("no utterances to decode")
    rows.append(("summary", f"{sum(times) / len(times):.3f}", f"{peak:.1f}"))
    _write_csv(rows, args.out)
    return 0


def main(argv=None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    parser = build_parser()
    try:
        args = parser.parse_args(expand_flagsfile(argv))
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except AsrkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
