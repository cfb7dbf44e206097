"""``intactlab`` command line.

Exit status: 0 success, 1 contract violation (e.g. a bound violated), 2 bad
input or IO failure. CSVs are written atomically, so a failed run never
leaves a partial file behind.
"""
import argparse
import sys
from pathlib import Path

from . import harness, pivots, recipes
from .calibration import CalibConfig, calibrate
from .intactkv import generate, load_intactkv, quantize_intactkv, serialize_intactkv
from .model import (FormatError, InputError, format_corpus, forward, load_model,
                    read_corpus, serialize_model)
from .numcore import ShapeError
from .quantizer import QuantConfig, quantize_model_weights

EXIT_OK, EXIT_VIOLATION, EXIT_INPUT = 0, 1, 2


class Violation(Exception):
    pass


def _tokens(text):
    try:
        return [int(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise InputError(f"bad token list {text!r}") from None


def _load_model(path):
    try:
        return load_model(path)
    except FormatError as exc:
        raise InputError(f"{path}: {exc}") from None
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from None


def _load_corpus(path, n=None):
    try:
        lines = read_corpus(path)
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from None
    except InputError as exc:
        raise InputError(f"{path}: {exc}") from None
    if not lines:
        raise InputError(f"{path}: corpus is empty")
    if n is not None:
        if n < 1 or n > len(lines):
            raise InputError(f"{path}: asked for {n} sequences, corpus has {len(lines)}")
        lines = lines[:n]
    return lines


def _wcfg(args):
    return QuantConfig(args.bits, args.group_size)


def _kvcfg(args):
    return None if args.kv_bits is None else QuantConfig(args.kv_bits, 1)


def _sibling(out, suffix):
    out = Path(out)
    return out.with_name(out.stem + suffix + ".csv")


# ---------------------------------------------------------------------------
# subcommands

def cmd_init(args):
    makers = {"canonical": recipes.canonical_model, "sink": recipes.sink_model,
              "micro": lambda seed: recipes.canonical_model(seed, recipes.micro_config())}
    harness.write_atomic(args.out, serialize_model(makers[args.recipe](args.seed)))


def cmd_make_corpus(args):
    if args.kind == "common-prefix":
        vocab = args.vocab
        if args.model:
            vocab = _load_model(args.model).config.vocab_size
        seqs = recipes.common_prefix_corpus(args.n, args.prefix_len, args.length - args.prefix_len,
                                            vocab, args.seed, bos=args.bos)
    else:
        if not args.model:
            raise InputError("--kind sampled needs --model")
        seqs = recipes.sample_corpus(_load_model(args.model), args.n, args.length, args.seed, bos=args.bos)
    harness.write_atomic(args.out, format_corpus(seqs))


def cmd_analyze(args):
    w = _load_model(args.model)
    seq = _load_corpus(args.corpus, 1)[0].tokens
    trace = forward(w, seq)
    layers = None if args.layer is None else [args.layer]
    try:
        rep = pivots.pivot_report(trace, seq, layers, args.act_ratio, args.mass_ratio)
    except IndexError as exc:
        raise InputError(str(exc)) from None
    header = ("position", "token_id", "max_abs_activation", "attn_mass", "is_pivot")
    mass_rows = [(l, t, float(v)) for l in range(w.config.n_layers)
                 for t, v in enumerate(pivots.attention_mass(trace, l))]
    text = harness.csv_text(header, rep.rows())
    mass_text = harness.csv_text(("layer", "position", "attn_mass"), mass_rows)
    harness.write_atomic(args.out, text)
    harness.write_atomic(args.mass_out or _sibling(args.out, "_attn_mass"), mass_text)


def cmd_quantize(args):
    w = _load_model(args.model)
    harness.write_atomic(args.out, serialize_model(quantize_model_weights(w, _wcfg(args))))


def cmd_generate_kv(args):
    w = _load_model(args.model)
    kv = generate(w, _tokens(args.prefix))
    if args.kv_bits is not None:
        kv = quantize_intactkv(kv, QuantConfig(args.kv_bits, 1))
    harness.write_atomic(args.out, serialize_intactkv(kv))


def cmd_calibrate(args):
    fp = _load_model(args.model)
    q = quantize_model_weights(fp, _wcfg(args))
    corpus = _load_corpus(args.corpus, args.n_sequences)
    theta0 = generate(fp, _tokens(args.prefix))
    cfg = CalibConfig(learning_rate=args.lr, epochs=args.epochs, grad_accum=args.grad_accum,
                      seed=args.seed)
    theta, rep = calibrate(fp, q, theta0, corpus, cfg)
    per_group = -(-len(corpus) // cfg.grad_accum)
    steps = [(i + 1, i // per_group + 1, loss) for i, loss in enumerate(rep.step_losses)]
    layers = [(l, a, b) for l, (a, b) in
              enumerate(zip(rep.initial_layer_losses, rep.final_layer_losses))]
    texts = {
        args.report: harness.csv_text(("step", "epoch", "loss"), steps),
        _sibling(args.report, "_epochs"): harness.csv_text(
            ("epoch", "loss", "best"), [(e, l, int(e == rep.best_epoch)) for e, l in enumerate(rep.epoch_losses)]),
        _sibling(args.report, "_layers"): harness.csv_text(("layer", "initial_loss", "final_loss"), layers),
    }
    harness.write_atomic(args.out, serialize_intactkv(theta))
    for path, text in texts.items():
        harness.write_atomic(path, text)


def cmd_sweep_kv_size(args):
    fp = _load_model(args.model)
    q = quantize_model_weights(fp, _wcfg(args))
    seqs = [line.tokens for line in _load_corpus(args.corpus, args.n_sequences)]
    rep = harness.sweep_kv_size(fp, q, seqs, args.m_max, args.eval_start, _kvcfg(args))
    rep.seed, rep.bits, rep.group_size = args.seed, args.bits, args.group_size
    harness.write_csv(args.out, rep.HEADER, rep.csv_rows())


def cmd_eval_ppl(args):
    fp = _load_model(args.model)
    q = quantize_model_weights(fp, _wcfg(args)) if args.mode != "fp" else fp
    seqs = [line.tokens for line in _load_corpus(args.corpus, args.n_sequences)]
    prefix = None
    if args.prefix_file:
        try:
            prefix = load_intactkv(args.prefix_file)
        except (OSError, FormatError) as exc:
            raise InputError(f"{args.prefix_file}: {exc}") from None
    bos = args.bos
    if bos is None and args.mode == "intactkv":
        bos = prefix.tokens[0] if prefix is not None else recipes.SINK_TOKEN
    rep = harness.eval_ppl(fp, q, seqs, args.mode, bos, _kvcfg(args), args.keep_prefix_fp,
                           prefix, args.score_from, dataset=Path(args.corpus).name)
    harness.write_csv(args.out, rep.HEADER, rep.csv_rows())


def cmd_verify_bound(args):
    reps = harness.bound_campaign(args.n, args.d, args.delta, args.trials, args.pivot_count, args.seed)
    harness.write_csv(args.out, harness.BOUND_HEADER, harness.bound_rows(reps))
    bad = [i for i, r in enumerate(reps) if not r.holds]
    if bad:
        raise Violation(f"{len(bad)} of {len(reps)} trials violate the bound (first: trial {bad[0]})")


# ---------------------------------------------------------------------------
# parser

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", required=True, help="output path")

    quant = argparse.ArgumentParser(add_help=False)
    quant.add_argument("--bits", type=int, default=4)
    quant.add_argument("--group-size", type=int, default=128)
    quant.add_argument("--kv-bits", type=int, default=None, help="fake-quantize the KV cache (default: fp)")
    quant.add_argument("--keep-prefix-fp", type=int, default=0, metavar="M",
                       help="leave the first M cache positions unquantized")

    p = argparse.ArgumentParser(prog="intactlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init", parents=[common], help="write a recipe model")
    s.add_argument("--recipe", choices=("canonical", "sink", "micro"), default="sink")
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("make-corpus", parents=[common], help="write a toy corpus")
    s.add_argument("--kind", choices=("common-prefix", "sampled"), default="common-prefix")
    s.add_argument("--model")
    s.add_argument("--n", type=int, default=32)
    s.add_argument("--length", type=int, default=48)
    s.add_argument("--prefix-len", type=int, default=8)
    s.add_argument("--vocab", type=int, default=256)
    s.add_argument("--bos", type=int, default=recipes.SINK_TOKEN)
    s.set_defaults(func=cmd_make_corpus)

    s = sub.add_parser("analyze", parents=[common], help="pivot-token report")
    s.add_argument("model")
    s.add_argument("corpus")
    s.add_argument("--layer", type=int, default=None)
    s.add_argument("--act-ratio", type=float, default=pivots.DEFAULT_ACT_RATIO)
    s.add_argument("--mass-ratio", type=float, default=pivots.DEFAULT_MASS_RATIO)
    s.add_argument("--mass-out", default=None, help="per-layer attention mass CSV")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("quantize", parents=[common, quant], help="RTN-quantize a model file")
    s.add_argument("model")
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("generate-kv", parents=[common, quant], help="build a lossless IntactKV")
    s.add_argument("model")
    s.add_argument("--prefix", default=str(recipes.SINK_TOKEN), help="prefix token ids")
    s.set_defaults(func=cmd_generate_kv)

    s = sub.add_parser("calibrate", parents=[common, quant], help="calibrate an IntactKV")
    s.add_argument("model")
    s.add_argument("corpus")
    s.add_argument("--prefix", default=str(recipes.SINK_TOKEN))
    s.add_argument("--report", required=True, help="loss CSV")
    s.add_argument("--n-sequences", type=int, default=None)
    s.add_argument("--lr", type=float, default=2e-4)
    s.add_argument("--epochs", type=int, default=20)
    s.add_argument("--grad-accum", type=int, default=16)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("sweep-kv-size", parents=[common, quant], help="MSE vs IntactKV size")
    s.add_argument("model")
    s.add_argument("corpus")
    s.add_argument("--m-max", type=int, default=8)
    s.add_argument("--n-sequences", type=int, default=None)
    s.add_argument("--eval-start", type=int, default=None)
    s.set_defaults(func=cmd_sweep_kv_size)

    s = sub.add_parser("eval-ppl", parents=[common, quant], help="perplexity")
    s.add_argument("model")
    s.add_argument("corpus")
    s.add_argument("--mode", choices=("fp", "quant", "intactkv"), default="quant")
    s.add_argument("--prefix-file", default=None, help="IntactKV file (default: lossless [BOS])")
    s.add_argument("--bos", type=int, default=None)
    s.add_argument("--score-from", type=int, default=1)
    s.add_argument("--n-sequences", type=int, default=None)
    s.set_defaults(func=cmd_eval_ppl)

    s = sub.add_parser("verify-bound", parents=[common], help="Monte-Carlo bound check")
    s.add_argument("--n", type=int, default=8)
    s.add_argument("--d", type=int, default=4)
    s.add_argument("--delta", type=float, default=0.05)
    s.add_argument("--trials", type=int, default=1000)
    s.add_argument("--pivot-count", type=int, default=1)
    s.set_defaults(func=cmd_verify_bound)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        args.func(args)
    except Violation as exc:
        print(f"intactlab: {exc}", file=sys.stderr)
        return EXIT_VIOLATION
    except (OSError, ValueError, IndexError, ShapeError) as exc:
        # InputError and FormatError are ValueErrors
        print(f"intactlab {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
