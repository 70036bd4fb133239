"""``biomx`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 remote/transport error.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .bench_data import TEMPLATES, dump_dataset, load_dataset
from .evaluation import EvalReport, ece, records_from_csv, render_report, run_eval
from .exceptions import BiomxError, FormatError, ScoringError, TransportError
from .merge import METHODS, MergeRecipe, merge_checkpoints
from .pack import SequencePacker
from .quantize import (
    QuantCheckpoint,
    QuantSpec,
    awq_quantize,
    dequantize,
    footprint_report,
    rtn_quantize,
)
from .scoring import EnsembleBackend, backend_from_spec
from .tensor_store import load_checkpoint, read_header, save_checkpoint
from .translate import DatasetTranslator, EndpointConfig

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_REMOTE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text):
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text):
    return [int(x) for x in text.split(",") if x.strip()]


def _run_config(args):
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "jobs", "verbose")}
    return json.loads(json.dumps(cfg, default=str))


def _write_json(obj, path):
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


# -- subcommands ---------------------------------------------------------------


def cmd_merge(args):
    if args.recipe:
        recipe = MergeRecipe.from_json(Path(args.recipe).read_text(encoding="utf-8"))
    else:
        if args.method is None:
            raise UsageError("merge needs --method or --recipe")
        recipe = MergeRecipe(args.method)
    overrides = {
        "method": args.method,
        "t": args.t,
        "weights": args.weights,
        "density": args.density,
        "drop_rate": args.drop_rate,
        "lam": args.lam,
        "seed": args.seed,
    }
    for k, v in overrides.items():
        if v is not None:
            setattr(recipe, k, v)
    models = [load_checkpoint(p) for p in args.models]
    base = load_checkpoint(args.base) if args.base else None
    merged = merge_checkpoints(recipe, models, base, n_jobs=args.jobs)
    merged.metadata["run_config"] = json.dumps(_run_config(args), sort_keys=True)
    save_checkpoint(merged, args.output)
    return EXIT_OK


def cmd_quantize(args):
    ckpt = load_checkpoint(args.input)
    spec = QuantSpec(args.bits, args.group_size, not args.asymmetric, args.awq_alpha)
    if spec.awq_alpha > 0:
        if not args.act_stats:
            raise UsageError("--awq-alpha > 0 needs --act-stats")
        stats = json.loads(Path(args.act_stats).read_text(encoding="utf-8"))
        q = awq_quantize(ckpt, stats, spec)
    else:
        q = rtn_quantize(ckpt, spec)
    out = q.to_checkpoint()
    out.metadata["run_config"] = json.dumps(_run_config(args), sort_keys=True)
    save_checkpoint(out, args.output)
    return EXIT_OK


def cmd_dequantize(args):
    q = QuantCheckpoint.from_checkpoint(load_checkpoint(args.input))
    q.metadata.pop("run_config", None)
    save_checkpoint(dequantize(q), args.output)
    return EXIT_OK


def _read_sequences(path):
    seqs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                seq = json.loads(line)
            except json.JSONDecodeError:
                raise FormatError(f"{path}:{lineno}: not a JSON array") from None
            if not isinstance(seq, list) or not all(
                isinstance(t, int) and not isinstance(t, bool) for t in seq
            ):
                raise FormatError(f"{path}:{lineno}: expected a JSON array of integers")
            seqs.append(seq)
    return seqs


def cmd_pack(args):
    seqs = _read_sequences(args.input)
    packer = SequencePacker(args.chunk_len, args.sep, args.keep_tail).fit()
    chunks = packer.transform(seqs)
    lines = "".join(json.dumps(c, separators=(",", ":")) + "\n" for c in chunks)
    if args.output in (None, "-"):
        sys.stdout.write(lines)
    else:
        Path(args.output).write_text(lines, encoding="utf-8")
    if args.stats:
        stats = packer.stats_.to_dict()
        stats["run_config"] = _run_config(args)
        _write_json(stats, args.stats)
    return EXIT_OK


def cmd_translate(args):
    items = load_dataset(args.input)
    endpoint = None
    if args.endpoint_config:
        endpoint = EndpointConfig.from_dict(
            json.loads(Path(args.endpoint_config).read_text(encoding="utf-8"))
        )
    allowed = args.allow.split(",") if args.allow else None
    translator = DatasetTranslator(
        args.lang, endpoint, args.cache_dir, allowed, args.max_retries, args.jobs or 1
    )
    out = translator.fit_transform(items)
    dump_dataset(out, args.output)
    for item_id, reason in translator.failures_:
        print(f"skipped {item_id}: {reason}", file=sys.stderr)
    if any(reason.startswith("endpoint failure") for _, reason in translator.failures_):
        return EXIT_REMOTE
    return EXIT_OK


def _default_report_path(task, backend, fmt):
    ext = {"json": "json", "csv": "csv", "markdown": "md"}[fmt]
    kind = getattr(backend, "kind", "backend")
    return f"{Path(task).stem}.{kind}.report.{ext}"


def cmd_eval(args):
    test = load_dataset(args.task)
    train = load_dataset(args.train) if args.train else []
    backends = [backend_from_spec(s) for s in args.backend]
    if len(backends) == 1:
        backend = backends[0]
    else:
        backend = EnsembleBackend(backends, args.ensemble_weights)
    fmt = args.format
    if fmt is None:
        suffix = Path(args.output).suffix.lower() if args.output else ".json"
        fmt = {".csv": "csv", ".md": "markdown"}.get(suffix, "json")
    report = run_eval(
        test,
        train,
        backend,
        args.template,
        args.shots,
        args.seeds,
        args.bins,
        task=Path(args.task).stem,
        n_jobs=args.jobs,
        run_config=_run_config(args),
    )
    out = args.output or _default_report_path(args.task, backend, fmt)
    text = render_report(report, fmt)
    if out == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")
    for f in report.failures:
        print(f"failed seed={f['seed']} item={f['item_id']}: {f['error']}", file=sys.stderr)
    return EXIT_OK


def cmd_ece(args):
    text = Path(args.input).read_text(encoding="utf-8")
    if args.input.endswith(".csv"):
        records = records_from_csv(text)
    else:
        try:
            records = EvalReport.from_json(text).records
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{args.input}: not an eval report ({exc})") from None
    _write_json(ece(records, args.bins).to_dict(), args.output)
    return EXIT_OK


def cmd_footprint(args):
    _write_json(footprint_report(load_checkpoint(args.input)).to_dict(), args.output)
    return EXIT_OK


def cmd_inspect(args):
    with open(args.input, "rb") as fh:
        buf = fh.read()
    header, _ = read_header(buf)
    _write_json(header, None)
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="biomx", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument(
        "--jobs", type=int, default=os.cpu_count(), help="worker threads (default: all cores)"
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("merge", help="merge checkpoints")
    p.add_argument("models", nargs="+", help="checkpoints to merge (tuned models for ties/dare)")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--recipe", help="merge recipe JSON; explicit flags override its fields")
    p.add_argument("--base", help="base checkpoint (ties, dare-*)")
    p.add_argument("--t", type=float)
    p.add_argument("--weights", type=_floats, help="comma-separated, summing to 1")
    p.add_argument("--density", type=float)
    p.add_argument("--drop-rate", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("quantize", help="quantize a checkpoint to 4 or 8 bits")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--bits", type=int, choices=(4, 8), default=4)
    p.add_argument("--group-size", type=int, default=128)
    p.add_argument("--asymmetric", action="store_true")
    p.add_argument("--awq-alpha", type=float, default=0.0)
    p.add_argument("--act-stats", help="JSON {tensor name: [mean |activation| per input channel]}")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("dequantize", help="expand a quantized checkpoint to float32")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_dequantize)

    p = sub.add_parser("pack", help="pack token sequences into fixed-length chunks")
    p.add_argument("input", help="newline-delimited JSON arrays of token ids")
    p.add_argument("-o", "--output", default="-")
    p.add_argument("--stats", help="write packing statistics JSON here")
    p.add_argument("--chunk-len", type=int, default=2048)
    p.add_argument("--sep", type=int, default=2, help="end-of-sequence token id")
    p.add_argument("--keep-tail", action="store_true")
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("translate", help="translate a dataset through a chat-completion endpoint")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--lang", required=True)
    p.add_argument("--endpoint-config", help="JSON {url, model, api_key_env, timeout}")
    p.add_argument("--cache-dir", default="translation_cache")
    p.add_argument("--allow", help="comma-separated language allow-list")
    p.add_argument("--max-retries", type=int, default=2)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("eval", help="few-shot MCQA evaluation")
    p.add_argument("--task", required=True, help="test set JSONL")
    p.add_argument("--train", help="exemplar pool JSONL")
    p.add_argument(
        "--backend",
        action="append",
        required=True,
        help="table:<scores.json> | hash[:label] | remote:<config.json>; repeat to ensemble",
    )
    p.add_argument("--ensemble-weights", type=_floats)
    p.add_argument("--template", choices=sorted(TEMPLATES), default="mcqa-default")
    p.add_argument("--shots", type=int, default=3)
    p.add_argument("--seeds", type=_ints, default=[1, 2, 3])
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--format", choices=("json", "csv", "markdown"))
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ece", help="expected calibration error of an eval report")
    p.add_argument("input", help="report JSON or records CSV")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_ece)

    p = sub.add_parser("footprint", help="payload bytes of a (quantized) checkpoint")
    p.add_argument("input")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_footprint)

    p = sub.add_parser("inspect", help="print a checkpoint header")
    p.add_argument("input")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"biomx: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TransportError, ScoringError) as exc:
        print(f"biomx: remote error: {exc}", file=sys.stderr)
        return EXIT_REMOTE
    except (BiomxError, ValueError, OSError) as exc:
        print(f"biomx: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
