"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import evaluation, interpret
from .kmeans import FitOptions, fit_accams
from .matrix import DataError, load_dense, load_triples, split_train_test
from .sampler import (DivergenceError, Hyperparams, SampleSet, deserialize_samples,
                      fit_baccams_chains, serialize_samples)
from .stencil import ModelFormatError, bit_cost, deserialize, predict_many, serialize

log = logging.getLogger("accams")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _clamp(text):
    try:
        lo, hi = (float(x) for x in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError("clamp must look like LO:HI") from None
    if lo > hi:
        raise argparse.ArgumentTypeError("clamp needs LO <= HI")
    return lo, hi


def _delimiter(text):
    if text in ("ws", "whitespace"):
        return None
    if text in ("tab", "\\t"):
        return "\t"
    if len(text) != 1:
        raise argparse.ArgumentTypeError("delimiter must be a single character, 'tab' or 'ws'")
    return text


def _read_bytes(path):
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None


def _load_data(path, args):
    raw = _read_bytes(path)
    if getattr(args, "format", "triples") == "dense":
        return load_dense(raw).to_sparse()
    return load_triples(raw, args.delimiter)


def _load_any_model(path):
    raw = _read_bytes(path)
    if raw[:4] == b"ACSS":
        return deserialize_samples(raw)
    return deserialize(raw)


def _point(model):
    return model.models[-1] if isinstance(model, SampleSet) else model


def _check_dense_shape(data, model, args):
    ref = _point(model)
    if getattr(args, "format", "triples") == "dense" and data.shape != (ref.n_rows, ref.n_cols):
        raise DataError(f"dimension mismatch: data {data.shape} vs model "
                        f"({ref.n_rows}, {ref.n_cols})")


def _emit(args, payload):
    if isinstance(payload, str):
        payload = payload.encode("utf-8")
    if args.out:
        Path(args.out).write_bytes(payload)
    else:
        sys.stdout.buffer.write(payload)
        sys.stdout.flush()


def _log_data(data):
    log.info("data: %d x %d, E=%d", data.n_rows, data.n_cols, data.nnz)


def _log_model(model):
    ks = [f"{st.k_m}x{st.k_n}" for st in model.stencils]
    log.info("realized k per stencil: %s", " ".join(ks))


# ---------------------------------------------------------------- commands

def cmd_fit_accams(args):
    data = _load_data(args.data, args)
    _log_data(data)
    opts = FitOptions(k=args.k, s=args.s, max_kmeans_iters=args.iters, seed=args.seed,
                      alternate_refinement_rounds=args.refine, restarts=args.restarts)

    def progress(l, st, sse):
        log.info("stencil %d/%d: %dx%d clusters, train rmse %.6f", l + 1, opts.s, st.k_m,
                 st.k_n, np.sqrt(sse / data.nnz))

    model = fit_accams(data, opts, callback=progress)
    _log_model(model)
    _emit(args, serialize(model))


def _hyper(args):
    return Hyperparams(alpha=args.alpha, beta=args.beta, eta_a=args.eta_a, eta_b=args.eta_b,
                       gamma_a=args.gamma_a, gamma_b=args.gamma_b, sigma_max=args.sigma_max,
                       k_max=args.k, s=args.s, burn_in=args.burn_in,
                       sub_sweeps=args.sub_sweeps, n_samples=args.samples, thin=args.thin,
                       concentration_decay=args.decay)


def cmd_fit_baccams(args):
    data = _load_data(args.data, args)
    _log_data(data)
    h = _hyper(args)
    samples, traces = fit_baccams_chains(data, h, seed=args.seed, chains=args.chains,
                                         init_iters=args.iters, init_restarts=args.restarts)
    for c, trace in enumerate(traces):
        for entry in trace:
            log.info("chain %d iter %d: sigma2 %.5f train rmse %.5f", c, entry["iteration"],
                     entry["sigma2"], entry["train_rmse"])
    _log_model(samples.models[-1])
    if args.samples_out:
        Path(args.samples_out).write_bytes(serialize_samples(samples))
    _emit(args, serialize(samples.predictive_model()))


def cmd_predict(args):
    model = _load_any_model(args.model)
    ref = _point(model)
    raw = _read_bytes(args.cells).decode("utf-8")
    rows, cols, keys = [], [], []
    rmap = {x: i for i, x in enumerate(ref.external_row_ids())}
    cmap = {x: j for j, x in enumerate(ref.external_col_ids())}
    for lineno, line in enumerate(raw.splitlines(), 1):
        parts = line.split(args.delimiter) if args.delimiter else line.split()
        if not line.strip():
            continue
        if len(parts) < 2:
            raise DataError(f"line {lineno}: expected row and column ids")
        r, c = parts[0].strip(), parts[1].strip()
        keys.append((r, c))
        rows.append(rmap.get(r, -1))
        cols.append(cmap.get(c, -1))
    if isinstance(model, SampleSet):
        pred = model.predict(rows, cols, args.clamp)
    else:
        pred = predict_many(model, rows, cols, args.clamp)
    _emit(args, "".join(f"{r}\t{c}\t{p:.6f}\n" for (r, c), p in zip(keys, pred)))


def cmd_eval(args):
    model = _load_any_model(args.model)
    test = _load_data(args.test, args)
    _check_dense_shape(test, model, args)
    value = evaluation.rmse(model, test, args.clamp)
    _emit(args, f"rmse\t{value:.10g}\nn_test\t{test.nnz}\n")


def cmd_curve(args):
    model = _point(_load_any_model(args.model))
    train = _load_data(args.train, args)
    test = _load_data(args.test, args)
    _check_dense_shape(train, model, args)
    report = evaluation.size_accuracy_curve(model, train, test, args.clamp)
    _emit(args, report.to_csv())


def cmd_similar(args):
    model = _load_any_model(args.model)
    try:
        hits = interpret.similar_items(model, args.item, args.side, args.top)
    except KeyError as exc:
        raise DataError(str(exc.args[0])) from None
    _emit(args, "".join(f"{x}\t{d}\n" for x, d in hits))


def cmd_hierarchy(args):
    model = _load_any_model(args.model)
    try:
        root = interpret.hierarchy(model, args.side, args.depth, args.min_leaf)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    if args.format == "jsonl":
        _emit(args, interpret.hierarchy_records(root, args.show))
    else:
        _emit(args, interpret.hierarchy_text(root, args.show))


def cmd_cost(args):
    model = _point(_load_any_model(args.model))
    bc = bit_cost(model, args.bits_per_float)
    _emit(args, (f"stencils\t{model.s}\nassignment_bits\t{bc.assignment_bits}\n"
                 f"template_bits\t{bc.template_bits}\ntotal_bits\t{bc.total_bits}\n"
                 f"total_bytes\t{bc.total_bits / 8:.0f}\ntotal_MB\t{bc.megabytes:.4f}\n"))


def cmd_split(args):
    data = _load_data(args.data, args)
    train, test = split_train_test(data, args.fraction, args.seed)
    delim = args.delimiter or "\t"
    if args.out:
        Path(f"{args.out}.train.tsv").write_text(train.to_triples_text(delim))
        Path(f"{args.out}.test.tsv").write_text(test.to_triples_text(delim))
        log.info("wrote %d train / %d test entries", train.nnz, test.nnz)
    else:
        text = "".join(f"{part}\t{line}\n" for part, m in (("train", train), ("test", test))
                       for line in m.to_triples_text(delim).splitlines())
        sys.stdout.write(text)


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="accams", description="Additive co-clustering of sparse matrices.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, out=True):
        sp.add_argument("--delimiter", type=_delimiter, default="\t",
                        help="triple delimiter: one character, 'tab' (default) or 'ws'")
        sp.add_argument("--format", choices=("triples", "dense"), default="triples")
        sp.add_argument("--clamp", type=_clamp, default=None, metavar="LO:HI",
                        help="clip predictions; write --clamp=-1:1 for a negative LO")
        if out:
            sp.add_argument("--out", default=None, help="output file (default: stdout)")

    def fit_common(sp):
        sp.add_argument("data")
        sp.add_argument("--k", type=int, default=10, help="max clusters per side")
        sp.add_argument("--s", type=int, default=1, help="number of stencils")
        sp.add_argument("--iters", type=int, default=50, help="k-means iterations")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--restarts", type=int, default=1,
                        help="random k-means initialisations per stage")
        common(sp)

    sp = sub.add_parser("fit-accams", help="greedy k-means stencil fit")
    fit_common(sp)
    sp.add_argument("--refine", type=int, default=0, help="alternating refinement rounds")
    sp.set_defaults(func=cmd_fit_accams)

    sp = sub.add_parser("fit-baccams", help="Gibbs-sampled stencil fit")
    fit_common(sp)
    sp.add_argument("--alpha", type=float, default=10.0)
    sp.add_argument("--beta", type=float, default=10.0)
    sp.add_argument("--eta-a", type=float, default=2.0)
    sp.add_argument("--eta-b", type=float, default=0.3)
    sp.add_argument("--gamma-a", type=float, default=5.0)
    sp.add_argument("--gamma-b", type=float, default=0.3)
    sp.add_argument("--sigma-max", type=float, default=1.0)
    sp.add_argument("--burn-in", type=int, default=30)
    sp.add_argument("--sub-sweeps", type=int, default=3)
    sp.add_argument("--samples", type=int, default=10, help="retained post-burn-in states")
    sp.add_argument("--thin", type=int, default=1)
    sp.add_argument("--decay", type=float, default=1.0,
                    help="per-stencil multiplier on alpha and beta")
    sp.add_argument("--chains", type=int, default=1, help="independent parallel chains")
    sp.add_argument("--samples-out", default=None, help="write the retained sample set here")
    sp.set_defaults(func=cmd_fit_baccams)

    sp = sub.add_parser("predict", help="predict cells listed as 'row col' lines")
    sp.add_argument("model")
    sp.add_argument("cells")
    common(sp)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("eval", help="test RMSE")
    sp.add_argument("model")
    sp.add_argument("test")
    common(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("curve", help="bits vs RMSE per stencil prefix (CSV)")
    sp.add_argument("model")
    sp.add_argument("train")
    sp.add_argument("test")
    common(sp)
    sp.set_defaults(func=cmd_curve)

    sp = sub.add_parser("similar", help="nearest items by Hamming distance")
    sp.add_argument("model")
    sp.add_argument("--item", required=True)
    sp.add_argument("--top", type=int, default=10)
    sp.add_argument("--side", choices=("rows", "cols"), default="cols")
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_similar)

    sp = sub.add_parser("hierarchy", help="stencil-induced hierarchy")
    sp.add_argument("model")
    sp.add_argument("--depth", type=int, default=2)
    sp.add_argument("--min-leaf", type=int, default=1)
    sp.add_argument("--side", choices=("rows", "cols"), default="cols")
    sp.add_argument("--format", choices=("text", "jsonl"), default="text")
    sp.add_argument("--show", type=int, default=5, help="members listed per node")
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_hierarchy)

    sp = sub.add_parser("cost", help="model size under the bit accounting")
    sp.add_argument("model")
    sp.add_argument("--bits-per-float", type=int, default=32)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_cost)

    sp = sub.add_parser("split", help="random train/test split of a triple file")
    sp.add_argument("data")
    sp.add_argument("--fraction", type=float, default=0.1)
    sp.add_argument("--seed", type=int, default=0)
    common(sp)
    sp.set_defaults(func=cmd_split)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand; see --help")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    _setup_logging(args.verbose)
    log.info("config: %s", json.dumps({k: v for k, v in vars(args).items() if k != "func"},
                                      default=str, sort_keys=True))
    start = time.perf_counter()
    try:
        args.func(args)
    except DivergenceError as exc:
        log.error("numeric divergence: %s", exc)
        return EXIT_DIVERGED
    except (DataError, ModelFormatError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except ValueError as exc:
        log.error("invalid argument: %s", exc)
        return EXIT_USAGE
    log.info("done in %.2fs", time.perf_counter() - start)
    return EXIT_OK


def _setup_logging(verbose: bool):
    # rebuilt per run so the handler follows the current sys.stderr
    for old in list(log.handlers):
        log.removeHandler(old)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.DEBUG if verbose else logging.INFO)
    log.propagate = False


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
