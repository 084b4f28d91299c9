"""Command line entry point: ``python app.py <command> [options]``.

Commands: preprocess, train, evaluate, generate, analyze, baseline.  Each
command writes its machine output as JSON to ``--output``, a run manifest
next to it (``<output>.manifest.json`` unless ``--manifest`` is given) and a
single summary line on stdout.  Exit codes: 0 ok, 1 usage, 2 data,
3 numeric.
"""
import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from analysis import (
    AnalysisReport,
    driving_matrix,
    exponent_traces,
    lamp_mixing_bound,
    lamp_tv_at,
    mixing_time,
    renewal_rate_estimate,
    simulate_exponent_process,
    stationary_report,
)
from baselines import KNESER_NEY, fit_kneser_ney, fit_naive_ngram, ngram_log_likelihood, save_ngram
from data import PreprocessConfig, load_corpus, preprocess, read_corpus, reencode, save_corpus_cache, split
from database import RunDatabase
from errors import DataError, LampError, UsageError
from lamp import HistoryDistribution, LampModel, __version__, generate, generate_many, load_model, log_likelihood, save_model
from learn import TrainConfig, alternate_minimize

logger = logging.getLogger(__name__)

DEFAULT_FLOOR = 1e-10


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass
class CommandResult:
    summary: str
    inputs: List[str] = field(default_factory=list)
    outputs: List[str] = field(default_factory=list)


def write_json(path, doc: Dict):
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def file_sha256(path) -> Optional[str]:
    try:
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()
    except OSError:
        return None


def _float(value) -> Optional[float]:
    return None if value is None else float(value)


# commands ------------------------------------------------------------------

def cmd_preprocess(args) -> CommandResult:
    cfg = PreprocessConfig(
        collapse_repeats=not args.no_collapse,
        rare_min_count=args.min_count,
        rare_token_label=args.rare_token,
        split_fraction=args.split_fraction,
        split_seed=args.seed,
    )
    corpus, report = preprocess(load_corpus(args.input, args.limit), cfg)
    doc = corpus.to_dict()
    doc["report"] = report.to_dict()
    doc["config"] = cfg.to_dict()
    write_json(args.output, doc)
    outputs = [args.output]
    summary = (f"{report.sequences_out} sequences, {report.tokens_out} tokens, "
               f"{report.vocab_out} types ({report.dropped_short} dropped)")
    if args.train_output or args.test_output:
        if not (args.train_output and args.test_output):
            raise UsageError("--train-output and --test-output go together")
        train, test = split(corpus, cfg.split_fraction, cfg.split_seed, cfg.rare_token_label)
        save_corpus_cache(train, args.train_output)
        save_corpus_cache(test, args.test_output)
        outputs += [args.train_output, args.test_output]
        summary += f"; split {len(train)}/{len(test)}"
    return CommandResult(summary, [args.input], outputs)


def cmd_train(args) -> CommandResult:
    cfg = TrainConfig(
        k=args.k, rounds=args.rounds, kkt_tol=args.kkt_tol, trust_init=args.trust_init,
        max_newton_iters=args.max_newton_iters, init_decay=args.init_decay,
        support_epsilon=args.support_epsilon, weight_only=args.weight_only, seed=args.seed,
        prior=args.prior, threads=args.threads,
    )
    corpus = read_corpus(args.corpus)
    inputs = [args.corpus]
    holdout = None
    if args.holdout:
        holdout = reencode(read_corpus(args.holdout), corpus.vocab)
        inputs.append(args.holdout)
    model, report = alternate_minimize(corpus, cfg, holdout=holdout, holdout_floor=args.floor)
    save_model(model, args.output)
    report_path = args.report or f"{args.output}.report.jsonl"
    Path(report_path).write_text(report.to_json_lines(), encoding="utf-8")
    outputs = [args.output, report_path]
    if args.trace_csv:
        report.to_frame(timing=False).to_csv(args.trace_csv, index=False)
        outputs.append(args.trace_csv)
    summary = (f"train perplexity {report.final_perplexity:.6f} "
               f"(k={cfg.k}, rounds={cfg.rounds:g}{', weight-only' if cfg.weight_only else ''})")
    return CommandResult(summary, inputs, outputs)


def cmd_evaluate(args) -> CommandResult:
    model = load_model(args.model)
    corpus = reencode(read_corpus(args.corpus), model.vocab)
    result = log_likelihood(model, corpus, floor=args.floor, threads=args.threads)
    doc = {
        "model": args.model,
        "corpus": args.corpus,
        "floor": args.floor,
        "log_likelihood": result.total,
        "transitions": result.transitions,
        "perplexity": result.perplexity,
        "impossible_transitions": result.impossible,
        "num_parameters": model.num_parameters,
    }
    write_json(args.output, doc)
    summary = f"perplexity {result.perplexity:.6f} over {result.transitions} transitions"
    if result.impossible:
        summary += f" ({result.impossible} impossible)"
    return CommandResult(summary, [args.model, args.corpus], [args.output])


def cmd_generate(args) -> CommandResult:
    model = load_model(args.model)
    start = model.vocab.id(args.start)
    if args.runs == 1:
        paths = [generate(model, start, args.length, args.seed)]
    else:
        paths = list(generate_many(model, start, args.length, args.runs, args.seed))
    sequences = [model.vocab.decode(p) for p in paths]
    write_json(args.output, {"model": args.model, "start": args.start, "length": args.length,
                             "seed": args.seed, "sequences": sequences})
    return CommandResult(" ".join(sequences[0]), [args.model], [args.output])


def _history_weights(args, model) -> HistoryDistribution:
    if args.w:
        return HistoryDistribution.parse(args.w)
    if model is None:
        raise UsageError("give --model or --w")
    return model.w


def cmd_analyze(args) -> CommandResult:
    model = load_model(args.model) if args.model else None
    inputs = [args.model] if args.model else []
    if args.analysis in ("stationary", "mixing", "bound") and model is None:
        raise UsageError(f"analyze {args.analysis} needs --model")

    if args.analysis == "stationary":
        report = stationary_report(driving_matrix(model), args.tol, model.vocab.tokens)
        pi = report.outputs["pi"]
        summary = "pi = (" + ", ".join(f"{p:.6f}" for p in pi[:10]) + (", ..." if len(pi) > 10 else "") + ")"
    elif args.analysis == "mixing":
        t = mixing_time(driving_matrix(model), args.delta)
        report = AnalysisReport("mixing", {"delta": args.delta, "n": len(model.vocab)}, {"mixing_time": t})
        summary = f"mixing time {t} at delta={args.delta:g}"
    elif args.analysis == "exponent":
        report, summary = _analyze_exponent(args, _history_weights(args, model))
    else:
        report, summary = _analyze_bound(args, model)

    write_json(args.output, report.to_dict())
    outputs = [args.output]
    return CommandResult(summary, inputs, outputs)


def _analyze_exponent(args, w: HistoryDistribution):
    inputs = {"w": w.weights, "t_max": args.steps, "seed": args.seed, "runs": args.runs}
    if args.runs == 1:
        trace = simulate_exponent_process(w, args.steps, args.seed)
        est = renewal_rate_estimate(trace, w)
        t = np.arange(1, trace.t_max + 1)
        lower_ok = bool(np.all(trace.exponents >= t // w.k))
        outputs = {"exponent": est.exponent, "rate": est.rate, "predicted_rate": est.predicted,
                   "clt_statistic": est.clt_statistic, "clt_defined": est.clt_defined,
                   "lower_bound_holds": lower_ok}
        if args.trace_csv:
            trace.to_csv(args.trace_csv)
        summary = f"rate {est.rate:.6f} (predicted {est.predicted:.6f})"
        return AnalysisReport("exponent", inputs, outputs, {}, lower_ok), summary
    estimates = [renewal_rate_estimate(tr, w) for tr in exponent_traces(w, args.steps, args.runs, args.seed)]
    rates = np.array([e.rate for e in estimates])
    outputs = {"rates": rates, "mean_rate": float(rates.mean()), "predicted_rate": estimates[0].predicted}
    if estimates[0].clt_defined:
        stats = np.array([e.clt_statistic for e in estimates])
        outputs["clt_statistics"] = stats
        outputs["fraction_within_1.96"] = float(np.mean(np.abs(stats) <= 1.96))
    summary = f"mean rate {rates.mean():.6f} over {args.runs} runs (predicted {estimates[0].predicted:.6f})"
    return AnalysisReport("exponent", inputs, outputs), summary


def _analyze_bound(args, model):
    if not isinstance(model, LampModel):
        raise UsageError("analyze bound applies to LAMP models")
    w = _history_weights(args, model)
    bound = lamp_mixing_bound(w, model.P, args.delta, args.epsilon, args.T, strict=args.strict)
    inputs = {"delta": args.delta, "epsilon": args.epsilon, "T": args.T, "w": w.weights}
    outputs = bound.to_dict()
    passed = None
    tolerances = {}
    if args.mc_runs:
        estimate = lamp_tv_at(model.replace(w=w), bound.bound, args.mc_runs, args.seed)
        outputs["monte_carlo_tv"] = estimate.worst
        outputs["monte_carlo_slack"] = estimate.slack
        tolerances["tv"] = args.delta + estimate.slack
        passed = estimate.worst <= args.delta + estimate.slack
    summary = f"bound {bound.bound}, confidence {bound.confidence:.6g} (chain mixing time {bound.chain_mixing_time})"
    return AnalysisReport("bound", inputs, outputs, tolerances, passed), summary


def cmd_baseline(args) -> CommandResult:
    train = read_corpus(args.train)
    inputs = [args.train]
    if args.smoothing == "kn":
        model = fit_kneser_ney(train, args.order, args.discount)
    else:
        model = fit_naive_ngram(train, args.order)
    train_result = ngram_log_likelihood(model, train)
    doc = {"order": args.order, "smoothing": model.smoothing,
           "discount": args.discount if model.smoothing == KNESER_NEY else None,
           "num_parameters": model.num_parameters,
           "train_perplexity": train_result.perplexity,
           "train_impossible_transitions": train_result.impossible}
    summary = f"{model.smoothing} order-{args.order} train perplexity {train_result.perplexity:.6f}"
    if args.test:
        test = reencode(read_corpus(args.test), train.vocab)
        inputs.append(args.test)
        test_result = ngram_log_likelihood(model, test)
        doc["test_perplexity"] = test_result.perplexity
        doc["test_impossible_transitions"] = test_result.impossible
        summary += f", test perplexity {test_result.perplexity:.6f}"
    write_json(args.output, doc)
    outputs = [args.output]
    if args.model_output:
        save_ngram(model, args.model_output)
        outputs.append(args.model_output)
    return CommandResult(summary, inputs, outputs)


# parser -------------------------------------------------------------------------

def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="app.py", description="Linear additive Markov process toolkit")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")
    parser.add_argument("--manifest", help="manifest path (default <output>.manifest.json)")
    parser.add_argument("--registry", help="sqlite run registry to record the manifest in")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="collapse repeats, replace rare tokens, split")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True, help="preprocessed corpus (JSON cache)")
    p.add_argument("--min-count", type=int, default=10)
    p.add_argument("--rare-token", default="<RARE>")
    p.add_argument("--no-collapse", action="store_true")
    p.add_argument("--limit", type=int)
    p.add_argument("--split-fraction", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-output")
    p.add_argument("--test-output")
    p.set_defaults(handler=cmd_preprocess)

    p = sub.add_parser("train", help="fit a LAMP by alternating minimization")
    p.add_argument("--corpus", required=True)
    p.add_argument("--output", required=True, help="model JSON")
    p.add_argument("--report", help="per-half-iteration JSON lines (default <output>.report.jsonl)")
    p.add_argument("--trace-csv")
    p.add_argument("--holdout", help="corpus whose perplexity is tracked per half-iteration")
    p.add_argument("--floor", type=float, nargs="?", const=DEFAULT_FLOOR)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--rounds", type=float, default=1.5)
    p.add_argument("--weight-only", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init-decay", type=float, default=0.8)
    p.add_argument("--support-epsilon", type=float, default=1e-3)
    p.add_argument("--kkt-tol", type=float, default=1e-6)
    p.add_argument("--trust-init", type=float, default=0.1)
    p.add_argument("--max-newton-iters", type=int, default=100)
    p.add_argument("--prior", type=float, default=0.0)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("evaluate", help="log-likelihood and perplexity of a corpus")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--floor", type=float, nargs="?", const=DEFAULT_FLOOR,
                   help=f"smooth every probability with an additive floor (default {DEFAULT_FLOOR:g})")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("generate", help="sample sequences from a model")
    p.add_argument("--model", required=True)
    p.add_argument("--start", required=True, help="start token")
    p.add_argument("--length", type=int, required=True)
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True)
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("analyze", help="equilibrium, mixing and exponent-process analysis")
    p.add_argument("analysis", choices=["stationary", "mixing", "exponent", "bound"])
    p.add_argument("--model")
    p.add_argument("--w", help="history weights, e.g. '0.5,0.5' (overrides the model's)")
    p.add_argument("--output", required=True)
    p.add_argument("--delta", type=float, default=0.01)
    p.add_argument("--epsilon", type=float, default=1.0)
    p.add_argument("--T", type=int, default=100)
    p.add_argument("--steps", type=int, default=100_000)
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--mc-runs", type=int, default=0, help="Monte Carlo runs per start state for bound")
    p.add_argument("--tol", type=float, default=1e-12)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--strict", action="store_true", help="fail when the bound is vacuous")
    p.add_argument("--trace-csv")
    p.set_defaults(handler=cmd_analyze)

    p = sub.add_parser("baseline", help="naive or Kneser-Ney n-gram baseline")
    p.add_argument("--train", required=True)
    p.add_argument("--test")
    p.add_argument("--order", type=int, default=1)
    p.add_argument("--smoothing", choices=["naive", "kn"], default="naive")
    p.add_argument("--discount", type=float, default=0.75)
    p.add_argument("--output", required=True)
    p.add_argument("--model-output")
    p.set_defaults(handler=cmd_baseline)
    return parser


def configure_logging(verbosity: int):
    level = logging.WARNING if verbosity <= 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _config_snapshot(args) -> Dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("handler", "verbose")}


def write_manifest(args, result: Optional[CommandResult], exit_code: int, wall_time: float,
                   error: Optional[str] = None) -> Optional[Dict]:
    output = getattr(args, "output", None)
    path = args.manifest or (f"{output}.manifest.json" if output else None)
    if path is None:
        return None
    inputs = result.inputs if result else []
    manifest = {
        "command": args.command,
        "config": _config_snapshot(args),
        "inputs": [{"path": p, "sha256": file_sha256(p)} for p in inputs],
        "outputs": result.outputs if result else [],
        "seed": getattr(args, "seed", None),
        "wall_time": wall_time,
        "version": __version__,
        "exit_code": exit_code,
        "summary": result.summary if result else error,
        "created_at": datetime.now(timezone.utc).isoformat(),
    }
    try:
        write_json(path, manifest)
    except OSError as exc:
        logger.error("could not write manifest %s: %s", path, exc)
        return None
    if args.registry:
        RunDatabase(args.registry).save_run(manifest)
    return manifest


def run_command(args) -> CommandResult:
    try:
        return args.handler(args)
    except OSError as exc:
        raise DataError(f"{exc.filename or 'file'}: {exc.strerror or exc}") from exc


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    configure_logging(args.verbose)

    started = time.perf_counter()
    try:
        result = run_command(args)
    except LampError as exc:
        logger.debug("%s failed", args.command, exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        write_manifest(args, None, exc.exit_code, time.perf_counter() - started, str(exc))
        return exc.exit_code
    write_manifest(args, result, 0, time.perf_counter() - started)
    print(result.summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
