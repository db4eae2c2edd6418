"""Command-line entry point: ``prosody-mdn <verb> [options]``.

Exit codes: 0 success, 1 a check or training run failed, 2 invalid input
or configuration.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import Settings, dump_settings, load_settings, parse_value
from .extractor import ExtractorModel, ReconstructorModel, train_joint
from .gmm import InvalidInputError
from .optim import TrainingDiverged
from .predictor import PredictorModel, pad_sequences, sample_batch, train_predictor
from .synth import SyntheticCorpus, generate

log = logging.getLogger("prosody_mdn")

EXIT_OK, EXIT_FAILED, EXIT_INVALID = 0, 1, 2


def _corpus(args, settings: Settings) -> SyntheticCorpus:
    if args.corpus:
        return SyntheticCorpus.load(args.corpus)
    return generate(settings.generator_spec(), settings.n_train + settings.n_heldout)


def _splits(corpus: SyntheticCorpus, settings: Settings):
    if len(corpus) < settings.n_train + 1:
        raise InvalidInputError(f"corpus has {len(corpus)} items, need more than n_train={settings.n_train}")
    end = min(len(corpus), settings.n_train + settings.n_heldout)
    return corpus.subset(0, settings.n_train), corpus.subset(settings.n_train, end)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])


# ------------------------------------------------------------------ verbs

def cmd_generate(args, settings):
    count = args.count or settings.n_train + settings.n_heldout
    corpus = generate(settings.generator_spec(), count, args.start)
    corpus.save(args.out)
    log.info("wrote %d items to %s", count, args.out)
    return EXIT_OK


def cmd_train(args, settings):
    train, _ = _splits(_corpus(args, settings), settings)
    model = PredictorModel.initialize(settings.predictor_config(), settings.seed)
    try:
        model, trace = train_predictor(model, train, settings.schedule())
    except TrainingDiverged as exc:
        log.error("training failed: %s", exc)
        return EXIT_FAILED
    checkpoint.save(model, args.out)
    _write_rows(Path(args.out).with_suffix(".trace.csv"), ["epoch", "loss"],
                [(i + 1, v) for i, v in enumerate(trace)])
    return EXIT_OK


def cmd_train_joint(args, settings):
    train, _ = _splits(_corpus(args, settings), settings)
    ext = ExtractorModel.initialize(settings.extractor_config(), settings.seed)
    pred = PredictorModel.initialize(settings.predictor_config(), settings.seed + 1)
    rec = ReconstructorModel.initialize(settings.reconstructor_config(), settings.seed + 2)
    try:
        ext, pred, rec, traces = train_joint(ext, pred, rec, train, settings.schedule(), settings.beta,
                                             zero_embeddings=args.zero_embeddings)
    except TrainingDiverged as exc:
        log.error("joint training failed: %s", exc)
        return EXIT_FAILED
    out = _out_dir(args)
    checkpoint.save(ext, out / "extractor.mdne")
    checkpoint.save(pred, out / "predictor.mdnp")
    checkpoint.save(rec, out / "reconstructor.mdnr")
    _write_rows(out / "joint_trace.csv", ["epoch", "total", "l_pp", "l_rec"],
                [(i + 1, traces["total"][i], traces["l_pp"][i], traces["l_rec"][i])
                 for i in range(len(traces["total"]))])
    return EXIT_OK


def cmd_sweep(args, settings):
    from .evaluation import run_sweep, write_sweep_csv

    train, heldout = _splits(_corpus(args, settings), settings)
    workers = 1 if args.single_thread else args.workers
    result = run_sweep(train, heldout, settings.components, settings.schedule(),
                       settings.predictor_config(), settings.seed, workers)
    out = _out_dir(args)
    write_sweep_csv(result, out / "sweep.csv")
    _write_rows(out / "sweep_summary.csv",
                ["M", "final_train", "final_heldout", "seconds", "seed", "status"],
                [(e.n_components, e.train_curve[-1] if e.train_curve else float("nan"),
                  e.final_heldout, round(e.seconds, 3) if args.timings else 0, e.seed,
                  "ok" if e.error is None else "diverged") for e in result.entries])
    _write_rows(out / "truth.csv", ["split", "loglik", "stderr"],
                [("heldout", result.truth_heldout, result.truth_heldout_se)])
    if not args.no_plot:
        from .plotting import plot_sweep
        plot_sweep(result, out / "sweep.png")
    for e in result.entries:
        print(f"M={e.n_components}\theldout={e.final_heldout:.6f}\t{'ok' if e.error is None else e.error}")
    print(f"truth\theldout={result.truth_heldout:.6f}")
    return EXIT_FAILED if result.failed else EXIT_OK


def _load_predictor(path) -> PredictorModel:
    model = checkpoint.load(path)
    if not isinstance(model, PredictorModel):
        raise InvalidInputError(f"{path} is not a predictor checkpoint")
    return model


def cmd_sample(args, settings):
    model = _load_predictor(args.model)
    _, heldout = _splits(_corpus(args, settings), settings)
    contexts = heldout.contexts[:settings.n_contexts]
    ctx, mask = pad_sequences(contexts)
    samples = sample_batch(model, ctx, mask, np.random.default_rng(settings.seed), settings.temperature)
    D = model.config.embed_dim
    rows = []
    for i, c in enumerate(contexts):
        for k in range(len(c)):
            rows.append([i, k] + [repr(float(x)) for x in samples[i, k]])
    _write_rows(args.out, ["sequence", "step"] + [f"e{d}" for d in range(D)], rows)
    return EXIT_OK


def cmd_diversity(args, settings):
    from .evaluation import compare_diversity, write_diversity_csv

    a, b = _load_predictor(args.model_a), _load_predictor(args.model_b)
    _, heldout = _splits(_corpus(args, settings), settings)
    reports = compare_diversity(a, b, heldout.contexts[:settings.n_contexts], settings.n_samples,
                                settings.seed, settings.temperature, (args.label_a, args.label_b))
    out = _out_dir(args)
    write_diversity_csv(reports, out / "diversity.csv")
    if not args.no_plot:
        from .plotting import plot_diversity
        plot_diversity(reports, out / "diversity.png")
    for r in reports:
        lo, hi = r.interval
        print(f"{r.label}\tmean_distance={r.mean_distance:.6f}\tci=[{lo:.6f}, {hi:.6f}]")
    return EXIT_OK


def cmd_gradcheck(args, settings):
    from .gradcheck import check_gmm_core, check_joint_reconstruction, check_sequence_model

    fixed_m = args.gmm_components
    fixed_d = args.gmm_dim
    reports = [check_gmm_core(args.instances_gmm, settings.seed, fixed_m, fixed_d, args.corrupt),
               check_sequence_model(args.instances_seq, settings.seed, corrupt=args.corrupt),
               check_joint_reconstruction(args.instances_joint, settings.seed, corrupt=args.corrupt)]
    print("suite\tgroup\tmax_rel_error\tstatus")
    for r in reports:
        for line in r.lines():
            print(line)
    failures = [f"{r.suite}:{g}" for r in reports for g in r.failures]
    if failures:
        print("FAILED: " + ", ".join(failures))
        return EXIT_FAILED
    print("PASSED")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value settings file")
    common.add_argument("--seed", type=int)
    common.add_argument("--single-thread", action="store_true",
                        help="pin BLAS to one thread and run sweeps serially (bit-reproducible)")
    common.add_argument("--temperature", type=float)
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one setting; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="prosody-mdn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int)
    g.add_argument("--start", type=int, default=0)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="train one predictor")
    t.add_argument("--corpus")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    j = sub.add_parser("train-joint", parents=[common], help="train extractor, predictor and reconstructor")
    j.add_argument("--corpus")
    j.add_argument("--out", required=True)
    j.add_argument("--zero-embeddings", action="store_true", help="ablation: reconstruct without e")
    j.set_defaults(func=cmd_train_joint)

    s = sub.add_parser("sweep", parents=[common], help="component-count log-likelihood sweep")
    s.add_argument("--corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--components", type=lambda v: parse_value("components", v))
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--no-plot", action="store_true")
    s.add_argument("--timings", action="store_true", help="record wall-clock seconds in the summary")
    s.set_defaults(func=cmd_sweep)

    sa = sub.add_parser("sample", parents=[common], help="sample embedding sequences to CSV")
    sa.add_argument("--model", required=True)
    sa.add_argument("--corpus")
    sa.add_argument("--out", required=True)
    sa.set_defaults(func=cmd_sample)

    d = sub.add_parser("diversity", parents=[common], help="compare sample diversity of two predictors")
    d.add_argument("--model-a", required=True)
    d.add_argument("--model-b", required=True)
    d.add_argument("--label-a", default="A")
    d.add_argument("--label-b", default="B")
    d.add_argument("--corpus")
    d.add_argument("--out", required=True)
    d.add_argument("--no-plot", action="store_true")
    d.set_defaults(func=cmd_diversity)

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    gc.add_argument("--instances-gmm", type=int, default=100)
    gc.add_argument("--instances-seq", type=int, default=20)
    gc.add_argument("--instances-joint", type=int, default=5)
    gc.add_argument("--gmm-components", type=int, help="fix M for the mixture check")
    gc.add_argument("--gmm-dim", type=int, help="fix D for the mixture check")
    gc.add_argument("--corrupt", help=argparse.SUPPRESS)
    gc.add_argument("--out", help="unused; accepted for uniformity")
    gc.set_defaults(func=cmd_gradcheck)
    return p


def _settings_from_args(args) -> Settings:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise InvalidInputError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = parse_value(k.strip(), v)
    overrides["seed"] = args.seed
    overrides["temperature"] = args.temperature
    if getattr(args, "components", None) is not None:
        overrides["components"] = args.components
    return load_settings(args.config, **overrides)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        settings = _settings_from_args(args)
        log.debug("settings:\n%s", dump_settings(settings))
        if args.single_thread:
            from threadpoolctl import threadpool_limits
            limit = threadpool_limits(limits=1)
        else:
            limit = nullcontext()
        with limit:
            return args.func(args, settings)
    except (InvalidInputError, FileNotFoundError, checkpoint.CheckpointError) as exc:
        log.error("%s", exc)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
