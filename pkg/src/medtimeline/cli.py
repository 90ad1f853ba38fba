"""Command-line driver: synth, build-vocab, tokenize, train, sweep, fit-scaling, simulate, eval, baseline.

Set MEDTIMELINE_THREADS to pin the BLAS thread count (1 gives bit-identical
training runs). Errors print one line ``error code=<name> message=<text>``
to stderr and exit with the code listed in EXIT_CODES.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
from pathlib import Path

EXIT_CODES = {"ok": 0, "error": 1, "usage": 2, "missing-file": 3, "schema": 4, "diverged": 5}

_DURATION = re.compile(r"^\s*([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*(mo|m|h|d|y|s)?\s*$")
_UNIT_SECONDS = {
    "s": 1.0, None: 1.0, "m": 60.0, "h": 3600.0, "d": 86400.0,
    "mo": 365.25 * 86400.0 / 12, "y": 365.25 * 86400.0,
}


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def parse_duration(text: str) -> float:
    """'30m', '6h', '365d', '6mo', '2y' or bare seconds -> seconds."""
    m = _DURATION.match(str(text))
    if not m:
        raise argparse.ArgumentTypeError(f"invalid duration {text!r}")
    return float(m.group(1)) * _UNIT_SECONDS[m.group(2)]


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def _require(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).exists():
            raise CliError("missing-file", f"{p} does not exist")


def read_kv_config(path) -> dict[str, str]:
    """``key = value`` lines; '#' starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError("usage", f"{path}:{n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _snapshot(out_dir, name: str, args) -> None:
    from . import __version__

    d = {k: v for k, v in vars(args).items() if k not in ("func",)}
    d["version"] = __version__
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    Path(out_dir, f"{name}.config.json").write_text(json.dumps(d, indent=2, sort_keys=True, default=str) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> None:
    from .synthgen import GeneratorConfig, apply_inclusion_filter, generate_population, write_records

    cfg = GeneratorConfig(seed=args.seed, n_patients=args.patients, followup_days=args.followup_days)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "records.jsonl", "w", encoding="utf-8") as fh:
        n = write_records(apply_inclusion_filter(generate_population(cfg)), fh)
    _snapshot(out, "synth", args)
    print(f"wrote {n} records to {out / 'records.jsonl'}")


def _load_records(path):
    from .synthgen import read_records

    _require(path)
    with open(path, encoding="utf-8") as fh:
        return list(read_records(fh))


def _read_split(vocab_dir):
    split = {}
    for line in Path(vocab_dir, "split.tsv").read_text(encoding="utf-8").splitlines():
        pid, part = line.split("\t")
        split[pid] = part
    return split


def cmd_build_vocab(args) -> None:
    from .sequencer import corpus_stats, lab_values, split_patients
    from .vocab import VocabConfig, build_vocabulary, fit_lab_bins

    records = _load_records(args.records)
    train_ids, _ = split_patients([r.patient_id for r in records], args.train_fraction, args.split_seed)
    train_set = set(train_ids)
    train = [r for r in records if r.patient_id in train_set]
    vocab = build_vocabulary(corpus_stats(train), VocabConfig(max_labs=args.max_labs, max_procedures=args.max_procedures))
    out = Path(args.out)
    vocab.save(out)
    fit_lab_bins(lab_values(train)).save(out / "lab_bins.tsv")
    (out / "split.tsv").write_text(
        "".join(f"{r.patient_id}\t{'train' if r.patient_id in train_set else 'test'}\n" for r in records))
    _snapshot(out, "build-vocab", args)
    print(f"vocabulary of {len(vocab)} tokens; {len(train)} training patients")


def _load_vocab(vocab_dir):
    from .vocab import QuantileBinning, Vocabulary

    _require(Path(vocab_dir, "vocab.tsv"), Path(vocab_dir, "lab_bins.tsv"))
    return Vocabulary.load(vocab_dir), QuantileBinning.load(Path(vocab_dir, "lab_bins.tsv"))


def cmd_tokenize(args) -> None:
    import numpy as np

    from .sequencer import tokenize_record, write_token_file

    vocab, bins = _load_vocab(args.vocab_dir)
    records = _load_records(args.records)
    split = _read_split(args.vocab_dir)
    if args.subset != "all":
        records = [r for r in records if split.get(r.patient_id) == args.subset]
    rng = np.random.default_rng(args.seed)
    seqs = [tokenize_record(r, vocab, bins, rng) for r in records]
    write_token_file(args.out, seqs, vocab.hash(), args.context_len)
    print(f"wrote {sum(len(s) for s in seqs)} tokens for {len(seqs)} patients to {args.out}")


def _model_config(args, vocab_size):
    from .model import ModelConfig

    return ModelConfig(vocab_size=vocab_size, n_layers=args.layers, d_model=args.d_model, n_heads=args.heads,
                       d_mlp=args.d_mlp or 4 * args.d_model, context_len=args.context_len)


def _train_config(args, steps=None):
    from .trainer import TrainConfig

    return TrainConfig(batch_size=args.batch_size, steps=steps or args.steps, peak_lr=args.lr,
                       warmup_steps=min(args.warmup, steps or args.steps), weight_decay=args.weight_decay,
                       clip_norm=args.clip, seed=args.seed)


def _read_tokens(path, vocab):
    from .sequencer import read_token_file

    _require(path)
    return read_token_file(path, vocab.hash())


def cmd_train(args) -> None:
    from . import model as M
    from .trainer import epoch_batches, train

    vocab, _ = _load_vocab(args.vocab_dir)
    _, seqs = _read_tokens(args.tokens, vocab)
    mc = _model_config(args, len(vocab))
    tc = _train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params = M.init_params(mc, args.seed)
    res = train(params, mc, epoch_batches(seqs, mc.context_len, vocab, tc.batch_size, args.seed), tc,
                loss_csv=out / "loss.csv", diagnostic_path=out / "diverged.ckpt")
    M.save_checkpoint(out / "model.ckpt", res.params, mc, step=tc.steps,
                      rng_state={"seed": args.seed, "epoch_stream": [args.seed]},
                      extra={"final_loss": res.curve[-1]["loss"], "tokens": res.ledger.tokens,
                             "flops": res.ledger.flops}, tensors=res.opt_state)
    _snapshot(out, "train", args)
    print(f"final loss {res.curve[-1]['loss']:.4f} after {tc.steps} steps, {res.ledger.tflops:.4g} TFLOPs")


def cmd_sweep(args) -> None:
    import math

    import numpy as np

    from . import model as M
    from .scalinglaw import IsoFlopPoint, plan_isoflop_sweep, write_points
    from .trainer import epoch_batches, train

    vocab, _ = _load_vocab(args.vocab_dir)
    _, seqs = _read_tokens(args.tokens, vocab)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    configs = {}
    for width in args.widths:
        a = argparse.Namespace(**{**vars(args), "d_model": width, "d_mlp": 4 * width})
        mc = _model_config(a, len(vocab))
        configs[M.count_params(mc)["total"]] = mc
    points = []
    for C in args.budgets:
        for N, D in plan_isoflop_sweep(C, list(configs), args.context_len * args.batch_size):
            mc = configs[N]
            steps = max(1, math.ceil(D / (args.batch_size * mc.context_len)))
            params = M.init_params(mc, args.seed)
            res = train(params, mc, epoch_batches(seqs, mc.context_len, vocab, args.batch_size, args.seed),
                        _train_config(args, steps))
            tail = [r["loss"] for r in res.curve[-max(1, steps // 10):]]
            points.append(IsoFlopPoint(res.ledger.flops, N, res.ledger.tokens, float(np.mean(tail))))
            print(f"C={C:.3g} N={N} D={res.ledger.tokens} loss={points[-1].loss:.4f}")
    write_points(out / "sweep.csv", points)
    _snapshot(out, "sweep", args)


def cmd_fit_scaling(args) -> None:
    from .scalinglaw import IsoFlopPoint, fit_sweep, read_points, write_fit

    _require(args.sweep)
    points = read_points(args.sweep)
    # budgets are regrouped by the planned compute, tokens rounding makes achieved C differ slightly
    if args.budgets:
        snapped = []
        for p in points:
            C = min(args.budgets, key=lambda b: abs(b - p.C) / b)
            snapped.append(IsoFlopPoint(C, p.N, p.D, p.loss))
        points = snapped
    fit = fit_sweep(points)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_fit(out / "fits.csv", out / "report.txt", fit)
    _snapshot(out, "fit-scaling", args)
    print((out / "report.txt").read_text().splitlines()[0])


def _cases(args, vocab, subset):
    from .synthgen import GeneratorConfig
    from .tasks import build_cases

    records = _load_records(args.records)
    split = _read_split(args.vocab_dir)
    records = [r for r in records if split.get(r.patient_id) == subset]
    _, seqs = _read_tokens(args.tokens if subset == "test" else args.train_tokens, vocab)
    by_id = {s.patient_id: s for s in seqs}
    missing = [r.patient_id for r in records if r.patient_id not in by_id]
    if missing:
        raise CliError("schema", f"token file lacks {len(missing)} {subset} patients")
    return build_cases(records, [by_id[r.patient_id] for r in records], GeneratorConfig(), horizon=args.tau)


def _write_labels(path, cases) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "time", "label", "true_probability", "has_condition"])
        for c in cases:
            w.writerow([c.patient_id, c.time, int(c.label), repr(c.true_probability), int(c.has_condition)])


def cmd_simulate(args) -> None:
    from . import model as M
    from .inference import (TargetSet, TransformerTokenModel, estimate_probability, simulate_batch,
                            write_estimates_csv, write_trajectories)
    from .vocab import TimeBucketTable

    vocab, _ = _load_vocab(args.vocab_dir)
    _require(args.checkpoint)
    try:
        params, mc, _, _ = M.load_checkpoint(args.checkpoint)
    except M.CheckpointError as e:
        raise CliError("schema", str(e)) from e
    if mc.vocab_size != len(vocab):
        raise CliError("schema", "checkpoint vocabulary size does not match the vocabulary")
    cases = _cases(args, vocab, "test")
    if args.limit:
        cases = cases[: args.limit]
    tm = TransformerTokenModel(params, mc, sliding=args.sliding)
    trajs = simulate_batch(tm, [c.prompt for c in cases], args.n, args.d, vocab.time_deltas(TimeBucketTable()),
                           args.temperature, args.seed, tau=args.tau, retries=args.retries,
                           batch_size=args.batch, prompt_keys=[c.index for c in cases], vocab=vocab)
    target = TargetSet.icd(*args.target.split(","))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [(c.patient_id, target.name, args.tau, estimate_probability(t, target, args.tau, vocab))
            for c, t in zip(cases, trajs)]
    with open(out / "probabilities.csv", "w", newline="") as fh:
        write_estimates_csv(fh, rows)
    _write_labels(out / "labels.csv", cases)
    write_trajectories(out / "trajectories.bin",
                       [(f"{c.patient_id}#{i}", t) for c, ts in zip(cases, trajs) for i, t in enumerate(ts)],
                       vocab.hash(), mc.context_len)
    _snapshot(out, "simulate", args)
    print(f"simulated {args.n} trajectories for {len(cases)} patients")


def _read_csv(path):
    import csv

    _require(path)
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_eval(args) -> None:
    import numpy as np

    from .evalsuite import (aucroc, calibration_and_ece, mae, permuted_label_auc, roc_curve, write_curve,
                            write_metrics)

    probs = {r["patient_id"]: r for r in _read_csv(args.probabilities)}
    labels = _read_csv(args.labels)
    rows = [(probs[r["patient_id"]], r) for r in labels if r["patient_id"] in probs and probs[r["patient_id"]]["value"] != ""]
    if not rows:
        raise CliError("error", "no scored patients")
    p = np.array([float(a["value"]) for a, _ in rows])
    y = np.array([int(b["label"]) for _, b in rows])
    truth = np.array([float(b["true_probability"]) for _, b in rows])
    task = args.task
    metrics = []
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if 0 < y.sum() < len(y):
        metrics.append({"metric": "aucroc", "task": task, "value": aucroc(p, y), "n": len(y)})
        metrics.append({"metric": "aucroc_permuted", "task": task, "value": permuted_label_auc(p, y, seed=args.seed),
                        "n": len(y), "params": {"permutations": 20}})
        write_curve(out / "roc.csv", ["threshold", "fpr", "tpr"], roc_curve(p, y))
    curve, ece = calibration_and_ece(p, y, args.bins)
    metrics.append({"metric": "ece", "task": task, "value": ece, "n": len(y), "params": {"bins": args.bins}})
    if np.all(np.isfinite(truth)):
        metrics.append({"metric": "mae_true_probability", "task": task, "value": mae(p, truth), "n": len(y)})
    metrics.append({"metric": "excluded", "task": task, "value": float(len(labels) - len(rows)), "n": len(labels)})
    write_curve(out / "calibration.csv", ["mean_predicted", "fraction_positive", "count"], curve.bins)
    write_metrics(out / "metrics.csv", out / "metrics.json", metrics)
    _snapshot(out, "eval", args)
    for m in metrics:
        print(f"{m['metric']}\t{m['value']:.4f}")


def cmd_baseline(args) -> None:
    import numpy as np

    from .baselines import BaselineConfig, LinearModel, featurize_many, fit, predict
    from .evalsuite import aucroc

    vocab, _ = _load_vocab(args.vocab_dir)
    train_cases = _cases(args, vocab, "train")
    test_cases = _cases(args, vocab, "test")
    V = len(vocab)
    X = featurize_many([c.prompt for c in train_cases], V)
    y = np.array([c.label for c in train_cases], dtype=float)
    model = fit(X, y, "classification", BaselineConfig(l1=args.l1, learning_rate=args.lr, seed=args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "baseline.txt")
    LinearModel.load(out / "baseline.txt")
    scores = predict(model, featurize_many([c.prompt for c in test_cases], V))
    from .inference import ProbabilityEstimate, write_estimates_csv

    with open(out / "probabilities.csv", "w", newline="") as fh:
        write_estimates_csv(fh, [(c.patient_id, "baseline", args.tau, ProbabilityEstimate(float(s), 0, 0, 0))
                                 for c, s in zip(test_cases, scores)])
    _write_labels(out / "labels.csv", test_cases)
    _snapshot(out, "baseline", args)
    labels = [c.label for c in test_cases]
    print(f"baseline aucroc {aucroc(scores, labels):.4f} on {len(test_cases)} held-out patients")


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def _model_flags(p) -> None:
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--d-mlp", type=int, default=0, help="0 means 4 x d-model")
    p.add_argument("--context-len", type=int, default=256)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--warmup", type=int, default=100)
    p.add_argument("--weight-decay", type=float, default=0.1)
    p.add_argument("--clip", type=float, default=1.0)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="medtimeline", description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="key = value file; explicit flags take precedence")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate synthetic patient records")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patients", type=int, default=1000)
    p.add_argument("--followup-days", type=int, default=5 * 365)
    p.add_argument("--out", required=True, help="output directory (records.jsonl)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-vocab", help="patient split, vocabulary and lab deciles from the training split")
    p.add_argument("--records", required=True)
    p.add_argument("--out", required=True, help="vocabulary directory")
    p.add_argument("--train-fraction", type=float, default=0.9)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--max-labs", type=int, default=1000)
    p.add_argument("--max-procedures", type=int, default=1500)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("tokenize", help="records -> binary token file")
    p.add_argument("--records", required=True)
    p.add_argument("--vocab-dir", required=True)
    p.add_argument("--out", required=True, help="token file path")
    p.add_argument("--subset", choices=["train", "test", "all"], default="all")
    p.add_argument("--context-len", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("train", help="train a model on a token file")
    p.add_argument("--tokens", required=True)
    p.add_argument("--vocab-dir", required=True)
    p.add_argument("--out", required=True, help="run directory (model.ckpt, loss.csv)")
    p.add_argument("--seed", type=int, default=0)
    _model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="isoFLOP sweep: train every planned (N, D) pair")
    p.add_argument("--tokens", required=True)
    p.add_argument("--vocab-dir", required=True)
    p.add_argument("--out", required=True, help="directory for sweep.csv")
    p.add_argument("--budgets", type=_floats, required=True, help="comma-separated FLOP budgets")
    p.add_argument("--widths", type=_ints, default=[16, 24, 32, 48, 64], help="comma-separated d-model values")
    p.add_argument("--seed", type=int, default=0)
    _model_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("fit-scaling", help="parabola and power-law fits of a sweep")
    p.add_argument("--sweep", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--budgets", type=_floats, default=None, help="planned budgets to group points by")
    p.set_defaults(func=cmd_fit_scaling)

    p = sub.add_parser("simulate", help="Monte Carlo trajectories and event probabilities for test patients")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab-dir", required=True)
    p.add_argument("--records", required=True)
    p.add_argument("--tokens", required=True, help="token file of the test split")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=64, help="trajectories per patient")
    p.add_argument("--d", type=int, default=500, help="tokens per trajectory")
    p.add_argument("--tau", type=parse_duration, default=parse_duration("730d"), help="horizon, e.g. 365d or 24mo")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--retries", type=int, default=0)
    p.add_argument("--target", default="I21", help="comma-separated ICD prefixes")
    p.add_argument("--limit", type=int, default=0, help="only the first LIMIT patients (0 = all)")
    p.add_argument("--batch", type=int, default=1024, help="decoder rows per batch")
    p.add_argument("--sliding", action="store_true", help="ring-buffer attention cache instead of re-encoding")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("eval", help="metrics for a probabilities.csv against labels.csv")
    p.add_argument("--probabilities", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--task", default="planted")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="bag-of-words logistic baseline on the same split")
    p.add_argument("--vocab-dir", required=True)
    p.add_argument("--records", required=True)
    p.add_argument("--train-tokens", required=True)
    p.add_argument("--tokens", required=True, help="token file of the test split")
    p.add_argument("--out", required=True)
    p.add_argument("--tau", type=parse_duration, default=parse_duration("730d"))
    p.add_argument("--l1", type=float, default=1e-4)
    p.add_argument("--lr", type=float, default=4.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_baseline)
    return ap


def _parse(argv) -> argparse.Namespace:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.config:
        _require(args.config)
        values = read_kv_config(args.config)
        sub = ap._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
        actions = {a.dest: a for a in sub._actions}  # noqa: SLF001
        defaults = {}
        for k, v in values.items():
            if k not in actions or k in ("help",):
                raise CliError("usage", f"unknown config key {k!r} for {args.command}")
            a = actions[k]
            if isinstance(a, argparse._StoreTrueAction):  # noqa: SLF001
                defaults[k] = v.lower() in ("1", "true", "yes", "on")
            else:
                defaults[k] = a.type(v) if a.type else v
        sub.set_defaults(**defaults)
        for a in sub._actions:  # noqa: SLF001
            if a.dest in defaults:
                a.required = False
        args = ap.parse_args(argv)
    return args


def run(argv=None) -> int:
    threads = os.environ.get("MEDTIMELINE_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)
    try:
        args = _parse(sys.argv[1:] if argv is None else argv)
        args.func(args)
        return EXIT_CODES["ok"]
    except CliError as e:
        return _fail(e.code, str(e))
    except FileNotFoundError as e:
        return _fail("missing-file", str(e))
    except Exception as e:  # noqa: BLE001
        from .synthgen import SchemaError
        from .trainer import TrainingDiverged

        if isinstance(e, SchemaError):
            return _fail("schema", str(e))
        if isinstance(e, TrainingDiverged):
            return _fail("diverged", str(e))
        return _fail("error", f"{type(e).__name__}: {e}")


def _fail(code: str, message: str) -> int:
    one_line = " ".join(str(message).split())
    print(f"error code={code} message={one_line}", file=sys.stderr)
    return EXIT_CODES[code]


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
