"""Command-line interface: ``qsl <subcommand> ...``.

Exit codes: 0 success, 2 domain/validation error, 3 input format error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from qsl import fitting, laws, quant, stats
from qsl.errors import ConfigError, NonFiniteLoss, QSLError, SchemaError
from qsl.io import delta_observations, parse_runs, read_matrix
from qsl.lbfgs import OptimConfig

log = logging.getLogger("qsl")


def _fmt(x) -> str:
    return f"{float(x):.6g}"


def parse_grid(spec: str) -> np.ndarray:
    """``lo:hi:steps`` (log-spaced, inclusive) or a comma-separated list."""
    try:
        if ":" in spec:
            lo, hi, n = spec.split(":")
            return np.geomspace(float(lo), float(hi), int(n))
        return np.array([float(v) for v in spec.split(",")])
    except ValueError:
        raise SchemaError(f"bad grid specification {spec!r}") from None


def _load_params(path, tag=None):
    try:
        c, deltas = laws.load_params(path)
    except OSError as e:
        raise SchemaError(f"cannot read parameter file {path}: {e.strerror}") from None
    except (json.JSONDecodeError, TypeError, KeyError) as e:
        raise SchemaError(f"malformed parameter file {path}: {e}") from None
    if tag is not None and tag not in deltas:
        raise SchemaError(f"parameter file has no delta row for {tag!r}")
    return c, deltas


def _read_params(args, tag):
    if args.params:
        return _load_params(args.params, tag)
    c, deltas = laws.reference_params()
    return c, deltas


def _tag(args) -> str:
    return args.precision + ("_fc2_8" if getattr(args, "fc2_8bit", False) else "")


def _out(args):
    if args.out:
        return open(args.out, "w", newline="")
    return contextlib.nullcontext(sys.stdout)


# subcommands


def cmd_fit(args) -> int:
    try:
        records = parse_runs(args.runs)
    except OSError as e:
        raise SchemaError(f"cannot read runs file {args.runs}: {e.strerror}") from None
    cfg = OptimConfig(max_starts=args.max_starts)
    huber = fitting.HuberConfig(args.huber_delta)
    if args.law == "chinchilla":
        bf16 = [r for r in records if r.precision == "bf16"]
        res = fitting.fit_chinchilla(bf16, cfg, huber, not args.free_beta)
        actual = np.array([r.final_loss for r in bf16])
        pred = laws.chinchilla_loss(
            res.params, np.array([r.n_params for r in bf16]), np.array([r.d_tokens for r in bf16])
        )
        payload = laws.params_to_dict(chinchilla=res.params)
    else:
        tag = _tag(args)
        obs = delta_observations(records, tag, args.vector_len)
        res = fitting.fit_delta(obs, cfg, huber, freeze_gamma_d=args.freeze_gamma_d)
        N, D, g, actual = (np.array(c) for c in zip(*obs))
        pred = fitting.predict_delta(res.params, N, D, g)
        payload = laws.params_to_dict(deltas={tag: res.params})
    rel = laws.relative_error(pred, actual)
    mse, r2 = fitting.fit_metrics(pred, actual)
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
        report = res.report()
        report.update(relative_error=rel, law=args.law, n_observations=int(len(actual)))
        with open(args.report or str(Path(args.out).with_suffix(".report.json")), "w") as fh:
            json.dump(report, fh, indent=2)
            fh.write("\n")
    else:
        json.dump(payload, sys.stdout, indent=2)
        print()
    for name, value in (("relative_error", rel), ("mse", mse), ("r_squared", r2)):
        print(f"{name}: {_fmt(value)}", file=sys.stderr if not args.out else sys.stdout)
    return 0


def _grid_args(args):
    N = parse_grid(args.grid_n)
    D = parse_grid(args.grid_d)
    G = parse_grid(args.g)
    return N, D, G


def cmd_predict(args) -> int:
    tag = _tag(args)
    c, deltas = _read_params(args, tag)
    if c is None:
        raise SchemaError("parameter file has no chinchilla block")
    d = deltas[tag]
    with _out(args) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n_params", "d_tokens", "g_eff", "loss", "delta", "epm"])
        for n, dd, g in _iter_grid(*_grid_args(args)):
            dl = laws.delta(d, n, dd, g)
            w.writerow([_fmt(n), _fmt(dd), _fmt(g), _fmt(laws.chinchilla_loss(c, n, dd) + dl),
                        _fmt(dl), _fmt(laws.epm(c, d, n, dd, g))])
    return 0


def _iter_grid(N, D, G):
    for n in N:
        for d in D:
            for g in G:
                yield float(n), float(d), float(g)


def cmd_epm(args) -> int:
    tag = _tag(args)
    c, deltas = _read_params(args, tag)
    if c is None:
        raise SchemaError("parameter file has no chinchilla block")
    d = deltas[tag]
    with _out(args) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n_params", "d_tokens", "g_eff", "epm"])
        for n, dd, g in _iter_grid(*_grid_args(args)):
            w.writerow([_fmt(n), _fmt(dd), _fmt(g), _fmt(laws.epm(c, d, n, dd, g))])
    return 0


def cmd_contour(args) -> int:
    tag = _tag(args)
    _, deltas = _read_params(args, tag)
    d = deltas[tag]
    N = parse_grid(args.grid_n)
    D = parse_grid(args.grid_d)
    levels = parse_grid(args.levels)
    lines = laws.contour_lines(d, float(args.g), levels, (N.min(), N.max()), (D.min(), D.max()))
    with _out(args) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["level", "slope", "log10_n0", "log10_d0", "log10_n1", "log10_d1"])
        for ln in lines:
            (x0, y0), (x1, y1) = ln.endpoints
            w.writerow([repr(ln.level), repr(ln.slope), repr(x0), repr(y0), repr(x1), repr(y1)])
    print(f"slope: {d.gamma_N / d.gamma_D!r}", file=sys.stderr if not args.out else sys.stdout)
    return 0


def _quant_config(args) -> quant.QuantConfig:
    return quant.QuantConfig.from_dict(
        {"format": args.format, "granularity": args.granularity, "quantizer": args.quantizer}
    )


def cmd_quantize(args) -> int:
    x = read_matrix(args.input)
    cfg = _quant_config(args)
    q = quant.quantize(x, cfg)
    payload = {
        "config": cfg.to_dict(),
        "shape": list(x.shape),
        "codes": q.codes.tolist(),
        "scales": q.scales.tolist(),
        "dequantized": quant.dequantize(q).tolist(),
    }
    with _out(args) as fh:
        json.dump(payload, fh)
        fh.write("\n")
    return 0


def cmd_stats(args) -> int:
    x = read_matrix(args.input)
    rows = []
    if args.kurtosis:
        rows.append(("kurtosis", stats.kurtosis(x)))
    if args.format:
        m = stats.quant_error_metrics(x, _quant_config(args))
        rows += [("mse", m.mse), ("max_abs", m.max_abs), ("relative_l2", m.relative_l2)]
    if not rows:
        rows.append(("kurtosis", stats.kurtosis(x)))
    with _out(args) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in rows:
            w.writerow([k, _fmt(v)])
    return 0


def _load_json(path, what):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as e:
        raise SchemaError(f"cannot read {what} {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise SchemaError(f"{what} {path} is not valid JSON: {e.msg}", e.lineno) from None


def _load_plan(item: str):
    if item.endswith(".json"):
        try:
            return Path(item).stem, quant.QuantPlan.from_dict(_load_json(item, "plan"))
        except ConfigError as e:
            raise SchemaError(f"plan {item}: {e}") from None
    return item, quant.preset_plan(item)


def cmd_train_toy(args) -> int:
    from qsl.toy.corpus import synthetic_corpus
    from qsl.toy.model import ToyModelConfig
    from qsl.toy.train import TrainConfig, batch_at, delta_probe, measure_layer_kurtosis

    try:
        mcfg = ToyModelConfig(**(_load_json(args.model_config, "model config") if args.model_config else {}))
        tcfg = dict(_load_json(args.train_config, "train config") if args.train_config else {})
        if args.steps is not None:
            tcfg["steps"] = args.steps
            tcfg.setdefault("warmup_steps", max(1, args.steps // 10))
        tcfg.setdefault("seed", args.seed)
        tc = TrainConfig(**tcfg)
    except TypeError as e:
        raise SchemaError(f"bad config: {e}") from None
    plans = dict(_load_plan(p) for p in args.plans.split(","))
    if "bf16" not in plans:
        plans = {"bf16": quant.QuantPlan.uniform(), **plans}
    corpus = synthetic_corpus(args.seed, mcfg.vocab, args.corpus_tokens)
    try:
        runs = delta_probe(mcfg, tc, corpus, plans, model_seed=args.seed)
    except NonFiniteLoss as e:
        print(f"error: non-finite loss at step {e.step}: {e}", file=sys.stderr)
        return 4
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    probe = batch_at(corpus, -1 % (2**31), 16, mcfg.seq_len + 1, args.seed + 1)
    for name, run in runs.items():
        with open(out / f"curve_{name}.csv", "w", newline="") as fh:
            run.curve.write_csv(fh)
        with open(out / f"kurtosis_{name}.csv", "w", newline="") as fh:
            stats.write_kurtosis_csv(measure_layer_kurtosis(run.model, probe, plans[name]), fh)
    summary = {name: run.delta for name, run in runs.items()}
    with open(out / "delta.json", "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    for name, dl in summary.items():
        print(f"{name}: delta={_fmt(dl)} final_loss={_fmt(runs[name].curve.final)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qsl", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def law_args(p, grid=True):
        p.add_argument("--params", help="parameter JSON (default: reference constants)")
        p.add_argument("--precision", default="w4a4", choices=["w4a4", "w4a16", "w16a4"])
        p.add_argument("--fc2-8bit", action="store_true", help="use the FC2-input-8-bit row")
        p.add_argument("--grid-n", default="74e6:973e6:10")
        p.add_argument("--grid-d", default="10e9:200e9:10")
        p.add_argument("--out")

    p = sub.add_parser("fit", help="fit the Chinchilla law or the QAT error law")
    p.add_argument("--runs", required=True)
    p.add_argument("--law", choices=["chinchilla", "delta"], default="delta")
    p.add_argument("--precision", default="w4a4", choices=["w4a4", "w4a16", "w16a4"])
    p.add_argument("--fc2-8bit", action="store_true")
    p.add_argument("--freeze-gamma-d", type=float, default=None)
    p.add_argument("--free-beta", action="store_true", help="do not tie beta to alpha")
    p.add_argument("--huber-delta", type=float, default=1e-3)
    p.add_argument("--max-starts", type=int, default=500)
    p.add_argument("--vector-len", type=int, default=None)
    p.add_argument("--seed", type=int, default=0, help="unused; fits are deterministic")
    p.add_argument("--out")
    p.add_argument("--report")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="tabulate loss, delta and EPM over a grid")
    law_args(p)
    p.add_argument("--g", default="32,64,128,256")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("epm", help="effective parameter multiplier over a grid")
    law_args(p)
    p.add_argument("--g", default="32,64,128,256")
    p.set_defaults(func=cmd_epm)

    p = sub.add_parser("contour", help="iso-error lines in log10 space")
    law_args(p)
    p.add_argument("--g", type=float, default=128)
    p.add_argument("--levels", default="0.04,0.05,0.06,0.07,0.08")
    p.set_defaults(func=cmd_contour)

    for name, fn, help_ in (("quantize", cmd_quantize, "quantize a CSV matrix"),
                            ("stats", cmd_stats, "kurtosis and quantization-error metrics")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--input", required=True)
        p.add_argument("--format", default="int4" if name == "quantize" else None,
                       choices=["int4", "int8", "fp4_e2m1", "bf16"])
        p.add_argument("--granularity", default="per_tensor")
        p.add_argument("--quantizer", default="absmax", choices=list(quant.QUANTIZERS))
        p.add_argument("--out")
        if name == "stats":
            p.add_argument("--kurtosis", action="store_true")
        p.set_defaults(func=fn)

    p = sub.add_parser("train-toy", help="train toy QAT models and report delta")
    p.add_argument("--plans", default="bf16,w4a4_g32")
    p.add_argument("--model-config")
    p.add_argument("--train-config")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corpus-tokens", type=int, default=200_000)
    p.add_argument("--out", default="toy_out")
    p.set_defaults(func=cmd_train_toy)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("QSL_THREADS")
    if threads:
        log.info("QSL_THREADS=%s", threads)
    try:
        return args.func(args)
    except QSLError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
