"""Command-line entry point.

Exit codes: 0 success, 1 finished with warnings (or hit an iteration cap),
2 LC not converged within max_outer, 3 configuration error, 4 numeric error,
5 I/O error. Flags override config-file values, which override defaults.
"""

import argparse
import json
import logging
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from . import harness
from .compression import (
    ADAPTIVE_QUANT,
    BINARIZE,
    KINDS,
    LOW_RANK,
    PRUNE,
    SparseParams,
    oracle_lowrank,
    oracle_quant,
    oracle_sign_loss,
    oracle_support_loss,
    project,
    storage_cost,
)
from .errors import ConfigError, FormatError, NumericError
from .lc import MetricsRecord, StuckAtDCWarning, dc_run, idc_run, lc_run, retrain_after_prune
from .model import loss_eval, train_reference

EXIT_OK = 0
EXIT_WARN = 1
EXIT_NOT_CONVERGED = 2
EXIT_CONFIG = 3
EXIT_NUMERIC = 4
EXIT_IO = 5

log = logging.getLogger("lccompress")
log.setLevel(logging.INFO)


# -- plumbing ----------------------------------------------------------------

def _common_parser():
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("common options")
    g.add_argument("--config", help="INI config file; flags override its values")
    g.add_argument("--seed", type=int, help="run seed (k-means restarts, SGD order, initialization)")
    g.add_argument("--out-dir", help="directory for every output file")
    g.add_argument("--method", choices=("qp", "al"), help="quadratic penalty or augmented Lagrangian")
    g.add_argument("--scheme", choices=KINDS, help="compression scheme")
    g.add_argument("--level", type=int, help="compression level: K, rank r or kappa")
    g.add_argument("--mu0", type=float, help="initial penalty parameter")
    g.add_argument("--a", type=float, help="multiplicative penalty growth factor (> 1)")
    g.add_argument("--tol", type=float, help="stop when ||w - Delta(theta)|| falls below this")
    g.add_argument("--max-outer", type=int, help="maximum number of outer LC iterations")
    g.add_argument("--reference", help="reference model file (default: reference.model in the config file's out_dir)")
    return p


def build_parser():
    common = _common_parser()
    parser = argparse.ArgumentParser(
        prog="lccompress",
        description="Constrained model compression by alternating learning and compression steps.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    sub.add_parser("train-ref", parents=[common], help="train the uncompressed reference model")

    p = sub.add_parser("compress", parents=[common], help="run the LC algorithm on the reference")
    p.add_argument("--no-multiplier-updates", action="store_true",
                   help="keep the multipliers at zero (AL then matches QP exactly)")

    p = sub.add_parser("baseline", parents=[common], help="direct compression and retraining baselines")
    p.add_argument("--kind", choices=("dc", "idc", "retrain"), required=True,
                   help="dc: compress once; idc: iterate retrain/compress; retrain: refit pruned weights")
    p.add_argument("--rounds", type=int, help="iDC rounds")
    p.add_argument("--solver", choices=("auto", "exact", "gd", "sgd"), default="auto",
                   help="retraining solver (exact needs least squares)")

    sub.add_parser("oracle", parents=[common], help="exhaustive ground-truth optimum for small instances")

    p = sub.add_parser("evaluate", parents=[common], help="loss of a saved model on the configured data")
    p.add_argument("--model", help="model file (default OUT_DIR/compressed.model)")

    p = sub.add_parser("report", parents=[common], help="summary table and plot data from metrics files")
    p.add_argument("metrics", nargs="+", help="metrics files written by compress or baseline")

    p = sub.add_parser("sweep", parents=[common], help="compress over several levels and seeds")
    p.add_argument("--levels", type=int, nargs="+", required=True, help="compression levels to run")
    p.add_argument("--seeds", type=int, nargs="+", help="seeds to run (default: --seed)")
    p.add_argument("--jobs", type=int, default=1, help="concurrent worker processes")
    return parser


def resolve_config(args):
    """File values first, then flags."""
    cfg = harness.load_config(args.config) if args.config else harness.default_config()
    lc_kw = {}
    for flag, key in (("method", "method"), ("mu0", "mu0"), ("a", "a"), ("tol", "constraint_tol"),
                      ("max_outer", "max_outer")):
        value = getattr(args, flag, None)
        if value is not None:
            lc_kw[key] = value
    if getattr(args, "no_multiplier_updates", False):
        lc_kw["update_multipliers"] = False
    if args.seed is not None:
        lc_kw["seed"] = args.seed
        cfg.run.seed = args.seed
    if lc_kw:
        cfg.lc = replace(cfg.lc, **lc_kw)
    if args.out_dir is not None:
        if cfg.run.reference is None and args.command != "train-ref":
            # the reference stays where train-ref put it under the config's out_dir
            cfg.run.reference = cfg.reference_path()
        cfg.run.out_dir = args.out_dir
    if args.reference is not None:
        cfg.run.reference = args.reference
    if args.scheme is not None:
        if args.scheme != cfg.scheme.kind:
            cfg.scheme.level = None
        cfg.scheme.kind = args.scheme
    if args.level is not None:
        cfg.scheme.level = args.level
    if getattr(args, "rounds", None) is not None:
        cfg.run.rounds = args.rounds
    return harness.validate_config(cfg, args.config or "<flags>")


def _base_dir(args):
    return os.path.dirname(os.path.abspath(args.config)) if args.config else "."


def _prepare_out(cfg):
    try:
        os.makedirs(cfg.run.out_dir, exist_ok=True)
    except OSError as exc:
        raise FormatError(f"cannot create {cfg.run.out_dir}: {exc.strerror}") from None
    return cfg.run.out_dir


def _out(cfg, name):
    return os.path.join(cfg.run.out_dir, name)


def _write_json(path, obj):
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise FormatError(f"cannot write {path}: {exc.strerror}") from None


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc.strerror}") from None
    except ValueError as exc:
        raise FormatError(f"{path}: bad JSON ({exc})") from None


def _fresh_metrics(cfg):
    path = _out(cfg, "metrics.jsonl")
    if os.path.exists(path):
        os.remove(path)
    return path


def _load_reference(cfg):
    return harness.load_model(cfg.reference_path())


def _attach_log(cfg):
    handler = logging.FileHandler(_out(cfg, "run.log"), mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    log.addHandler(handler)
    return handler


def _storage(scheme, theta, cfg):
    cost = storage_cost(scheme, theta, cfg.run.float_bits)
    return {"theta_bits": cost.theta_bits, "overhead_bits": cost.overhead_bits, "total_bits": cost.total_bits}


def _summary(cmd, cfg, scheme, task, w_ref, w_final, theta, extra):
    out = {
        "command": cmd,
        "scheme": scheme.kind,
        "level": scheme.level,
        "seed": cfg.run.seed,
        "loss_reference": loss_eval(task, w_ref),
        "loss_compressed": loss_eval(task, w_final),
        "storage": _storage(scheme, theta, cfg),
    }
    out.update(extra)
    return out


# -- subcommands -------------------------------------------------------------

def cmd_train_ref(args, cfg):
    task = harness.build_task(cfg.task, _base_dir(args))
    _prepare_out(cfg)
    t = cfg.train
    res = train_reference(task, seed=cfg.run.seed, max_iter=t.max_iter, grad_tol=t.grad_tol,
                          batch_size=t.batch_size, max_epochs=t.max_epochs)
    harness.save_model(cfg.reference_path(), res.w, task.family)
    path = _out(cfg, "train.jsonl")
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for it, loss, gnorm in res.history:
                fh.write(json.dumps({"iteration": it, "loss": loss, "grad_norm": gnorm}) + "\n")
    except OSError as exc:
        raise FormatError(f"cannot write {path}: {exc.strerror}") from None
    summary = {"command": "train-ref", "family": task.family, "iterations": res.iterations,
               "loss": res.loss, "grad_norm": res.grad_norm, "converged": res.converged}
    _write_json(_out(cfg, "train.json"), summary)
    print(f"reference loss {res.loss:.6g} after {res.iterations} iterations, |grad| {res.grad_norm:.3g}")
    if not res.converged:
        log.warning("iteration cap reached before the gradient tolerance (|grad| = %.3g)", res.grad_norm)
        return EXIT_WARN
    return EXIT_OK


def cmd_compress(args, cfg):
    task = harness.build_task(cfg.task, _base_dir(args))
    w_ref = _load_reference(cfg)
    scheme = cfg.build_scheme()
    _prepare_out(cfg)
    metrics = _fresh_metrics(cfg)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", StuckAtDCWarning)
        state, w_final = lc_run(task, scheme, cfg.lc, w_ref,
                                callback=lambda rec: harness.append_metrics(metrics, rec))
    for msg in state.warnings:
        log.warning(msg)
    harness.save_theta(_out(cfg, "theta.txt"), state.theta, scheme)
    harness.save_model(_out(cfg, "compressed.model"), w_final, task.family)
    last = state.history[-1]
    extra = {"method": cfg.lc.method, "converged": state.converged, "outer_iterations": state.k,
             "mu0": state.mu0, "constraint_tol": state.constraint_tol,
             "constraint_norm": last.constraint_norm, "warnings": state.warnings}
    _write_json(_out(cfg, "run.json"), _summary("compress", cfg, scheme, task, w_ref, w_final, state.theta, extra))
    print(f"LC ({cfg.lc.method}) {'converged' if state.converged else 'NOT converged'} after {state.k} "
          f"outer iterations, loss {loss_eval(task, w_final):.6g}")
    if not state.converged:
        log.warning("max_outer=%d reached with constraint norm %.3g", cfg.lc.max_outer, last.constraint_norm)
        return EXIT_NOT_CONVERGED
    return EXIT_WARN if state.warnings else EXIT_OK


def _baseline_record(k, task, w, w_comp, idx, iters):
    return MetricsRecord(k=k, mu=0.0, loss_w=loss_eval(task, w), loss_compressed=loss_eval(task, w_comp),
                         constraint_norm=float(np.linalg.norm(w.values[idx] - w_comp.values[idx])),
                         lambda_norm=0.0, lstep_iters_used=iters, wallclock_ms=0.0)


def cmd_baseline(args, cfg):
    task = harness.build_task(cfg.task, _base_dir(args))
    w_ref = _load_reference(cfg)
    kind = args.kind
    if kind == "retrain":
        if cfg.scheme.kind not in (None, PRUNE):
            raise ConfigError("retrain baseline works on prune-l0 only")
        cfg.scheme.kind = PRUNE
    scheme = cfg.build_scheme()
    _prepare_out(cfg)
    metrics = _fresh_metrics(cfg)
    idx = scheme.constrained_indices(w_ref)
    extra = {"baseline": kind}
    if kind == "dc":
        theta, w_final = dc_run(task, scheme, w_ref)
        harness.append_metrics(metrics, _baseline_record(0, task, w_ref, w_final, idx, 0))
    elif kind == "idc":
        res = idc_run(task, scheme, w_ref, cfg.run.rounds, cfg.run.lstep_budget, solver=args.solver,
                      seed=cfg.run.seed)
        theta, w_final = res.theta, res.w_compressed
        for r in res.rounds:
            harness.append_metrics(metrics, MetricsRecord(
                k=r.round, mu=0.0, loss_w=r.loss_w, loss_compressed=r.loss_compressed,
                constraint_norm=r.constraint_norm, lambda_norm=0.0,
                lstep_iters_used=cfg.run.lstep_budget, wallclock_ms=0.0))
        extra["cycle_start"] = res.cycle_start
        extra["theta_change"] = [r.theta_change for r in res.rounds]
        extra["rounds"] = cfg.run.rounds
    else:
        w_final = retrain_after_prune(task, w_ref, scheme.kappa, cfg.run.lstep_budget, solver=args.solver,
                                      seed=cfg.run.seed)
        x = w_final.values[idx]
        support = project(scheme, w_ref).support
        theta = SparseParams(support, x[support], size=idx.size)
        harness.append_metrics(metrics, _baseline_record(0, task, w_final, w_final, idx, cfg.run.lstep_budget))
    harness.save_theta(_out(cfg, "theta.txt"), theta, scheme)
    harness.save_model(_out(cfg, "compressed.model"), w_final, task.family)
    _write_json(_out(cfg, "run.json"), _summary(f"baseline-{kind}", cfg, scheme, task, w_ref, w_final, theta, extra))
    print(f"{kind} loss {loss_eval(task, w_final):.6g}")
    return EXIT_OK


def cmd_oracle(args, cfg):
    task = harness.build_task(cfg.task, _base_dir(args))
    w_ref = _load_reference(cfg)
    scheme = cfg.build_scheme()
    pm = scheme.validate(w_ref)
    report = {"scheme": scheme.kind, "level": scheme.level, "pm": pm}
    if scheme.kind == BINARIZE:
        theta, loss = oracle_sign_loss(task, w_ref)
        report.update(loss=loss, signs=[int(s) for s in theta.signs])
    elif scheme.kind == PRUNE:
        theta, loss = oracle_support_loss(task, w_ref, scheme.kappa)
        report.update(loss=loss, support=[int(i) for i in theta.support], vals=[float(v) for v in theta.vals])
    elif scheme.kind == ADAPTIVE_QUANT:
        theta, dist = oracle_quant(w_ref.masked(), scheme.K)
        report.update(distortion=dist, codebook=[float(c) for c in theta.codebook],
                      assign=[int(i) for i in theta.assign])
    elif scheme.kind == LOW_RANK:
        report["residual"] = oracle_lowrank(w_ref.layer(scheme.target_layer(w_ref)), scheme.rank)
    else:
        raise ConfigError(f"no exhaustive oracle for {scheme.kind}")
    _prepare_out(cfg)
    _write_json(_out(cfg, "oracle.json"), report)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_evaluate(args, cfg):
    task = harness.build_task(cfg.task, _base_dir(args))
    path = args.model or _out(cfg, "compressed.model")
    w = harness.load_model(path)
    result = {"model": path, "loss": loss_eval(task, w)}
    _prepare_out(cfg)
    _write_json(_out(cfg, "evaluate.json"), result)
    print(f"loss {result['loss']:.17g}")
    return EXIT_OK


REPORT_COLUMNS = ("run", "scheme", "level", "outer_iterations", "loss_w", "loss_compressed",
                  "constraint_norm", "storage_bits", "oracle_gap")
PLOT_COLUMNS = ("run", "scheme", "level", "storage_bits", "loss_compressed")


def _cell(v):
    if v is None:
        return "NA"
    if isinstance(v, float):
        return format(v, ".10g")
    return str(v)


def cmd_report(args, cfg):
    rows = []
    for path in args.metrics:
        records = harness.read_metrics(path)
        if not records:
            raise FormatError(f"{path}: no metrics records")
        last = records[-1]
        run_dir = os.path.dirname(os.path.abspath(path))
        side = _read_json(os.path.join(run_dir, "run.json")) if os.path.exists(os.path.join(run_dir, "run.json")) else {}
        oracle_path = os.path.join(run_dir, "oracle.json")
        gap = None
        if os.path.exists(oracle_path):
            oracle = _read_json(oracle_path)
            if "loss" in oracle:
                gap = last.loss_compressed - oracle["loss"]
        rows.append({
            "run": side.get("command", "run") + ":" + os.path.basename(run_dir),
            "scheme": side.get("scheme"),
            "level": side.get("level"),
            "outer_iterations": len(records),
            "loss_w": last.loss_w,
            "loss_compressed": last.loss_compressed,
            "constraint_norm": last.constraint_norm,
            "storage_bits": side.get("storage", {}).get("total_bits"),
            "oracle_gap": gap,
        })
    _prepare_out(cfg)
    lines = ["\t".join(REPORT_COLUMNS)] + ["\t".join(_cell(r[c]) for c in REPORT_COLUMNS) for r in rows]
    plot = ["# " + " ".join(PLOT_COLUMNS)]
    for r in sorted(rows, key=lambda r: (str(r["scheme"]), r["level"] or 0, r["run"])):
        plot.append(" ".join(_cell(r[c]) for c in PLOT_COLUMNS))
    for name, body in (("summary.tsv", lines), ("plot-data.txt", plot)):
        try:
            with open(_out(cfg, name), "w", encoding="utf-8") as fh:
                fh.write("\n".join(body) + "\n")
        except OSError as exc:
            raise FormatError(f"cannot write {name}: {exc.strerror}") from None
    print("\n".join(lines))
    return EXIT_OK


def _sweep_one(job):
    argv, = job
    return argv, main(argv)


def cmd_sweep(args, cfg):
    seeds = args.seeds or [cfg.run.seed]
    if cfg.scheme.kind is None:
        raise ConfigError("sweep needs a scheme")
    base = []
    if args.config:
        base += ["--config", args.config]
    for flag in ("method", "scheme", "mu0", "a", "tol", "max_outer", "reference"):
        value = getattr(args, flag)
        if value is not None:
            base += ["--" + flag.replace("_", "-"), str(value)]
    if args.reference is None:
        base += ["--reference", cfg.reference_path()]
    jobs = []
    for level in args.levels:
        for seed in seeds:
            out = os.path.join(cfg.run.out_dir, f"{cfg.scheme.kind}-L{level}-s{seed}")
            jobs.append((["compress", *base, "--level", str(level), "--seed", str(seed), "--out-dir", out],))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_one, jobs))
    else:
        results = [_sweep_one(j) for j in jobs]
    codes = [code for _, code in results]
    paths = [os.path.join(argv[argv.index("--out-dir") + 1], "metrics.jsonl") for argv, _ in results]
    done = [p for p, c in zip(paths, codes) if c in (EXIT_OK, EXIT_WARN, EXIT_NOT_CONVERGED)]
    if done:
        rep = argparse.Namespace(metrics=done)
        cmd_report(rep, cfg)
    return max(codes)


COMMANDS = {
    "train-ref": cmd_train_ref,
    "compress": cmd_compress,
    "baseline": cmd_baseline,
    "oracle": cmd_oracle,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "sweep": cmd_sweep,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if not logging.getLogger().handlers and not log.handlers:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    handler = None
    try:
        cfg = resolve_config(args)
        if args.command not in ("report",):
            _prepare_out(cfg)
            handler = _attach_log(cfg)
        return COMMANDS[args.command](args, cfg)
    except FormatError as exc:
        log.error("%s", exc)
        return EXIT_IO
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except NumericError as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_IO
    finally:
        if handler is not None:
            log.removeHandler(handler)
            handler.close()


if __name__ == "__main__":
    sys.exit(main())
