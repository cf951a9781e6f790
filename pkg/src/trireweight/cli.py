"""Command-line entry point: ``simulate | train | verify | report``.

Exit codes: 0 success, 2 input or config error, 3 I/O error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as _dt
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import Config, ConfigFileError, load_config, parse_config
from .datasim import (ConfigError, SchemaError, augment, cluster_geometry, make_original,
                      read_originals_csv, read_pool_csv, write_originals_csv, write_pool_csv)
from .models import load_checkpoint
from .theory import (PairedRuns, VerificationReport, quintile_clean_fractions,
                     verify_generalization_trend, verify_monotone_descent,
                     verify_noise_risk_bound, verify_risk_decomposition,
                     verify_supervision_orderings, weight_noise_separation)
from .trainer import (ALL_COMBOS, DivergedRunError, RunMetrics, RunResult, TrainData, train,
                      run_ablation_matrix)

log = logging.getLogger("trireweight")

EXIT_OK, EXIT_INPUT, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4
CHECKS = ("decomposition", "t41", "t43", "t45", "t44-trend", "weight-sep")
TRAIN_MODES = ("trireweight", "sl", "nsl", "ablation")


class InputError(Exception):
    """Missing or malformed input; maps to exit code 2."""


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class Manifest:
    """Run manifest; the only file that carries timestamps."""

    def __init__(self, directory: Path, kind: str, cfg: Config, extra: dict | None = None):
        self.path = directory / "manifest.json"
        self.doc = {"kind": kind, "run_id": cfg.run_id(), "seed": cfg.seed,
                    "config": cfg.to_dict(), "config_text": cfg.to_text(),
                    "version": __version__, "started": _now(), "finished": None,
                    "status": "running", "artifacts": {}, **(extra or {})}
        self.write()

    def add(self, name: str, path: Path) -> Path:
        self.doc["artifacts"][name] = path.name
        return path

    def write(self) -> None:
        self.path.write_text(json.dumps(self.doc, indent=2, sort_keys=True))

    def finish(self, status: str = "ok") -> None:
        self.doc["finished"] = _now()
        self.doc["status"] = status
        self.write()


def _write_csv(path: Path, rows: Sequence[dict], columns: Sequence[str] | None = None) -> None:
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _cell(r.get(k)) for k in columns})


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return json.dumps(v)
    return "" if v is None else v


def _load(args) -> Config:
    if args.config is None:
        cfg = parse_config("")
    else:
        try:
            cfg = load_config(args.config)
        except OSError as exc:
            raise InputError(f"cannot read config {args.config}: {exc.strerror}")
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _outdir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = _load(args)
    out = _outdir(args.out)
    man = Manifest(out, "simulate", cfg)
    originals = make_original(cfg.sim)
    pool = augment(originals, cfg.sim)
    write_originals_csv(man.add("originals", out / "originals.csv"), originals)
    write_pool_csv(man.add("pool", out / "pool.csv"), pool, include_hidden=True)
    write_originals_csv(man.add("test", out / "test.csv"), make_original(cfg.sim, "test"))
    man.finish()
    print(f"wrote {len(originals)} originals and {len(pool)} generated samples to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _read_data(data_dir: Path, c: int, with_hidden: bool = False) -> TrainData:
    paths = {k: data_dir / f"{k}.csv" for k in ("originals", "pool", "test")}
    for k in ("originals", "pool"):
        if not paths[k].exists():
            raise InputError(f"missing {paths[k]}; run `trireweight simulate` first")
    try:
        originals = read_originals_csv(paths["originals"], c)
        pool = read_pool_csv(paths["pool"], with_hidden=with_hidden, c=c)
        test = read_originals_csv(paths["test"], c) if paths["test"].exists() else None
    except SchemaError as exc:
        col = f" (column {exc.column})" if exc.column else ""
        raise InputError(f"schema error{col}: {exc}")
    if originals.D != pool.X.shape[1] and len(pool):
        raise InputError("originals and pool disagree on feature count")
    return TrainData(originals, pool, test)


def _write_run(run_dir: Path, man: Manifest, res: RunResult, with_weights: bool) -> None:
    metrics_path = man.add("metrics", run_dir / "metrics.jsonl")
    with open(metrics_path, "w") as fh:
        for rec in res.metrics.records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    m = res.metrics
    _write_csv(man.add("trace", run_dir / "trace.csv"),
               [{"t": t, "L_weight_before": b, "L_weight_after": a, "grad_alpha_norm": g}
                for t, b, a, g in zip(m.trace_t, m.trace_outer_before, m.trace_outer_after,
                                      m.trace_grad_alpha_norm)],
               ["t", "L_weight_before", "L_weight_after", "grad_alpha_norm"])
    if with_weights and m.final_weights is not None:
        fw = m.final_weights
        _write_csv(man.add("weights", run_dir / "weights.csv"),
                   [{"origin_index": int(o), "gen_index": int(g), "weight": float(w)}
                    for o, g, w in zip(fw["origin_index"], fw["gen_index"], fw["weight"])],
                   ["origin_index", "gen_index", "weight"])
    final = m.records[-1] if m.records else {}
    _write_csv(man.add("summary", run_dir / "summary.csv"), [final] if final else [],
               sorted(final) if final else ["t"])


def cmd_train(args) -> int:
    cfg = _load(args)
    if args.mode not in TRAIN_MODES:
        raise InputError(f"--mode must be one of {TRAIN_MODES}")
    if args.data is None:
        raise InputError("--data DIR is required (output of `trireweight simulate`)")
    data_dir = Path(args.data)
    data = _read_data(data_dir, cfg.sim.c)
    run_dir = _outdir(Path(args.out) / f"{args.mode}-{cfg.run_id()}")
    man = Manifest(run_dir, "train", cfg, {"mode": args.mode,
                                           "data_dir": str(data_dir.resolve())})
    if args.mode == "ablation":
        table = run_ablation_matrix(data, cfg.trainer, ALL_COMBOS, cfg.run.seed_list(),
                                    jobs=args.jobs)
        _write_csv(man.add("ablation", run_dir / "ablation.csv"), table.cells,
                   ["combo", "seed", "accuracy", "error"])
        _write_csv(man.add("ablation_summary", run_dir / "ablation_summary.csv"),
                   table.summary(), ["combo", "mean", "sd", "n", "failed"])
        man.finish()
        print(f"ablation table written to {run_dir}")
        return EXIT_OK

    ckpt = man.add("checkpoint", run_dir / "checkpoint.json")
    metrics_path = man.add("metrics", run_dir / "metrics.jsonl")
    man.write()
    resume = ckpt if args.resume and ckpt.exists() else None
    stream = open(metrics_path, "a" if resume else "w")
    try:
        res = train(data, cfg.trainer, args.mode, checkpoint_path=ckpt, resume_from=resume,
                    on_record=lambda r: (stream.write(json.dumps(r, sort_keys=True) + "\n"),
                                         stream.flush()))
    except DivergedRunError:
        man.finish("diverged")
        raise
    except KeyboardInterrupt:
        man.finish("interrupted")
        raise
    finally:
        stream.close()
    _write_run(run_dir, man, res, args.mode == "trireweight")
    man.finish()
    print(f"run {cfg.run_id()} ({args.mode}) written to {run_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

def _runs(root: Path) -> list[dict]:
    found = []
    if not root.is_dir():
        return found
    for p in sorted(root.iterdir()):
        mf = p / "manifest.json"
        if p.is_dir() and mf.exists():
            doc = json.loads(mf.read_text())
            if doc.get("kind") == "train" and doc.get("status") == "ok":
                doc["dir"] = p
                found.append(doc)
    return found


def _run_result(run: dict) -> RunResult:
    ck = load_checkpoint(run["dir"] / run["artifacts"]["checkpoint"])
    metrics = RunMetrics.from_state(ck["state"]["metrics"])
    return RunResult(ck["theta"], ck["alpha"], metrics)


def _pick(runs: list[dict], mode: str, **conds) -> list[dict]:
    out = []
    for r in runs:
        if r.get("mode") != mode:
            continue
        tr = r["config"]["trainer"]
        if all(tr.get(k) == v for k, v in conds.items()):
            out.append(r)
    return out


def _config_of(run: dict) -> Config:
    return parse_config(run["config_text"], env={})


def _check(name: str, cfg: Config, runs: list[dict], relaxed: bool) -> VerificationReport:
    v = cfg.verify
    if name == "decomposition":
        cands = _pick(runs, "sl") + _pick(runs, "trireweight")
        if not cands:
            raise InputError("decomposition needs a trained classifier; "
                             "run `trireweight train --mode sl` first")
        rc = _config_of(cands[0])
        return verify_risk_decomposition(cfg.sim.gamma, cfg.sim.c, v.n_mc,
                                         _run_result(cands[0]).theta, rc.trainer.model,
                                         cluster_geometry(rc.sim), seed=cfg.seed,
                                         prob_floor=rc.trainer.loss.prob_floor)
    if name == "t41":
        return verify_noise_risk_bound(cfg.sim, cfg.trainer.model, cfg.trainer.loss.prob_floor,
                                       n_eval=v.n_eval)
    if name == "t44-trend":
        return verify_generalization_trend(v.n_list(), cfg.sim, cfg.trainer, cfg.run.seed_list())
    if name == "t43":
        paired = []
        for r in _pick(runs, "trireweight", full_batch=False, force_weight=None):
            match = {m: [s for s in _pick(runs, m) if s["seed"] == r["seed"]
                         and s["data_dir"] == r["data_dir"]] for m in ("sl", "nsl")}
            if not match["sl"] or not match["nsl"]:
                continue
            rc = _config_of(r)
            data = _read_data(Path(r["data_dir"]), rc.sim.c)
            zero = train(data, rc.trainer.replace(force_weight=0.0), "trireweight")
            paired.append(PairedRuns(data.originals, _run_result(r),
                                     _run_result(match["sl"][0]), _run_result(match["nsl"][0]),
                                     zero, rc.trainer.model, rc.trainer.loss.prob_floor))
        if not paired:
            raise InputError("t43 needs trireweight, sl and nsl runs on the same data and seed; "
                             "run `trireweight train` with each --mode first")
        return verify_supervision_orderings(paired, tol=v.ordering_tol)
    if name == "t45":
        full = _pick(runs, "trireweight", full_batch=True)
        if full:
            return verify_monotone_descent(_run_result(full[0]).metrics)
        stoch = _pick(runs, "trireweight")
        if relaxed and stoch:
            return verify_monotone_descent(_run_result(stoch[0]).metrics, relaxed=True)
        raise InputError("t45 needs a full-batch trireweight run (set trainer.full_batch = true) "
                         "or --relaxed with a stochastic run")
    if name == "weight-sep":
        cands = [r for r in _pick(runs, "trireweight", force_weight=None)
                 if "weights" in r["artifacts"]]
        if not cands:
            raise InputError("weight-sep needs a trireweight run with a weight table; "
                             "run `trireweight train --mode trireweight` first")
        r = cands[0]
        rc = _config_of(r)
        pool = _read_data(Path(r["data_dir"]), rc.sim.c, with_hidden=True).pool
        if pool.hidden is None:
            raise InputError("pool.csv lacks the hidden_true_class column")
        weights, rows = _read_weights(r["dir"] / r["artifacts"]["weights"], pool)
        return weight_noise_separation(weights, pool.hidden.is_noisy[rows], v.min_ranking_quality)
    raise InputError(f"unknown check {name!r}")


def _read_weights(path: Path, pool) -> tuple[np.ndarray, np.ndarray]:
    """Weights and the pool rows they belong to, joined on (origin_index, gen_index)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    where = {(int(o), int(g)): i for i, (o, g) in enumerate(zip(pool.origin_index,
                                                               pool.gen_index))}
    try:
        idx = np.array([where[(int(r["origin_index"]), int(r["gen_index"]))] for r in rows],
                       dtype=np.int64)
    except KeyError as exc:
        raise InputError(f"{path}: weight row {exc.args[0]} is not in the pool") from None
    if idx.size == 0:
        raise InputError(f"{path}: no weight rows")
    return np.array([float(r["weight"]) for r in rows]), idx


def cmd_verify(args) -> int:
    cfg = _load(args)
    names = CHECKS if args.check == "all" else (args.check,)
    if args.check != "all" and args.check not in CHECKS:
        raise InputError(f"check must be one of {CHECKS + ('all',)}")
    runs = _runs(Path(args.inputs)) if args.inputs else []
    reports = [_check(n, cfg, runs, args.relaxed or cfg.verify.relaxed) for n in names]
    out = _outdir(args.out)
    man = Manifest(out, "verify", cfg, {"checks": list(names)})
    for rep in reports:
        (man.add(f"report-{rep.check}", out / f"report-{rep.check}.json")).write_text(
            rep.to_json() + "\n")
    _write_csv(man.add("summary", out / "verify_summary.csv"),
               [r.summary_row() for r in reports], ["check", "verdict", "pass", "conditions"])
    ok = all(r.passed for r in reports)
    man.finish("ok" if ok else "failed")
    for r in reports:
        print(f"{r.check:14s} {r.verdict}")
    return EXIT_OK if ok else 1


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def cmd_report(args) -> int:
    runs = [r for r in _runs(Path(args.runs)) if r.get("mode") in ("trireweight", "sl", "nsl")]
    if not runs:
        raise InputError(f"no completed runs under {args.runs}")
    cfg = _load(args)
    out = _outdir(args.out)
    man = Manifest(out, "report", cfg, {"runs": [r["dir"].name for r in runs]})

    curves, by_ratio, quint = [], {}, []
    for r in runs:
        path = r["dir"] / r["artifacts"]["metrics"]
        recs = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
        for rec in recs:
            curves.append({"run_id": r["run_id"], "mode": r["mode"], "seed": r["seed"],
                           **{k: rec.get(k) for k in ("t", "L_cls", "L_weight", "train_risk",
                                                      "test_risk", "train_accuracy",
                                                      "test_accuracy", "mean_weight")}})
        if recs and "test_accuracy" in recs[-1]:
            key = (r["mode"], r["config"]["sim"]["m"])
            by_ratio.setdefault(key, []).append(recs[-1]["test_accuracy"])
        if r["mode"] == "trireweight" and "weights" in r["artifacts"]:
            rc = _config_of(r)
            pool = _read_data(Path(r["data_dir"]), rc.sim.c, with_hidden=True).pool
            if pool.hidden is not None and len(pool):
                w, rows = _read_weights(r["dir"] / r["artifacts"]["weights"], pool)
                quint.append(quintile_clean_fractions(w, pool.hidden.is_noisy[rows]))
    cols = ["run_id", "mode", "seed", "t", "L_cls", "L_weight", "train_risk", "test_risk",
            "train_accuracy", "test_accuracy", "mean_weight"]
    curves.sort(key=lambda c: (c["mode"], c["run_id"], c["t"]))
    _write_csv(man.add("loss_curves", out / "loss_curves.csv"), curves, cols)
    ratio_rows = [{"method": mode, "m": m, "test_accuracy_mean": float(np.mean(v)),
                   "test_accuracy_sd": float(np.std(v, ddof=1)) if len(v) > 1 else 0.0,
                   "runs": len(v)} for (mode, m), v in sorted(by_ratio.items())]
    _write_csv(man.add("expansion_ratio", out / "expansion_ratio.csv"), ratio_rows,
               ["method", "m", "test_accuracy_mean", "test_accuracy_sd", "runs"])
    q = np.mean(quint, axis=0) if quint else None
    _write_csv(man.add("weight_quintiles", out / "weight_quintiles.csv"),
               [{"quintile": i + 1, "clean_fraction": float(q[i]), "runs": len(quint)}
                for i in range(5)] if q is not None else [],
               ["quintile", "clean_fraction", "runs"])
    man.finish()
    print(f"report written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trireweight", description=__doc__.splitlines()[0])
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="key=value config file (defaults if omitted)")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--seed", type=int, help="override run.seed")

    sp = sub.add_parser("simulate", help="write originals, generated pool and test CSVs")
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("train", help="train one method or the ablation matrix")
    common(sp)
    sp.add_argument("--data", help="directory written by `simulate`")
    sp.add_argument("--mode", default="trireweight", choices=TRAIN_MODES)
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--resume", action="store_true", help="continue from the run's checkpoint")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("verify", help="run theory checks and write JSON reports")
    common(sp)
    sp.add_argument("check", choices=CHECKS + ("all",))
    sp.add_argument("--inputs", help="directory holding train run directories")
    sp.add_argument("--relaxed", action="store_true", help="95%% descent check on stochastic runs")
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("report", help="write tidy CSVs for plotting")
    common(sp)
    sp.add_argument("--runs", required=True, help="directory holding train run directories")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigFileError, ConfigError, InputError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DivergedRunError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
