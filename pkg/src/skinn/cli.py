"""Command-line entry point: ``skinn {simulate,train,evaluate,hedge,infer,alloc}``."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

log = logging.getLogger("skinn")

OUT_ENV = "SKINN_OUT_DIR"


class CliError(Exception):
    pass


def _params(pairs) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise CliError(f"--param expects key=value, got {item!r}")
        k, _, v = item.partition("=")
        out[k.strip().lower()] = v.strip()
    return out


def _take(params: dict, key: str, default, cast=float):
    v = params.pop(key, None)
    return default if v is None else cast(v)


def _reject_unknown(params: dict, kind: str) -> None:
    if params:
        raise CliError(f"unknown parameters for {kind}: {sorted(params)}")


def _out_dir(args) -> Path:
    out = args.out or os.environ.get(OUT_ENV)
    if not out:
        raise CliError(f"no output location: pass --out or set {OUT_ENV}")
    return Path(out)


# ----------------------------------------------------------------- simulate


def cmd_simulate(args) -> None:
    from .surrogate import SurrogateDataset, build_surrogate_dataset, bsm_surfaces
    from .synthetic import bsm_panel, heston_panel
    from .data import write_panel

    p = _params(args.param)
    out = _out_dir(args)
    seed = args.seed if args.seed is not None else 0
    kind = args.kind
    if kind == "bsm-panel":
        panel = bsm_panel(
            n_days=_take(p, "days", 60, int), sigma=_take(p, "sigma", 0.2), r=_take(p, "r", 0.02),
            noise=_take(p, "noise", 0.0), seed=seed, S0=_take(p, "s0", 100.0), mu=_take(p, "mu", 0.05),
            start=_take(p, "start", "2020-01-02", str), path_sigma=_take(p, "path_sigma", None),
        )
        _reject_unknown(p, kind)
        write_panel(panel, out)
    elif kind == "heston-panel":
        phi = tuple(_take(p, k, d) for k, d in
                    (("v_theta", 0.04), ("v0", 0.04), ("sigma_v", 0.5), ("rho", -0.7), ("kappa", 2.0)))
        panel, _ = heston_panel(
            n_days=_take(p, "days", 5, int), phi=phi, r=_take(p, "r", 0.02), seed=seed,
            S0=_take(p, "s0", 100.0), start=_take(p, "start", "2020-01-02", str),
            paths=_take(p, "paths", 20000, int),
        )
        _reject_unknown(p, kind)
        write_panel(panel, out)
    elif kind == "surfaces":
        surf, sig = bsm_surfaces(
            _take(p, "n", 500, int), (_take(p, "sigma_lo", 0.1), _take(p, "sigma_hi", 0.5)),
            r=_take(p, "r", 0.02), noise=_take(p, "noise", 0.0), seed=seed,
        )
        _reject_unknown(p, kind)
        out.parent.mkdir(parents=True, exist_ok=True)
        with out.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sigma"] + [f"g{i}" for i in range(surf.shape[1])])
            for s, row in zip(sig, surf):
                w.writerow([repr(float(s))] + [repr(float(v)) for v in row])
    elif kind == "surrogate-data":
        ds = build_surrogate_dataset(
            _take(p, "model", "HSV", str).upper(), _take(p, "n", 1000, int), seed=seed,
            paths=_take(p, "paths", 1000, int), jobs=args.jobs,
        )
        _reject_unknown(p, kind)
        ds.to_csv(out)
    else:  # pragma: no cover - argparse restricts choices
        raise CliError(f"unknown simulation kind {kind!r}")
    log.info("simulate %s -> %s", kind, out)


# -------------------------------------------------------------------- train


def _train_one(task):
    from .data import read_panel
    from .trainer import save_model, train_skinn

    cfg, panel_path, start, end, model_path, trace_path = task
    panel = read_panel(panel_path)
    if start is not None:
        panel = panel.between(start, end)
    model = train_skinn(cfg, panel)
    save_model(model, model_path)
    model.write_trace(trace_path)
    return model_path


def cmd_train(args) -> None:
    from .trainer import TrainConfig, read_config

    out = _out_dir(args)
    if args.surrogate_data or args.surfaces:
        return _train_surrogate(args, out)
    if not args.panel:
        raise CliError("train needs --panel")
    cfg = read_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out.mkdir(parents=True, exist_ok=True)
    if not args.rolling:
        _train_one((cfg, args.panel, None, None, out / "model.skinn", out / "trace.csv"))
        log.info("trained %s -> %s", cfg.repr, out / "model.skinn")
        return
    from .data import read_panel
    from .evaluation import build_schedule

    panel = read_panel(args.panel)
    periods = build_schedule(panel.date)
    name = args.name or _model_name(cfg)
    sub = out / name
    sub.mkdir(parents=True, exist_ok=True)
    tasks = [(cfg, args.panel, p.train_start, p.train_end, sub / f"period_{p.index:03d}.skinn",
              sub / f"trace_{p.index:03d}.csv") for p in periods]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            list(ex.map(_train_one, tasks))
    else:
        for t in tasks:
            _train_one(t)
    log.info("trained %d rolling periods -> %s", len(tasks), sub)


def _model_name(cfg) -> str:
    return "NN" if cfg.plain else f"SKINN-{cfg.repr.upper()}"


def _train_surrogate(args, out: Path) -> None:
    from .nn import MlpConfig
    from .surrogate import SurrogateDataset, train_autoencoder, train_surrogate

    p = _params(args.param)
    seed = args.seed or 0
    if args.surrogate_data:
        ds = SurrogateDataset.from_csv(args.surrogate_data)
        cfg = MlpConfig(input_dim=ds.X.shape[1], hidden_layers=_take(p, "layers", 3, int),
                        hidden_width=_take(p, "width", 64, int), activation="silu", seed=seed)
        frozen = train_surrogate(ds, cfg, epochs=_take(p, "epochs", 40, int), lr=_take(p, "lr", 3e-3))
        _reject_unknown(p, "surrogate training")
        out.parent.mkdir(parents=True, exist_ok=True)
        frozen.save(out)
        log.info("surrogate rmse %.3g -> %s", frozen.rmse, out)
        return
    with Path(args.surfaces).open(newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    surf = np.array([[float(v) for v in r[1:]] for r in rows])
    cfg = MlpConfig(hidden_layers=_take(p, "layers", 2, int), hidden_width=_take(p, "width", 64, int),
                    activation="silu", seed=seed)
    _, dec = train_autoencoder(surf, _take(p, "latent", 2, int), cfg, epochs=_take(p, "epochs", 2000, int),
                               lr=_take(p, "lr", 1e-3))
    _reject_unknown(p, "autoencoder training")
    out.parent.mkdir(parents=True, exist_ok=True)
    dec.save(out)
    log.info("decoder rmse %.3g -> %s", dec.rmse, out)


# ----------------------------------------------------------------- evaluate


def _discover(models_dir: Path) -> dict:
    """``{name: {period or 0: path}}`` for rolling subdirectories and single
    model files."""
    found = {}
    for sub in sorted(p for p in models_dir.iterdir() if p.is_dir()):
        files = sorted(sub.glob("period_*.skinn"))
        if files:
            found[sub.name] = {int(re.findall(r"\d+", f.stem)[-1]): f for f in files}
    for f in sorted(models_dir.glob("*.skinn")):
        found[f.stem] = {0: f}
    if not found:
        raise CliError(f"no model files under {models_dir}")
    return found


def cmd_evaluate(args) -> None:
    from .data import read_panel
    from .evaluation import (build_schedule, hedge_errors, pairwise_matrix, rmse, write_matrix,
                             write_period_report)
    from .trainer import load_model, objective_value

    if not args.models or not args.panel:
        raise CliError("evaluate needs --models and --panel")
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    panel = read_panel(args.panel)
    found = _discover(Path(args.models))
    try:
        periods = build_schedule(panel.date)
    except ValueError:
        periods = []
    records = []
    loss_rows = []
    for name, files in found.items():
        for key, path in sorted(files.items()):
            model = load_model(path)
            if key == 0:
                train_panel = panel
                targets = [(p.index, p) for p in periods] or [(1, None)]
            else:
                match = [p for p in periods if p.index == key]
                if not match:
                    raise CliError(f"{path}: period {key} is not in the panel's schedule")
                train_panel = panel.between(match[0].train_start, match[0].train_end)
                targets = [(key, match[0])]
            ld, ls, tot = objective_value(model, train_panel)
            loss_rows.append((name, key, ld, ls, tot))
            for idx, per in targets:
                rec = {"period": idx, "model": name}
                for tag in ("t1", "t2"):
                    if per is None:
                        win = panel
                    else:
                        lo, hi = per.windows()["test1" if tag == "t1" else "test2"]
                        win = panel.between(lo, hi)
                    rec[f"rmse_{tag}"] = rmse(model.price(win), win.mid) if len(win) else float("nan")
                    rec[f"he_{tag}"] = hedge_errors(model, win).he if len(win) else float("nan")
                records.append(rec)
    records.sort(key=lambda r: (r["period"], r["model"]))
    write_period_report(out / "periods.csv", records)
    with (out / "train_loss.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "period", "L_Data", "L_SK", "total"])
        for name, key, ld, ls, tot in loss_rows:
            w.writerow([name, key, repr(ld), repr(ls), repr(tot)])
    names = list(found)
    for metric, col, label in (("pricing", "rmse", "MSE"), ("hedging", "he", "HE^2")):
        for test in ("dm", "wilcoxon"):
            errs = {}
            for name in names:
                recs = [r for r in records if r["model"] == name]
                errs[name] = np.array([r[f"{col}_t1"] ** 2 for r in recs])
            try:
                mat_names, rows = pairwise_matrix(errs, test)
            except ValueError as exc:
                log.warning("%s %s matrix not computed: %s", test, metric, exc)
                mat_names, rows = names, [["n/a" if a != b else "" for b in names] for a in names]
            write_matrix(out / f"{test}_{metric}.csv", mat_names, rows)
    log.info("evaluated %d models over %d periods -> %s", len(names), len(periods), out)


# -------------------------------------------------------------- hedge/infer


def cmd_hedge(args) -> None:
    from .data import read_panel
    from .evaluation import hedge_errors
    from .trainer import load_model

    if not args.model or not args.panel:
        raise CliError("hedge needs --model and --panel")
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    panel = read_panel(args.panel)
    model = load_model(args.model)
    rows = [("model", hedge_errors(model, panel)), ("unhedged", hedge_errors(None, panel))]
    if model.rep is not None:
        rows.append(("structural", hedge_errors((model.rep, model.phi), panel)))
    with (out / "hedge.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["hedger", "HE", "days", "skipped"])
        for name, res in rows:
            w.writerow([name, repr(res.he), len(res.daily), res.skipped])


def cmd_infer(args) -> None:
    from .data import read_panel
    from .inference import inference_report, write_report
    from .trainer import load_model

    if not args.model or not args.panel:
        raise CliError("infer needs --model and --panel")
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    model = load_model(args.model)
    rows, est = inference_report(model, read_panel(args.panel), alpha=args.alpha)
    if not rows:
        raise CliError("a plain network has no structured-knowledge parameters to infer")
    write_report(rows, out / "inference.csv")
    if est.regularized:
        log.warning("Hessian condition number %.3g: ridge applied", est.cond)


# -------------------------------------------------------------------- alloc

_ALLOC_KEYS = {"eta": 1.0, "l": 0.0, "u": 0.2, "lambda": 1.0, "epochs": 500, "lr": 1e-3,
               "train_frac": 0.5, "seed": 0}


def _read_alloc_config(path) -> dict:
    cfg = dict(_ALLOC_KEYS)
    if path:
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            k, _, v = (s.strip() for s in line.partition("="))
            if k not in cfg:
                raise CliError(f"{path}:{lineno}: unknown key {k!r}")
            cfg[k] = type(_ALLOC_KEYS[k])(float(v)) if k in ("epochs", "seed") else float(v)
    return cfg


def momentum_features(R: np.ndarray, t: int) -> np.ndarray:
    """Signals known at the close of day ``t``: last return, 5- and 20-day means."""
    lo5, lo20 = max(0, t - 4), max(0, t - 19)
    return np.column_stack([R[t], R[lo5 : t + 1].mean(axis=0), R[lo20 : t + 1].mean(axis=0)]) * 100.0


def cmd_alloc(args) -> None:
    from .evaluation import decile_backtest
    from .nn import mlp_forward
    from .trainer import train_meanvar

    if not args.panel:
        raise CliError("alloc needs --panel (a returns CSV: date, then one column per asset)")
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _read_alloc_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    with Path(args.panel).open(newline="") as fh:
        rows = list(csv.reader(fh))
    assets = rows[0][1:]
    R = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    T = len(R)
    split = int(T * cfg["train_frac"])
    if split < 21 or T - split < 2:
        raise CliError("returns file too short for the training/backtest split")
    Xtr = np.vstack([momentum_features(R, t) for t in range(19, split - 1)])
    ytr = np.concatenate([R[t + 1] for t in range(19, split - 1)]) * 100.0
    Sigma = np.cov(R[:split].T, ddof=1) * 1e4
    # the allocation term uses the latest training cross-section
    last = momentum_features(R, split - 2)
    res = train_meanvar(np.vstack([Xtr, last]), np.concatenate([ytr, R[split - 1] * 100.0]), Sigma,
                        cfg["eta"], cfg["l"], cfg["u"], cfg["lambda"], int(cfg["epochs"]), cfg["lr"],
                        seed=int(cfg["seed"]), n_alloc=len(assets))
    preds = np.array([mlp_forward(res.theta.flat, res.theta.config, momentum_features(R, t))
                      for t in range(split - 1, T - 1)])
    realised = R[split:]
    groups = decile_backtest(preds, realised)
    with (out / "backtest.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "mean_pct", "sd_pct", "sharpe", "flagged"])
        for g, m in groups.items():
            w.writerow([g, repr(m.mean_pct), repr(m.sd_pct), repr(m.sharpe), int(m.flagged)])
    with (out / "weights.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["asset", "weight", "above_u"])
        for a, wt in zip(assets, res.weights):
            w.writerow([a, repr(float(wt)), int(wt > cfg["u"] + 1e-6)])


# --------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="skinn", description="Structured-knowledge-informed option pricing networks")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--panel", help="option panel CSV (date,S,K,r,tau,mid[,option_id])")
    common.add_argument("--out", help=f"output file or directory (default ${OUT_ENV})")
    common.add_argument("--seed", type=int, default=None, help="root seed")
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="write synthetic datasets")
    s.add_argument("--kind", required=True, choices=["bsm-panel", "heston-panel", "surfaces", "surrogate-data"])
    s.add_argument("--param", action="append", metavar="KEY=VALUE")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", parents=[common], help="fit a model (or a surrogate)")
    t.add_argument("--rolling", action="store_true", help="one model per rolling period")
    t.add_argument("--name", help="subdirectory name for rolling models")
    t.add_argument("--surrogate-data", help="train a deep surrogate from this dataset CSV")
    t.add_argument("--surfaces", help="train an autoencoder on this surfaces CSV")
    t.add_argument("--param", action="append", metavar="KEY=VALUE")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", parents=[common], help="period reports and test matrices")
    e.add_argument("--models", help="directory of model files")
    e.set_defaults(func=cmd_evaluate)

    h = sub.add_parser("hedge", parents=[common], help="next-day hedging error")
    h.add_argument("--model", help="model file")
    h.set_defaults(func=cmd_hedge)

    i = sub.add_parser("infer", parents=[common], help="sandwich confidence intervals")
    i.add_argument("--model", help="model file")
    i.add_argument("--alpha", type=float, default=0.05)
    i.set_defaults(func=cmd_infer)

    a = sub.add_parser("alloc", parents=[common], help="mean-variance decile backtest")
    a.set_defaults(func=cmd_alloc)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except Exception as exc:  # one-line machine-readable failure
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
