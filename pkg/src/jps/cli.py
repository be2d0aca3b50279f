"""Command line driver: ``jps gradcheck|select|train|ablate|diagnose --config cfg.json``.

Exit codes: 0 success, 2 config/validation, 3 provenance, 4 numeric, 5 I/O.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from .config import DEFAULT_RHO_GRID, ExperimentConfig, cache_dir
from .diagnostics import a_distance_proxy, bound_terms, jps_vs_direct_cmin, mask_rank_report
from .errors import ConfigError, GradCheckError, JPSError, ProvenanceError, ValidationError
from .model import Batch, backward, features, finite_diff_check, init_params
from .selection import Mask, SelectorKind, build_mask, mask_stats
from .tensor_core import SeededRng
from .trainer import CSV_COLUMNS, RunReport, Theta0Cache, TrainConfig, lodo_run, prepare_cell, sweep, train

log = logging.getLogger("jps")

EXIT_IO = 5
GRADCHECK_TOL = 1e-5
# close to the error-optimal central-difference step for float64 (cube root of eps)
GRADCHECK_STEP = 1e-5


def meta(cfg: ExperimentConfig) -> dict:
    return {"artifact_version": __version__, "config_hash": cfg.config_hash()}


def write_json(path, doc) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        fh.write(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


def runs_csv(entries, cfg: ExperimentConfig, aggregate: list | None = None) -> str:
    buf = io.StringIO()
    m = meta(cfg)
    buf.write(f"# artifact_version={m['artifact_version']} config_hash={m['config_hash']}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for e in entries:
        w.writerow([_fmt(v) for v in e.row()])
    if aggregate is not None:
        buf.write("\n# aggregate\n")
        cols = ["selector", "rho", "runs", "target_acc_mean", "target_acc_std", "val_acc_mean", "val_acc_std",
                "tunable_params_mean"]
        w.writerow(cols)
        for g in aggregate:
            w.writerow([_fmt(g[c]) for c in cols])
    return buf.getvalue()


def read_runs_csv(text: str) -> tuple[list, list]:
    """Parse a runs CSV back into (rows, aggregate rows), both as dicts."""
    blocks, cur = [], []
    for line in text.splitlines():
        if line.startswith("#"):
            continue
        if not line.strip():
            if cur:
                blocks.append(cur)
            cur = []
            continue
        cur.append(line)
    if cur:
        blocks.append(cur)
    parsed = [list(csv.DictReader(b)) for b in blocks]
    return parsed[0] if parsed else [], parsed[1] if len(parsed) > 1 else []


def _write_text(path, text):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# commands


def cmd_gradcheck(cfg: ExperimentConfig, args) -> int:
    mcfg = cfg.model
    seed = cfg.seeds[0]
    rng = SeededRng(seed, 51)
    params = init_params(mcfg, rng)
    for pid in params:
        params[pid][...] += 0.1 * rng.randn(params[pid].shape)
    n = args.batch
    batch = Batch(rng.randn((n, mcfg.num_tokens, mcfg.d_model)), rng.integers(0, mcfg.num_classes, n),
                  np.zeros(n, dtype=np.int64))

    def sabotaged(p, c, b):
        g = backward(p, c, b)
        g["head.bias"] = g["head.bias"] * 1.01
        return g

    grad_fn = sabotaged if args.sabotage else None
    report = finite_diff_check(params, mcfg, batch, h=args.h, tol=args.tol, grad_fn=grad_fn)
    doc = {"meta": meta(cfg), "report": report.to_dict()}
    out = args.out or os.path.join(cfg.output_dir, "gradcheck.json")
    write_json(out, doc)
    print(json.dumps(report.to_dict(), sort_keys=True))
    if not report.passed:
        raise GradCheckError(f"max relative error {report.max_rel_err:.3g} in {report.worst_param_id}")
    return 0


def _train_cfg(cfg: ExperimentConfig, args) -> TrainConfig:
    t = cfg.train
    if getattr(args, "selector", None):
        t = replace(t, selector_kind=SelectorKind.parse(args.selector).value)
    if getattr(args, "rho", None) is not None:
        t = replace(t, rho=args.rho)
    if getattr(args, "L", None) is not None:
        t = replace(t, L=args.L)
    if not 1 <= t.L <= cfg.model.num_blocks:
        raise ConfigError(f"L={t.L} outside [1, {cfg.model.num_blocks}]")
    return t


def _cell(cfg: ExperimentConfig, tcfg: TrainConfig, seed: int, target: int, Ls=None):
    if not 0 <= target < cfg.data.num_domains:
        raise ConfigError(f"target {target} outside [0, {cfg.data.num_domains})")
    return prepare_cell(cfg.data, cfg.model, tcfg, cfg.pretrain, seed, target, Theta0Cache(cache_dir()), Ls)


def cmd_select(cfg: ExperimentConfig, args) -> int:
    tcfg = _train_cfg(cfg, args)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    cell = _cell(cfg, tcfg, seed, args.target)
    rng = SeededRng(seed, 32 * 1000 + args.target)
    mask = build_mask(tcfg.kind, cell.grads[tcfg.L], tcfg.rho, rng, L=tcfg.L, seed=seed, dataset_hash=cell.prov)
    out = args.out or os.path.join(cfg.output_dir, "mask.json")
    _write_text(out, mask.dumps())
    print(json.dumps({"out": out, "selected": len(mask), **mask.stage_counts}, sort_keys=True))
    return 0


def _write_report(cfg, report: RunReport, stem: str, aggregate=False):
    os.makedirs(cfg.output_dir, exist_ok=True)
    jpath = os.path.join(cfg.output_dir, stem + ".json")
    cpath = os.path.join(cfg.output_dir, stem + ".csv")
    write_json(jpath, {"meta": meta(cfg), **report.to_dict()})
    agg = report.aggregate()["groups"] if aggregate else None
    _write_text(cpath, runs_csv(report.entries, cfg, agg))
    return jpath, cpath


def cmd_train(cfg: ExperimentConfig, args) -> int:
    tcfg = _train_cfg(cfg, args)
    if args.mask:
        mask = Mask.load(args.mask)
        tcfg = replace(tcfg, selector_kind=mask.kind.value, rho=mask.rho, L=mask.L if mask.L else tcfg.L)
        cell = _cell(cfg, tcfg, mask.seed, args.target)
        entry, _ = train(cell.theta0, cfg.model, tcfg, cell.split, mask, expected_hash=cell.prov, seed=mask.seed)
        report = RunReport([entry], {**cfg.to_dict(), "train": tcfg.to_dict()})
    else:
        report = lodo_run(cfg.data, cfg.model, tcfg, list(cfg.seeds), cfg.pretrain, cfg.workers, cache_dir())
    jpath, cpath = _write_report(cfg, report, "train_report")
    print(json.dumps({"json": jpath, "csv": cpath, "runs": len(report.entries)}))
    return 0


def ablation(cfg: ExperimentConfig, rho_grid, selectors) -> RunReport:
    """Cross of rho x selectors x seeds x targets, sorted for output."""
    if not rho_grid or not selectors:
        raise ConfigError("ablation needs a nonempty rho grid and selector list")
    tcfgs = []
    for sel in selectors:
        kind = SelectorKind.parse(sel)
        for rho in rho_grid:
            tcfgs.append(replace(cfg.train, selector_kind=kind.value, rho=float(rho)))
    entries = sweep(cfg.data, cfg.model, tcfgs, list(cfg.seeds), cfg.pretrain, cfg.workers, cache_dir())
    entries.sort(key=lambda e: (e.selector, e.rho, e.seed, e.target_domain))
    return RunReport(entries, {**cfg.to_dict(), "rho_grid": list(rho_grid), "selectors": list(selectors)})


def cmd_ablate(cfg: ExperimentConfig, args) -> int:
    grid = args.rho_grid or list(DEFAULT_RHO_GRID)
    selectors = args.selectors or ["jps", "direct", "without_variance"]
    report = ablation(cfg, grid, selectors)
    jpath, cpath = _write_report(cfg, report, "ablation", aggregate=True)
    print(json.dumps({"json": jpath, "csv": cpath, "runs": len(report.entries)}))
    return 0


def diagnose(cfg: ExperimentConfig, mask: Mask, target: int) -> dict:
    if len(mask) == 0:
        raise ValidationError("cannot diagnose an empty mask")
    if not mask.L:
        raise ValidationError("mask carries no layer count")
    tcfg = replace(cfg.train, L=mask.L, rho=mask.rho)
    cell = _cell(cfg, tcfg, mask.seed, target)
    if cell.prov != mask.dataset_hash:
        raise ProvenanceError("mask was built for different weights or data")
    g = cell.grads[mask.L]
    n = len(cell.split.train)
    proxies = []
    if cfg.diagnostics.proxy_enabled:
        feats = [features(cell.theta0, cfg.model, b.inputs) for b in cell.split.source_train]
        for i, f in enumerate(feats):
            rest = np.concatenate([x for j, x in enumerate(feats) if j != i])
            proxies.append(a_distance_proxy(f, rest, seed=mask.seed))
    terms = bound_terms(g, mask, cfg.diagnostics.beta, n, proxies)
    full = build_mask(SelectorKind.FULL, g, mask.rho, L=mask.L)
    out = {
        "meta": meta(cfg),
        "mask": {"selector_kind": mask.kind.value, "rho": mask.rho, "L": mask.L, "seed": mask.seed,
                 "target": target, "selected": len(mask)},
        "bound_terms": terms.to_dict(),
        "bound_terms_full_mask": bound_terms(g, full, cfg.diagnostics.beta, n).to_dict(),
        "mask_stats": mask_stats(mask).to_dict() if mask.stage_counts.get("per_domain_k") else None,
        "per_layer_rank": mask_rank_report(mask, cfg.model),
        "proxy_distances": proxies,
    }
    try:
        out["jps_vs_direct_cmin"] = jps_vs_direct_cmin(g, mask.rho)
    except ValidationError as exc:
        out["jps_vs_direct_cmin"] = {"skipped": str(exc)}
    return out


def cmd_diagnose(cfg: ExperimentConfig, args) -> int:
    mask = Mask.load(args.mask)
    doc = diagnose(cfg, mask, args.target)
    out = args.out or os.path.join(cfg.output_dir, "diagnostics.json")
    write_json(out, doc)
    print(json.dumps({"out": out, "k1": doc["bound_terms"]["k1"]}))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jps", description="Joint parameter selection laboratory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True, help="experiment config (JSON)")
        return sp

    g = add("gradcheck", "compare analytic gradients against central differences")
    g.add_argument("--h", type=float, default=GRADCHECK_STEP)
    g.add_argument("--tol", type=float, default=GRADCHECK_TOL)
    g.add_argument("--batch", type=int, default=5)
    g.add_argument("--out")
    g.add_argument("--sabotage", action="store_true", help=argparse.SUPPRESS)

    s = add("select", "build a mask and write it as JSON")
    s.add_argument("--selector")
    s.add_argument("--rho", type=float)
    s.add_argument("--L", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--target", type=int, default=0)
    s.add_argument("--out")

    t = add("train", "fine-tune and write JSON + CSV reports")
    t.add_argument("--mask")
    t.add_argument("--selector")
    t.add_argument("--rho", type=float)
    t.add_argument("--L", type=int)
    t.add_argument("--target", type=int, default=0, help="target domain when training from --mask")

    a = add("ablate", "rho x selector sweep")
    a.add_argument("--rho-grid", type=float, nargs="+")
    a.add_argument("--selectors", nargs="+")

    d = add("diagnose", "bound terms, mask statistics and ranks for a mask")
    d.add_argument("--mask", required=True)
    d.add_argument("--target", type=int, default=0)
    d.add_argument("--out")
    return p


COMMANDS = {"gradcheck": cmd_gradcheck, "select": cmd_select, "train": cmd_train, "ablate": cmd_ablate,
            "diagnose": cmd_diagnose}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config)
        return COMMANDS[args.command](cfg, args)
    except JPSError as exc:
        print(f"jps {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"jps {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
