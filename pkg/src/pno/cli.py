"""Command-line entry points: train-pno, train-hybrid, gen-bvp, evaluate, export, check."""
from __future__ import annotations

import os
import sys

if "--deterministic" in sys.argv:
    # single-threaded BLAS gives a fixed reduction order; must precede numpy import
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = "1"

import argparse
import csv
import json
import logging
import math
import tempfile
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bvp as bvp_mod
from . import evaluate as ev
from .config import ConfigError, RunConfig, load_config
from .integrate import IntegrationError
from .operator import CheckpointError, OperatorEnsemble, geometry_hash, load_checkpoint, save_checkpoint
from .rollout import read_trajectory_csv, write_trajectory_csv
from .trainer import METRIC_COLUMNS, DivergenceError, RolloutFailureError, train_hybrid, train_pno

log = logging.getLogger("pno")


class CommandError(RuntimeError):
    """Expected failure with a user-facing message."""


# -- io helpers -------------------------------------------------------------------

@contextmanager
def atomic_path(path):
    """Yield a temporary path beside ``path``; move it into place only on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    os.close(fd)
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def write_metrics_csv(path, rows: list, header: dict) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# " + " ".join(f"{k}={v}" for k, v in sorted(header.items())) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r["iter"]] + [repr(float(r[c])) for c in METRIC_COLUMNS[1:]])


def read_metrics_csv(path) -> list:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return [{k: float(v) for k, v in r.items()} for r in csv.DictReader(lines)]


def _out(cfg: RunConfig, args, name: str) -> Path:
    base = Path(args.out or cfg.io.out_dir)
    p = Path(name)
    return p if p.is_absolute() else base / p


def _load_ensemble(path, cfg: RunConfig, label: str) -> OperatorEnsemble:
    try:
        ens, _ = load_checkpoint(path)
    except CheckpointError as exc:
        raise CommandError(f"{label} checkpoint: {exc}") from None
    if geometry_hash(ens.geom) != geometry_hash(cfg.game):
        raise CommandError(f"{label} checkpoint {path} was trained for a different game geometry "
                           f"({geometry_hash(ens.geom)} vs config {geometry_hash(cfg.game)})")
    return ens


def _parse_pairs(items) -> tuple:
    out = []
    for it in items:
        parts = it.replace(",", " ").split()
        if len(parts) != 2:
            raise CommandError(f"--theta expects two integers like 1,1; got {it!r}")
        a, b = int(parts[0]), int(parts[1])
        if not (1 <= a <= 5 and 1 <= b <= 5):
            raise CommandError(f"theta values must lie in 1..5; got {it!r}")
        out.append((a, b))
    return tuple(out)


def _pmap(fn, items: list, jobs: int) -> list:
    if jobs > 1 and len(items) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


# -- commands ---------------------------------------------------------------------

def cmd_train_pno(cfg: RunConfig, args) -> int:
    ens = OperatorEnsemble(cfg.game, cfg.operator_config(True), seed=cfg.run.seed)
    prov = cfg.provenance()
    with atomic_path(_out(cfg, args, args.untrained or cfg.io.untrained_checkpoint)) as tmp:
        save_checkpoint(tmp, ens, {**prov, "stage": "untrained"})
    rcfg = replace(cfg.rollout, d_bounds=tuple(cfg.operator.d_bounds), v_bounds=tuple(cfg.operator.v_bounds))
    try:
        res = train_pno(ens, cfg.trainer, cfg.weights, rcfg, progress=log.info)
    except (DivergenceError, RolloutFailureError, FloatingPointError) as exc:
        raise CommandError(f"training failed: {exc}") from None
    with atomic_path(_out(cfg, args, cfg.io.metrics)) as tmp:
        write_metrics_csv(tmp, res.metrics, prov)
    meta = {**prov, "stage": "pno", "pretrain": res.pretrain_report, "rollout_failures": res.failures}
    with atomic_path(_out(cfg, args, args.checkpoint or cfg.io.checkpoint)) as tmp:
        save_checkpoint(tmp, res.ensemble, meta)
    last = res.metrics[-1] if res.metrics else {}
    log.info("saved %s (final mean residual %s)", _out(cfg, args, args.checkpoint or cfg.io.checkpoint),
             last.get("mean_residual"))
    return 0


def _dataset_paths(cfg, args):
    return (_out(cfg, args, args.dataset or cfg.io.dataset), _out(cfg, args, args.manifest or cfg.io.manifest))


def cmd_gen_bvp(cfg: RunConfig, args) -> int:
    geom = cfg.game if args.b is None else cfg.game.replace(b=float(args.b))
    count = args.count if args.count is not None else cfg.dataset.count
    thetas = _parse_pairs(args.theta) if args.theta else tuple(cfg.dataset.theta_set)
    data = bvp_mod.generate_dataset(count, thetas, geom, cfg.run.seed, cfg.bvp, cfg.dataset.box, args.jobs)
    manifest = {**data.manifest, **cfg.provenance()}
    csv_path, man_path = _dataset_paths(cfg, args)
    with atomic_path(csv_path) as tmp:
        write_trajectory_csv(tmp, data.bundles, {**cfg.provenance(), "geometry_hash": manifest["geometry_hash"]})
    with atomic_path(man_path) as tmp:
        Path(tmp).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    log.info("gen-bvp: %d/%d converged, %d records -> %s", manifest["converged"], count,
             manifest["n_records"], csv_path)
    return 0 if manifest["converged"] else 1


def cmd_train_hybrid(cfg: RunConfig, args) -> int:
    csv_path, man_path = _dataset_paths(cfg, args)
    if not csv_path.exists() or not man_path.exists():
        raise CommandError(f"hybrid training needs a dataset; missing {csv_path if not csv_path.exists() else man_path}"
                           " (run gen-bvp first)")
    manifest = json.loads(man_path.read_text())
    if manifest.get("geometry_hash") != geometry_hash(cfg.game):
        raise CommandError(f"dataset geometry hash {manifest.get('geometry_hash')} does not match the "
                           f"config geometry {geometry_hash(cfg.game)}")
    data = bvp_mod.dataset_from_bundles(read_trajectory_csv(csv_path), manifest["thetas"])
    if len(data) == 0:
        raise CommandError(f"dataset {csv_path} is empty")
    ens = OperatorEnsemble(cfg.game, cfg.operator_config(False), seed=cfg.run.seed)
    try:
        res = train_hybrid(ens, cfg.trainer, data, cfg.weights, progress=log.info)
    except (DivergenceError, FloatingPointError) as exc:
        raise CommandError(f"hybrid training failed: {exc}") from None
    prov = {**cfg.provenance(), "dataset_config_hash": manifest.get("config_hash", "")}
    with atomic_path(_out(cfg, args, cfg.io.hybrid_metrics)) as tmp:
        write_metrics_csv(tmp, res.metrics, prov)
    with atomic_path(_out(cfg, args, args.checkpoint or cfg.io.hybrid_checkpoint)) as tmp:
        save_checkpoint(tmp, res.ensemble, {**prov, "stage": "hybrid"})
    return 0


def _solve_reference(task):
    x, thetas, geom, bcfg = task
    try:
        return bvp_mod.solve_bvp(x, 0.0, thetas, geom, bcfg)
    except IntegrationError:
        return None


def build_test_set(cfg: RunConfig, n_cases: int, variant: str, jobs: int = 1, seed_key: int = 2):
    """Initial states shared by all type pairs, and the theta=(1,1) references.

    For the filtered variant, candidates are drawn from one seeded stream and
    screened in stream order until ``n_cases`` survive. Returns (states,
    references by index, stats).
    """
    ecfg = cfg.evaluator
    rng = np.random.default_rng([cfg.run.seed, seed_key])
    (dlo, dhi), (vlo, vhi) = ecfg.box
    lo, hi = np.array([dlo, vlo, dlo, vlo]), np.array([dhi, vhi, dhi, vhi])
    if variant == "with-inevitable":
        return lo + (hi - lo) * rng.random((n_cases, 4)), {}, {"candidates": n_cases, "colliding": 0, "failed": 0}
    kept, refs = [], {}
    stats = {"candidates": 0, "colliding": 0, "failed": 0}
    while len(kept) < n_cases:
        need = n_cases - len(kept)
        batch = lo + (hi - lo) * rng.random((max(1, math.ceil(need * ecfg.candidate_factor)), 4))
        sols = _pmap(_solve_reference, [(x, (1, 1), cfg.game, cfg.bvp) for x in batch], jobs)
        res = ev.filter_inevitable(batch, cfg.game, cfg.bvp, solver=_lookup(batch, sols))
        stats["candidates"] += len(batch)
        stats["colliding"] += res.n_colliding
        stats["failed"] += res.n_failed
        for j in res.kept_index:
            if len(kept) < n_cases:
                refs[len(kept)] = res.references[int(j)]
                kept.append(batch[j])
        if stats["candidates"] > 50 * n_cases:
            raise CommandError(f"could not collect {n_cases} non-colliding cases "
                               f"({len(kept)} from {stats['candidates']} candidates)")
    return np.array(kept), refs, stats


def _lookup(batch, sols):
    table = {tuple(x): s for x, s in zip(batch, sols)}
    return lambda x: table[tuple(x)]


def cmd_evaluate(cfg: RunConfig, args) -> int:
    ecfg = cfg.evaluator
    variant = args.variant or ecfg.variant
    if variant not in ev.VARIANTS:
        raise CommandError(f"--variant must be one of {ev.VARIANTS}")
    pairs = _parse_pairs(args.theta) if args.theta else tuple(ecfg.theta_pairs)
    n_cases = args.count if args.count is not None else ecfg.n_cases
    methods_wanted = tuple(args.methods.split(",")) if args.methods else tuple(ecfg.methods)
    src = ecfg.pno_source
    # every checkpoint is loaded before any simulation so a bad path leaves no partial output
    nets = {}
    paths = {"pno": args.checkpoint or cfg.io.checkpoint, "hybrid": args.hybrid or cfg.io.hybrid_checkpoint,
             "untrained": args.untrained or cfg.io.untrained_checkpoint}
    for m in methods_wanted:
        if m in paths:
            nets[m] = _load_ensemble(_out(cfg, args, paths[m]), cfg, m)
        elif m not in ("gt", "zero"):
            raise CommandError(f"unknown method {m!r}; expected gt, pno, hybrid, untrained or zero")
    methods = {}
    for m in methods_wanted:
        if m == "gt":
            methods[m] = (("bvp-openloop", "bvp-openloop"), {})
        elif m == "zero":
            methods[m] = (("zero", "zero"), {})
        elif m == "hybrid":
            methods[m] = (("hybrid", "hybrid"), {"hybrid": nets[m]})
        else:
            methods[m] = ((src, src), {"pno": nets[m]})
    X, refs11, stats = build_test_set(cfg, n_cases, variant, args.jobs)
    log.info("test set: %d cases (%s)", len(X), stats)
    references = {}
    if "gt" in methods:
        for pair in pairs:
            if pair == (1, 1) and refs11:
                references[pair] = refs11
            else:
                sols = _pmap(_solve_reference, [(x, pair, cfg.game, cfg.bvp) for x in X], args.jobs)
                references[pair] = {n: s for n, s in enumerate(sols) if s is not None}
    rows = ev.safety_table({p: X for p in pairs}, methods, variant, cfg.game, references=references)
    header = {**cfg.provenance(), "candidates": stats["candidates"], "filtered_colliding": stats["colliding"],
              "filtered_failed": stats["failed"]}
    with atomic_path(_out(cfg, args, args.table or cfg.io.safety_table)) as tmp:
        ev.write_safety_csv(tmp, rows, header)
    for r in rows:
        log.info("theta=(%d,%d) %-9s %d/%d collisions (%.2f%%), %d failures", r.theta1, r.theta2, r.method,
                 r.n_collisions, r.n_cases, r.pct, r.n_failures)
    return 0


def cmd_export(cfg: RunConfig, args) -> int:
    ecfg = cfg.evaluator
    ens = _load_ensemble(_out(cfg, args, args.checkpoint or cfg.io.checkpoint), cfg, "pno")
    lo, hi = cfg.operator.d_bounds
    d = np.linspace(lo, hi, ecfg.grid_resolution)
    prov = cfg.provenance()
    pairs = _parse_pairs(args.theta) if args.theta else tuple(ecfg.grid_thetas)
    stem = Path(cfg.io.value_grid).stem
    for pair in pairs:
        tag = f"{pair[0]}{pair[1]}"
        grid = ev.value_grid(ens, pair, 0, d, d, ecfg.grid_speed, ecfg.grid_time)
        with atomic_path(_out(cfg, args, f"{stem}_{tag}.csv")) as tmp:
            ev.write_value_grid(tmp, grid, {**prov, "theta": f"{pair[0]},{pair[1]}"})
        with atomic_path(_out(cfg, args, f"{stem}_{tag}.svg")) as tmp:
            ev.heatmap_svg(tmp, grid, f"player 1 value, theta=({pair[0]},{pair[1]})")
        if ecfg.bvp_grid_resolution > 0:
            db = np.linspace(lo, hi, ecfg.bvp_grid_resolution)
            ref = ev.bvp_value_grid(pair, cfg.game, db, db, ecfg.grid_speed, 0, cfg.bvp)
            mine = ev.value_grid(ens, pair, 0, db, db, ecfg.grid_speed, 0.0, with_basis=False)
            diff = ev.difference_grid(ref, mine)
            for name, g in (("bvp", ref), ("diff", diff)):
                with atomic_path(_out(cfg, args, f"{stem}_{name}_{tag}.csv")) as tmp:
                    ev.write_value_grid(tmp, g, {**prov, "theta": f"{pair[0]},{pair[1]}"})
                with atomic_path(_out(cfg, args, f"{stem}_{name}_{tag}.svg")) as tmp:
                    ev.heatmap_svg(tmp, g, f"{name} theta=({pair[0]},{pair[1]})")
    sweep = [(a, b) for a in range(1, 6) for b in range(1, 6)]
    for kind in ("value",) + (("costate",) if ens.cfg.with_costate else ()):
        rank = ev.basis_ranking(ens, sweep, 0, kind)
        with atomic_path(_out(cfg, args, f"basis_ranking_{kind}.csv")) as tmp:
            ev.write_ranking(tmp, rank, prov)
        with atomic_path(_out(cfg, args, f"basis_ranking_{kind}.svg")) as tmp:
            ev.polyline_svg(tmp, {"mean |b_k|": (np.arange(1, len(rank["mean"]) + 1), rank["mean"])},
                            f"ranked {kind} branch coefficients")
    for label, name in (("pno", cfg.io.metrics), ("hybrid", cfg.io.hybrid_metrics)):
        path = _out(cfg, args, name)
        if path.exists():
            rows = read_metrics_csv(path)
            it = [r["iter"] for r in rows]
            series = {"total loss": (it, [r["loss_total"] for r in rows]),
                      "mean residual": (it, [r["mean_residual"] for r in rows])}
            with atomic_path(_out(cfg, args, f"{label}_training.svg")) as tmp:
                ev.polyline_svg(tmp, series, f"{label} training", log_y=True)
    return 0


def cmd_check(cfg: RunConfig, args) -> int:
    from .checks import run_checks
    results = run_checks(include_pretrain=not args.quick, progress=print)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


COMMANDS = {"train-pno": cmd_train_pno, "train-hybrid": cmd_train_hybrid, "gen-bvp": cmd_gen_bvp,
            "evaluate": cmd_evaluate, "export": cmd_export, "check": cmd_check}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file; keys override the profile defaults")
    common.add_argument("--seed", type=int, help="run seed (overrides [run] seed)")
    common.add_argument("--profile", choices=("desk", "paper"), help="iteration/sample-count profile")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for BVP solves")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded linear algebra for byte-identical outputs")
    common.add_argument("--out", help="output directory (overrides [io] out_dir)")
    common.add_argument("-v", "--verbose", action="store_true")
    # common flags live on the subcommands only: on both levels the subparser
    # defaults would overwrite values given before the command name
    p = argparse.ArgumentParser(prog="pno", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("train-pno", parents=[common], help="pretrain and train the operator ensemble")
    s.add_argument("--checkpoint")
    s.add_argument("--untrained", help="where to save the initial (untrained) checkpoint")
    s = sub.add_parser("train-hybrid", parents=[common], help="train the BVP-supervised baseline")
    s.add_argument("--dataset")
    s.add_argument("--manifest")
    s.add_argument("--checkpoint")
    s = sub.add_parser("gen-bvp", parents=[common], help="solve equilibrium BVPs into a dataset")
    s.add_argument("--count", type=int)
    s.add_argument("--theta", action="append", help="type pair like 1,5 (repeatable)")
    s.add_argument("--b", type=float, help="override the collision penalty weight")
    s.add_argument("--dataset")
    s.add_argument("--manifest")
    s = sub.add_parser("evaluate", parents=[common], help="closed-loop collision table")
    s.add_argument("--count", type=int, help="test cases per type pair")
    s.add_argument("--theta", action="append", help="type pair like 1,1 (repeatable)")
    s.add_argument("--variant", choices=ev.VARIANTS)
    s.add_argument("--methods", help="comma list from gt,pno,hybrid,untrained,zero")
    s.add_argument("--checkpoint")
    s.add_argument("--hybrid")
    s.add_argument("--untrained")
    s.add_argument("--table")
    s = sub.add_parser("export", parents=[common], help="value grids, basis rankings and SVG charts")
    s.add_argument("--checkpoint")
    s.add_argument("--theta", action="append")
    s = sub.add_parser("check", parents=[common], help="run the self-check suite")
    s.add_argument("--quick", action="store_true", help="skip the pretraining gate")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.jobs < 1:
            raise CommandError("--jobs must be at least 1")
        cfg = load_config(args.config, args.profile, args.seed)
        return COMMANDS[args.command](cfg, args)
    except (CommandError, ConfigError, CheckpointError, ev.CompatibilityError) as exc:
        print(f"pno {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
