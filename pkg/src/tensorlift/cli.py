"""Command-line entry point: ``tensorlift {check-topology,rank,dnsp,simulate}``.

Exit codes: 0 success, 1 usage or input error, 2 topology not certified,
3 deep null space property numerically falsified, 4 stability bound
violated in a simulation.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

from . import __version__
from .convnet import ConvTopology, algo_check, assemble_factors, run_convnet_experiment
from .dnsp import estimate_gamma
from .errors import BudgetExceeded, ConfigError, TensorLiftError
from .identifiability import dimension_verdict, search_nonidentifiability_witness
from .lifting import FactorFamily, full_model, materialize_lifting, row_sparse_model, estimate_rank_random
from .stability import ExperimentConfig, FitSettings, run_recovery_experiment

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NOT_CERTIFIED = 2
EXIT_NSP_FALSIFIED = 3
EXIT_BOUND_VIOLATED = 4

RESULT_COLUMNS = ["seed", "delta", "eta", "d_p", "bound", "precond_met", "holds"]


class UsageError(TensorLiftError):
    pass


@dataclass
class RunManifest:
    command: str
    inputs: list[dict]
    seed: int | None
    params: dict
    outputs: list[str]
    version: str = __version__

    def digest(self) -> str:
        """Hash of everything that determines the CSV content (output paths excluded)."""
        doc = asdict(self)
        del doc["outputs"]
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _file_entry(path: Path) -> dict:
    return {"path": str(path), "sha256": hashlib.sha256(path.read_bytes()).hexdigest()}


def _read_json(path: Path) -> dict:
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return doc


def load_topology(path: Path) -> ConvTopology:
    doc = _read_json(path)
    try:
        return ConvTopology.from_dict(doc)
    except (TensorLiftError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def load_family(path: Path) -> tuple[FactorFamily, ConvTopology | None]:
    """A factors file, or a topology file whose factors are assembled."""
    doc = _read_json(path)
    try:
        if "edges" in doc:
            topo = ConvTopology.from_dict(doc)
            return assemble_factors(topo), topo
        return FactorFamily.from_dict(doc), None
    except KeyError as exc:
        raise ConfigError(f"{path}: {exc.args[0]}") from exc
    except (TensorLiftError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(rows: list[dict], columns: list[str], manifest: RunManifest, out: str | None) -> None:
    buf = io.StringIO()
    buf.write(f"# manifest_sha256={manifest.digest()}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in columns])
    if out is None or out == "-":
        sys.stdout.write(buf.getvalue())
    else:
        Path(out).write_text(buf.getvalue())
        Path(out + ".manifest.json").write_text(json.dumps(asdict(manifest), indent=1, sort_keys=True) + "\n")


# commands ------------------------------------------------------------------


def cmd_check_topology(args) -> int:
    path = Path(args.topology)
    topo = load_topology(path)
    verdict = algo_check(topo)
    print(f"topology: N={topo.N} K={topo.K} S={topo.S} leaves={len(topo.leaves)} paths={verdict.n_paths} (circular convolution)")
    print(f"passes: {str(verdict.passes).lower()}")
    for leaf, pos, count in verdict.offending:
        print(f"offending: leaf={leaf} position={pos} count={count}")
    if verdict.passes:
        print(f"supports_disjoint: {str(verdict.supports_disjoint).lower()}")
        print(f"kernel_dim: {verdict.kernel_dim}")
    if args.out:
        manifest = RunManifest("check-topology", [_file_entry(path)], None, {}, [args.out])
        row = {"passes": verdict.passes, "n_offending": len(verdict.offending),
               "kernel_dim": "" if verdict.kernel_dim is None else verdict.kernel_dim}
        write_csv([row], ["passes", "n_offending", "kernel_dim"], manifest, args.out)
    return EXIT_OK if verdict.passes else EXIT_NOT_CERTIFIED


def cmd_rank(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be at least 1")
    path = Path(args.factors)
    f, _ = load_family(path)
    probed = estimate_rank_random(f, args.trials, args.seed)
    row = {"probed_rank": probed, "exact_rank": "", "trials": args.trials}
    print(f"probed_rank: {probed} (R={args.trials}, seed={args.seed})")
    try:
        op = materialize_lifting(f)
    except BudgetExceeded as exc:
        print(f"notice: {exc}; probe-only mode")
    else:
        row["exact_rank"] = op.rank
        print(f"exact_rank: {op.rank}")
        verdict = dimension_verdict(op)
        print(f"verdict: {verdict.status.value} (threshold {verdict.threshold_used}, join bound {verdict.join_bound})")
    if args.out:
        manifest = RunManifest("rank", [_file_entry(path)], args.seed, {"trials": args.trials}, [args.out])
        write_csv([row], ["trials", "probed_rank", "exact_rank"], manifest, args.out)
    return EXIT_OK


def _model(name: str, K: int, S: int):
    if name == "full":
        return full_model(K, S)
    if name == "row-sparse":
        return row_sparse_model(K, S)
    raise ConfigError(f"unknown model {name!r}")


def cmd_dnsp(args) -> int:
    if args.samples < 1:
        raise UsageError("--samples must be at least 1")
    if args.rho is not None and not args.rho > 0:
        raise UsageError("--rho must be positive")
    path = Path(args.factors)
    f, _ = load_family(path)
    op = materialize_lifting(f)
    model = _model(args.model, f.K, f.S)
    witness = search_nonidentifiability_witness(f, op, model, trials=args.witness_trials, seed=args.seed)
    extra = [(witness.h, witness.g)] if witness is not None else []
    est = estimate_gamma(op, model, args.rho, args.samples, seed=args.seed, extra_pairs=extra, workers=args.workers)
    if est.rho_is_default:
        print(f"notice: rho defaulted to sigma_min * median pilot norm = {est.rho!r}", file=sys.stderr)
    if witness is not None:
        print(f"notice: kernel contains a model difference (witness residual {witness.residual:.3e})", file=sys.stderr)
    manifest = RunManifest("dnsp", [_file_entry(path)], args.seed,
                           {"rho": args.rho, "samples": args.samples, "model": args.model,
                            "witness_trials": args.witness_trials}, [args.out] if args.out else [])
    write_csv([est.as_row()], ["gamma_hat", "rho", "n_samples", "n_discarded", "failed"], manifest, args.out)
    return EXIT_NSP_FALSIFIED if est.failed else EXIT_OK


_SIM_KEYS = ("delta", "seeds")


def _require(cfg: dict, key: str):
    if key not in cfg:
        raise ConfigError(f"missing config key {key!r}")
    return cfg[key]


def _seed_list(value) -> list[int]:
    if isinstance(value, int):
        return list(range(value))
    if isinstance(value, dict):
        return list(range(int(value.get("start", 0)), int(value.get("start", 0)) + int(_require(value, "count"))))
    if isinstance(value, list):
        return [int(s) for s in value]
    raise ConfigError("'seeds' must be a count, a list, or {start, count}")


def cmd_simulate(args) -> int:
    cfg_path = Path(args.config)
    cfg = _read_json(cfg_path)
    for key in _SIM_KEYS:
        _require(cfg, key)
    if "topology" not in cfg and "factors" not in cfg:
        raise ConfigError("missing config key 'topology' (or 'factors')")
    delta = float(cfg["delta"])
    if delta < 0:
        raise ConfigError("'delta' must be nonnegative")
    seeds = _seed_list(cfg["seeds"])
    p = float(args.p if args.p is not None else cfg.get("p", 2))
    solver = cfg.get("solver", {})
    settings = FitSettings(max_iters=int(solver.get("max_iters", 200)), restarts=int(solver.get("restarts", 3)),
                           tol=float(solver.get("tol", 1e-12)))
    base = cfg_path.parent
    inputs = [_file_entry(cfg_path)]

    if "topology" in cfg:
        tpath = base / cfg["topology"]
        inputs.append(_file_entry(tpath))
        topo = load_topology(tpath)
        verdict = algo_check(topo)
        if not verdict.passes:
            print("topology fails the all-ones test; no stability guarantee", file=sys.stderr)
            return EXIT_NOT_CERTIFIED
        family = assemble_factors(topo)

        def one(seed):
            return run_convnet_experiment(topo, delta, seed, p, settings, family=family, verdict=verdict)
    else:
        fpath = base / cfg["factors"]
        inputs.append(_file_entry(fpath))
        family, _ = load_family(fpath)
        op = materialize_lifting(family)
        model = _model(cfg.get("model", "full"), family.K, family.S)
        L = cfg.get("L")
        nsp = None
        if op.kernel_dim:
            nsp = estimate_gamma(op, model, cfg.get("rho"), int(cfg.get("nsp_samples", 1000)),
                                 seed=int(cfg.get("nsp_seed", 0)))

        def one(seed):
            ecfg = ExperimentConfig(family=family, delta=delta, seed=seed, model=model, L=L, p=p, settings=settings)
            return run_recovery_experiment(ecfg, op, nsp)

    with ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
        reports = list(pool.map(one, seeds))
    rows = [r.as_row() for r in reports]
    met = [r for r in rows if r["precond_met"]]
    violations = sum(1 for r in met if r["holds"] is False)
    params = {"delta": delta, "p": p, "seeds": seeds, "solver": asdict(settings)}
    manifest = RunManifest("simulate", inputs, None, params, [args.out] if args.out else [])
    write_csv(rows, RESULT_COLUMNS, manifest, args.out)
    print(f"summary: rows={len(rows)} precond_met={len(met)} violations={violations}",
          file=sys.stderr if args.out in (None, "-") else sys.stdout)
    return EXIT_BOUND_VIOLATED if violations else EXIT_OK


# parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tensorlift", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check-topology", help="certify a convolutional network topology")
    p.add_argument("topology")
    p.add_argument("--out")
    p.set_defaults(func=cmd_check_topology)

    p = sub.add_parser("rank", help="probe the rank of the lifted operator")
    p.add_argument("factors")
    p.add_argument("--trials", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("dnsp", help="estimate the deep null space property constant")
    p.add_argument("factors")
    p.add_argument("--rho", type=float)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model", default="full", choices=["full", "row-sparse"])
    p.add_argument("--witness-trials", type=int, default=4)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_dnsp)

    p = sub.add_parser("simulate", help="run seeded noisy recovery experiments")
    p.add_argument("config")
    p.add_argument("--p", type=float)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (UsageError, ConfigError, BudgetExceeded) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TensorLiftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
