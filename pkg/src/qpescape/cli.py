"""Command-line front end: ``qpescape {equilibria,qp,gatescan,mc,contours}``.

Every subcommand takes an optional JSON config (``--config``) whose keys are the
long option names with dashes replaced by underscores; explicit flags win.  A
``manifest.json`` holding the resolved config is written next to the outputs and
can be passed back as ``--config`` to repeat the run.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 anchor or participant eliminated by a bifurcation.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .equilibria import (bifurcation_diagram, equilibria_at, find_equilibria,
                         write_bifurcations_csv, write_branches_csv)
from .gates import (NoGateError, basin_saddles, default_grid, gate_bifurcation_scan,
                    gate_heights, write_gate_csv, write_scan_json)
from .model import PRESETS, NetworkDrift, preset
from .montecarlo import SimConfig, run_ensemble, summarize, write_records_csv, write_summary_json
from .quasipotential import (Grid2D, SolverError, SolverParams, extract_contours, load_field,
                             save_field, solve, write_contours_csv)

log = logging.getLogger("qpescape")

OUTPUT_ENV = "QPESCAPE_OUTPUT"
EXIT_CONFIG, EXIT_NUMERICAL, EXIT_ELIMINATED = 2, 3, 4


class ConfigError(ValueError):
    pass


class EliminatedError(RuntimeError):
    pass


# -- configuration --------------------------------------------------------------------

def _model_keys():
    return ("preset", "model", "nu", "alpha", "beta")


def build_network(cfg: dict) -> NetworkDrift:
    """Network from ``model`` (a model document or a path to one) or ``preset``."""
    model = cfg.get("model")
    kw = {k: cfg[k] for k in ("nu", "alpha") if cfg.get(k) is not None}
    try:
        if model is not None:
            if isinstance(model, str):
                model = json.loads(Path(model).read_text())
            doc = dict(model, **kw)
            net = NetworkDrift.from_dict(doc)
        else:
            net = preset(cfg.get("preset") or "two-node", **kw)
    except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model: {exc}") from exc
    if cfg.get("beta") is not None:
        net = net.with_beta(float(cfg["beta"]))
    return net


def parse_sweep(spec) -> list:
    """``0.1``, ``[0, 0.05]``, ``"0,0.05,0.1"`` or ``"start:stop:step"`` (stop inclusive)."""
    if spec is None:
        return []
    if isinstance(spec, (int, float)):
        return [float(spec)]
    if isinstance(spec, (list, tuple)):
        return [float(v) for v in spec]
    s = str(spec).strip()
    try:
        if ":" in s:
            a, b, h = (float(v) for v in s.split(":"))
            if h <= 0:
                raise ValueError("step must be positive")
            n = int(np.floor((b - a) / h + 1e-9)) + 1
            return [round(a + k * h, 12) for k in range(n)]
        return [float(v) for v in s.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad sweep {spec!r}: {exc}") from exc


def grid_from(cfg: dict, positions) -> Grid2D:
    n = int(cfg.get("grid") or 256)
    if cfg.get("domain"):
        lo, hi = map(float, cfg["domain"])
        return Grid2D.square(n, lo, hi)
    return default_grid(positions, n)


def solver_params(cfg: dict) -> SolverParams:
    kw = {k: cfg[k] for k in ("K", "quadrature", "stop", "value_cap") if cfg.get(k) is not None}
    try:
        return SolverParams(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if doc.get("command") not in (None, args.command):
            raise ConfigError(f"config is for {doc['command']!r}, not {args.command!r}")
        cfg.update(doc.get("config", doc))
        cfg.pop("command", None)
    for k, v in vars(args).items():
        if k in ("config", "command", "func", "verbose") or v is None:
            continue
        cfg[k] = v
    return cfg


def output_dir(cfg: dict, command: str) -> Path:
    out = cfg.get("out") or Path(os.environ.get(OUTPUT_ENV, "qpescape-out")) / command
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, command: str, cfg: dict, extra: dict = None):
    doc = {"schema": "qpescape.manifest/1", "command": command, "version": __version__,
           "config": {k: v for k, v in cfg.items() if k != "out"}}
    if extra:
        doc.update(extra)
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, default=_jsonable))


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o).__name__)


# -- commands ----------------------------------------------------------------------------

def cmd_equilibria(cfg: dict) -> Path:
    net = build_network(dict(cfg, beta=None))
    lo = float(cfg.get("beta_min") or 0.0)
    hi = float(cfg["beta_max"] if cfg.get("beta_max") is not None else 0.5)
    if hi < lo:
        raise ConfigError("beta_max must not be below beta_min")
    out = output_dir(cfg, "equilibria")
    if hi == lo:
        eqs = find_equilibria(net.with_beta(lo))
        with open(out / "equilibria.csv", "w") as fh:
            fh.write("# qpescape-schema: equilibria v1\n")
            fh.write("label,beta," + ",".join(f"x{i + 1}" for i in range(net.dim))
                     + ",stability\n")
            for e in eqs:
                fh.write(",".join([e.label, repr(lo)] + [repr(float(v)) for v in e.position]
                                  + [e.stability]) + "\n")
        log.info("%d equilibria at beta=%g", len(eqs), lo)
    else:
        diagram = bifurcation_diagram(net.with_beta(0.0), hi, float(cfg.get("step") or 1e-3))
        branches = [_clip(br, lo) for br in diagram.branches]
        write_branches_csv(out / "branches.csv", [b for b in branches if b is not None])
        bifs = [bp for bp in diagram.bifurcations if lo <= bp.beta <= hi]
        write_bifurcations_csv(out / "bifurcations.csv", bifs)
        for bp in bifs:
            log.info("%s at beta=%.6g (%s)", bp.kind, bp.beta, "/".join(bp.participants))
    write_manifest(out, "equilibria", cfg)
    return out


def _clip(br, lo):
    keep = br.betas >= lo
    if not keep.any():
        return None
    from dataclasses import replace
    return replace(br, betas=br.betas[keep], positions=br.positions[keep],
                   eigenvalues=br.eigenvalues[keep])


def _require(diagram, labels, beta, available):
    for label in labels:
        if label in available:
            continue
        try:
            br = diagram.branch(label)
        except KeyError:
            raise ConfigError(f"no equilibrium labelled {label!r}") from None
        bp = diagram.eliminated_by(label)
        if bp is not None and bp.beta <= beta:
            raise EliminatedError(f"{label} does not exist at beta={beta:g}: eliminated at the "
                                  f"{bp.kind} bifurcation at beta={bp.beta:.6g} "
                                  f"with {'/'.join(bp.participants)}")
        raise EliminatedError(f"{label} does not exist at beta={beta:g} "
                              f"(branch ends at beta={br.betas[-1]:.6g})")


def cmd_qp(cfg: dict) -> Path:
    net = build_network(cfg)
    if net.dim != 2:
        raise ConfigError("the quasipotential solver needs a planar system")
    anchor = cfg.get("anchor") or "QQ"
    diagram = bifurcation_diagram(net.with_beta(0.0), max(0.5, net.beta))
    eqs = equilibria_at(net, diagram=diagram)
    _require(diagram, [anchor], net.beta, eqs)
    if eqs[anchor].stability != "sink":
        raise ConfigError(f"anchor {anchor} is a {eqs[anchor].stability}, not a sink")
    grid = grid_from(cfg, [e.position for e in eqs.values()])
    params = solver_params(cfg)
    qp = solve(net, grid, eqs[anchor].position, params, anchor)
    out = output_dir(cfg, "qp")
    save_field(out / "field.qpf", qp)
    saddles = basin_saddles(net, anchor, eqs)
    report = None
    if saddles:
        report = gate_heights(qp, saddles)
        write_gate_csv(out / "gates.csv", [report])
        (out / "gates.json").write_text(json.dumps(
            {"schema": "qpescape.gates/1", "beta": net.beta, "anchor": anchor,
             "heights": report.heights, "gate": report.gate}, indent=2))
        log.info("gate %s, heights %s", report.gate, report.heights)
    levels = _levels(cfg, qp)
    write_contours_csv(out / "contours.csv", extract_contours(qp, levels))
    write_manifest(out, "qp", cfg)
    return out


def _levels(cfg, qp):
    if cfg.get("levels"):
        return [float(v) for v in parse_sweep(cfg["levels"])]
    top = qp.max_value()
    return list(np.linspace(0, top, 12)[1:-1]) if np.isfinite(top) and top > 0 else []


def cmd_gatescan(cfg: dict) -> Path:
    net = build_network(dict(cfg, beta=None))
    rng = cfg.get("beta_range") or [0.15, 0.20]
    if len(rng) != 2 or float(rng[1]) <= float(rng[0]):
        raise ConfigError("beta_range needs two increasing values")
    anchor = cfg.get("anchor") or "AQ"
    pair = tuple(cfg.get("pair") or ("SQ", "AS"))
    diagram = bifurcation_diagram(net.with_beta(0.0), max(0.5, float(rng[1])))
    eqs = equilibria_at(net, float(rng[0]), diagram)
    _require(diagram, (anchor,) + pair, float(rng[0]), eqs)
    grid = grid_from(cfg, [eqs[k].position for k in (anchor,) + pair])
    coarse = None
    if cfg.get("coarse_grid"):
        coarse = Grid2D.square(int(cfg["coarse_grid"]), grid.x_range[0], grid.x_range[1])
    scan = gate_bifurcation_scan(net, rng, anchor, pair, grid,
                                 tol_beta=float(cfg.get("tol_beta") or 1e-3),
                                 n_coarse=int(cfg.get("n_coarse") or 6),
                                 params=solver_params(cfg), coarse_grid=coarse,
                                 jobs=int(cfg.get("jobs") or 1))
    out = output_dir(cfg, "gatescan")
    write_scan_json(out / "gatescan.json", scan)
    write_gate_csv(out / "gates.csv", scan.reports)
    log.info("result: %s %s", scan.summary()["result"], scan.crossing)
    write_manifest(out, "gatescan", cfg)
    return out


def cmd_mc(cfg: dict) -> Path:
    base = build_network(dict(cfg, beta=None))
    betas = parse_sweep(cfg.get("beta")) or [base.beta]
    alphas = parse_sweep(cfg.get("alpha_sweep")) or [base.alpha]
    nus = parse_sweep(cfg.get("nu_sweep")) or [base.nu]
    out = output_dir(cfg, "mc")
    rows = []
    for nu in nus:
        for alpha in alphas:
            for beta in betas:
                net = base.with_params(nu=nu, alpha=alpha, beta=beta)
                try:
                    sc = SimConfig(net, dt=float(cfg.get("dt") or 1e-3), xi=cfg.get("xi"),
                                   xi_prime=cfg.get("xi_prime"),
                                   n_realisations=int(cfg.get("n") or 2000),
                                   t_max=float(cfg.get("t_max") or 1e5),
                                   master_seed=int(cfg.get("seed") or 0))
                except ValueError as exc:
                    raise ConfigError(str(exc)) from exc
                initial = None
                if cfg.get("initial"):
                    lab = cfg["initial"]
                    eqs = equilibria_at(net)
                    _require(bifurcation_diagram(net.with_beta(0.0), max(0.5, beta)),
                             [lab], beta, eqs)
                    initial = eqs[lab].position
                records = run_ensemble(sc, initial, jobs=int(cfg.get("jobs") or 1))
                summary = summarize(records)
                sub = out / f"nu={nu:g}_alpha={alpha:g}_beta={beta:g}"
                sub.mkdir(exist_ok=True)
                write_records_csv(sub / "records.csv", records)
                write_summary_json(sub / "summary.json", summary, sc)
                rows.append((nu, alpha, beta, summary))
                log.info("nu=%g alpha=%g beta=%g: %d/%d completed, returns %s%%",
                         nu, alpha, beta, summary.n_completed, summary.n_realisations,
                         summary.return_percentage)
    with open(out / "sweep.csv", "w") as fh:
        fh.write("# qpescape-schema: mc-sweep v1\n")
        n = base.n_nodes
        fh.write("nu,alpha,beta,n_completed,mean_first_star,mean_first,mean_second_star,"
                 "mean_second,return_percentage,"
                 + ",".join(f"p_first_{i + 1}" for i in range(n)) + ","
                 + ",".join(f"p_final_{i + 1}" for i in range(n)) + "\n")
        for nu, alpha, beta, s in rows:
            vals = [nu, alpha, beta, s.n_completed, s.mean_first_star, s.mean_first,
                    s.mean_second_star, s.mean_second, s.return_percentage,
                    *s.first_direction, *s.final_direction]
            fh.write(",".join("" if v is None else repr(float(v)) if not isinstance(v, int)
                              else str(v) for v in vals) + "\n")
    write_manifest(out, "mc", cfg, {"seeds": {"master_seed": int(cfg.get("seed") or 0),
                                              "stream_key": "(realisation, node)"}})
    return out


def cmd_contours(cfg: dict) -> Path:
    if not cfg.get("field"):
        raise ConfigError("contours needs --field")
    try:
        qp = load_field(cfg["field"])
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load field: {exc}") from exc
    out = output_dir(cfg, "contours")
    write_contours_csv(out / "contours.csv", extract_contours(qp, _levels(cfg, qp)))
    write_manifest(out, "contours", cfg)
    return out


# -- argument parsing ---------------------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="JSON config or a manifest.json from an earlier run")
    p.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV}/<command>)")
    p.add_argument("--jobs", type=int, help="worker processes")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _model(p, beta_help="coupling strength"):
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--model", help="path to a model JSON document")
    p.add_argument("--nu", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", help=beta_help)


def _solver(p):
    p.add_argument("--grid", type=int, help="square grid size, e.g. 256, 512, 1024")
    p.add_argument("--domain", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--K", type=int, help="update radius in grid spacings")
    p.add_argument("--quadrature", choices=["midpoint", "three-point"])


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qpescape", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("equilibria", help="continuation and bifurcation tables")
    _common(p)
    _model(p)
    p.add_argument("--beta-min", type=float)
    p.add_argument("--beta-max", type=float)
    p.add_argument("--step", type=float)
    p.set_defaults(func=cmd_equilibria)

    p = sub.add_parser("qp", help="solve the quasipotential from an anchor")
    _common(p)
    _model(p)
    _solver(p)
    p.add_argument("--anchor")
    p.add_argument("--levels", help="contour levels, list or start:stop:step")
    p.set_defaults(func=cmd_qp)

    p = sub.add_parser("gatescan", help="locate a gate-height bifurcation")
    _common(p)
    _model(p)
    _solver(p)
    p.add_argument("--anchor")
    p.add_argument("--pair", nargs=2)
    p.add_argument("--beta-range", type=float, nargs=2)
    p.add_argument("--tol-beta", type=float)
    p.add_argument("--n-coarse", type=int)
    p.add_argument("--coarse-grid", type=int)
    p.set_defaults(func=cmd_gatescan)

    p = sub.add_parser("mc", help="Monte Carlo escape statistics")
    _common(p)
    _model(p, "coupling strength or sweep (list or start:stop:step)")
    p.add_argument("--alpha-sweep")
    p.add_argument("--nu-sweep")
    p.add_argument("--n", type=int, help="realisations per sweep point")
    p.add_argument("--dt", type=float)
    p.add_argument("--xi", type=float)
    p.add_argument("--xi-prime", type=float)
    p.add_argument("--t-max", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--initial", help="start from a labelled equilibrium instead of all-Q")
    p.set_defaults(func=cmd_mc)

    p = sub.add_parser("contours", help="contours of a saved field")
    _common(p)
    p.add_argument("--field")
    p.add_argument("--levels")
    p.set_defaults(func=cmd_contours)
    return ap


def main(argv=None) -> int:
    ap = make_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        out = args.func(cfg)
    except ConfigError as exc:
        print(f"qpescape: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EliminatedError as exc:
        print(f"qpescape: {exc}", file=sys.stderr)
        return EXIT_ELIMINATED
    except (SolverError, NoGateError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"qpescape: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"qpescape: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
