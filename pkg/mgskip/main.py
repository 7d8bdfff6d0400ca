import argparse
import logging
import sys
from pathlib import Path

from mgskip.config import settings
from mgskip.errors import (
    ConfigError,
    InfeasibleConnectivityError,
    InvalidSizeError,
    MGSkipError,
    ParameterError,
)
from mgskip.experiment import GRAPH_KINDS, GraphSpec, load_spec
from mgskip.gossip import MultiGossipOperator, chebyshev_eta, default_K, verify_gossip_bounds
from mgskip.harness import build_graph, run_experiment, sweep, verify
from mgskip.topology import metropolis_weights, write_edge_list, write_mixing_csv

# ─── Logging ───────────────────────────────────────────────────────────────────
logging.basicConfig(
    level=getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO),
    format="%(asctime)s │ %(levelname)-8s │ %(message)s",
)
logger = logging.getLogger(__name__)


def _number_list(flag: str, text: str, kind: type) -> list:
    try:
        values = [kind(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise ConfigError(f"{flag}: cannot read {text!r}") from None
    if not values:
        raise ConfigError(f"{flag} needs at least one value")
    return values


# ─── Commands ─────────────────────────────────────────────────────────────────
def cmd_run(args) -> int:
    spec = load_spec(args.config)
    out_dir = Path(args.out or settings.OUTPUT_DIR)
    outcome = run_experiment(spec, out_dir, workers=args.workers)
    missed = outcome.summary[~outcome.summary["reached_tol"].astype(bool)]
    for _, row in missed.iterrows():
        logger.warning(f"⚠️  {row['algorithm']} seed={row['seed']} stopped at rel_err={row['final_rel_err']:.3e}")
    return 0


def cmd_verify(args) -> int:
    spec = load_spec(args.config)
    checks = verify(spec)
    for check in checks:
        mark = "✅" if check.passed else "❌"
        print(f"{mark} {check.name:<28} {check.detail}")
    return 0 if all(c.passed for c in checks) else 1


def cmd_topology(args) -> int:
    if args.config:
        graph = build_graph(load_spec(args.config))
    else:
        try:
            graph = build_graph(GraphSpec(kind=args.kind, n=args.n, iota=args.iota, seed=args.seed))
        except (InfeasibleConnectivityError, InvalidSizeError, ParameterError) as exc:
            raise ConfigError(f"topology flags: {exc}") from exc
    mixing = metropolis_weights(graph)
    op = MultiGossipOperator.build(mixing)
    print(f"n={graph.n} edges={graph.num_edges} rho={mixing.rho:.6f}")
    print(f"K={default_K(mixing.rho)} eta={chebyshev_eta(mixing.rho):.6f} ({settings.ETA_FORM})")
    report = verify_gossip_bounds(op)
    print(f"multi-gossip radius={report.radius:.6f} envelope={report.envelope:.6f}")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_edge_list(graph, out_dir / "edges.txt")
        write_mixing_csv(mixing, out_dir / "mixing.csv")
        logger.info(f"💾 wrote edges.txt and mixing.csv to {out_dir}")
    return 0


def cmd_sweep(args) -> int:
    spec = load_spec(args.config)
    p_values = _number_list("--p", args.p, float)
    if any(not 0.0 < p <= 1.0 for p in p_values):
        raise ConfigError("--p needs probabilities in (0, 1]")
    k_values = _number_list("--k", args.k, int) if args.k else None
    sweep(spec, p_values, Path(args.out or settings.OUTPUT_DIR), workers=args.workers, k_values=k_values)
    return 0


def _add_config(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("spec", nargs="?", help="experiment spec file (same as --config)")
    parser.add_argument("--config", help="experiment spec file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mgskip",
        description="Simulate MG-Skip and PUDA baselines on decentralized composite problems.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run every algorithm and seed in a spec file")
    _add_config(run)
    run.add_argument("--out", help=f"output directory (default: {settings.OUTPUT_DIR})")
    run.add_argument("--workers", type=int, default=None, help="parallel runs (default: MGSKIP_WORKERS)")
    run.set_defaults(func=cmd_run)

    ver = sub.add_parser("verify", help="check mixing, gossip bounds, optimality and contraction")
    _add_config(ver)
    ver.set_defaults(func=cmd_verify)

    top = sub.add_parser("topology", help="print n, rho, K and eta of a graph")
    _add_config(top)
    top.add_argument("--kind", choices=GRAPH_KINDS, help="build the graph from flags instead of a spec")
    top.add_argument("--n", type=int, default=15, help="number of nodes (default: 15)")
    top.add_argument("--iota", type=float, default=0.25, help="edge ratio of a random graph (default: 0.25)")
    top.add_argument("--seed", type=int, default=0, help="random graph seed (default: 0)")
    top.add_argument("--out", help="also write edges.txt and mixing.csv here")
    top.set_defaults(func=cmd_topology)

    sw = sub.add_parser("sweep", help="run MG-Skip algorithms over a grid of p (and K) values")
    _add_config(sw)
    sw.add_argument("--p", required=True, help="comma-separated probabilities, e.g. 0.02,0.1,0.5,1")
    sw.add_argument("--k", help="comma-separated round counts, e.g. 1,2,4,8")
    sw.add_argument("--out", help=f"output directory (default: {settings.OUTPUT_DIR})")
    sw.add_argument("--workers", type=int, default=None)
    sw.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.spec and args.config and args.spec != args.config:
        parser.error("give the spec file once, either positionally or with --config")
    args.config = args.config or args.spec
    if args.config and getattr(args, "kind", None) is not None:
        parser.error("use either a spec file or --kind, not both")
    if not args.config and getattr(args, "kind", None) is None:
        if args.command == "topology":
            parser.error("a spec file or --kind is required")
        parser.error("a spec file is required (--config)")
    try:
        return args.func(args)
    except ConfigError as exc:
        logger.error(f"❌ {exc}")
        return 2
    except MGSkipError as exc:
        logger.error(f"❌ {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
