"""``ems`` command line.

Exit status: 0 when every snapshot went through every enabled stage, 2 when
some stage failed on some snapshot, 1 on a fatal configuration, input or
output error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from .cime_io.deltas import DeltaStreamError, parse_delta_stream, serialize_deltas
from .cime_io.gride import GrideError, serialize_grid
from .cime_io.replay import ReplayServer
from .cime_io.results import ReportFileError, write_csv, write_json
from .grid_model import GridModelError

OUT_ENV = "EMS_OUTPUT_DIR"
EXIT_OK, EXIT_FATAL, EXIT_STAGE = 0, 1, 2

log = logging.getLogger("ems")


def _endpoint(text: str):
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {text!r}")
    return host or "127.0.0.1", int(port)


def _add_common(p, deltas=True):
    p.add_argument("grid", help="grid file (.gride)")
    if deltas:
        src = p.add_mutually_exclusive_group()
        src.add_argument("--deltas", metavar="FILE", help="delta record file")
        src.add_argument("--connect", metavar="HOST:PORT", type=_endpoint,
                         help="receive deltas from a replay server")
    p.add_argument("--out", metavar="DIR",
                   help=f"output directory (default ${OUT_ENV} or ./ems-out)")
    p.add_argument("--workers", type=int, default=None, help="threads for NTP and factorization")
    p.add_argument("--no-figures", action="store_true", help="skip PNG figures")


def _add_warm(p, what):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--warm", dest="warm", action="store_true", default=True,
                   help=f"reuse the previous {what} when topology is unchanged (default)")
    g.add_argument("--cold", dest="warm", action="store_false", help="cold start every snapshot")


def _add_se(p):
    p.add_argument("--tol", dest="se_tol", type=float, default=1e-6, help="SE step tolerance")
    p.add_argument("--max-iter", dest="se_max_iter", type=int, default=25)


def _add_ca(p):
    p.add_argument("--scheme", choices=("fdpf", "pcg"), default="fdpf")
    p.add_argument("--jobs", type=int, default=1, help="contingency cases run concurrently")
    p.add_argument("--no-reuse", dest="reuse", action="store_false",
                   help="build and analyze every case from scratch (timing comparison)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ems", description="Snapshot-stream EMS analysis engine.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ntp", help="topology processing over the snapshot stream")
    _add_common(p)
    p.add_argument("--mode", choices=("full", "incremental"), default="incremental",
                   help="rebuild every snapshot from scratch, or only touched substations")

    p = sub.add_parser("se", help="state estimation over the snapshot stream")
    _add_common(p)
    _add_warm(p, "gain factors and state")
    _add_se(p)

    p = sub.add_parser("pf", help="fast-decoupled power flow over the snapshot stream")
    _add_common(p)
    _add_warm(p, "B'/B'' factors and state")
    p.add_argument("--tol", dest="pf_tol", type=float, default=1e-8, help="mismatch tolerance (pu)")

    p = sub.add_parser("ca", help="N-1 contingency analysis of the grid file's snapshot")
    _add_common(p, deltas=False)
    _add_ca(p)
    p.add_argument("--generators", action="store_true", help="also run generator outages")

    p = sub.add_parser("run", help="full pipeline: NTP, SE, PF and optionally CA per snapshot")
    _add_common(p)
    _add_warm(p, "SE/PF artifacts")
    _add_se(p)
    p.add_argument("--pf-tol", type=float, default=1e-8)
    p.add_argument("--stages", default="ntp,se,pf", help="comma list from ntp,se,pf,ca")
    _add_ca(p)

    p = sub.add_parser("bench", help="repeat a file-based run and summarise stage timings")
    _add_common(p)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--no-ca", action="store_true", help="skip the CA reuse on/off comparison")
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("generate", help="write a bundled IEEE case and a scripted delta stream")
    p.add_argument("case", choices=("ieee14", "ieee30", "ieee118"))
    p.add_argument("--grid-out", required=True, metavar="FILE")
    p.add_argument("--deltas-out", metavar="FILE")
    p.add_argument("--n-deltas", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0, help="measurement noise in sigmas")
    p.add_argument("--switch-every", type=int, default=5)

    p = sub.add_parser("serve", help="serve a delta file over TCP (replay protocol)")
    p.add_argument("deltas")
    p.add_argument("--bind", type=_endpoint, default=("127.0.0.1", 0), metavar="HOST:PORT")
    p.add_argument("--rate", type=float, default=None, help="groups per second")
    p.add_argument("--sessions", type=int, default=1,
                   help="exit after this many completed sessions (0 = never)")
    return ap


def _out_dir(args) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or "ems-out")


def _config(args, stages):
    from .pipeline import PipelineConfig

    return PipelineConfig(
        grid=args.grid, deltas=getattr(args, "deltas", None),
        endpoint=getattr(args, "connect", None), stages=stages,
        se_tol=getattr(args, "se_tol", 1e-6), se_max_iter=getattr(args, "se_max_iter", 25),
        pf_tol=getattr(args, "pf_tol", 1e-8), warm=getattr(args, "warm", True),
        reuse=getattr(args, "reuse", True), ca_scheme=getattr(args, "scheme", "fdpf"),
        jobs=getattr(args, "jobs", 1), workers=args.workers, out_dir=_out_dir(args),
        ntp_mode=getattr(args, "mode", "incremental"))


def _stream(args, stages) -> tuple[list, Path]:
    from .pipeline import emit_reports, run_pipeline

    cfg = _config(args, stages)
    out = _out_dir(args)
    reports = emit_reports(run_pipeline(cfg), out)
    if not args.no_figures:
        from .report import render_figures

        render_figures(reports, out)
    return reports, out


def _print_table(reports) -> None:
    print(f"{'t':>6} {'topo':>4} {'ntp ms':>8} {'se ms':>8} {'pf ms':>8} {'se it':>5} "
          f"{'pf half':>7}  errors")
    for r in reports:
        st = r.stage_times

        def ms(k):
            return f"{1e3 * st[k]:8.2f}" if k in st else f"{'-':>8}"

        se_it = r.se["iterations"] if r.se else "-"
        pf_it = r.pf["p_half"] + r.pf["q_half"] if r.pf else "-"
        errs = "; ".join(f"{k}: {v}" for k, v in sorted(r.errors.items()))
        print(f"{r.t:>6} {'Y' if r.topology_changed else 'N':>4} {ms('ntp')} {ms('se')} "
              f"{ms('pf')} {se_it!s:>5} {pf_it!s:>7}  {errs}")


def _finish(reports, out) -> int:
    _print_table(reports)
    failed = sum(1 for r in reports if r.errors)
    print(f"{len(reports)} snapshots, {failed} with stage failures; reports in {out}")
    return EXIT_STAGE if failed else EXIT_OK


def cmd_ntp(args) -> int:
    reports, out = _stream(args, ("ntp",))
    from .pipeline import load_deltas, load_grid
    from .ntp import full_ntp

    # final bus-branch model as tables
    grid = load_grid(args.grid)
    if not args.connect:
        from .grid_model import EvolvingSequence, apply_delta

        seq = EvolvingSequence(grid.graph, grid.measurements)
        for d in load_deltas(args.deltas):
            try:
                apply_delta(seq, d)
            except GridModelError:
                pass
        bb = full_ntp(seq.head.graph)
        write_csv(out / "buses.csv",
                  ("bus", "substation", "type", "energized", "island", "p_inj", "q_inj", "members"),
                  [(b.id, b.substation, b.type.value, int(b.energized), b.island, b.p_inj, b.q_inj,
                    " ".join(b.members)) for b in bb.buses.values()])
        write_csv(out / "branches.csv", ("branch", "from", "to", "in_service", "r", "x", "b", "tap"),
                  [(br.id, br.from_bus, br.to_bus, int(br.in_service), br.r, br.x, br.b, br.tap)
                   for br in bb.branches.values()])
        write_json(out / "bus_branch.json", {
            "t": seq.t, "mva_base": bb.mva_base,
            "buses": [{"bus": b.id, "substation": b.substation, "type": b.type.value,
                       "energized": b.energized, "island": b.island, "p_inj": b.p_inj,
                       "q_inj": b.q_inj, "b_shunt": b.b_shunt, "members": list(b.members)}
                      for b in bb.buses.values()],
            "branches": [{"branch": br.id, "from": br.from_bus, "to": br.to_bus,
                          "in_service": br.in_service, "r": br.r, "x": br.x, "b": br.b,
                          "tap": br.tap, "rate": br.rate} for br in bb.branches.values()]})
    return _finish(reports, out)


def cmd_se(args) -> int:
    reports, out = _stream(args, ("ntp", "se"))
    if reports and reports[-1].se:
        write_json(out / "se_result.json", {k: getattr(reports[-1], k) for k in
                                            ("t", "se", "se_timing", "se_state", "errors")})
    return _finish(reports, out)


def cmd_pf(args) -> int:
    reports, out = _stream(args, ("ntp", "pf"))
    if reports and reports[-1].pf:
        write_json(out / "pf_result.json", {k: getattr(reports[-1], k) for k in
                                            ("t", "pf", "pf_timing", "pf_state", "errors")})
    return _finish(reports, out)


def cmd_run(args) -> int:
    stages = tuple(s.strip() for s in args.stages.split(",") if s.strip())
    reports, out = _stream(args, stages)
    return _finish(reports, out)


def cmd_ca(args) -> int:
    from .contingency import run_all
    from .ntp import full_ntp
    from .pipeline import case_row, load_grid

    out = _out_dir(args)
    grid = load_grid(args.grid)
    bb = full_ntp(grid.graph)
    rep = run_all(bb, scheme=args.scheme, jobs=args.jobs, reuse=args.reuse,
                  generators=args.generators)
    rows = [case_row(c) for c in rep.cases]
    header = ("case", "status", "half_iterations", "pcg_iterations", "violations", "isolated")
    summ = rep.summary()
    footer = [("# total", f"run={summ['run']}", f"screened={summ['screened']}",
               f"alerts={summ['alerts']}", f"symbolic_runs={summ['symbolic_runs']}",
               f"wall_ms={1e3 * summ['wall_time_s']:.3f}")]
    write_csv(out / "ca.csv", header, [[r[k] for k in header] for r in rows] + footer)
    write_json(out / "ca.json", {"summary": summ, "cases": rows,
                                 "base_violations": [list(v) for v in rep.base_violations]})
    if not args.no_figures:
        from .report import plot_contingencies

        plot_contingencies(rows, out / "contingencies.png")
    print(f"{summ['enumerated']} cases: {summ['run']} run, {summ['screened']} screened, "
          f"{summ['alerts']} alerts, {summ['with_violations']} with violations; "
          f"symbolic analyses {summ['symbolic_runs']}; {1e3 * summ['wall_time_s']:.1f} ms")
    return EXIT_STAGE if summ["alerts"] else EXIT_OK


def cmd_bench(args) -> int:
    from .pipeline import bench

    cfg = _config(args, ("ntp", "se", "pf"))
    if cfg.endpoint is not None:
        raise ValueError("bench needs --deltas (a reproducible file source)")
    out = _out_dir(args)
    summary = bench(cfg, repeats=args.repeats, ca=not args.no_ca)
    write_json(out / "bench.json", summary)
    if not args.no_figures:
        from .report import plot_bench

        plot_bench(summary, out / "bench.png")
    for stage, q in summary["stage_seconds"].items():
        print(f"{stage:>5}: median {1e3 * q['median']:.2f} ms, p95 {1e3 * q['p95']:.2f} ms")
    c = summary["cycle_seconds"]
    print(f"cycle: median {1e3 * c['median']:.2f} ms, p95 {1e3 * c['p95']:.2f} ms")
    it = summary["se_iterations"]
    print(f"SE iterations: warm median {it['warm']['median']}, cold median {it['cold']['median']}")
    if "ca_seconds" in summary:
        print(f"CA reuse/no-reuse wall time ratio: {summary['ca_seconds']['ratio']:.3f}")
    return EXIT_OK


def cmd_generate(args) -> int:
    from .scenario import build_scenario

    sc = build_scenario(args.case, args.n_deltas if args.deltas_out else 0, seed=args.seed,
                        switch_every=args.switch_every, noise=args.noise)
    Path(args.grid_out).write_text(serialize_grid(sc.grid), encoding="utf-8")
    if args.deltas_out:
        Path(args.deltas_out).write_text(serialize_deltas(sc.deltas), encoding="utf-8")
    print(f"wrote {args.grid_out}" + (f" and {args.deltas_out} ({len(sc.deltas)} deltas)"
                                      if args.deltas_out else ""))
    return EXIT_OK


def cmd_serve(args) -> int:
    deltas = parse_delta_stream(Path(args.deltas).read_bytes())
    with ReplayServer(deltas, args.bind, args.rate) as srv:
        host, port = srv.address
        print(f"serving {len(deltas)} delta groups on {host}:{port}", flush=True)
        try:
            while not args.sessions or srv.completed < args.sessions:
                time.sleep(0.1)
        except KeyboardInterrupt:
            pass
    return EXIT_OK


COMMANDS = {"ntp": cmd_ntp, "se": cmd_se, "pf": cmd_pf, "ca": cmd_ca, "run": cmd_run,
            "bench": cmd_bench, "generate": cmd_generate, "serve": cmd_serve}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (GrideError, DeltaStreamError) as exc:
        print(f"ems: input error: {exc}", file=sys.stderr)
    except (ReportFileError, OSError) as exc:
        print(f"ems: {exc}", file=sys.stderr)
    except (GridModelError, ValueError) as exc:
        print(f"ems: {exc}", file=sys.stderr)
    return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
