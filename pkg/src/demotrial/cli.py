"""Command-line entry points.

Subcommands
-----------
``simulate``
    Run operating-characteristic simulations for a scenario and write the
    dose-selection table as CSV + JSON.  Ctrl-C flushes the completed
    replicates with a ``partial: true`` marker instead of discarding them.
``conduct-init``
    Start a new conduct-session journal from a trial config file.
``conduct-enroll``
    Register a cohort (dose, count, enrolment time) on a session journal.
``conduct-advance``
    Accept the pending recommendation, or override it (overrides require
    a justification, which is logged).
``conduct-step``
    Offline analysis step on a session journal: record outcomes from a
    CSV, run the current-stage models, print the summary block, and
    append the new events to the journal.  With no new outcomes and a
    previous analysis on file it re-prints that analysis and leaves the
    session untouched.
``serve``
    Run the conduct HTTP service.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .conduct import ConductError, ConductSession, OUTCOME_FIELDS, render_block
from .core import config_from_dict
from .simulator import (
    DESIGNS,
    aggregate_oc,
    default_sim_config,
    load_scenario,
    oc_to_csv,
    oc_to_json,
    simulate_oc,
)

OUTCOME_CSV_COLUMNS = ("patient",) + OUTCOME_FIELDS


def _oc_text(table) -> str:
    lines = []
    tag = " (partial)" if table.partial else ""
    lines.append(f"scenario {table.scenario}, design {table.design}, "
                 f"{table.n_reps} replicates{tag}")
    lines.append(f"{'dose':>6} {'value':>8} {'sel %':>8} {'mean n':>8}")
    for j, value in enumerate(table.dose_values):
        lines.append(f"{'d%d' % (j + 1):>6} {value:>8g} "
                     f"{table.sel_pct[j]:>8.1f} {table.mean_pts[j]:>8.1f}")
    lines.append(f"{'none':>6} {'':>8} {table.none_pct:>8.1f} {'':>8}")
    lines.append(f"mean total N = {table.mean_total:.1f}; "
                 f"replicate runtime {table.runtime_mean_s:.2f}s mean "
                 f"({table.runtime_min_s:.2f}-{table.runtime_max_s:.2f}s)")
    return "\n".join(lines)


def _write_oc(table, out_dir: Path) -> tuple[Path, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{table.scenario}_{table.design}_oc"
    csv_path = out_dir / f"{stem}.csv"
    json_path = out_dir / f"{stem}.json"
    csv_path.write_text(oc_to_csv(table), encoding="utf-8")
    json_path.write_text(json.dumps(oc_to_json(table), indent=2) + "\n",
                         encoding="utf-8")
    return csv_path, json_path


def _cmd_simulate(args) -> int:
    scenario = load_scenario(args.scenario)
    config = None
    if args.config is not None:
        config = config_from_dict(
            json.loads(Path(args.config).read_text(encoding="utf-8")))
    out_dir = Path(args.out)
    rows = []
    tick = max(1, args.reps // 20)

    def progress(row):
        rows.append(row)
        if len(rows) % tick == 0 or len(rows) == args.reps:
            print(f"  {len(rows)}/{args.reps} replicates done", file=sys.stderr)

    try:
        table = simulate_oc(scenario, args.design, args.reps, args.seed,
                            workers=args.workers, config=config,
                            progress=progress)
    except KeyboardInterrupt:
        table = aggregate_oc(scenario.name, args.design, scenario.dose_values,
                             rows, partial=True)
        csv_path, _ = _write_oc(table, out_dir)
        print(f"interrupted after {table.n_reps} replicates; "
              f"partial results written to {csv_path}", file=sys.stderr)
        print(_oc_text(table))
        return 130
    csv_path, json_path = _write_oc(table, out_dir)
    print(_oc_text(table))
    print(f"wrote {csv_path} and {json_path}", file=sys.stderr)
    return 0


def _cmd_conduct_init(args) -> int:
    path = Path(args.session)
    if path.exists():
        raise ValueError(f"session file {path} already exists")
    config = config_from_dict(
        json.loads(Path(args.config).read_text(encoding="utf-8")))
    session_id = args.id or path.stem
    session = ConductSession.create(session_id, config)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(session.events_jsonl(), encoding="utf-8")
    print(f"created session {session_id!r} at {path}")
    return 0


def _load_session(path: Path) -> ConductSession:
    if not path.is_file():
        raise ValueError(f"no session file {path}")
    return ConductSession.from_events(
        path.read_text(encoding="utf-8").splitlines())


def _append_events(path: Path, session: ConductSession, n_loaded: int) -> None:
    with path.open("a", encoding="utf-8") as fh:
        for event in session.events[n_loaded:]:
            fh.write(json.dumps(event, sort_keys=True) + "\n")


def _cmd_conduct_enroll(args) -> int:
    path = Path(args.session)
    session = _load_session(path)
    n_loaded = len(session.events)
    ids = session.add_patients(args.dose, args.count, args.time,
                               stage=args.stage)
    _append_events(path, session, n_loaded)
    print(f"enrolled patients {ids[0]}..{ids[-1]} at d{args.dose}, "
          f"t = {args.time:g} months")
    return 0


def _cmd_conduct_advance(args) -> int:
    path = Path(args.session)
    session = _load_session(path)
    n_loaded = len(session.events)
    applied = session.advance(not args.reject, action=args.action,
                              dose=args.dose,
                              justification=args.justification)
    _append_events(path, session, n_loaded)
    dose = f" d{applied['dose']}" if applied.get("dose") else ""
    print(f"applied: {applied['action']}{dose} — {applied['note']}")
    return 0


def _read_outcome_csv(lines) -> list[tuple[int, dict]]:
    """Parse ``patient,y_B,y_T,y_R,y_S_time,y_S_event`` rows.

    Blank cells mean "not observed".  Returns (line number, item) pairs;
    raises ValueError naming the 1-based line of any bad row.
    """
    lines = iter(lines)
    try:
        header = next(lines).strip()
    except StopIteration:
        return []
    if header != ",".join(OUTCOME_CSV_COLUMNS):
        raise ValueError(f"line 1: unexpected header {header!r}; expected "
                         f"{','.join(OUTCOME_CSV_COLUMNS)!r}")
    items = []
    for lineno, row in enumerate(lines, start=2):
        row = row.strip()
        if not row:
            continue
        parts = row.split(",")
        if len(parts) != len(OUTCOME_CSV_COLUMNS):
            raise ValueError(f"line {lineno}: expected "
                             f"{len(OUTCOME_CSV_COLUMNS)} fields, "
                             f"got {len(parts)}")
        try:
            item = {"patient": int(parts[0])}
            for name, cell in zip(OUTCOME_FIELDS, parts[1:]):
                cell = cell.strip()
                if cell:
                    item[name] = float(cell)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
        items.append((lineno, item))
    return items


def _cmd_conduct_step(args) -> int:
    path = Path(args.session)
    session = _load_session(path)
    n_loaded = len(session.events)

    items = []
    if args.outcomes is not None:
        items = _read_outcome_csv(
            Path(args.outcomes).read_text(encoding="utf-8").splitlines())

    if not items:
        for record in reversed(session.state.history):
            if "analysis" in record:
                print(render_block(record, session.config))
                return 0

    if items:
        try:
            session.record_outcomes([item for _, item in items])
        except ConductError as exc:
            msg = str(exc)
            prefix = "outcome item "
            if msg.startswith(prefix):
                index, _, rest = msg[len(prefix):].partition(": ")
                msg = f"line {items[int(index)][0]}: {rest}"
            raise ValueError(msg) from None

    time = args.time if args.time is not None else session.clock
    record = session.analyze(time, closing=args.closing, final=args.final)
    print(render_block(record, session.config))
    _append_events(path, session, n_loaded)
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(sessions_dir=args.sessions)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="demotrial",
        description="dose exploration-monitoring-optimization trial tools")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate",
                       help="run operating-characteristic simulations")
    p.add_argument("--scenario", required=True,
                   help="bundled scenario name or path to a scenario JSON")
    p.add_argument("--design", choices=DESIGNS, default="demo")
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--config", default=None,
                   help="trial config JSON (default: scenario defaults)")
    p.add_argument("--out", default=".", help="output directory")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("conduct-init",
                       help="create a new conduct-session journal")
    p.add_argument("--config", required=True, help="trial config JSON")
    p.add_argument("--session", required=True, help="journal file to create")
    p.add_argument("--id", default=None,
                   help="session id (default: journal filename stem)")
    p.set_defaults(func=_cmd_conduct_init)

    p = sub.add_parser("conduct-enroll",
                       help="register a cohort on a session journal")
    p.add_argument("--session", required=True, help="journal file (JSONL)")
    p.add_argument("--dose", type=int, required=True, help="dose index (1-based)")
    p.add_argument("--count", type=int, default=3)
    p.add_argument("--time", type=float, required=True,
                   help="enrolment time in months")
    p.add_argument("--stage", type=int, default=None,
                   help="expected stage (guard against stale journals)")
    p.set_defaults(func=_cmd_conduct_enroll)

    p = sub.add_parser("conduct-advance",
                       help="accept or override the pending recommendation")
    p.add_argument("--session", required=True, help="journal file (JSONL)")
    p.add_argument("--reject", action="store_true",
                   help="override instead of accepting")
    p.add_argument("--action", choices=("enroll_at", "hold", "stop"),
                   default=None, help="override action")
    p.add_argument("--dose", type=int, default=None)
    p.add_argument("--justification", default=None,
                   help="required for overrides; logged with the decision")
    p.set_defaults(func=_cmd_conduct_advance)

    p = sub.add_parser("conduct-step",
                       help="record outcomes and run the next analysis")
    p.add_argument("--session", required=True, help="journal file (JSONL)")
    p.add_argument("--outcomes", default=None,
                   help=f"CSV of {','.join(OUTCOME_CSV_COLUMNS)}")
    p.add_argument("--time", type=float, default=None,
                   help="analysis time in months (default: session clock)")
    p.add_argument("--closing", action="store_true",
                   help="stage-2 closing analysis")
    p.add_argument("--final", action="store_true",
                   help="stage-3 final analysis")
    p.set_defaults(func=_cmd_conduct_step)

    p = sub.add_parser("serve", help="run the conduct HTTP service")
    p.add_argument("--port", type=int, default=8711)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--sessions", default=None,
                   help="directory for session journals (default: in-memory)")
    p.set_defaults(func=_cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConductError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
