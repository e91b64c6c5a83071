"""HTTP conduct service: a JSON API over :class:`ConductSession`.

One session per trial; every state-changing POST carries the caller's
expected ``state_version`` and is rejected with 409 when it does not
match (optimistic concurrency — one writer per session).  GET endpoints
never mutate.  Sessions persist as append-only JSON-lines journals when
the app is created with a sessions directory, and journals already on
disk are loaded lazily on first access.

Analyses normally run synchronously (they take seconds).  For chain
configurations above ``ASYNC_ITER_THRESHOLD`` total iterations the
analyze endpoint instead returns ``202 Accepted`` with a poll URL and
runs the analysis on a worker thread; other commands are rejected with
409 until it lands.
"""

from __future__ import annotations

import json
import re
import threading
import uuid
from pathlib import Path

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from .conduct import ConductError, ConductSession, render_block
from .core import config_from_dict

ASYNC_ITER_THRESHOLD = 20_000

_ID_RE = re.compile(r"^[A-Za-z0-9_-]{1,64}$")


class CreateTrial(BaseModel):
    version: int = 1
    config: dict
    session_id: str | None = None


class PatientsCmd(BaseModel):
    version: int
    dose: int
    count: int = 1
    time: float
    stage: int | None = None


class OutcomesCmd(BaseModel):
    version: int
    outcomes: list[dict]


class AnalyzeCmd(BaseModel):
    version: int
    time: float
    closing: bool = False
    final: bool = False


class AdvanceCmd(BaseModel):
    version: int
    accept: bool = True
    action: str | None = None
    dose: int | None = None
    justification: str | None = None


class _Entry:
    """Registry slot: the session, its writer lock, persistence cursor,
    and the in-flight background analysis (if any)."""

    def __init__(self, session: ConductSession, path: Path | None):
        self.session = session
        self.path = path
        self.lock = threading.Lock()
        self.persisted = 0
        self.busy: int | None = None  # ordinal of the running analysis
        self.async_error: dict | None = None  # {"index", "detail", "status"}


def create_app(sessions_dir: str | Path | None = None) -> FastAPI:
    app = FastAPI(title="dose-trial conduct service")
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])
    sessions_dir = Path(sessions_dir) if sessions_dir is not None else None
    registry: dict[str, _Entry] = {}
    registry_lock = threading.Lock()

    def error(status: int, detail: str, **extra) -> JSONResponse:
        return JSONResponse({"version": 1, "detail": detail, **extra},
                            status_code=status)

    def flush(entry: _Entry) -> None:
        if entry.path is None:
            return
        events = entry.session.events
        if entry.persisted < len(events):
            with entry.path.open("a", encoding="utf-8") as fh:
                for event in events[entry.persisted:]:
                    fh.write(json.dumps(event, sort_keys=True) + "\n")
            entry.persisted = len(events)

    def get_entry(trial_id: str) -> _Entry | None:
        with registry_lock:
            entry = registry.get(trial_id)
            if entry is not None:
                return entry
            if sessions_dir is not None:
                path = sessions_dir / f"{trial_id}.jsonl"
                if path.is_file():
                    session = ConductSession.from_events(
                        path.read_text(encoding="utf-8").splitlines())
                    entry = _Entry(session, path)
                    entry.persisted = len(session.events)
                    registry[trial_id] = entry
                    return entry
        return None

    def check_writable(entry: _Entry, expected_version: int):
        """Inside the entry lock: version token + busy guard."""
        if entry.busy is not None:
            return error(409, "an analysis is in progress; poll it first",
                         poll=f"/trials/{entry.session.id}/analyses/{entry.busy}")
        if expected_version != entry.session.version:
            return error(409, "version conflict",
                         state_version=entry.session.version)
        return None

    @app.exception_handler(ConductError)
    async def _conduct_error(request, exc: ConductError):
        return error(exc.status, str(exc))

    @app.post("/trials", status_code=201)
    def create_trial(cmd: CreateTrial):
        if cmd.version != 1:
            return error(422, f"unsupported payload version {cmd.version}")
        trial_id = cmd.session_id or uuid.uuid4().hex[:12]
        if not _ID_RE.match(trial_id):
            return error(422, "session_id must match [A-Za-z0-9_-]{1,64}")
        try:
            config = config_from_dict(cmd.config)
        except (KeyError, TypeError, ValueError) as err:
            return error(422, f"invalid config: {err}")
        path = None
        if sessions_dir is not None:
            sessions_dir.mkdir(parents=True, exist_ok=True)
            path = sessions_dir / f"{trial_id}.jsonl"
        with registry_lock:
            if trial_id in registry or (path is not None and path.exists()):
                return error(409, f"session {trial_id!r} already exists")
            try:
                session = ConductSession.create(trial_id, config)
            except ValueError as err:
                return error(422, f"invalid config: {err}")
            entry = _Entry(session, path)
            registry[trial_id] = entry
        with entry.lock:
            flush(entry)
            return session.snapshot()

    @app.get("/trials/{trial_id}")
    def get_trial(trial_id: str):
        entry = get_entry(trial_id)
        if entry is None:
            return error(404, f"no trial {trial_id!r}")
        with entry.lock:
            return entry.session.snapshot()

    @app.get("/trials/{trial_id}/log")
    def get_log(trial_id: str):
        entry = get_entry(trial_id)
        if entry is None:
            return error(404, f"no trial {trial_id!r}")
        with entry.lock:
            return {"version": 1, "id": trial_id,
                    "state_version": entry.session.version,
                    "log": entry.session.state.history}

    @app.post("/trials/{trial_id}/patients")
    def post_patients(trial_id: str, cmd: PatientsCmd):
        entry = get_entry(trial_id)
        if entry is None:
            return error(404, f"no trial {trial_id!r}")
        with entry.lock:
            conflict = check_writable(entry, cmd.version)
            if conflict is not None:
                return conflict
            ids = entry.session.add_patients(cmd.dose, cmd.count, cmd.time,
                                             stage=cmd.stage)
            flush(entry)
            return {"version": 1, "state_version": entry.session.version,
                    "patients": ids}

    @app.post("/trials/{trial_id}/outcomes")
    def post_outcomes(trial_id: str, cmd: OutcomesCmd):
        entry = get_entry(trial_id)
        if entry is None:
            return error(404, f"no trial {trial_id!r}")
        with entry.lock:
            conflict = check_writable(entry, cmd.version)
            if conflict is not None:
                return conflict
            n = entry.session.record_outcomes(cmd.outcomes)
            flush(entry)
            return {"version": 1, "state_version": entry.session.version,
                    "recorded": n}

    def run_analysis(entry: _Entry, cmd: AnalyzeCmd) -> dict:
        record = entry.session.analyze(cmd.time, closing=cmd.closing,
                                       final=cmd.final)
        flush(entry)
        return {"version": 1, "state_version": entry.session.version,
                "analysis": record,
                "block": render_block(record, entry.session.config),
                "recommendation": entry.session.pending}

    @app.post("/trials/{trial_id}/analyze")
    def post_analyze(trial_id: str, cmd: AnalyzeCmd):
        entry = get_entry(trial_id)
        if entry is None:
            return error(404, f"no trial {trial_id!r}")
        mcmc = entry.session.config.mcmc
        synchronous = mcmc.n_burn + mcmc.n_keep <= ASYNC_ITER_THRESHOLD
        with entry.lock:
            conflict = check_writable(entry, cmd.version)
            if conflict is not None:
                return conflict
            if synchronous:
                return run_analysis(entry, cmd)
            ordinal = entry.session._analysis_index + 1
            entry.busy = ordinal
            entry.async_error = None

        def worker():
            with entry.lock:
                try:
                    run_analysis(entry, cmd)
                except ConductError as err:
                    entry.async_error = {"index": ordinal,
                                         "detail": str(err),
                                         "status": err.status}
                finally:
                    entry.busy = None

        threading.Thread(target=worker, daemon=True).start()
        return JSONResponse(
            {"version": 1, "status": "pending",
             "state_version": entry.session.version,
             "poll": f"/trials/{trial_id}/analyses/{ordinal}"},
            status_code=202)

    @app.get("/trials/{trial_id}/analyses/{ordinal}")
    def get_analysis(trial_id: str, ordinal: int):
        entry = get_entry(trial_id)
        if entry is None:
            return error(404, f"no trial {trial_id!r}")
        if entry.busy == ordinal:
            return JSONResponse({"version": 1, "status": "running"},
                                status_code=202)
        with entry.lock:
            err = entry.async_error
            if err is not None and err["index"] == ordinal:
                return error(err["status"], err["detail"])
            for record in entry.session.state.history:
                if record.get("analysis") == ordinal:
                    return {"version": 1,
                            "state_version": entry.session.version,
                            "analysis": record,
                            "block": render_block(record,
                                                  entry.session.config)}
        return error(404, f"no analysis {ordinal} in trial {trial_id!r}")

    @app.post("/trials/{trial_id}/advance")
    def post_advance(trial_id: str, cmd: AdvanceCmd):
        entry = get_entry(trial_id)
        if entry is None:
            return error(404, f"no trial {trial_id!r}")
        with entry.lock:
            conflict = check_writable(entry, cmd.version)
            if conflict is not None:
                return conflict
            applied = entry.session.advance(cmd.accept, action=cmd.action,
                                            dose=cmd.dose,
                                            justification=cmd.justification)
            flush(entry)
            return {"version": 1, "state_version": entry.session.version,
                    "applied": applied,
                    "state": entry.session.state.snapshot()}

    return app
