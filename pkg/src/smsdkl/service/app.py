"""FastAPI application exposing experiments, checks, diagnostics and ask/tell sessions.

Paths in requests are paths on the server's file system.
"""

from __future__ import annotations

import csv
import threading
import uuid
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException

from .. import __version__
from ..acquisition import RunHistory, SmsDkl
from ..bench import diagnostics as dx
from ..bench.runner import atomic_write, plot_bundle, run_experiment
from ..checks import CHECKS, run_checks
from ..core import Dim, HyperparamSpace, RunConfig, SequenceDataset
from . import schemas as sc


def _sidecar_embeddings(path: Path) -> np.ndarray | None:
    side = path.with_name(f"{path.stem}_embeddings.csv")
    if not side.exists():
        return None
    with open(side, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(v) for v in r[1:]] for r in rows])


def _matrix_csv(header: list[str], rows) -> str:
    lines = [",".join(header)]
    for label, row in rows:
        lines.append(",".join([str(label)] + ["" if not np.isfinite(v) else repr(float(v)) for v in row]))
    return "\n".join(lines) + "\n"


def diagnose(history_path: str | Path, top_k: int = 20, out_dir: str | Path | None = None) -> sc.DiagResponse:
    path = Path(history_path)
    hist = RunHistory.from_csv(path)
    if len(hist) < 3:
        raise ValueError("need at least three acquisitions for diagnostics")
    R = dx.performance_corr_matrix(hist)
    z = _sidecar_embeddings(path)
    traj = dx.top_k_trajectory(hist, top_k)
    files = []
    if out_dir is not None:
        out = Path(out_dir)
        steps = [f"t{t}" for t in range(1, hist.T + 1)]
        atomic_write(out / "corr.csv", _matrix_csv(["t"] + steps, zip(steps, R)))
        atomic_write(out / "top_k_trajectory.csv",
                     _matrix_csv(["t"] + [f"x{k + 1}" for k in range(traj.shape[1])], zip(range(1, hist.T + 1), traj)))
        files += [str(out / "corr.csv"), str(out / "top_k_trajectory.csv")]
        if z is not None:
            atomic_write(out / "embedding_trace.csv",
                         _matrix_csv(["t"] + [f"z{k + 1}" for k in range(z.shape[1])], zip(range(1, len(z) + 1), z)))
            files.append(str(out / "embedding_trace.csv"))
    off = dx.mean_offdiag(R) if hist.T > 1 else float("nan")
    return sc.DiagResponse(
        T=hist.T, n=len(hist), corr=sc.nan_to_none(R), mean_offdiag=off if np.isfinite(off) else None,
        embeddings=None if z is None else z.tolist(), top_k=min(top_k, len(hist)),
        top_k_trajectory=traj.tolist(), files=files,
    )


class _Sessions:
    def __init__(self):
        self._lock = threading.Lock()
        self._items: dict[str, tuple[SmsDkl, threading.Lock]] = {}

    def add(self, opt: SmsDkl) -> str:
        sid = uuid.uuid4().hex
        with self._lock:
            self._items[sid] = (opt, threading.Lock())
        return sid

    def get(self, sid: str) -> tuple[SmsDkl, threading.Lock]:
        with self._lock:
            if sid not in self._items:
                raise HTTPException(404, f"unknown session {sid}")
            return self._items[sid]

    def drop(self, sid: str) -> None:
        with self._lock:
            if self._items.pop(sid, None) is None:
                raise HTTPException(404, f"unknown session {sid}")


def create_app() -> FastAPI:
    app = FastAPI(title="smsdkl", version=__version__)
    sessions = _Sessions()

    @app.get("/health", response_model=sc.Health)
    def health():
        return sc.Health(version=__version__)

    @app.post("/check", response_model=sc.CheckResponse)
    def check(req: sc.CheckRequest):
        unknown = [n for n in req.names or [] if n not in CHECKS]
        if unknown:
            raise HTTPException(422, f"unknown checks {unknown}; choose from {sorted(CHECKS)}")
        results = run_checks(req.names)
        return sc.CheckResponse(passed=all(r.passed for r in results),
                                results=[sc.CheckItem(**r.to_dict()) for r in results])

    @app.post("/experiments", response_model=sc.ExperimentResponse)
    def experiments(req: sc.ExperimentRequest):
        manifest = run_experiment(req.config, req.out_dir)
        return sc.ExperimentResponse(out_dir=req.out_dir, **manifest)

    @app.post("/plot", response_model=sc.PlotResponse)
    def plot(req: sc.PlotRequest):
        try:
            files = plot_bundle(req.bundle)
        except FileNotFoundError as err:
            raise HTTPException(404, str(err)) from err
        return sc.PlotResponse(files=[str(f) for f in files])

    @app.post("/diag", response_model=sc.DiagResponse)
    def diag(req: sc.DiagRequest):
        if not Path(req.history).exists():
            raise HTTPException(404, f"no history at {req.history}")
        try:
            return diagnose(req.history, req.top_k, req.out_dir)
        except ValueError as err:
            raise HTTPException(422, str(err)) from err

    @app.post("/sessions", response_model=sc.SessionCreated)
    def new_session(req: sc.SessionRequest):
        try:
            space = HyperparamSpace([Dim(d.name, d.kind, d.lo, d.hi) for d in req.space])
            ds = SequenceDataset(np.asarray(req.data.obs, dtype=np.float64),
                                 np.asarray(req.data.labels, dtype=np.float64),
                                 None if req.data.lengths is None else np.asarray(req.data.lengths))
            cfg = RunConfig(n_init=req.n_init, seed=req.seed, **req.dkl.model_dump())
        except (ValueError, TypeError) as err:
            raise HTTPException(422, str(err)) from err
        opt = SmsDkl(space, ds, cfg)
        sid = sessions.add(opt)
        return sc.SessionCreated(session_id=sid, T=ds.T, initial_points=opt.initial_points().tolist())

    @app.post("/sessions/{sid}/tell", response_model=sc.TellResponse)
    def tell(sid: str, req: sc.TellRequest):
        opt, lock = sessions.get(sid)
        with lock:
            x = np.asarray(req.x, dtype=np.float64)
            if x.shape != (len(opt.space),) or not opt.space.contains(x):
                raise HTTPException(422, "x is not a point of the session's space")
            try:
                opt.observe(x, req.y)
            except ValueError as err:
                raise HTTPException(422, str(err)) from err
            return sc.TellResponse(n_observations=len(opt.X))

    @app.post("/sessions/{sid}/ask", response_model=sc.AskResponse)
    def ask(sid: str):
        opt, lock = sessions.get(sid)
        with lock:
            if not opt.X:
                raise HTTPException(409, "tell at least one observation before asking")
            x = opt.suggest()
            last = opt.last
            return sc.AskResponse(x=x.tolist(), chosen_t=last["chosen"].t, probs=last["probs"].tolist(),
                                  acq_values=[p.acq_value for p in last["proposals"]])

    @app.delete("/sessions/{sid}")
    def close(sid: str):
        sessions.drop(sid)
        return {"closed": sid}

    return app


app = create_app()
