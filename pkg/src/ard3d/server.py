"""HTTP session service for interactive scene building.

Each session owns a SceneState and serializes its mutations behind a
lock; reads return the last published snapshot so they never observe a
half-committed step. Denoising progress streams to subscribers as
server-sent events: one event per integration step plus phase markers,
with a decimated occupancy preview, ending in a terminal event.

Voxel payloads travel run-length encoded over the flattened x-major bit
string, alternating zero-runs and one-runs starting with zeros.
"""

from __future__ import annotations

import json
import queue
import threading
import time
import uuid
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI
from fastapi.responses import JSONResponse, StreamingResponse

from .ard import ArdPipeline, SceneState, refine_text_for
from .config import SamplerConfig
from .sequence import unpatchify
from .textcodec import UnknownWordError
from .vae import LatentVolume
from .voxel import EmptyObjectError, OccupancyGrid, pool_any

PREVIEW_EDGE = 16
MAX_SESSIONS = 8
QUEUE_CAP = 4096


# -- voxel wire format -------------------------------------------------------


def rle_encode(bits: np.ndarray) -> list[int]:
    """Alternating zero/one run lengths over the flattened volume,
    starting with a zero-run (possibly length 0)."""
    flat = np.asarray(bits, bool).reshape(-1)
    if flat.size == 0:
        return []
    edges = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate(([0], edges))
    ends = np.concatenate((edges, [flat.size]))
    runs = (ends - starts).tolist()
    if flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(runs: list[int], dims: tuple[int, int, int]) -> np.ndarray:
    total = int(np.prod(dims))
    if sum(runs) != total:
        raise ValueError(f"run lengths sum to {sum(runs)}, volume is {total}")
    flat = np.zeros(total, bool)
    pos = 0
    for i, r in enumerate(runs):
        if r < 0:
            raise ValueError("negative run length")
        if i % 2 == 1:
            flat[pos:pos + r] = True
        pos += r
    return flat.reshape(dims)


def grid_payload(grid: OccupancyGrid) -> dict:
    return {"v": 1, "dims": [grid.M] * 3, "space": grid.space_tag,
            "count": grid.count(), "rle": rle_encode(grid.bits)}


def preview_payload(bits: np.ndarray) -> dict:
    """Occupancy decimated to at most PREVIEW_EDGE^3 for streaming."""
    edge = bits.shape[0]
    factor = max(1, -(-edge // PREVIEW_EDGE))
    small = pool_any(bits, factor) if factor > 1 else np.asarray(bits, bool)
    return {"v": 1, "dims": list(small.shape), "rle": rle_encode(small)}


# -- sessions ----------------------------------------------------------------


@dataclass
class Session:
    id: str
    state: SceneState
    sampler: SamplerConfig
    mode: str
    status: str = "idle"
    history: list = field(default_factory=list)
    lock: threading.Lock = field(default_factory=threading.Lock)
    published: dict = field(default_factory=dict)
    event_seq: int = 0
    subscribers: list = field(default_factory=list)
    sub_lock: threading.Lock = field(default_factory=threading.Lock)


def _scene_snapshot(session: Session) -> dict:
    objs = []
    for obj in session.state.objects:
        entry = {
            "step": obj.step,
            "instruction": obj.instruction,
            "coarse": grid_payload(obj.coarse),
            "box": {"lo": list(obj.box.lo), "hi": list(obj.box.hi)},
        }
        if obj.fine is not None:
            entry["fine"] = grid_payload(obj.fine)
        objs.append(entry)
    return {
        "v": 1,
        "session": session.id,
        "status": session.status,
        "mode": session.mode,
        "n_steps": session.state.step_count,
        "objects": objs,
        "scene": grid_payload(session.state.scene_grid()),
    }


class _ApiError(Exception):
    def __init__(self, status: int, message: str, **extra):
        super().__init__(message)
        self.status = status
        self.body = {"v": 1, "error": message, **extra}


def create_app(pipe: ArdPipeline, max_sessions: int = MAX_SESSIONS) -> FastAPI:
    app = FastAPI(title="ard3d session service")
    sessions: dict[str, Session] = {}
    registry_lock = threading.Lock()
    app.state.sessions = sessions

    def get_session(sid: str) -> Session:
        s = sessions.get(sid)
        if s is None:
            raise _ApiError(404, f"no session {sid}")
        return s

    def publish(session: Session, event: dict):
        event = {"i": session.event_seq, **event}
        session.event_seq += 1
        session.history.append(event)
        with session.sub_lock:
            subs = list(session.subscribers)
        for q in subs:
            try:
                q.put_nowait(event)
            except queue.Full:
                pass  # slow consumer loses events, generation continues

    @app.exception_handler(_ApiError)
    async def api_error(_, exc: _ApiError):
        return JSONResponse(status_code=exc.status, content=exc.body)

    @app.post("/sessions")
    def create_session(body: dict | None = None):
        body = body or {}
        allowed = {"mode", "seed", "steps", "cfg_text", "cfg_3d"}
        unknown = set(body) - allowed - {"v"}
        if unknown:
            raise _ApiError(422, f"unknown session options {sorted(unknown)}")
        mode = body.get("mode", pipe.cfg.model.mode)
        if mode not in ("ard", "ardplus"):
            raise _ApiError(422, f"mode must be ard or ardplus, not {mode!r}")
        base = pipe.cfg.sampler
        try:
            sampler = SamplerConfig(
                steps=int(body.get("steps", base.steps)),
                cfg_text=float(body.get("cfg_text", base.cfg_text)),
                cfg_3d=float(body.get("cfg_3d", base.cfg_3d)),
                seed=int(body.get("seed", base.seed)),
            )
            sampler.validate()
        except (TypeError, ValueError) as e:
            raise _ApiError(422, f"bad session options: {e}")
        with registry_lock:
            if len(sessions) >= max_sessions:
                raise _ApiError(429, f"session cap {max_sessions} reached")
            sid = uuid.uuid4().hex[:12]
            session = Session(sid, pipe.new_state(), sampler, mode)
            session.published = _scene_snapshot(session)
            sessions[sid] = session
        return {"v": 1, "session": sid, "mode": mode,
                "sampler_steps": sampler.steps, "seed": sampler.seed}

    @app.post("/sessions/{sid}/instructions")
    def post_instruction(sid: str, body: dict):
        session = get_session(sid)
        text = body.get("text")
        if not isinstance(text, str) or not text.strip():
            raise _ApiError(422, "body needs a nonempty \"text\"")
        if not session.lock.acquire(blocking=False):
            raise _ApiError(409, "session is busy")
        try:
            if session.status != "idle":
                raise _ApiError(409, "session is busy")
            session.status = "generating"
            session.published = _scene_snapshot(session)
            return _run_step(session, text, body.get("seed"))
        finally:
            session.status = "idle"
            session.published = _scene_snapshot(session)
            session.lock.release()

    def _run_step(session: Session, text: str, seed) -> dict:
        sampler = session.sampler
        if seed is not None:
            sampler = SamplerConfig(steps=sampler.steps, cfg_text=sampler.cfg_text,
                                    cfg_3d=sampler.cfg_3d, seed=int(seed))
        t = session.state.step_count
        t0 = time.monotonic()
        timings = {}
        publish(session, {"phase": "start", "step": t, "instruction": text})

        def progress_for(substep, space):
            def cb(k, total, rows):
                latent = unpatchify(rows, pipe.gen_p, pipe.D, pipe.C)
                prev = pipe.vae.decode(LatentVolume(latent), space)
                publish(session, {
                    "phase": "denoise", "substep": substep, "step": t,
                    "k": k, "of": total,
                    "preview": preview_payload(prev.bits),
                })
            return cb

        try:
            coarse = pipe.generate_next_object(
                session.state, text, sampler,
                progress=progress_for("coarse", "scene"))
            timings["coarse_s"] = round(time.monotonic() - t0, 3)
            publish(session, {"phase": "decoded", "step": t,
                              "count": coarse.count()})
            fine = None
            if session.mode == "ardplus":
                t1 = time.monotonic()
                rtext = refine_text_for(text)
                publish(session, {"phase": "refine", "step": t,
                                  "instruction": rtext})
                fine, _ = pipe.refine_object(
                    session.state, coarse, rtext, sampler,
                    progress=progress_for("fine", "object"))
                timings["fine_s"] = round(time.monotonic() - t1, 3)
        except _ApiError:
            raise
        except UnknownWordError as e:
            publish(session, {"phase": "error", "step": t,
                              "error": "unknown words", "unknown": list(e.words)})
            raise _ApiError(400, "instruction contains unknown words",
                            unknown=list(e.words))
        except Exception as e:
            publish(session, {"phase": "error", "step": t, "error": str(e)})
            status = 422 if isinstance(e, EmptyObjectError) \
                or "empty after" in str(e) else 500
            raise _ApiError(status, str(e))
        obj = session.state.objects[t]
        timings["total_s"] = round(time.monotonic() - t0, 3)
        result = {
            "v": 1, "step": t, "instruction": text,
            "coarse": grid_payload(obj.coarse),
            "box": {"lo": list(obj.box.lo), "hi": list(obj.box.hi)},
            "timings": timings,
        }
        if fine is not None:
            result["fine"] = grid_payload(fine)
        publish(session, {"phase": "done", "step": t,
                          "count": obj.coarse.count()})
        return result

    @app.get("/sessions/{sid}/scene")
    def get_scene(sid: str):
        return get_session(sid).published

    @app.post("/sessions/{sid}/undo")
    def undo_last(sid: str):
        session = get_session(sid)
        if not session.lock.acquire(blocking=False):
            raise _ApiError(409, "session is busy")
        try:
            if session.status != "idle":
                raise _ApiError(409, "session is busy")
            if session.state.step_count == 0:
                raise _ApiError(409, "nothing to undo")
            kept = session.state.objects[:-1]
            session.state = pipe.replay_state(kept)
            publish(session, {"phase": "undone",
                              "n_steps": session.state.step_count})
            session.published = _scene_snapshot(session)
            return session.published
        finally:
            session.lock.release()

    @app.get("/sessions/{sid}/events")
    def stream_events(sid: str, replay: int = 0, follow: int = 1,
                      max_events: int = 0):
        """SSE stream. `replay=N` first resends the last N recorded events;
        `follow=0` closes after the backlog; `max_events=N` closes after N
        live events (0 streams indefinitely)."""
        session = get_session(sid)
        q: queue.Queue = queue.Queue(maxsize=QUEUE_CAP)
        backlog = list(session.history[-replay:]) if replay else []
        if follow:
            with session.sub_lock:
                session.subscribers.append(q)

        def gen():
            sent = 0
            try:
                for ev in backlog:
                    yield f"data: {json.dumps(ev)}\n\n"
                while follow and (max_events == 0 or sent < max_events):
                    try:
                        ev = q.get(timeout=30.0)
                    except queue.Empty:
                        yield ": keepalive\n\n"
                        continue
                    sent += 1
                    yield f"data: {json.dumps(ev)}\n\n"
            finally:
                if follow:
                    with session.sub_lock:
                        if q in session.subscribers:
                            session.subscribers.remove(q)

        return StreamingResponse(gen(), media_type="text/event-stream")

    @app.get("/healthz")
    def healthz():
        return {"v": 1, "status": "ok", "sessions": len(sessions)}

    return app
