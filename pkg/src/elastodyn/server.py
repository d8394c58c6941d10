"""Live session service: a fixed-dt simulation loop in a worker thread, a
websocket endpoint that streams PNG frames and stats, and an ordered
command queue applied between steps.

One session, one client at a time. The sender only ever ships the latest
frame, so a slow client drops frames instead of stalling the stepper.
"""

from __future__ import annotations

import asyncio
import base64
import io as io_mod
import json
import threading
import time
from collections import deque
from importlib import resources

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from jsonschema import Draft7Validator

from . import render as render_mod
from .config import make_simulation
from .dynamics import CutQuad
from .material import MaterialParams
from .render import WarpData

PROTO_VERSION = 1


def _load_schema():
    with resources.files("elastodyn").joinpath("protocol.schema.json").open("rb") as fh:
        return json.load(fh)


_SCHEMA = _load_schema()
_CLIENT_VALIDATOR = Draft7Validator(
    {"$ref": "#/$defs/client_message", "$defs": _SCHEMA["$defs"]}
)
_SERVER_VALIDATOR = Draft7Validator(
    {"$ref": "#/$defs/server_message", "$defs": _SCHEMA["$defs"]}
)


def validate_client_message(msg):
    errors = sorted(_CLIENT_VALIDATOR.iter_errors(msg), key=str)
    return [e.message for e in errors]


def validate_server_message(msg):
    errors = sorted(_SERVER_VALIDATOR.iter_errors(msg), key=str)
    return [e.message for e in errors]


class Session:
    """Owns the simulation loop and the outgoing frame/stat buffers."""

    def __init__(self, cfg, cloud, kernels, ips, tensors=None, min_step_interval=0.0):
        self.cfg = cfg
        self._scene = (cloud, kernels, ips, tensors)
        self.sim = make_simulation(cfg, cloud, kernels, ips, tensors)
        self.paused = False
        self.running = False
        self.commands: deque = deque()
        self.outbox: deque = deque()
        self.latest_frame = None  # (seq, png_base64)
        self.latest_stats = None
        self.frame_seq = -1
        self.step_count = 0
        self.drag = None  # {"ip": k, "target": vec3}
        self.world_forces: list = []
        self.min_step_interval = min_step_interval
        self._thread = None
        self._fps = 0.0
        self._render_frame()

    # --------------------------------------------------------------- lifecycle

    def start(self):
        self.running = True
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()

    def stop(self):
        self.running = False
        if self._thread is not None:
            self._thread.join(timeout=10.0)
            self._thread = None

    def _loop(self):
        while self.running:
            t0 = time.perf_counter()
            self._drain_commands()
            if self.paused:
                time.sleep(0.01)
                continue
            self._apply_active_forces()
            try:
                self.sim.step()
            except Exception as exc:  # keep the session alive on solver failure
                self._push_error("step_failed", str(exc))
                self.paused = True
                continue
            self.step_count += 1
            self._render_frame()
            elapsed = time.perf_counter() - t0
            self._fps = 1.0 / max(elapsed, 1e-9)
            self._push_stats()
            if self.min_step_interval > elapsed:
                time.sleep(self.min_step_interval - elapsed)

    # ---------------------------------------------------------------- commands

    def enqueue(self, msg):
        self.commands.append(msg)

    def _drain_commands(self):
        while self.commands:
            msg = self.commands.popleft()
            try:
                self._apply_command(msg)
            except Exception as exc:
                self._push_error("command_failed", f"{msg.get('type')}: {exc}")

    def _apply_command(self, msg):
        kind = msg["type"]
        if kind == "pause":
            self.paused = True
        elif kind == "resume":
            self.paused = False
        elif kind == "reset":
            cloud, kernels, ips, tensors = self._scene
            self.sim = make_simulation(self.cfg, cloud, kernels, ips, tensors)
            self.drag = None
            self.world_forces = []
            self._render_frame()
            self.step_count = 0  # last: observers treat 0 as reset-complete
        elif kind == "set_dt":
            self.sim.set_dt(float(msg["dt"]))
        elif kind == "set_material":
            cur = self.sim.params
            self.sim.set_material(
                MaterialParams(
                    model=msg.get("model", cur.model),
                    E=float(msg.get("E", cur.E)),
                    nu=float(msg.get("nu", cur.nu)),
                    beta=float(msg.get("beta", cur.beta)),
                    rho=float(msg.get("rho", cur.rho)),
                )
            )
        elif kind == "pin":
            target = msg.get("target")
            picked = self.sim.pin_region(msg["region"], target)
            if not picked:
                self._push_error("no_pick", "pin region selects no kernels")
        elif kind == "unpin":
            self.sim.unpin()
        elif kind == "cut":
            quad = msg["quad"]
            self.sim.cut(CutQuad(quad["origin"], quad["edge_u"], quad["edge_v"]))
        elif kind == "apply_force":
            self._apply_force_command(msg)
        elif kind == "request_overlay":
            self._push_overlay()
        else:
            raise ValueError(f"unhandled message type {kind!r}")

    def _apply_force_command(self, msg):
        vector = np.asarray(msg["vector"], dtype=np.float64)
        if not vector.any():
            self.drag = None
            self.world_forces = []
            return
        if "world" in msg:
            self.world_forces.append(
                (np.asarray(msg["world"], dtype=np.float64), vector)
            )
            return
        pixel = np.asarray(msg["pixel"], dtype=np.float64)
        cam = self.cfg.camera
        dirs = cam.rays()
        px = int(np.clip(round(pixel[0]), 0, cam.width - 1))
        py = int(np.clip(round(pixel[1]), 0, cam.height - 1))
        ray = dirs[py, px]
        deformed = self.sim.ips.positions + self.sim.ip_displacements()
        rel = deformed - cam.position
        depth = rel @ ray
        perp = np.linalg.norm(rel - depth[:, None] * ray[None, :], axis=1)
        cutoff = 2.0 * float(np.linalg.norm(self.sim.ips.edges, axis=1).max())
        candidates = np.flatnonzero((perp <= cutoff) & (depth > cam.near))
        if len(candidates) == 0:
            self._push_error("no_pick", "no integrator point near that pixel")
            return
        k = int(candidates[np.argmin(depth[candidates])])
        fwd, right, up = cam.basis()
        tan_y = np.tan(np.deg2rad(cam.fov_deg) / 2.0)
        world_per_px = 2.0 * depth[k] * tan_y / cam.height
        offset = world_per_px * (vector[0] * right - vector[1] * up)
        self.drag = {"ip": k, "target": deformed[k] + offset}

    def _apply_active_forces(self):
        self.sim.clear_forces()
        for point, force in self.world_forces:
            self.sim.apply_point_force(point, force, warp=self._warp_to_rest)
        if self.drag is not None:
            k = self.drag["ip"]
            deformed = self.sim.ips.positions[k] + self.sim.ip_displacements()[
                k
            ]
            force = self.cfg.drag_stiffness * (self.drag["target"] - deformed)
            self.sim.apply_point_force(self.sim.ips.positions[k], force)

    def _warp_to_rest(self, point):
        data = WarpData.from_simulation(self.sim)
        rest, _, _, _, _, _ = render_mod.warp_points(data, point)
        return rest[0]

    # ----------------------------------------------------------------- output

    def _render_frame(self):
        t0 = time.perf_counter()
        warp = WarpData.from_simulation(self.sim)
        img = render_mod.render(
            self.cfg.camera,
            self.cfg.field,
            warp=warp,
            step=self.cfg.march_step,
            density_scale=self.cfg.density_scale,
        )
        self.warp_render_ms = (time.perf_counter() - t0) * 1e3
        buf = io_mod.BytesIO()
        render_mod.write_png(buf, img)
        self.frame_seq += 1
        self.latest_frame = (
            self.frame_seq,
            base64.b64encode(buf.getvalue()).decode("ascii"),
        )

    def _push_stats(self):
        st = self.sim.last_stats
        self.latest_stats = {
            "type": "stats",
            "step": self.step_count,
            "sim_time": self.sim.t,
            "newton_iters": int(st.newton_iters),
            "assembly_ms": float(st.assembly_ms),
            "solve_ms": float(st.solve_ms),
            "warp_render_ms": float(getattr(self, "warp_render_ms", 0.0)),
            "fps": float(self._fps),
            "volume_ratio": float(st.volume_ratio),
        }

    def _push_overlay(self):
        deformed = self.sim.ips.positions + self.sim.ip_displacements()
        pix, depth, valid = self.cfg.camera.project(deformed)

        def entries(mask):
            return [
                [float(pix[i, 0]), float(pix[i, 1]), float(depth[i])]
                for i in range(len(deformed))
                if valid[i] and mask[i]
            ]

        self.outbox.append(
            {
                "type": "overlay",
                "kernels": entries(self.sim.ips.kernel_ip),
                "ips": entries(~self.sim.ips.kernel_ip),
            }
        )

    def _push_error(self, code, message):
        self.outbox.append({"type": "error", "code": code, "message": message})


def create_app(session: Session) -> FastAPI:
    app = FastAPI(title="elastodyn live session")

    @app.websocket("/session")
    async def session_socket(ws: WebSocket):
        await ws.accept()
        await ws.send_json({"type": "hello", "proto": PROTO_VERSION})
        sent_seq = -1
        sent_stats = None

        async def sender():
            nonlocal sent_seq, sent_stats
            while True:
                while session.outbox:
                    await ws.send_json(session.outbox.popleft())
                frame = session.latest_frame
                if frame is not None and frame[0] > sent_seq:
                    sent_seq = frame[0]
                    await ws.send_json(
                        {"type": "frame", "seq": frame[0], "png_base64": frame[1]}
                    )
                stats = session.latest_stats
                if stats is not None and stats is not sent_stats:
                    sent_stats = stats
                    await ws.send_json(stats)
                await asyncio.sleep(0.005)

        send_task = asyncio.create_task(sender())
        try:
            while True:
                text = await ws.receive_text()
                try:
                    msg = json.loads(text)
                except json.JSONDecodeError:
                    session._push_error("bad_json", "message is not valid JSON")
                    continue
                problems = validate_client_message(msg)
                if problems:
                    session._push_error("bad_message", "; ".join(problems[:3]))
                    continue
                session.enqueue(msg)
        except WebSocketDisconnect:
            pass
        finally:
            send_task.cancel()

    return app


def serve(session: Session, port: int):
    import uvicorn

    app = create_app(session)
    session.start()
    try:
        uvicorn.run(app, host="127.0.0.1", port=port, log_level="warning")
    finally:
        session.stop()
