"""Command line entry points: build (sample + precompute sidecar), run
(headless simulate + render PNG sequence + stats CSV), serve (live session).

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time

from . import io as sidecar_io
from . import render as render_mod
from .config import ConfigError, build_scene, load_scene, make_simulation
from .dynamics import build_ip_tensors
from .render import WarpData


def _add_common(p):
    p.add_argument("--scene", required=True, help="scene config JSON")
    p.add_argument("--seed", type=int, default=None, help="override the sampling seed")


def build_parser():
    ap = argparse.ArgumentParser(
        prog="elastodyn",
        description="meshless elastodynamics: build, headless run, live session",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build", help="sample the scene and write the sidecar")
    _add_common(b)
    b.add_argument("--out", required=True, help="output sidecar path")

    r = sub.add_parser("run", help="headless simulation: PNG frames + stats CSV")
    _add_common(r)
    r.add_argument("--sidecar", default=None, help="prebuilt sidecar (else build now)")
    r.add_argument("--frames", type=int, default=60, help="number of steps to simulate")
    r.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("serve", help="live session over a websocket")
    _add_common(s)
    s.add_argument("--sidecar", default=None)
    s.add_argument("--port", type=int, default=8765)
    return ap


def _load_or_build(cfg, sidecar_path, seed):
    if sidecar_path:
        cloud, kernels, ips, order, quad_pts = sidecar_io.load_sidecar(sidecar_path)
        if order != cfg.order:
            raise ConfigError(
                f"config error at interpolation: sidecar was built with "
                f"order={order!r}, scene asks for {cfg.order!r}"
            )
        return cloud, kernels, ips, ips.tensors
    cloud, kernels, ips = build_scene(cfg, seed)
    tensors = build_ip_tensors(cloud, kernels, ips, order=cfg.order,
                               k_covariance=cfg.k_covariance)
    return cloud, kernels, ips, tensors


def cmd_build(args):
    cfg = load_scene(args.scene)
    t0 = time.perf_counter()
    cloud, kernels, ips = build_scene(cfg, args.seed)
    t_sample = time.perf_counter() - t0
    t0 = time.perf_counter()
    tensors = build_ip_tensors(cloud, kernels, ips, order=cfg.order,
                               k_covariance=cfg.k_covariance)
    t_pre = time.perf_counter() - t0
    sidecar_io.save_sidecar(args.out, cloud, kernels, ips, tensors, order=cfg.order)
    print(
        f"particles={len(cloud)} kernels={len(kernels)} ips={len(ips)} "
        f"sample_s={t_sample:.2f} precompute_s={t_pre:.2f} -> {args.out}"
    )
    return 0


def cmd_run(args):
    cfg = load_scene(args.scene)
    cloud, kernels, ips, tensors = _load_or_build(cfg, args.sidecar, args.seed)
    sim = make_simulation(cfg, cloud, kernels, ips, tensors)
    os.makedirs(args.out, exist_ok=True)

    def render_frame(index):
        t0 = time.perf_counter()
        warp = WarpData.from_simulation(sim)
        img = render_mod.render(
            cfg.camera, cfg.field, warp=warp, step=cfg.march_step,
            density_scale=cfg.density_scale,
        )
        render_mod.write_png(os.path.join(args.out, f"{index:06d}.png"), img)
        return (time.perf_counter() - t0) * 1e3

    render_frame(0)
    stats_path = os.path.join(args.out, "stats.csv")
    failures = 0
    with open(stats_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["step", "newton_iters", "energy", "kinetic", "volume_ratio",
             "assembly_ms", "solve_ms", "warp_render_ms"]
        )
        for i in range(1, args.frames + 1):
            try:
                st = sim.step()
            except Exception as exc:
                failures += 1
                print(f"warning: step {i} failed ({exc}); continuing", file=sys.stderr)
                continue
            warp_ms = render_frame(i)
            writer.writerow(
                [i, st.newton_iters, f"{st.energy:.9e}", f"{st.kinetic:.9e}",
                 f"{st.volume_ratio:.9f}", f"{st.assembly_ms:.3f}",
                 f"{st.solve_ms:.3f}", f"{warp_ms:.3f}"]
            )
    print(f"wrote {args.frames + 1} frames and {stats_path}"
          + (f" ({failures} failed steps)" if failures else ""))
    return 0


def cmd_serve(args):
    from .server import Session, serve

    cfg = load_scene(args.scene)
    cloud, kernels, ips, tensors = _load_or_build(cfg, args.sidecar, args.seed)
    session = Session(cfg, cloud, kernels, ips, tensors)
    print(f"session on ws://127.0.0.1:{args.port}/session")
    serve(session, args.port)
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "build":
            return cmd_build(args)
        if args.command == "run":
            return cmd_run(args)
        return cmd_serve(args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
