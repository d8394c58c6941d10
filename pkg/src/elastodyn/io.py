"""PIESAMP1 sidecar: the sampled proxy (particles, kernels, IPs with
cuboids) plus the precomputed per-IP shape tensors, so the build and run
phases can be separated. Same header style as the grid format: ASCII
header lines, then named little-endian raw arrays.
"""

from __future__ import annotations

import numpy as np

from .dynamics import IpTensors
from .sampling import IPSet, KernelSet, ParticleCloud

SIDECAR_MAGIC = "PIESAMP1"

_DTYPES = {"f8": "<f8", "i8": "<i8", "u1": "|u1"}


class SidecarFormatError(ValueError):
    """Malformed sidecar file."""


def _write_array(fh, name, arr):
    arr = np.asarray(arr)
    if arr.dtype == np.float64:
        tag = "f8"
    elif arr.dtype == np.int64:
        tag = "i8"
    elif arr.dtype == np.bool_ or arr.dtype == np.uint8:
        tag = "u1"
        arr = arr.astype(np.uint8)
    else:
        raise ValueError(f"unsupported array dtype {arr.dtype} for {name}")
    dims = " ".join(str(d) for d in arr.shape)
    fh.write(f"array {name} {tag} {arr.ndim} {dims}\n".encode("ascii"))
    fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())


def save_sidecar(path, cloud: ParticleCloud, kernels: KernelSet, ips: IPSet,
                 tensors: IpTensors, order="quadratic", quad_pts=3):
    arrays = {
        "particle_positions": cloud.positions,
        "particle_radii": cloud.radii,
        "particle_volumes": cloud.volumes,
        "particle_densities": cloud.densities,
        "kernel_centers": kernels.centers,
        "kernel_radii": kernels.radii,
        "ip_positions": ips.positions,
        "ip_axes": ips.axes,
        "ip_edges": ips.edges,
        "ip_volumes": ips.volumes,
        "ip_kernel_flag": ips.kernel_ip,
        "slot_idx": tensors.slot_idx,
        "valid": tensors.valid,
        "values": tensors.values,
        "grads": tensors.grads,
        "hess": tensors.hess,
        "quad_off": tensors.quad_off,
        "quad_wt": tensors.quad_wt,
        "quad_B": tensors.quad_B,
        "second_moment": tensors.second_moment,
        "local_n": tensors.local_n,
    }
    with open(path, "wb") as fh:
        fh.write(f"{SIDECAR_MAGIC}\n".encode("ascii"))
        fh.write(f"order {order}\n".encode("ascii"))
        fh.write(
            f"counts {len(cloud)} {len(kernels)} {len(ips)} {quad_pts}\n".encode("ascii")
        )
        fh.write(f"arrays {len(arrays)}\n".encode("ascii"))
        for name, arr in arrays.items():
            _write_array(fh, name, arr)


def _read_line(fh, what):
    raw = fh.readline()
    if not raw.endswith(b"\n"):
        raise SidecarFormatError(f"truncated header: missing {what}")
    return raw.decode("ascii", errors="replace").strip()


def load_sidecar(path):
    """Returns (cloud, kernels, ips-with-tensors, order, quad_pts)."""
    with open(path, "rb") as fh:
        magic = _read_line(fh, "magic")
        if magic != SIDECAR_MAGIC:
            raise SidecarFormatError(f"bad magic {magic!r}, expected {SIDECAR_MAGIC!r}")
        toks = _read_line(fh, "order").split()
        if len(toks) != 2 or toks[0] != "order" or toks[1] not in ("quadratic", "linear"):
            raise SidecarFormatError("malformed order line")
        order = toks[1]
        toks = _read_line(fh, "counts").split()
        if len(toks) != 5 or toks[0] != "counts":
            raise SidecarFormatError("malformed counts line")
        n_part, n_kern, n_ips, quad_pts = (int(t) for t in toks[1:])
        toks = _read_line(fh, "arrays").split()
        if len(toks) != 2 or toks[0] != "arrays":
            raise SidecarFormatError("malformed arrays line")
        n_arrays = int(toks[1])
        arrays = {}
        for _ in range(n_arrays):
            toks = _read_line(fh, "array header").split()
            if len(toks) < 4 or toks[0] != "array":
                raise SidecarFormatError("malformed array header")
            name, tag, ndim = toks[1], toks[2], int(toks[3])
            if tag not in _DTYPES:
                raise SidecarFormatError(f"unknown dtype tag {tag!r}")
            shape = tuple(int(t) for t in toks[4 : 4 + ndim])
            count = int(np.prod(shape)) if shape else 1
            itemsize = np.dtype(_DTYPES[tag]).itemsize
            payload = fh.read(count * itemsize)
            if len(payload) < count * itemsize:
                raise SidecarFormatError(f"truncated payload for array {name!r}")
            arrays[name] = np.frombuffer(payload, dtype=_DTYPES[tag]).reshape(shape).copy()

    missing = {
        "particle_positions", "kernel_centers", "ip_positions", "slot_idx",
    } - set(arrays)
    if missing:
        raise SidecarFormatError(f"missing arrays: {sorted(missing)}")

    cloud = ParticleCloud(
        positions=arrays["particle_positions"],
        radii=arrays["particle_radii"],
        volumes=arrays["particle_volumes"],
        densities=arrays["particle_densities"],
    )
    kernels = KernelSet(centers=arrays["kernel_centers"], radii=arrays["kernel_radii"])
    ips = IPSet(
        positions=arrays["ip_positions"],
        axes=arrays["ip_axes"],
        edges=arrays["ip_edges"],
        volumes=arrays["ip_volumes"],
        kernel_ip=arrays["ip_kernel_flag"].astype(bool),
    )
    tensors = IpTensors(
        slot_idx=arrays["slot_idx"],
        valid=arrays["valid"].astype(bool),
        values=arrays["values"],
        grads=arrays["grads"],
        hess=arrays["hess"],
        quad_off=arrays["quad_off"],
        quad_wt=arrays["quad_wt"],
        quad_B=arrays["quad_B"],
        second_moment=arrays["second_moment"],
        rows=[],
        local_n=arrays["local_n"],
    ).rebuild_rows()
    ips.tensors = tensors
    if len(cloud) != n_part or len(kernels) != n_kern or len(ips) != n_ips:
        raise SidecarFormatError("counts line disagrees with array shapes")
    return cloud, kernels, ips, order, quad_pts
