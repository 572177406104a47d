"""Structured hex8 meshes for the strip and cruciform specimens, plus fiber seeding."""

from __future__ import annotations

import numpy as np

from .fem_solver import N_QP, Mesh, MeshError, reference_geometry


class ConfigError(ValueError):
    """Invalid scenario description; ``line``/``col`` locate it when known."""

    def __init__(self, msg, line=None, col=None):
        loc = f" (line {line}, column {col})" if line is not None else ""
        super().__init__(msg + loc)
        self.line = line
        self.col = col


def _grid(xs, ys, zs):
    """Nodes and hex8 connectivity of a tensor-product grid (x fastest)."""
    nx, ny, nz = len(xs) - 1, len(ys) - 1, len(zs) - 1
    Z, Y, X = np.meshgrid(zs, ys, xs, indexing="ij")
    nodes = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])

    def nid(i, j, k):
        return (k * (ny + 1) + j) * (nx + 1) + i

    k, j, i = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    i, j, k = i.ravel(), j.ravel(), k.ravel()
    elems = np.column_stack([
        nid(i, j, k), nid(i + 1, j, k), nid(i + 1, j + 1, k), nid(i, j + 1, k),
        nid(i, j, k + 1), nid(i + 1, j, k + 1), nid(i + 1, j + 1, k + 1), nid(i, j + 1, k + 1),
    ])
    return nodes, elems


def build_strip_mesh(length=16.0, width=2.0, thickness=0.5, nx=64, ny=8, nz=2) -> Mesh:
    """Box ``[0, L] x [0, w] x [0, t]`` clamped at both x faces.

    Element sets: ``middle_region`` holds elements whose centroid lies in the
    central 20 % of the length, ``leg_region`` those in the outer 10 % at each
    end.
    """
    for name, n in (("nx", nx), ("ny", ny), ("nz", nz)):
        if int(n) != n or n < 1:
            raise ConfigError(f"{name} must be a positive integer, got {n}")
    for name, v in (("length", length), ("width", width), ("thickness", thickness)):
        if not v > 0:
            raise ConfigError(f"{name} must be positive, got {v}")
    nodes, elems = _grid(np.linspace(0, length, nx + 1), np.linspace(0, width, ny + 1),
                         np.linspace(0, thickness, nz + 1))
    tol = 1e-9 * length
    cx = nodes[elems, 0].mean(axis=1) / length
    mesh = Mesh(
        nodes=nodes, elements=elems,
        node_sets={
            "x_min_face": np.flatnonzero(nodes[:, 0] < tol),
            "x_max_face": np.flatnonzero(nodes[:, 0] > length - tol),
        },
        element_sets={
            "middle_region": np.flatnonzero(np.abs(cx - 0.5) <= 0.1 + 1e-12),
            "leg_region": np.flatnonzero((cx <= 0.1 + 1e-12) | (cx >= 0.9 - 1e-12)),
        },
    )
    mesh.validate()
    return mesh


def cruciform_element_count(center_div, arm_width_div, arm_div, thickness_div):
    return (center_div**2 + 4 * arm_width_div * arm_div) * thickness_div


def build_cruciform_mesh(arm_length=10.5, arm_width=9.0, thickness=1.0, center_width=13.0,
                         center_div=13, arm_width_div=9, arm_div=4, thickness_div=2) -> Mesh:
    """Plus-shaped plate in the x-z plane, ``thickness_div`` elements through y.

    ``arm_length`` is measured from the specimen center to an arm's end face.
    The square center ``center_width`` wide carries ``center_div`` elements per
    side; each arm is ``arm_width`` wide with ``arm_width_div`` elements across
    and ``arm_div`` along it. Element sizes across the center and the arms must
    match so the grid is conforming. Node sets ``x_min_face``, ``x_max_face``,
    ``z_min_face``, ``z_max_face`` are the arm end faces; element sets are
    ``center_region`` and ``arm_region``.
    """
    half = 0.5 * center_width
    if not (arm_length > half):
        raise ConfigError(
            f"arm_length ({arm_length}) must exceed the center half-width ({half})")
    if not (0 < arm_width < center_width) or thickness <= 0:
        raise ConfigError("need 0 < arm_width < center_width and thickness > 0")
    for name, n in (("center_div", center_div), ("arm_width_div", arm_width_div),
                    ("arm_div", arm_div), ("thickness_div", thickness_div)):
        if int(n) != n or n < 1:
            raise ConfigError(f"{name} must be a positive integer, got {n}")
    side = center_div - arm_width_div
    h_c = center_width / center_div
    if side <= 0 or side % 2 or abs(arm_width / arm_width_div - h_c) > 1e-9 * h_c:
        achievable = sorted({
            cruciform_element_count(c, a, arm_div, thickness_div)
            for c in range(2, 2 * center_div + 1) for a in range(1, c) if (c - a) % 2 == 0
            and abs(arm_width / a - center_width / c) <= 1e-9 * center_width
        })
        raise ConfigError(
            "infeasible cruciform layout: arm and center element sizes must match and "
            f"center_div - arm_width_div must be even and positive; achievable element "
            f"counts for these widths: {achievable[:12]}")
    # in-plane grid (x, z) covering the bounding square, then keep the plus shape
    lines = np.concatenate([
        np.linspace(-arm_length, -half, arm_div + 1)[:-1],
        np.linspace(-half, half, center_div + 1),
        np.linspace(half, arm_length, arm_div + 1)[1:],
    ])
    nodes, elems = _grid(lines, np.linspace(0.0, thickness, thickness_div + 1), lines)
    cen = nodes[elems].mean(axis=1)
    hw = 0.5 * arm_width
    in_center = (np.abs(cen[:, 0]) < half) & (np.abs(cen[:, 2]) < half)
    in_xarm = (np.abs(cen[:, 2]) < hw)
    in_zarm = (np.abs(cen[:, 0]) < hw)
    keep = in_center | in_xarm | in_zarm
    elems = elems[keep]
    used = np.unique(elems)
    remap = -np.ones(nodes.shape[0], dtype=int)
    remap[used] = np.arange(used.size)
    nodes = nodes[used]
    elems = remap[elems]
    tol = 1e-9 * arm_length
    cen = nodes[elems].mean(axis=1)
    core = (np.abs(cen[:, 0]) < half) & (np.abs(cen[:, 2]) < half)
    mesh = Mesh(
        nodes=nodes, elements=elems,
        node_sets={
            "x_min_face": np.flatnonzero(nodes[:, 0] < -arm_length + tol),
            "x_max_face": np.flatnonzero(nodes[:, 0] > arm_length - tol),
            "z_min_face": np.flatnonzero(nodes[:, 2] < -arm_length + tol),
            "z_max_face": np.flatnonzero(nodes[:, 2] > arm_length - tol),
        },
        element_sets={
            "center_region": np.flatnonzero(core),
            "arm_region": np.flatnonzero(~core),
        },
    )
    mesh.validate()
    return mesh


# ---------------------------------------------------------------------------
# deterministic fiber seeding

_MASK64 = (1 << 64) - 1


class SplitMix64:
    """SplitMix64 generator (64-bit state, Steele/Lea/Flood constants).

    ``next_float`` maps the top 53 bits to ``[0, 1)``, so the stream is
    reproducible bit for bit in any language with 64-bit integers.
    """

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def next_float(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def floats(self, n: int) -> np.ndarray:
        return np.array([self.next_float() for _ in range(n)])


PLANES = {"xy": (0, 1), "xz": (0, 2), "yz": (1, 2), "zx": (2, 0), "yx": (1, 0), "zy": (2, 1)}


def plane_vectors(angles_deg, plane="xy"):
    """Unit vectors at ``angles_deg`` measured from the first axis of ``plane``."""
    if plane not in PLANES:
        raise ConfigError(f"unknown plane {plane!r}; expected one of {sorted(PLANES)}")
    i, j = PLANES[plane]
    th = np.deg2rad(np.asarray(angles_deg, dtype=float))
    v = np.zeros(th.shape + (3,))
    v[..., i] = np.cos(th)
    v[..., j] = np.sin(th)
    return v


def init_fiber_field(mesh: Mesh, mode="in_plane_uniform", seed=None, plane="xy", angle_deg=0.0):
    """One unit fiber vector per quadrature point (element-major order).

    ``in_plane_uniform`` draws the angle uniformly in ``[0, 180)`` degrees with
    :class:`SplitMix64`; ``fixed_angle`` uses ``angle_deg`` everywhere.
    """
    n = mesh.n_elements * N_QP
    if mode == "in_plane_uniform":
        if seed is None:
            raise ConfigError("fiber seed is mandatory for in_plane_uniform mode")
        angles = 180.0 * SplitMix64(seed).floats(n)
    elif mode == "fixed_angle":
        angles = np.full(n, float(angle_deg))
    else:
        raise ConfigError(f"unknown fiber mode {mode!r}")
    return plane_vectors(angles, plane)


def element_volumes(mesh: Mesh):
    _, _, w = reference_geometry(mesh)
    return w.sum(axis=1)
