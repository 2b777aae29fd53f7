"""Truss-lattice grid construction and lumped nodal masses.

The robot is a rows x cols grid of point masses connected by springs:
every unit cell carries its four axis-aligned edges (shared with
neighboring cells) plus both diagonals.  Node 0 (bottom-left) is the
payload head node that the locomotion objective tracks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class LatticeSpec:
    """Geometry of the truss grid.

    nodes:        (N_m, 2) rest positions in meters
    edges:        (N_e, 2) node index pairs with i < j
    rest_lengths: (N_e,) Euclidean edge lengths at rest
    head_index:   payload node (bottom-left corner for grids)
    """

    rows: int
    cols: int
    spacing: float
    origin: tuple[float, float]
    nodes: np.ndarray
    edges: np.ndarray
    rest_lengths: np.ndarray
    head_index: int = 0

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]


@dataclass(frozen=True)
class MassParams:
    """Baseline nodal mass and the extra payload carried by the head node.

    m_eps keeps fully voided nodes numerically alive; payload_mass makes
    the head node a meaningful load to transport.
    """

    m_eps: float = 1e-6
    payload_mass: float = 0.05

    def __post_init__(self):
        if self.m_eps <= 0.0:
            raise ValueError(f"m_eps must be > 0, got {self.m_eps}")
        if self.payload_mass < 0.0:
            raise ValueError(f"payload_mass must be >= 0, got {self.payload_mass}")


def grid_edge_count(rows: int, cols: int) -> int:
    """Closed-form edge count: horizontals + verticals + both diagonals."""
    return rows * (cols - 1) + (rows - 1) * cols + 2 * (rows - 1) * (cols - 1)


def build_grid(
    rows: int,
    cols: int,
    spacing: float = 0.1,
    origin: tuple[float, float] = (0.0, 0.0),
) -> LatticeSpec:
    """Build a rows x cols node grid with cross-braced unit cells.

    Node ordering is row-major from the origin (index r*cols + c at
    origin + (c*spacing, r*spacing)).  Edge ordering is deterministic:
    all horizontals, then all verticals, then both diagonals of each
    cell, each group in row-major cell order.
    """
    if rows < 2 or cols < 2:
        raise ValueError(f"grid must be at least 2x2, got {rows}x{cols}")
    if spacing <= 0.0:
        raise ValueError(f"spacing must be > 0, got {spacing}")

    ox, oy = float(origin[0]), float(origin[1])
    nodes = np.empty((rows * cols, 2), dtype=np.float64)
    for r in range(rows):
        for c in range(cols):
            nodes[r * cols + c] = (ox + c * spacing, oy + r * spacing)

    edges: list[tuple[int, int]] = []
    for r in range(rows):  # horizontals
        for c in range(cols - 1):
            n = r * cols + c
            edges.append((n, n + 1))
    for r in range(rows - 1):  # verticals
        for c in range(cols):
            n = r * cols + c
            edges.append((n, n + cols))
    for r in range(rows - 1):  # both diagonals per cell
        for c in range(cols - 1):
            n = r * cols + c
            edges.append((n, n + cols + 1))
            edges.append((n + 1, n + cols))

    edge_arr = np.asarray(edges, dtype=np.int64)
    assert edge_arr.shape[0] == grid_edge_count(rows, cols)
    rest = np.linalg.norm(nodes[edge_arr[:, 1]] - nodes[edge_arr[:, 0]], axis=1)

    lat = LatticeSpec(
        rows=rows,
        cols=cols,
        spacing=float(spacing),
        origin=(ox, oy),
        nodes=nodes,
        edges=edge_arr,
        rest_lengths=rest,
        head_index=0,
    )
    lat.nodes.setflags(write=False)
    lat.edges.setflags(write=False)
    lat.rest_lengths.setflags(write=False)
    return lat


def node_masses(lattice: LatticeSpec, ztilde: np.ndarray, lib, mp: MassParams) -> np.ndarray:
    """Lump truss mass onto the endpoint nodes.

    m_i = m_eps + 1/2 * sum over incident edges of l0 * (ztilde . rho),
    with the payload mass added to the head node.  ztilde rows must be
    normalized state ratios.
    """
    ztilde = np.asarray(ztilde, dtype=np.float64)
    if ztilde.shape != (lattice.n_edges, 3):
        raise ValueError(
            f"ztilde has shape {ztilde.shape}, expected ({lattice.n_edges}, 3)"
        )
    row_sums = ztilde.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-9):
        raise ValueError("ztilde rows must sum to 1 within 1e-9")

    rho_edge = ztilde @ lib.density  # kg/m per edge
    half_edge_mass = 0.5 * lattice.rest_lengths * rho_edge
    m = np.full(lattice.n_nodes, mp.m_eps, dtype=np.float64)
    np.add.at(m, lattice.edges[:, 0], half_edge_mass)
    np.add.at(m, lattice.edges[:, 1], half_edge_mass)
    m[lattice.head_index] += mp.payload_mass
    return m


def node_mass_vjp(lattice: LatticeSpec, lib, g_mass: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. nodal masses back to the state ratios.

    d m_i / d ztilde[e, k] = 1/2 * l0_e * rho_k for each endpoint i of e.
    """
    gm_edges = g_mass[lattice.edges[:, 0]] + g_mass[lattice.edges[:, 1]]
    return 0.5 * lattice.rest_lengths[:, None] * gm_edges[:, None] * lib.density[None, :]


def save_lattice(path, lattice: LatticeSpec) -> None:
    doc = {
        "rows": lattice.rows,
        "cols": lattice.cols,
        "spacing": lattice.spacing,
        "origin": list(lattice.origin),
        "head_index": lattice.head_index,
        "nodes": lattice.nodes.tolist(),
        "edges": lattice.edges.tolist(),
        "rest_lengths": lattice.rest_lengths.tolist(),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_lattice(path) -> LatticeSpec:
    with open(path) as fh:
        doc = json.load(fh)
    return LatticeSpec(
        rows=int(doc["rows"]),
        cols=int(doc["cols"]),
        spacing=float(doc["spacing"]),
        origin=tuple(doc["origin"]),
        nodes=np.asarray(doc["nodes"], dtype=np.float64),
        edges=np.asarray(doc["edges"], dtype=np.int64),
        rest_lengths=np.asarray(doc["rest_lengths"], dtype=np.float64),
        head_index=int(doc["head_index"]),
    )
