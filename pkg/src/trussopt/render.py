"""SVG frame rendering of rollouts.

Each frame draws the skeleton edges in grey, actuator edges colored by
the sign of their instantaneous strain (red extension, blue
contraction), omits void edges, overlays the head-node trajectory, and
draws the ground line.
"""

from __future__ import annotations

import os

import numpy as np

from .design import ACTUATOR, SKELETON, VOID
from .lattice import LatticeSpec

EXTENSION_COLOR = "#d62728"
CONTRACTION_COLOR = "#1f77b4"
SKELETON_COLOR = "#888888"
TRAJECTORY_COLOR = "#2ca02c"
GROUND_COLOR = "#333333"


def strain_color(strain: float) -> str:
    """Red for positive (extension), blue otherwise; threshold at zero."""
    return EXTENSION_COLOR if strain > 0.0 else CONTRACTION_COLOR


def frame_steps(n_steps: int, stride: int) -> list[int]:
    """Sampled step indices: every stride-th step plus the final one."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    steps = sorted(set(range(0, n_steps + 1, stride)) | {n_steps})
    return steps


def _world_to_svg(bbox, width=800):
    x_lo, y_lo, x_hi, y_hi = bbox
    scale = width / max(x_hi - x_lo, 1e-9)
    height = max((y_hi - y_lo) * scale, 1.0)

    def tx(p):
        return (p[0] - x_lo) * scale, height - (p[1] - y_lo) * scale

    return tx, width, height


def _ground_polyline(ground, x_lo, x_hi):
    if ground is None:
        return []
    if ground.kind == "flat":
        return [(x_lo, ground.height), (x_hi, ground.height)]
    px, py = ground.pivot
    a = np.deg2rad(ground.angle_deg)
    pts = [(x_lo, py), (px, py)]
    if x_hi > px:
        pts.append((x_hi, py + np.tan(a) * (x_hi - px)))
    return pts


def render_frame(
    positions: np.ndarray,
    design: np.ndarray,
    lattice: LatticeSpec,
    path,
    *,
    head_track: np.ndarray | None = None,
    ground=None,
    bbox=None,
) -> None:
    """Write one SVG frame of the robot at the given node positions."""
    states = np.asarray(design).argmax(axis=1)
    if bbox is None:
        margin = 2.0 * lattice.spacing
        bbox = (
            positions[:, 0].min() - margin,
            positions[:, 1].min() - margin,
            positions[:, 0].max() + margin,
            positions[:, 1].max() + margin,
        )
    tx, width, height = _world_to_svg(bbox)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" '
        f'height="{height:.0f}" viewBox="0 0 {width:.0f} {height:.0f}">',
        f'<rect width="100%" height="100%" fill="white"/>',
    ]
    gpts = _ground_polyline(ground, bbox[0], bbox[2])
    if gpts:
        pts = " ".join(f"{tx(p)[0]:.2f},{tx(p)[1]:.2f}" for p in gpts)
        parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{GROUND_COLOR}" stroke-width="2"/>'
        )
    for e in range(lattice.n_edges):
        state = states[e]
        if state == VOID:
            continue
        i, j = lattice.edges[e]
        x1, y1 = tx(positions[i])
        x2, y2 = tx(positions[j])
        if state == SKELETON:
            color, swidth = SKELETON_COLOR, 2.0
        else:
            l_now = float(np.linalg.norm(positions[j] - positions[i]))
            strain = (l_now - lattice.rest_lengths[e]) / lattice.rest_lengths[e]
            color, swidth = strain_color(strain), 3.0
        parts.append(
            f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" '
            f'stroke="{color}" stroke-width="{swidth}"/>'
        )
    if head_track is not None and len(head_track) > 1:
        pts = " ".join(f"{tx(p)[0]:.2f},{tx(p)[1]:.2f}" for p in head_track)
        parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{TRAJECTORY_COLOR}" '
            'stroke-width="1.5" stroke-dasharray="4 3"/>'
        )
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))


def render_frames(
    xs: np.ndarray,
    design: np.ndarray,
    lattice: LatticeSpec,
    out_dir,
    stride: int,
    *,
    ground=None,
) -> list[str]:
    """Render sampled steps of a trajectory; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    n_steps = xs.shape[0] - 1
    margin = 2.0 * lattice.spacing
    bbox = (
        xs[..., 0].min() - margin,
        xs[..., 1].min() - margin,
        xs[..., 0].max() + margin,
        xs[..., 1].max() + margin,
    )
    head_track = xs[:, lattice.head_index, :]
    paths = []
    for step in frame_steps(n_steps, stride):
        path = os.path.join(out_dir, f"frame_{step:06d}.svg")
        render_frame(
            xs[step],
            design,
            lattice,
            path,
            head_track=head_track[: step + 1],
            ground=ground,
            bbox=bbox,
        )
        paths.append(path)
    return paths
