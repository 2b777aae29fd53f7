"""Gradient-based co-design of 2D truss-lattice walking robots.

Topology, material layout, and a neural control policy are optimized
jointly: a relaxed per-edge material representation and an MLP
controller are evaluated by a differentiable mass-spring simulator, and
updated under volume and binarization constraints by MMA, an augmented
Lagrangian, and Adam.
"""

from .controller import (
    ControllerParams,
    CPGConfig,
    assemble_input,
    controller_dims,
    cpg_signals,
    forward,
    target_strains,
    xavier_init,
)
from .design import (
    ACTUATOR,
    SKELETON,
    VOID,
    MaterialLibrary,
    PerformanceProjection,
    ProjectionConfig,
    StabilityProjection,
    attraction_nudge,
    binarization_penalties,
    hard_snap,
    interpolate_properties,
    project_performance,
    project_stability,
    volume_fractions,
)
from .errors import CoDesignAborted, DegenerateGeometry, SimulationDiverged
from .lattice import LatticeSpec, MassParams, build_grid, node_masses
from .simulation import (
    GroundModel,
    RolloutRecord,
    SimConfig,
    SimState,
    edge_forces,
    integrate_step,
    loss_displacement,
    resolve_contact,
    rollout,
    rollout_grad,
    write_trajectory_csv,
)

__version__ = "0.1.0"
