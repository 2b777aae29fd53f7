"""Exception types shared across the simulator and optimizer."""


class SimulationError(RuntimeError):
    """Base class for runtime failures inside a rollout."""


class SimulationDiverged(SimulationError):
    """State became non-finite during integration."""

    def __init__(self, step: int, max_speed: float):
        self.step = step
        self.max_speed = max_speed
        super().__init__(
            f"simulation diverged at step {step} (max |v| = {max_speed:.3e})"
        )


class DegenerateGeometry(SimulationError):
    """Two connected nodes came closer than the minimum edge length."""

    def __init__(self, step: int, edge: int, length: float):
        self.step = step
        self.edge = edge
        self.length = length
        super().__init__(
            f"edge {edge} collapsed to length {length:.3e} m at step {step}"
        )


class CoDesignAborted(RuntimeError):
    """Optimization stopped after repeated simulation divergences."""

    def __init__(self, iteration: int, history):
        self.iteration = iteration
        self.history = history
        super().__init__(
            f"co-design aborted at iteration {iteration} after three "
            "consecutive simulation divergences"
        )
