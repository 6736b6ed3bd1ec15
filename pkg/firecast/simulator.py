"""
Forest-fire agent-based model: seeding, heat transfer, ignition and ember decay.

Every tree accumulates heat from burning neighbors inside a Moore neighborhood
and ignites once its heat strictly exceeds the ignition threshold. A fire cell
turns into an ember on the next step, and embers lose a fixed amount of heat
per step until they burn out.
"""

import dataclasses
import enum
import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ConfigurationError, InitializationError
from .utils import derive_seed

logger = logging.getLogger(__name__)


class CellState(enum.IntEnum):
    """Per-agent discrete state; the integer value is the on-disk state code."""
    EMPTY = 0
    TREE = 1
    FIRE = 2
    EMBER = 3
    BURNED_OUT = 4


BURNING_STATES = (CellState.FIRE, CellState.EMBER)
BURNING_CODES = np.array([int(code) for code in BURNING_STATES], dtype=np.uint8)
IGNITED_CODES = np.array(
    [int(CellState.FIRE), int(CellState.EMBER), int(CellState.BURNED_OUT)], dtype=np.uint8
)


@dataclass
class SimParams:
    """
    Parameters of one forest-fire simulation.

    Attributes:
        density: Percent of cells occupied by trees, in [0, 100]
        i_seed: Seed intensity multiplier; seeds start with heat i_seed * q_th
        q_th: Ignition threshold (heat units)
        lam: Heat-transfer efficiency
        q_die: Heat an ember loses per step
        radius_r: Chebyshev neighborhood radius
        n_seeds: Number of initial fire seeds
        max_steps: Recording horizon
        rng_seed: Seed of the simulation's random generator
        width: Grid width in cells
        height: Grid height in cells
    """
    density: float = 76.0
    i_seed: float = 2.0
    q_th: float = 100.0
    lam: float = 0.3
    q_die: float = 40.0
    radius_r: int = 1
    n_seeds: int = 1
    max_steps: int = 200
    rng_seed: int = 0
    width: int = 251
    height: int = 251

    def __post_init__(self):
        self.validate()

    def validate(self):
        """Raise ConfigurationError naming the first invalid field."""
        if not 0 <= self.density <= 100:
            raise ConfigurationError(f"density must be in [0, 100], got {self.density}")
        if self.q_th <= 0:
            raise ConfigurationError(f"q_th must be > 0, got {self.q_th}")
        if self.q_die <= 0:
            raise ConfigurationError(f"q_die must be > 0, got {self.q_die}")
        if not 0 < self.lam <= 1:
            raise ConfigurationError(f"lam must be in (0, 1], got {self.lam}")
        if self.i_seed <= 0:
            raise ConfigurationError(f"i_seed must be > 0, got {self.i_seed}")
        if self.radius_r < 1:
            raise ConfigurationError(f"radius_r must be >= 1, got {self.radius_r}")
        if self.n_seeds < 1:
            raise ConfigurationError(f"n_seeds must be >= 1, got {self.n_seeds}")
        if self.max_steps < 0:
            raise ConfigurationError(f"max_steps must be >= 0, got {self.max_steps}")
        if self.width < 1 or self.height < 1:
            raise ConfigurationError(
                f"width and height must be >= 1, got {self.width}x{self.height}"
            )

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SimParams":
        known = {field.name for field in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"Unknown simulation parameter(s): {', '.join(unknown)}")
        return cls(**data)


@dataclass
class SimState:
    """
    One recorded state of the forest.

    ``states`` and ``heat`` are indexed ``[y, x]``; (0, 0) is the top-left corner.
    """
    states: np.ndarray
    heat: np.ndarray
    step_index: int = 0

    @property
    def height(self) -> int:
        return int(self.states.shape[0])

    @property
    def width(self) -> int:
        return int(self.states.shape[1])

    def copy(self) -> "SimState":
        return SimState(self.states.copy(), self.heat.copy(), self.step_index)


@dataclass
class SimulationSummary:
    """Aggregate statistics of a finished trajectory."""
    steps: int
    extinction_step: Optional[int]
    burned_fraction: float
    peak_burning: int
    initial_trees: int

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


def init_forest(params: SimParams, rng: Optional[np.random.Generator] = None) -> SimState:
    """
    Create the initial forest and place the fire seeds.

    Each cell is independently a tree with probability density / 100. Seeds are
    distinct trees drawn uniformly and start with heat i_seed * q_th.

    Args:
        params: Simulation parameters
        rng: Seeded generator; defaults to one built from params.rng_seed

    Returns:
        State at step 0

    Raises:
        InitializationError: If there are fewer trees than seeds
    """
    if rng is None:
        rng = np.random.default_rng(params.rng_seed)

    shape = (params.height, params.width)
    trees = rng.random(shape) < params.density / 100.0
    states = np.where(trees, CellState.TREE, CellState.EMPTY).astype(np.uint8)
    heat = np.zeros(shape, dtype=np.float64)

    tree_cells = np.flatnonzero(trees)
    if tree_cells.size < params.n_seeds:
        raise InitializationError(
            f"Cannot place {params.n_seeds} fire seed(s): forest has {tree_cells.size} tree(s)"
        )

    seeds = rng.choice(tree_cells, size=params.n_seeds, replace=False)
    states.flat[seeds] = CellState.FIRE
    heat.flat[seeds] = params.i_seed * params.q_th
    return SimState(states=states, heat=heat, step_index=0)


def burning_mask(state: SimState) -> np.ndarray:
    """Return a uint8 grid that is 1 exactly where the cell is Fire or Ember."""
    return np.isin(state.states, BURNING_CODES).astype(np.uint8)


def neighbor_heat(heat: np.ndarray, burning: np.ndarray, radius: int) -> np.ndarray:
    """
    Sum the heat of burning cells over each cell's Chebyshev neighborhood.

    Args:
        heat: Heat field
        burning: Boolean burning mask
        radius: Neighborhood radius

    Returns:
        Grid of neighborhood sums (the center cell included)
    """
    source = np.where(burning, heat, 0.0)
    padded = np.pad(source, radius, mode="constant")
    window = 2 * radius + 1
    return sliding_window_view(padded, (window, window)).sum(axis=(-2, -1))


def step(state: SimState, params: SimParams) -> SimState:
    """
    Advance the forest by one synchronous step.

    All heat is read from the pre-step state. Trees absorb lam times the heat of
    burning neighbors and ignite when their heat exceeds q_th. Cells that were
    Fire become Ember without decaying; cells that were already Ember lose q_die
    and burn out (heat clamped to 0) once their heat reaches 0.

    Args:
        state: Current state (left unmodified)
        params: Simulation parameters

    Returns:
        The next state
    """
    states = state.states
    heat = state.heat
    burning = np.isin(states, BURNING_CODES)

    new_states = states.copy()
    new_heat = heat.copy()

    trees = states == CellState.TREE
    if burning.any():
        gained = neighbor_heat(heat, burning, params.radius_r)
        new_heat[trees] += params.lam * gained[trees]
        new_states[trees & (new_heat > params.q_th)] = CellState.FIRE

    new_states[states == CellState.FIRE] = CellState.EMBER

    embers = states == CellState.EMBER
    new_heat[embers] -= params.q_die
    burned_out = embers & (new_heat <= 0)
    new_states[burned_out] = CellState.BURNED_OUT
    new_heat[burned_out] = 0.0

    return SimState(states=new_states, heat=new_heat, step_index=state.step_index + 1)


def run(params: SimParams) -> List[SimState]:
    """
    Simulate from a fresh forest until extinction or max_steps.

    Args:
        params: Simulation parameters

    Returns:
        Every recorded state including the initial one (at most max_steps + 1)

    Raises:
        InitializationError: Propagated from init_forest
    """
    state = init_forest(params)
    trajectory = [state]
    while state.step_index < params.max_steps and burning_mask(state).any():
        state = step(state, params)
        trajectory.append(state)

    logger.debug(
        f"Simulation rng_seed={params.rng_seed} recorded {len(trajectory)} states "
        f"(extinct={not burning_mask(state).any()})"
    )
    return trajectory


def derive_sim_params(base: SimParams, sim_id: int) -> SimParams:
    """Return a copy of base whose rng_seed is derived from its seed and sim_id."""
    return dataclasses.replace(base, rng_seed=derive_seed(base.rng_seed, sim_id))


def run_batch(params_list: Sequence[SimParams], max_workers: int = 4) -> List[List[SimState]]:
    """
    Run independent simulations concurrently with controlled parallelism.

    Each simulation owns its generator, so results do not depend on max_workers.

    Args:
        params_list: Parameters of each simulation
        max_workers: Maximum number of concurrent simulations

    Returns:
        Trajectories in the same order as params_list
    """
    if not params_list:
        return []

    results: List[Optional[List[SimState]]] = [None] * len(params_list)
    if max_workers <= 1:
        for index, params in enumerate(params_list):
            results[index] = run(params)
    else:
        with ThreadPoolExecutor(max_workers=max_workers) as executor:
            future_to_index = {
                executor.submit(run, params): index
                for index, params in enumerate(params_list)
            }
            for future in as_completed(future_to_index):
                results[future_to_index[future]] = future.result()

    logger.info(f"Completed {len(params_list)} simulation(s) using {max_workers} worker(s)")
    return [trajectory for trajectory in results if trajectory is not None]


def ignition_times(trajectory: Sequence[SimState]) -> np.ndarray:
    """
    Return, per cell, the first recorded step at which it was burning (-1 if never).
    """
    first = np.full(trajectory[0].states.shape, -1, dtype=np.int64)
    for state in trajectory:
        newly = (first < 0) & (burning_mask(state) == 1)
        first[newly] = state.step_index
    return first


def summarize(trajectory: Sequence[SimState]) -> SimulationSummary:
    """
    Summarize a trajectory: extinction step, burned fraction, peak burning count.

    Burned fraction is the share of initial trees that ever ignited.
    """
    initial = trajectory[0].states
    final = trajectory[-1]
    initial_trees = int(np.count_nonzero(initial != CellState.EMPTY))
    ever_burned = int(np.count_nonzero(np.isin(final.states, IGNITED_CODES)))
    extinct = not burning_mask(final).any()
    return SimulationSummary(
        steps=len(trajectory),
        extinction_step=final.step_index if extinct else None,
        burned_fraction=ever_burned / initial_trees if initial_trees else 0.0,
        peak_burning=max(int(burning_mask(state).sum()) for state in trajectory),
        initial_trees=initial_trees,
    )
