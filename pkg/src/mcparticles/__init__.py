"""Learned particle dynamics with momentum-conserving continuous convolutions."""
from .data import Scene, TrajectoryDataset
from .network import ArchitectureConfig, init_params, network_backward, network_forward
from .simulator import SimulationConfig, SimulationDiverged, rollout, step, step_backward
from .state import BOUNDARY, FLUID, ParticleState
from .training import TrainConfig, train

__version__ = "0.1.0"
