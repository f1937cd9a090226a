"""Safety-aware fine-tuning of a token-sequence detector against a driving rulebook."""

from .controller import ControlCommand, closed_loop_check, ctrl
from .domain import EgoState, Kind, Realization, SceneObject, VehicleParams, WorldState
from .perception import PolicyParams, Vocabulary
from .rulebook import score_realization, score_state
from .simulator import NoiseModel, ScenarioConfig, run_episode, spawn

__version__ = "0.1.0"
