"""Safe control of unknown control-affine systems.

A Gaussian-process model of the dynamics feeds a robust barrier-function
filter (a small second-order cone program). When the filter has no strictly
feasible input, the controller collects data with the input that maximizes the
upper confidence bound of a barrier's derivative, then tries again.
"""
from .config import SimConfig, load_config
from .controller import ControllerConfig, ControllerState, step_controller
from .gp import CompositeKernel, Dataset, DynamicsModel, GpPosterior, Measurement, SEKernel
from .plants import CruiseParams, QuadrotorParams, make_cruise, make_linear, make_quadrotor
from .sim import build_scenario, run_failure_sweep, run_simulation

__version__ = "0.1.0"
