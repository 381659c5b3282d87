"""Barrier-certificate switching conditions and Simplex runtime assurance.

The package derives provably-sound controller-switching conditions from a
polynomial barrier certificate and runs the Simplex loop (untrusted advanced
controller, verified baseline controller, decision module) around polynomial
ODE plants in simulation.
"""

from .poly import IntervalBox, Polynomial, box_bound, lie_derivative
from .expr import parse_system, recast
from .model import DynSystem, builtin, load
from .certify import BarrierCertificate, CertReport, check_bac, lyap_sublevel_bac
from .switchgen import SwitchingArtifact, derive_artifact, load_artifact, save_artifact
from .runtime import ControllerRef, RunRecord, dm_step, fsc_eval, integrate_period, rsc_eval, simulate_run
from .harness import ExperimentSpec, MetricsSummary, falsify_controller, reward_eval, run_experiment

__all__ = [
    "IntervalBox",
    "Polynomial",
    "box_bound",
    "lie_derivative",
    "parse_system",
    "recast",
    "DynSystem",
    "builtin",
    "load",
    "BarrierCertificate",
    "CertReport",
    "check_bac",
    "lyap_sublevel_bac",
    "SwitchingArtifact",
    "derive_artifact",
    "load_artifact",
    "save_artifact",
    "ControllerRef",
    "RunRecord",
    "dm_step",
    "fsc_eval",
    "integrate_period",
    "rsc_eval",
    "simulate_run",
    "ExperimentSpec",
    "MetricsSummary",
    "falsify_controller",
    "reward_eval",
    "run_experiment",
]

__version__ = "0.1.0"
