"""Survival dose-response estimation with generalized propensity score
adjustment, and continuous dose recommendation."""
from ._accel import BACKEND
from .dgp import DgpConfig, PatientPanel, TruthOracle, simulate_panel, true_cadr
from .gps import BasisSpec, GpsEnsemble, estimate_gps, fit_gps
from .harness import ExperimentConfig, run_scenario
from .nn import NetConfig, Network
from .recommend import ActionGrid, QTable, Recommendation
from .survival import CadrEstimate, OutcomeEnsemble, estimate_cadr, fit_outcome

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "DgpConfig", "PatientPanel", "TruthOracle", "simulate_panel", "true_cadr",
    "BasisSpec", "GpsEnsemble", "estimate_gps", "fit_gps", "ExperimentConfig", "run_scenario",
    "NetConfig", "Network", "ActionGrid", "QTable", "Recommendation", "CadrEstimate",
    "OutcomeEnsemble", "estimate_cadr", "fit_outcome",
]
