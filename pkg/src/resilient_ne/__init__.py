"""Attack-resilient distributed Nash equilibrium seeking over directed networks."""
from .analysis import AnalysisConfig, RateReport, certify, fit_rate, kappa_bound, rate_constants
from .attack import AttackBudget, AttackSchedule, generate_schedule, verify_budget
from .dynamics import ScenarioConfig, SimulationTrace, StackedEstimate, initial_estimate, integrate
from .games import GameDefinition, builtin_game, cournot_game, hvac_game, nonquadratic_game, solve_ne
from .graph import Digraph, build_digraph, laplacian_bundle
from .scenario import load_scenario

__version__ = "0.1.0"
