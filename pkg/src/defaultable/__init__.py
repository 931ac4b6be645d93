"""Portfolio choice in a defaultable-asset market: simulation of the joint
Wiener / marked-Poisson / default noises, forward (anticipating) integration,
locally optimal log-utility portfolios under several information flows, and
statistical audits of the martingale-type optimality criterion."""

__version__ = "0.1.0"

from ._kernels import backend as kernel_backend
from .audit import (ConditionalFit, CriterionProcess, MartingaleAccumulator,
                    MartingaleAudit, WindowHazardReport, build_criterion,
                    compensator_estimate, concavity_audit, derivative_consistency,
                    estimate_conditional, martingale_test, perturbation_delta,
                    perturbation_values, semimartingale_drift, uniqueness_probe)
from .config import (ExperimentConfig, list_presets, load_config, preset_config,
                     validate_config)
from .control import (FirstOrderCondition, OptimalPolicy, RootResult, SweepPoint,
                      admissible_interval, intensity_sweep, make_foc, merton_ratio,
                      policy_full_info, solve_after_default, solve_full_info,
                      solve_general, solve_partial_info)
from .errors import (AdmissibilityError, ConfigError, ContractViolation, InfeasibleError,
                     NumericOverflowError)
from .flows import (InformationFlow, anticipating_information, full_information,
                    partial_information)
from .forward import (DivergenceRow, ForwardIntegralResult, Integrand, ItoCheckReport,
                      XDynamics, divergence_pathology, forward_integral_poisson,
                      forward_integral_w, integral_h, ito_formula_check,
                      ito_refinement_study)
from .grids import TimeGrid, child_rng
from .levy import AtomMeasure, DensityMeasure, LevyMeasure, power_law_measure
from .market import (AdmissibilityCertificate, AssetPaths, ModelCoefficients,
                     PortfolioProcess, RegimeSwitch, StoppingRule, ThetaField, WealthPath,
                     apply_stopping, check_admissibility, euler_asset, euler_wealth,
                     evaluate_asset, evaluate_wealth, log_wealth_given_tau, make_portfolio)
from .paths import (DefaultMechanism, ScenarioEnsemble, ScenarioPath, after_default_regime,
                    coarsen_ensemble, ensemble_batches, independent_intensity,
                    load_path_bundle, n_window_trigger, save_path_bundle, simulate_default,
                    simulate_ensemble, simulate_path, simulate_poisson_measure,
                    simulate_wiener)
from .runner import RunManifest, run_experiment
from .utility import (ExponentialUtility, LogUtility, PowerUtility, make_utility,
                      risk_aversion_margin, satisfies_risk_aversion_bound)
