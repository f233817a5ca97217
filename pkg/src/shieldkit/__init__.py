"""Runtime shields for safety and fairness, and intention analysis on MDPs."""

from .errors import (InfeasibleState, InfeasibleSynthesis, InvalidConfig, InvalidInput,
                     InvalidPolicy, MissingData, ShieldkitError, UndefinedQuotient)
from .rdm_core import (InterferenceRecord, ObsActTrace, PostShield, PreShield, ShieldDecision,
                       decisions_equal, detect_interference, induced_shields, table_pre_shield,
                       transparent_shield)
from .safety_game import (FitnessDeterminization, FitnessTable, GameGraph, MaxPermStrategy,
                          controllability_values, delayed_layers, determinize_max_fitness,
                          expected_fitness, extract_shields, forward_multiset, read_game,
                          read_strategy_csv, robustness_values, solve_delayed,
                          solve_perfect_info, winning_region, write_game, write_strategy_csv)
from .mdp_engine import (FittedCarDynamics, Mdp, Policy, ProbShieldTable, ReachQuery,
                         avoid_prob, fit_transitions, markov_chain, pedestrian_chain, product,
                         reach_prob, reach_prob_after_action, read_mdp, read_policy_csv,
                         read_prob_shield_csv, resolve_states, round_half_up, state_mask,
                         synth_prob_shield, write_mdp, write_policy_csv, write_prob_shield_csv)
from .fairness_shield import (FairnessProperty, FairnessShieldTable, InputDistribution,
                              PeriodicRun, apply_shield, balance_probability, balanced_trace_exists, balance_threshold,
                              dynamic_assumption_holds, eval_property, expected_cost,
                              export_table_csv, keep_above_sequence, load_table,
                              read_distribution_csv, replay_stream, run_periodic, save_table,
                              synth_dynamic, synth_finhzn, synth_static_bw, synth_static_fair,
                              trace_cost, update_counters, write_distribution_csv,
                              zero_counters)
from .intention import (EvidenceThresholds, FactoredScenario, IntentionReport, LabeledMdp,
                        PeripheralVar, ReachProfile, ScenarioInstance, agency, aggregate,
                        aggregate_values, avoidance_duals, commitment_check,
                        commitment_from_profile, counterfactual_batch, eval_formula,
                        intention_quotient, reach_profile, read_scenario, retrospective_analysis,
                        single_trace_report, trace_is_valid, verdict, write_scenario)

__version__ = "0.1.0"
