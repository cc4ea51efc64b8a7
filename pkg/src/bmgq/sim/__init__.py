from .demand import CSV_HEADER, TripFileError, demand_rates, load_trips, synth_demand, write_trips
from .engine import (EpisodeMetrics, EpisodeTrace, Experience, FeatureSpec, Observation, SimConfig, Simulator,
                     StepResult, build_orders, derive_seed, discounted_returns, measure_overestimation, run_episode)
