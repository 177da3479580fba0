"""Tabular Q-learning navigation toward an RF source on indoor grids."""

from .gridworld import ACTIONS, Action, CellIndex, FloorPlan, load_floor_plan, parse_floor_plan
from .qlearn import QTable, StateRegistry
from .rssfield import PropagationParams, RssField, SourceSpec, fspl_rss, synthesize_field
from .trainer import Method, TrainConfig, aggregate_runs, train, train_runs

__version__ = "0.1.0"
