"""Pathwise stochastic integration, prediction sets and robust superhedging on trees."""

from .path_core import DiscretePath, LiftedPath, TimeGrid
from .pathwise_calculus import QvConfig, SimpleStrategy, pathwise_qv
from .scenario_trees import ScenarioTree, TreeMeasure, build_trinomial

__all__ = [
    "DiscretePath",
    "LiftedPath",
    "TimeGrid",
    "QvConfig",
    "SimpleStrategy",
    "pathwise_qv",
    "ScenarioTree",
    "TreeMeasure",
    "build_trinomial",
]
