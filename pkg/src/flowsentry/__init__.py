"""Typical-region learning and anomaly flagging for link-level traffic data.

The pipeline: parse minute-resolution speed/flow series (``ingest``), fit a
bivariate kernel density estimate of the density-flow cloud (``kde``),
extract the level curve enclosing 1 - alpha probability mass (``levelset``),
stream new data against that region to raise severity-ranked deviation flags
(``detector``), and benchmark against robust-SND and McMaster-style
baselines (``baselines``, ``evaluation``). ``simgen`` generates labelled
synthetic links for desk-scale validation; ``cli`` wires everything.
"""

__version__ = "0.1.0"

from .detector import DetectorConfig, DftbFlag, ExcursionRecord, calibrate_normalizer, severity, track
from .ingest import EventLabel, LinkMeta, TrafficSample, nonrecurrent_filter, parse_events, parse_series
from .kde import BandwidthMatrix, DensityGrid, DensityModel, evaluate, evaluate_grid, fit, select_bandwidth
from .levelset import (
    RegionConfig,
    TypicalRegion,
    contains,
    distance_to_boundary,
    exit_side,
    find_level,
    fit_typical_region,
    mass_above,
)

__all__ = [
    "BandwidthMatrix",
    "DensityGrid",
    "DensityModel",
    "DetectorConfig",
    "DftbFlag",
    "EventLabel",
    "ExcursionRecord",
    "LinkMeta",
    "RegionConfig",
    "TrafficSample",
    "TypicalRegion",
    "calibrate_normalizer",
    "contains",
    "distance_to_boundary",
    "evaluate",
    "evaluate_grid",
    "exit_side",
    "find_level",
    "fit",
    "fit_typical_region",
    "mass_above",
    "nonrecurrent_filter",
    "parse_events",
    "parse_series",
    "select_bandwidth",
    "severity",
    "track",
]
