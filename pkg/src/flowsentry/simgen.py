"""Labelled synthetic link data for desk-scale validation.

Minute samples ride a triangular fundamental-diagram backbone driven by a
daily demand profile, with multiplicative lognormal noise. Injected
incidents cut capacity and let density build through a first-order queueing
relaxation; an optional periodic bottleneck forces a slow high-flow regime
(off the backbone) that recurs on different weekdays, reproducing the
two-regime speed bins that break univariate thresholds. Output is fully
deterministic for a fixed config.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone

import numpy as np

from .ingest import EventLabel, TrafficSample

SERIES_START = datetime(2017, 4, 3, tzinfo=timezone.utc)  # a Monday
FLOW_JITTER = 0.02
WEEKEND_DEMAND_FACTOR = 0.85
INCIDENT_ONSET_RAMP_MIN = 8  # capacity degrades over the first minutes of a scene


def default_demand_profile() -> tuple[float, ...]:
    """Double-peak weekday demand, slightly oversaturated at the peaks.

    The small overshoot past 1.0 queues a little recurrent congestion each
    peak, so even noise-free data spans both diagram branches (and keeps its
    covariance nonsingular) while staying shallow enough that incident
    queues remain clearly atypical.
    """
    minutes = np.arange(1440.0)
    shape = (
        0.12
        + 0.95 * np.exp(-0.5 * ((minutes - 8 * 60) / 80.0) ** 2)
        + 1.00 * np.exp(-0.5 * ((minutes - 17.5 * 60) / 95.0) ** 2)
        + 0.45 * np.exp(-0.5 * ((minutes - 12.5 * 60) / 240.0) ** 2)
    )
    profile = 1.015 * shape / shape.max()
    return tuple(float(v) for v in profile)


@dataclass(frozen=True)
class IncidentSpec:
    start_min: int  # offset from the series start
    duration_min: int
    capacity_drop: float

    def __post_init__(self):
        if not 0.0 < self.capacity_drop < 1.0:
            raise ValueError("capacity_drop must be in (0, 1)")
        if self.duration_min < 1 or self.start_min < 0:
            raise ValueError("incident start/duration out of range")

    @property
    def end_min(self) -> int:
        return self.start_min + self.duration_min


@dataclass(frozen=True)
class BottleneckSpec:
    period_days: int = 3
    speed_drop: float = 50.0
    start_minute_of_day: int = 16 * 60
    duration_min: int = 210
    first_day: int = 2

    def __post_init__(self):
        if self.period_days < 1:
            raise ValueError("period must be at least one day")
        if self.speed_drop <= 0:
            raise ValueError("speed drop must be positive")

    def active(self, minute: int) -> bool:
        day = minute // 1440
        if day < self.first_day or (day - self.first_day) % self.period_days != 0:
            return False
        tod = minute % 1440
        return self.start_minute_of_day <= tod < self.start_minute_of_day + self.duration_min


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 0
    weeks: int = 3
    link_id: str = "SIM1"
    link_length_m: float = 1200.0
    free_flow_speed: float = 110.0
    capacity_flow: float = 4500.0
    critical_density: float = 35.0
    jam_density: float = 180.0
    demand_profile: tuple[float, ...] = field(default_factory=default_demand_profile)
    noise_scale: float = 0.05
    incidents: tuple[IncidentSpec, ...] = ()
    bottleneck: BottleneckSpec | None = None

    def __post_init__(self):
        if self.weeks < 1:
            raise ValueError("need at least one week")
        if len(self.demand_profile) != 1440:
            raise ValueError("demand profile needs 1440 entries")
        if self.free_flow_speed <= 0 or self.capacity_flow <= 0 or self.critical_density <= 0:
            raise ValueError("rates must be positive")
        if self.jam_density <= self.critical_density:
            raise ValueError("jam density must exceed critical density")
        if self.noise_scale < 0:
            raise ValueError("noise scale must be nonnegative")
        apex = self.free_flow_speed * self.critical_density
        if apex > self.capacity_flow:
            raise ValueError(
                f"apex flow {apex:.0f} exceeds capacity_flow {self.capacity_flow:.0f}; "
                "lower free_flow_speed or critical_density"
            )
        ordered = sorted(self.incidents, key=lambda s: s.start_min)
        for prev, cur in zip(ordered, ordered[1:]):
            if cur.start_min < prev.end_min:
                raise ValueError(f"incidents overlap at minute {cur.start_min}")

    @property
    def apex_flow(self) -> float:
        """Peak flow of the triangular diagram (its apex, below capacity_flow)."""
        return self.free_flow_speed * self.critical_density

    @property
    def total_minutes(self) -> int:
        return self.weeks * 7 * 1440


def backbone_flow(config: ScenarioConfig, density: float) -> float:
    """Triangular fundamental diagram: flow as a function of density."""
    if density <= config.critical_density:
        return config.free_flow_speed * density
    if density >= config.jam_density:
        return 0.0
    span = config.jam_density - config.critical_density
    return config.apex_flow * (config.jam_density - density) / span


def congested_density_at(config: ScenarioConfig, flow: float) -> float:
    """Density on the congested branch carrying the given flow."""
    flow = min(max(flow, 0.0), config.apex_flow)
    span = config.jam_density - config.critical_density
    return config.jam_density - span * flow / config.apex_flow


def generate(config: ScenarioConfig) -> tuple[list[TrafficSample], list[EventLabel]]:
    """Simulate the scenario minute by minute; returns (samples, labels).

    Congestion is queue-driven: whenever demand exceeds the available
    capacity (cut by an incident, or the diagram apex during oversaturated
    peaks), the excess accumulates as extra density over the link and speed
    degrades gradually as flow-out over total density. Queues discharge at
    the apex rate once capacity returns.
    """
    rng = np.random.default_rng(config.seed)
    n = config.total_minutes
    apex = config.apex_flow
    v_f = config.free_flow_speed
    link_km = config.link_length_m / 1000.0

    incident_at = np.zeros(n)
    for spec in config.incidents:
        if spec.end_min > n:
            raise ValueError(f"incident at minute {spec.start_min} runs past the series end")
        ramp = np.minimum(np.arange(1, spec.duration_min + 1) / INCIDENT_ONSET_RAMP_MIN, 1.0)
        incident_at[spec.start_min : spec.end_min] = spec.capacity_drop * ramp

    speed_noise = rng.normal(0.0, 1.0, size=n)
    flow_noise = rng.normal(0.0, 1.0, size=n)
    bn_factors = rng.uniform(0.8, 1.2, size=n // 1440 + 2)  # per-occurrence severity jitter

    samples: list[TrafficSample] = []
    queue = 0.0  # extra vehicles per km stored on the link
    rho_prev = config.demand_profile[0] * apex / v_f
    flow_cap = config.capacity_flow * (1.0 + 3.0 * config.noise_scale)
    for minute in range(n):
        ts = SERIES_START + timedelta(minutes=minute)
        day = minute // 1440
        weekday = day % 7
        demand = config.demand_profile[minute % 1440] * apex
        if weekday >= 5:
            demand *= WEEKEND_DEMAND_FACTOR

        bottleneck_on = config.bottleneck is not None and config.bottleneck.active(minute)
        drop = float(incident_at[minute])
        capacity_now = apex * (1.0 - drop)

        if bottleneck_on:
            occurrence = (day - config.bottleneck.first_day) // config.bottleneck.period_days
            v_slow = max(v_f - config.bottleneck.speed_drop * bn_factors[occurrence], 5.0)
            rho_raw = min(demand, 0.95 * apex) / v_slow
            queue = 0.0
        else:
            if demand > capacity_now:
                queue += (demand - capacity_now) / 60.0 / link_km
            elif queue > 0.0:  # discharge the stored queue at full capacity
                queue = max(0.0, queue - (capacity_now - demand) / 60.0 / link_km)
            rho_raw = demand / v_f + queue

        # first-order smoothing keeps transitions sensor-like
        rho = rho_prev + (rho_raw - rho_prev) / 2.0
        rho_prev = rho
        if bottleneck_on:
            # a distinct regime: high flow sustained at depressed speed
            speed = v_slow
            flow = speed * rho
        else:
            flow = backbone_flow(config, rho)
            speed = flow / rho if rho > 1e-9 else v_f

        if config.noise_scale > 0.0:
            speed *= math.exp(config.noise_scale * speed_noise[minute])
            flow *= math.exp(FLOW_JITTER * flow_noise[minute])
        speed = float(min(max(speed, 1.0), 249.0))
        flow = float(min(max(flow, 0.0), flow_cap, 11999.0))
        travel_time = config.link_length_m / 1000.0 / speed * 3600.0
        samples.append(TrafficSample(config.link_id, ts, speed, flow, travel_time))

    labels = []
    categories = ("accident", "obstruction", "breakdown")
    for k, spec in enumerate(sorted(config.incidents, key=lambda s: s.start_min)):
        labels.append(
            EventLabel(
                config.link_id,
                categories[k % len(categories)],
                SERIES_START + timedelta(minutes=spec.start_min),
                SERIES_START + timedelta(minutes=spec.end_min - 1),
            )
        )
    return samples, labels


def plan_incidents(
    count: int,
    weeks: int,
    seed: int,
    *,
    capacity_drop: tuple[float, float] = (0.45, 0.75),
    duration: tuple[int, int] = (20, 60),
    busy_window: tuple[int, int] = (7 * 60, 20 * 60),
    avoid: BottleneckSpec | None = None,
    min_separation_min: int = 120,
    demand_profile: tuple[float, ...] | None = None,
) -> tuple[IncidentSpec, ...]:
    """Deterministic non-overlapping incident plan inside busy daytime hours.

    Placement is demand-aware: a slot qualifies only when demand over the
    whole incident exceeds the cut capacity, so every label corresponds to a
    congestion episode that is actually visible in the data.
    """
    rng = np.random.default_rng(seed)
    profile = demand_profile if demand_profile is not None else default_demand_profile()
    total = weeks * 7 * 1440
    chosen: list[IncidentSpec] = []
    attempts = 0
    while len(chosen) < count:
        attempts += 1
        if attempts > 50000:
            raise ValueError("could not place the requested incidents without overlap")
        day = int(rng.integers(0, weeks * 7))
        tod = int(rng.integers(busy_window[0], busy_window[1]))
        start = day * 1440 + tod
        dur = int(rng.integers(duration[0], duration[1] + 1))
        drop = float(rng.uniform(*capacity_drop))
        if start + dur >= total:
            continue
        weekend = WEEKEND_DEMAND_FACTOR if day % 7 >= 5 else 1.0
        window = [profile[(start + k) % 1440] * weekend for k in range(-15, dur + 15)]
        if min(window[15 : 15 + dur]) < (1.0 - drop) + 0.12:  # would not congest: invisible incident
            continue
        if max(window) > 0.88:  # saturated peak: congestion present without the incident
            continue
        if avoid is not None and any(avoid.active(m) for m in (start - 60, start, start + dur, start + dur + 60)):
            continue
        if any(
            start < other.end_min + min_separation_min and other.start_min < start + dur + min_separation_min
            for other in chosen
        ):
            continue
        chosen.append(IncidentSpec(start, dur, drop))
    return tuple(sorted(chosen, key=lambda s: s.start_min))
