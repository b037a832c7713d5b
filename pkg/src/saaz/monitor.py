"""Probes, gauges and location fusion.

Probes are pulled on the simulator clock.  Each probe keeps a cursor into its
source feed, so every underlying record yields at most one observation.
"""

from __future__ import annotations

import itertools
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable, Mapping, Sequence

from .errors import BadParameters, EmptyReadings, UnknownProbe, UnknownTemplate

logger = logging.getLogger(__name__)


class ProbeSource(str, Enum):
    ACCESS_LOG = "AccessLog"
    LOCATION = "LocationService"
    METER = "MeterFeed"
    CLOCK = "EnvironmentClock"


class Aggregation(str, Enum):
    COUNT = "Count"
    RATE = "RatePerWindow"
    LOCATION_FUSE = "LocationFuse"


@dataclass(frozen=True)
class ProbeTemplate:
    template_id: str
    source: ProbeSource
    schema: Mapping[str, str]
    defaults: Mapping[str, Any] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ProbeTemplate":
        return cls(data["id"], ProbeSource(data["source"]), dict(data.get("schema", {})),
                   dict(data.get("defaults", {})))


_TYPES = {"str": str, "float": (int, float), "int": int, "bool": bool}


@dataclass
class ProbeDescriptor:
    probe_id: str
    template_id: str
    source: ProbeSource
    filter: Mapping[str, Any]
    sampling_period: float
    base_period: float
    deployed: bool = True
    active_from: float = -math.inf
    next_due: float = -math.inf
    cursor: int = 0
    last_polled: float = -math.inf


@dataclass(frozen=True)
class Observation:
    probe_id: str
    clock: float
    payload: Any
    confidence: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass
class GaugeDescriptor:
    gauge_id: str
    probes: tuple[str, ...]
    aggregation: Aggregation
    window: float
    sampling_period: float

    def __post_init__(self):
        if self.window < self.sampling_period:
            raise ValueError("gauge window shorter than its sampling period")


@dataclass(frozen=True)
class MetricSample:
    value: Any
    window: tuple[float, float]
    confidence: float


@dataclass(frozen=True)
class TuneBounds:
    minimum: float = 60.0
    maximum: float = 3600.0
    k: float = 3.0


def _field(record: Any, name: str) -> Any:
    if isinstance(record, Mapping):
        return record.get(name)
    return getattr(record, name, None)


def record_clock(record: Any) -> float:
    clock = _field(record, "clock")
    return _field(record, "timestamp") if clock is None else clock


def record_matches(record: Any, flt: Mapping[str, Any]) -> bool:
    for name, expected in flt.items():
        actual = _field(record, name)
        if isinstance(expected, (list, tuple, set, frozenset)):
            if actual not in expected:
                return False
        elif actual != expected:
            return False
    return True


def self_tune(base_period: float, score: float, bounds: TuneBounds = TuneBounds()) -> float:
    if not 0.0 <= score <= 1.0:
        raise ValueError(f"anomaly score {score} outside [0, 1]")
    period = base_period / (1.0 + bounds.k * score)
    return min(bounds.maximum, max(bounds.minimum, period))


def fuse_location(readings: Iterable[tuple[str, float]]) -> tuple[str, float]:
    """Confidence-weighted vote; ties go to the lexicographically smallest label."""
    weights: dict[str, float] = defaultdict(float)
    for label, conf in readings:
        if not 0.0 <= conf <= 1.0:
            raise ValueError(f"confidence {conf} outside [0, 1]")
        weights[label] += conf
    if not weights:
        raise EmptyReadings("no location readings")
    total = sum(weights.values())
    label = min(weights, key=lambda g: (-weights[g], g))
    if total == 0:
        return label, 0.0
    return label, weights[label] / total


def gauge_aggregate(gauge: GaugeDescriptor, observations: Sequence[Observation], clock: float) -> MetricSample:
    """Aggregate over the trailing window ``(clock - window, clock]``."""
    lo = clock - gauge.window
    inside = [o for o in observations if lo < o.clock <= clock]
    window = (lo, clock)
    if gauge.aggregation is Aggregation.LOCATION_FUSE:
        if not inside:
            raise EmptyReadings(gauge.gauge_id)
        label, conf = fuse_location((_field(o.payload, "geo"), o.confidence) for o in inside)
        return MetricSample(label, window, min(conf, min(o.confidence for o in inside)))
    confidence = min((o.confidence for o in inside), default=1.0)
    count = len(inside)
    if gauge.aggregation is Aggregation.COUNT:
        return MetricSample(count, window, confidence)
    return MetricSample(count / gauge.window, window, confidence)


class Monitor:
    """Registry of templates, deployed probes and gauges."""

    def __init__(self, templates: Iterable[ProbeTemplate] = (), bounds: TuneBounds = TuneBounds()):
        self.templates = {t.template_id: t for t in templates}
        self.bounds = bounds
        self.probes: dict[str, ProbeDescriptor] = {}
        self.gauges: dict[str, GaugeDescriptor] = {}
        self.feeds: dict[ProbeSource, Callable[[], Sequence[Any]]] = {}
        self._ids = itertools.count(1)

    def attach(self, source: ProbeSource, feed: Callable[[], Sequence[Any]]) -> None:
        """``feed`` returns the append-only sequence of records for ``source``."""
        self.feeds[source] = feed

    def deploy_probe(self, template_id: str, parameters: Mapping[str, Any] | None = None,
                     clock: float = -math.inf, probe_id: str | None = None) -> ProbeDescriptor:
        template = self.templates.get(template_id)
        if template is None:
            raise UnknownTemplate(template_id)
        params = {**template.defaults, **(parameters or {})}
        for name, value in params.items():
            kind = template.schema.get(name)
            if kind is None:
                raise BadParameters(f"{template_id}: unexpected parameter {name!r}")
            if value is not None and not isinstance(value, _TYPES[kind]):
                raise BadParameters(f"{template_id}: {name} should be {kind}")
        period = float(params.pop("sampling_period", self.bounds.minimum))
        if not self.bounds.minimum <= period <= self.bounds.maximum:
            raise BadParameters(f"sampling period {period} outside "
                                f"[{self.bounds.minimum}, {self.bounds.maximum}]")
        flt = {k: v for k, v in params.items() if v is not None}
        pid = probe_id or f"{template_id}-{next(self._ids)}"
        if pid in self.probes and self.probes[pid].deployed:
            raise BadParameters(f"probe {pid} already deployed")
        feed = self.feeds.get(template.source)
        cursor = len(feed()) if feed is not None else 0
        probe = ProbeDescriptor(pid, template_id, template.source, flt, period, period,
                                active_from=clock, next_due=clock, cursor=cursor)
        self.probes[pid] = probe
        logger.debug("deployed probe %s filter=%s", pid, flt)
        return probe

    def withdraw_probe(self, probe_id: str) -> None:
        probe = self.probes.get(probe_id)
        if probe is None:
            raise UnknownProbe(probe_id)
        probe.deployed = False

    def add_gauge(self, gauge: GaugeDescriptor) -> GaugeDescriptor:
        for pid in gauge.probes:
            if pid not in self.probes:
                raise UnknownProbe(pid)
        self.gauges[gauge.gauge_id] = gauge
        return gauge

    def due(self, clock: float) -> list[ProbeDescriptor]:
        return [p for p in self.probes.values() if p.deployed and clock >= p.next_due]

    def poll(self, probe_id: str, clock: float) -> list[Observation]:
        probe = self.probes.get(probe_id)
        if probe is None:
            raise UnknownProbe(probe_id)
        if not probe.deployed:
            return []
        feed = self.feeds.get(probe.source)
        records = feed() if feed is not None else ()
        out = []
        i = probe.cursor
        while i < len(records):
            rec = records[i]
            if record_clock(rec) > clock:
                break
            i += 1
            if _field(rec, "synthetic"):
                continue
            if record_matches(rec, probe.filter):
                conf = _field(rec, "confidence")
                out.append(Observation(probe.probe_id, record_clock(rec), rec, 1.0 if conf is None else conf))
        probe.cursor = i
        probe.last_polled = clock
        probe.next_due = clock + probe.sampling_period
        return out

    def tune(self, probe_id: str, score: float) -> float:
        probe = self.probes[probe_id]
        probe.sampling_period = self_tune(probe.base_period, score, self.bounds)
        probe.next_due = min(probe.next_due, probe.last_polled + probe.sampling_period)
        return probe.sampling_period
