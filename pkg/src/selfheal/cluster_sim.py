"""Seeded discrete-event simulation of a small cloud cluster.

Each tick the simulator applies one recovery action to one node, advances
in-flight repairs, injects random faults, and emits one telemetry sample and
zero or more log records per node. The remedy table is exact: every fault
class has a single curing action with a fixed latency.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np


class FaultClass(enum.IntEnum):
    CpuSaturation = 0
    MemoryLeak = 1
    ServiceCrash = 2
    NetworkPartition = 3
    DiskFailure = 4


class Status(enum.IntEnum):
    Healthy = 0
    Degraded = 1
    Failed = 2


class RecoveryAction(enum.IntEnum):
    NoOp = 0
    RestartService = 1
    ReallocateResources = 2
    ApplyPatch = 3


class Outcome(enum.Enum):
    """How one decision tick ended, for reward assignment."""

    RECOVERED = "recovered"  # a present fault will be cleared within the window
    NOT_RECOVERED = "not_recovered"  # the action cannot clear the fault
    DAMAGE = "damage"  # the action disrupted a healthy node
    NEUTRAL = "neutral"


def reward(outcome: Outcome) -> int:
    if outcome is Outcome.RECOVERED:
        return 1
    if outcome in (Outcome.NOT_RECOVERED, Outcome.DAMAGE):
        return -1
    return 0


class StateError(RuntimeError):
    pass


class ParseError(ValueError):
    pass


REMEDY = {
    FaultClass.CpuSaturation: RecoveryAction.ReallocateResources,
    FaultClass.MemoryLeak: RecoveryAction.RestartService,
    FaultClass.ServiceCrash: RecoveryAction.RestartService,
    FaultClass.NetworkPartition: RecoveryAction.ReallocateResources,
    FaultClass.DiskFailure: RecoveryAction.ApplyPatch,
}
LATENCY = {
    RecoveryAction.RestartService: 3,
    RecoveryAction.ReallocateResources: 2,
    RecoveryAction.ApplyPatch: 5,
}
SEVERITY = {
    FaultClass.CpuSaturation: Status.Degraded,
    FaultClass.MemoryLeak: Status.Degraded,
    FaultClass.ServiceCrash: Status.Failed,
    FaultClass.NetworkPartition: Status.Failed,
    FaultClass.DiskFailure: Status.Degraded,
}


# an untreated Degraded fault turns into an outage after this many ticks
ESCALATE_AFTER = 40


def recovery_window(action: RecoveryAction) -> int:
    return LATENCY[action] + 2


METRICS = ("cpu", "mem", "disk", "net", "err")
HEALTHY_LEVEL = np.array([0.30, 0.40, 0.20, 0.10, 0.02])
# Per-class metric offsets. Saturating entries overshoot 1 by more than the
# noise truncation (2 sigma) so they clip to a fixed floor.
SIGNATURE = {
    FaultClass.CpuSaturation: np.array([0.80, 0.05, 0.00, 0.05, 0.05]),
    FaultClass.MemoryLeak: np.array([0.10, 0.50, 0.05, 0.00, 0.08]),
    FaultClass.ServiceCrash: np.array([-0.25, -0.20, -0.10, 0.00, 1.20]),
    FaultClass.NetworkPartition: np.array([0.00, 0.00, 0.00, 0.70, 0.25]),
    FaultClass.DiskFailure: np.array([0.00, 0.00, 0.65, 0.05, 0.15]),
}
MAINTENANCE_OFFSET = np.array([-0.15, -0.10, 0.00, 0.00, 0.00])

SEVERITIES = ("INFO", "WARN", "ERROR")
TEMPLATES = (
    ("INFO", "heartbeat ok service healthy"),
    ("INFO", "request batch served latency nominal"),
    ("INFO", "garbage collection cycle completed"),
    ("WARN", "cpu saturation throttling scheduler backlog"),
    ("WARN", "memory usage climbing heap leak suspected"),
    ("ERROR", "process crashed segfault core dumped"),
    ("ERROR", "network partition peer unreachable timeout"),
    ("ERROR", "disk io failure sector read fault"),
)
INFO_TEMPLATES = (0, 1, 2)
FAULT_TEMPLATE = {c: 3 + int(c) for c in FaultClass}


@dataclass(frozen=True)
class TelemetrySample:
    t: int
    node_id: int
    metrics: np.ndarray

    def to_json(self) -> dict:
        d = {"t": self.t, "node": self.node_id}
        d.update({k: float(v) for k, v in zip(("cpu", "mem", "disk", "net", "err"), self.metrics)})
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TelemetrySample":
        return cls(int(d["t"]), int(d["node"]), np.array([d[k] for k in ("cpu", "mem", "disk", "net", "err")], dtype=np.float64))


@dataclass(frozen=True)
class LogRecord:
    t: int
    node_id: int
    severity: str
    template_id: int
    tokens: tuple[str, ...]

    def to_json(self) -> dict:
        return {"t": self.t, "node": self.node_id, "sev": self.severity, "template": self.template_id, "msg": " ".join(self.tokens)}

    @classmethod
    def from_json(cls, d: dict) -> "LogRecord":
        if d["sev"] not in SEVERITIES:
            raise ParseError(f"unknown severity {d['sev']!r}")
        return cls(int(d["t"]), int(d["node"]), d["sev"], int(d["template"]), tuple(d["msg"].lower().split()))


def make_record(t: int, node: int, template_id: int) -> LogRecord:
    sev, msg = TEMPLATES[template_id]
    return LogRecord(t, node, sev, template_id, tuple(msg.split()))


class Label(NamedTuple):
    t: int
    node_id: int
    fault: FaultClass | None

    def to_json(self) -> dict:
        return {"t": self.t, "node": self.node_id, "fault": None if self.fault is None else self.fault.name}

    @classmethod
    def from_json(cls, d: dict) -> "Label":
        f = d["fault"]
        try:
            return cls(int(d["t"]), int(d["node"]), None if f is None else FaultClass[f])
        except KeyError as exc:
            raise ParseError(f"unknown fault class {f!r}") from exc


class Event(NamedTuple):
    t: int
    kind: str  # inject | detect | action | damage | healthy | restored | escalate
    node: int
    detail: str = ""


@dataclass
class NodeState:
    node_id: int
    status: Status = Status.Healthy
    active_fault: FaultClass | None = None
    fault_age: int = 0
    repair_countdown: int = 0
    # a restart/reallocate/patch on a healthy node puts it into maintenance
    maintenance: int = 0

    @property
    def busy(self) -> bool:
        return self.repair_countdown > 0 or self.maintenance > 0


@dataclass(frozen=True)
class SimConfig:
    nodes: int = 4
    ticks: int = 200
    fault_rate: float = 0.02
    noise_sigma: float = 0.05
    info_log_rate: float = 0.5

    def __post_init__(self):
        if self.nodes < 1:
            raise ValueError("nodes must be >= 1")
        if self.ticks < 1:
            raise ValueError("ticks must be >= 1")
        if not 0.0 <= self.fault_rate < 1.0:
            raise ValueError("fault_rate must lie in [0, 1)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")


class StepResult(NamedTuple):
    samples: list[TelemetrySample]
    logs: list[LogRecord]
    reward: int
    labels: list[Label]


class Simulation:
    """One cluster trajectory. Not thread-safe; make one per seed.

    Fault arrivals and emission noise come from separate generators and both
    draw a fixed amount per tick, so two runs with the same seed see the same
    fault arrival attempts whatever actions are taken.
    """

    def __init__(self, config: SimConfig, seed: int):
        self.config = config
        self.seed = int(seed)
        fault_ss, emit_ss = np.random.SeedSequence(self.seed).spawn(2)
        self._fault_rng = np.random.default_rng(fault_ss)
        self._emit_rng = np.random.default_rng(emit_ss)
        self.nodes = [NodeState(i) for i in range(config.nodes)]
        self.t = 0
        self.events: list[Event] = []
        self.last_outcome = Outcome.NEUTRAL

    @property
    def finished(self) -> bool:
        return self.t >= self.config.ticks

    def log_event(self, kind: str, node: int, detail: str = "", t: int | None = None) -> None:
        self.events.append(Event(self.t if t is None else t, kind, node, detail))

    def inject_fault(self, node_id: int, fault: FaultClass) -> None:
        node = self.nodes[node_id]
        if node.status is not Status.Healthy or node.busy:
            raise StateError(f"node {node_id} is not healthy")
        self._start_fault(node, FaultClass(fault))

    def _start_fault(self, node: NodeState, fault: FaultClass) -> None:
        node.active_fault = fault
        node.status = SEVERITY[fault]
        node.fault_age = 0
        self.log_event("inject", node.node_id, fault.name)

    def _advance_repairs(self) -> None:
        for node in self.nodes:
            if node.repair_countdown > 0:
                node.repair_countdown -= 1
                if node.repair_countdown == 0:
                    node.active_fault = None
                    node.status = Status.Healthy
                    node.fault_age = 0
                    self.log_event("healthy", node.node_id)
            elif node.maintenance > 0:
                node.maintenance -= 1
                if node.maintenance == 0:
                    node.status = Status.Healthy
                    self.log_event("restored", node.node_id)
            elif node.status is Status.Degraded and node.active_fault is not None and node.fault_age >= ESCALATE_AFTER:
                node.status = Status.Failed
                self.log_event("escalate", node.node_id, node.active_fault.name)

    def _apply(self, action: RecoveryAction, node_id: int) -> Outcome:
        if action is RecoveryAction.NoOp:
            return Outcome.NEUTRAL
        node = self.nodes[node_id]
        self.log_event("action", node_id, action.name)
        if node.busy:
            return Outcome.NEUTRAL
        if node.active_fault is None:
            node.status = Status.Degraded
            node.maintenance = LATENCY[action]
            self.log_event("damage", node_id, action.name)
            return Outcome.DAMAGE
        if REMEDY[node.active_fault] is action:
            # latency < recovery_window, so the cure is certain at this point
            node.repair_countdown = LATENCY[action]
            return Outcome.RECOVERED
        return Outcome.NOT_RECOVERED

    def _inject_random(self) -> None:
        n = self.config.nodes
        arrivals = self._fault_rng.random(n) < self.config.fault_rate
        classes = self._fault_rng.integers(0, len(FaultClass), size=n)
        for node, hit, cls in zip(self.nodes, arrivals, classes):
            if hit and node.status is Status.Healthy and not node.busy:
                self._start_fault(node, FaultClass(int(cls)))

    def _emit(self) -> tuple[list[TelemetrySample], list[LogRecord], list[Label]]:
        n = self.config.nodes
        sigma = self.config.noise_sigma
        noise = np.clip(self._emit_rng.normal(0.0, 1.0, size=(n, len(METRICS))), -2.0, 2.0) * sigma
        u_info = self._emit_rng.random(n)
        which = self._emit_rng.integers(0, len(INFO_TEMPLATES), size=n)
        samples, logs, labels = [], [], []
        for node in self.nodes:
            i = node.node_id
            level = HEALTHY_LEVEL.copy()
            info_rate = self.config.info_log_rate
            if node.active_fault is not None:
                level += SIGNATURE[node.active_fault]
                logs.append(make_record(self.t, i, FAULT_TEMPLATE[node.active_fault]))
                info_rate *= 0.5
                node.fault_age += 1
            elif node.maintenance > 0:
                level += MAINTENANCE_OFFSET
            if u_info[i] < info_rate:
                logs.append(make_record(self.t, i, INFO_TEMPLATES[which[i]]))
            samples.append(TelemetrySample(self.t, i, np.clip(level + noise[i], 0.0, 1.0)))
            labels.append(Label(self.t, i, node.active_fault))
        return samples, logs, labels

    def step(self, action: RecoveryAction = RecoveryAction.NoOp, node_id: int = 0) -> StepResult:
        """Advance one tick. Order: finish due repairs, apply the action,
        inject random faults, emit observations for this tick."""
        if self.finished:
            raise StateError("simulation horizon reached")
        action = RecoveryAction(action)
        if not 0 <= node_id < self.config.nodes:
            raise ValueError(f"no node {node_id}")
        self._advance_repairs()
        self.last_outcome = self._apply(action, node_id)
        self._inject_random()
        samples, logs, labels = self._emit()
        self.t += 1
        return StepResult(samples, logs, reward(self.last_outcome), labels)


def sim_new(config: SimConfig, seed: int) -> Simulation:
    return Simulation(config, seed)


# --------------------------------------------------------------------------
# Recovery accounting
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FaultEpisode:
    node: int
    inject_t: int
    detect_t: int | None
    healthy_t: int | None
    ticks: int
    censored: bool


def recovery_time(events: Iterable[Event], horizon: int) -> list[FaultEpisode]:
    """Per-fault ticks from first detection (or injection when never
    detected) to the first Healthy tick. Faults still open at the horizon are
    censored and reported with value ``horizon``."""
    open_: dict[int, dict] = {}
    done: list[FaultEpisode] = []
    parsed = []
    for ev in events:
        if not isinstance(ev, Event):
            try:
                ev = Event(int(ev[0]), str(ev[1]), int(ev[2]), *ev[3:])
            except (TypeError, ValueError, IndexError) as exc:
                raise ParseError(f"malformed event {ev!r}") from exc
        parsed.append(ev)
    for ev in sorted(parsed, key=lambda e: e.t):
        if ev.kind == "inject":
            if ev.node in open_:
                raise ParseError(f"node {ev.node} injected twice without recovery at t={ev.t}")
            open_[ev.node] = {"inject": ev.t, "detect": None}
        elif ev.kind == "detect":
            ep = open_.get(ev.node)
            if ep is not None and ep["detect"] is None:
                ep["detect"] = ev.t
        elif ev.kind == "healthy":
            ep = open_.pop(ev.node, None)
            if ep is None:
                raise ParseError(f"node {ev.node} healthy at t={ev.t} without an open fault")
            start = ep["detect"] if ep["detect"] is not None else ep["inject"]
            done.append(FaultEpisode(ev.node, ep["inject"], ep["detect"], ev.t, ev.t - start, False))
        elif ev.kind not in ("action", "damage", "restored", "escalate"):
            raise ParseError(f"unknown event kind {ev.kind!r}")
    for node, ep in open_.items():
        done.append(FaultEpisode(node, ep["inject"], ep["detect"], None, horizon, True))
    done.sort(key=lambda e: (e.inject_t, e.node))
    return done


# --------------------------------------------------------------------------
# Dataset generation and JSON-lines I/O
# --------------------------------------------------------------------------


@dataclass
class Dataset:
    samples: list[TelemetrySample] = field(default_factory=list)
    logs: list[LogRecord] = field(default_factory=list)
    labels: list[Label] = field(default_factory=list)


def generate_dataset(config: SimConfig, seed: int, fix_prob: float = 0.15) -> Dataset:
    """Run ``config.ticks`` ticks under a scripted operator who, each tick,
    fixes the lowest-numbered unattended faulty node with probability
    ``fix_prob``. Gives faults of varied duration plus recovery transitions."""
    sim = Simulation(config, seed)
    op_rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(3)[2])
    data = Dataset()
    while not sim.finished:
        action, target = RecoveryAction.NoOp, 0
        pending = [n for n in sim.nodes if n.active_fault is not None and not n.busy]
        if op_rng.random() < fix_prob and pending:
            target = pending[0].node_id
            action = REMEDY[pending[0].active_fault]
        res = sim.step(action, target)
        data.samples.extend(res.samples)
        data.logs.extend(res.logs)
        data.labels.extend(res.labels)
    return data


def _write_jsonl(path: Path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")


def _read_jsonl(path: Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
    return rows


def save_dataset(data: Dataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_jsonl(out / "telemetry.jsonl", (s.to_json() for s in data.samples))
    _write_jsonl(out / "logs.jsonl", (r.to_json() for r in data.logs))
    _write_jsonl(out / "labels.jsonl", (lb.to_json() for lb in data.labels))


def load_dataset(data_dir) -> Dataset:
    d = Path(data_dir)
    try:
        return Dataset(
            samples=[TelemetrySample.from_json(r) for r in _read_jsonl(d / "telemetry.jsonl")],
            logs=[LogRecord.from_json(r) for r in _read_jsonl(d / "logs.jsonl")],
            labels=[Label.from_json(r) for r in _read_jsonl(d / "labels.jsonl")],
        )
    except KeyError as exc:
        raise ParseError(f"missing field {exc} in {d}") from exc
