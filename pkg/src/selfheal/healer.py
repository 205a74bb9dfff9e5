"""Tabular Q-learning over a 36-state abstraction of the cluster.

The agent observes ``(alarm, dominant fault class, node status)`` for the
single node it would act on, picks one of four recovery actions and is paid
by the simulator's three-valued reward. The mean squared temporal-difference
error of an episode is reported as the reinforcement-learning loss.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .cluster_sim import (
    REMEDY,
    Event,
    FaultClass,
    RecoveryAction,
    Simulation,
    Status,
    StepResult,
    recovery_time,
    reward,
)
from .detectors import DetectorStack, class_index, class_of
from .features import Normalizer, embed_counts

__all__ = [
    "AgentState",
    "QTable",
    "reward",
    "q_update",
    "select_action",
    "greedy_action",
    "run_episode",
    "run_episodes",
    "train_q",
]

N_ACTIONS = len(RecoveryAction)
N_STATES = 2 * (len(FaultClass) + 1) * len(Status)


class AgentState(NamedTuple):
    alarm: bool
    dominant_class: FaultClass | None
    worst_status: Status

    @property
    def index(self) -> int:
        return (int(self.alarm) * (len(FaultClass) + 1) + class_index(self.dominant_class)) * len(Status) + int(
            self.worst_status
        )

    @classmethod
    def from_index(cls, i: int) -> "AgentState":
        rest, status = divmod(i, len(Status))
        alarm, cls_idx = divmod(rest, len(FaultClass) + 1)
        return cls(bool(alarm), class_of(cls_idx), Status(status))


def all_states() -> list[AgentState]:
    return [AgentState.from_index(i) for i in range(N_STATES)]


def single_fault_states() -> list[AgentState]:
    """Alarm raised, class identified, status matching that class's severity."""
    from .cluster_sim import SEVERITY

    return [AgentState(True, c, SEVERITY[c]) for c in FaultClass]


def remedy_policy(state: AgentState) -> RecoveryAction:
    if state.alarm and state.dominant_class is not None:
        return REMEDY[state.dominant_class]
    return RecoveryAction.NoOp


def noop_policy(state: AgentState) -> RecoveryAction:
    return RecoveryAction.NoOp


@dataclass
class QTable:
    values: np.ndarray = field(default_factory=lambda: np.zeros((N_STATES, N_ACTIONS)))
    alpha: float = 0.2
    gamma: float = 0.9
    epsilon: float = 0.3

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (N_STATES, N_ACTIONS):
            raise ValueError(f"Q table must be {N_STATES}x{N_ACTIONS}")

    def policy(self) -> dict[AgentState, RecoveryAction]:
        return {s: greedy_action(self, s) for s in all_states()}


def _idx(s) -> int:
    return s.index if isinstance(s, AgentState) else int(s)


def td_error(table: QTable, s, a, r: float, s_next) -> float:
    q = table.values
    return r + table.gamma * float(q[_idx(s_next)].max()) - float(q[_idx(s), int(a)])


def q_update(table: QTable, s, a, r: float, s_next) -> float:
    """In-place ``Q(s,a) += alpha * TD``; returns the TD error."""
    delta = td_error(table, s, a, r, s_next)
    table.values[_idx(s), int(a)] += table.alpha * delta
    return delta


def greedy_action(table: QTable, s) -> RecoveryAction:
    return RecoveryAction(int(np.argmax(table.values[_idx(s)])))


def select_action(table: QTable, s, epsilon: float, rng: np.random.Generator) -> RecoveryAction:
    if rng.random() < epsilon:
        return RecoveryAction(int(rng.integers(N_ACTIONS)))
    return greedy_action(table, s)


# --------------------------------------------------------------------------
# Observation
# --------------------------------------------------------------------------


class Observation(NamedTuple):
    state: AgentState
    target: int
    flagged: frozenset


def _pick_target(sim: Simulation, order) -> int:
    """First node in ``order`` with no repair or maintenance in flight."""
    for i in order:
        if not sim.nodes[i].busy:
            return int(i)
    return int(order[0])


class OracleObserver:
    """Exact state from the simulator: alarm iff some idle node is faulty."""

    def reset(self, sims: Sequence[Simulation]) -> None:
        pass

    def observe(self, sims: Sequence[Simulation], steps) -> list[Observation]:
        return [self._one(sim) for sim in sims]

    @staticmethod
    def _one(sim: Simulation) -> Observation:
        faulty = [n for n in sim.nodes if n.active_fault is not None]
        pending = [n for n in faulty if not n.busy]
        flagged = frozenset(n.node_id for n in faulty)
        if pending:
            n = pending[0]
            return Observation(AgentState(True, n.active_fault, n.status), n.node_id, flagged)
        target = _pick_target(sim, range(len(sim.nodes)))
        return Observation(AgentState(False, None, sim.nodes[target].status), target, flagged)


class DetectorObserver:
    """State from the trained detector stack run over each node's most
    recent window; all nodes of all simulations are scored as one batch.
    Short histories are front-padded with their first row."""

    def __init__(self, stack: DetectorStack, normalizer: Normalizer | None, window: int = 16, embed_dim: int = 32):
        self.stack = stack
        self.normalizer = normalizer
        self.window = window
        self.embed_dim = embed_dim
        self.last_scores = None

    def reset(self, sims: Sequence[Simulation]) -> None:
        n = self.window
        self._rows = [[deque(maxlen=n) for _ in sim.nodes] for sim in sims]
        self._text = [[deque(maxlen=n) for _ in sim.nodes] for sim in sims]

    def _push(self, k: int, step: StepResult) -> None:
        per_node_logs: list[list] = [[] for _ in self._rows[k]]
        for r in step.logs:
            per_node_logs[r.node_id].append(r)
        for s in step.samples:
            m = s.metrics if self.normalizer is None else self.normalizer.apply(s.metrics)
            self._rows[k][s.node_id].append(m)
            self._text[k][s.node_id].append(embed_counts(per_node_logs[s.node_id], self.embed_dim))

    def observe(self, sims: Sequence[Simulation], steps) -> list[Observation]:
        if steps is None:
            out = []
            for sim in sims:
                target = _pick_target(sim, range(len(sim.nodes)))
                out.append(Observation(AgentState(False, None, sim.nodes[target].status), target, frozenset()))
            return out
        for k, step in enumerate(steps):
            self._push(k, step)
        rows = [r for per_sim in self._rows for r in per_sim]
        texts = [t for per_sim in self._text for t in per_sim]
        m = len(rows[0][0])
        X = np.empty((len(rows), self.window, m))
        E = np.empty((len(rows), self.embed_dim))
        for i, (hist, text) in enumerate(zip(rows, texts)):
            pad = self.window - len(hist)
            X[i, :pad] = hist[0]
            X[i, pad:] = np.asarray(hist)
            v = np.sum(text, axis=0)
            norm = np.linalg.norm(v)
            E[i] = v / norm if norm > 0 else v
        sc = self.stack.score(X, E)
        self.last_scores = sc
        out, base = [], 0
        for sim in sims:
            idx = range(base, base + len(sim.nodes))
            fused = sc.fused[base : base + len(sim.nodes)]
            order = sorted(range(len(sim.nodes)), key=lambda i: (-fused[i], i))
            target = _pick_target(sim, order)
            j = base + target
            state = AgentState(bool(sc.flag[j]), class_of(int(sc.svm_class[j])), sim.nodes[target].status)
            out.append(Observation(state, target, frozenset(i - base for i in idx if sc.flag[i])))
            base += len(sim.nodes)
        return out


# --------------------------------------------------------------------------
# Episodes
# --------------------------------------------------------------------------


@dataclass
class EpisodeResult:
    cum_reward: int
    td_loss: float
    events: list[Event]
    log: list[dict]
    stability: float
    recovery: list

    @property
    def mean_recovery_ticks(self) -> float:
        return float(np.mean([e.ticks for e in self.recovery])) if self.recovery else 0.0


def run_episode(
    sim: Simulation,
    observer=None,
    table: QTable | None = None,
    epsilon: float = 0.0,
    learn: bool = True,
    rng: np.random.Generator | None = None,
    policy: Callable[[AgentState], RecoveryAction] | None = None,
    episode: int = 0,
) -> EpisodeResult:
    """Play ``sim`` to its horizon.

    Each tick: pick an action from the current observation (``policy`` if
    given, otherwise epsilon-greedy on ``table``), apply it to the observed
    target node, observe again and, when ``learn``, do one Q update. A
    ``detect`` event is logged the first tick a faulty node is flagged.
    """
    rng = rng if rng is not None else np.random.default_rng(sim.seed)
    return run_episodes([sim], observer, table, [epsilon], learn, rng, policy, episode)[0]


def run_episodes(
    sims: Sequence[Simulation],
    observer=None,
    table: QTable | None = None,
    epsilons: Sequence[float] | None = None,
    learn: bool = True,
    rng: np.random.Generator | None = None,
    policy: Callable[[AgentState], RecoveryAction] | None = None,
    first_episode: int = 0,
) -> list[EpisodeResult]:
    """Several episodes advanced in lockstep, one tick at a time, in list
    order. Q updates from all of them go to the same ``table``."""
    if not sims:
        return []
    horizon = sims[0].config.ticks
    if horizon <= 0 or any(s.config.ticks != horizon or s.t != 0 for s in sims):
        raise ValueError("simulations must be fresh and share a positive horizon")
    if policy is None and table is None:
        raise ValueError("need a Q table or a fixed policy")
    observer = observer if observer is not None else OracleObserver()
    rng = rng if rng is not None else np.random.default_rng(0)
    epsilons = list(epsilons) if epsilons is not None else [0.0] * len(sims)
    observer.reset(sims)
    obs = observer.observe(sims, None)
    K = len(sims)
    detected: list[set[int]] = [set() for _ in sims]
    cum = [0] * K
    sq_td = [0.0] * K
    stable = [0] * K
    logs: list[list[dict]] = [[] for _ in sims]
    for t in range(horizon):
        actions, steps = [], []
        for k, sim in enumerate(sims):
            if policy is not None:
                a = RecoveryAction(policy(obs[k].state))
            else:
                a = select_action(table, obs[k].state, epsilons[k], rng)
            actions.append(a)
            steps.append(sim.step(a, obs[k].target))
        nxt = observer.observe(sims, steps)
        for k, sim in enumerate(sims):
            r = steps[k].reward
            s, a = obs[k].state, actions[k]
            if table is not None:
                delta = q_update(table, s, a, r, nxt[k].state) if learn else td_error(table, s, a, r, nxt[k].state)
                sq_td[k] += delta * delta
            cum[k] += r
            for node in sim.nodes:
                if node.active_fault is None:
                    detected[k].discard(node.node_id)
                elif node.node_id in nxt[k].flagged and node.node_id not in detected[k]:
                    detected[k].add(node.node_id)
                    sim.log_event("detect", node.node_id, t=t)
            statuses = [int(n.status) for n in sim.nodes]
            stable[k] += all(st != Status.Failed for st in statuses)
            logs[k].append(
                {
                    "ep": first_episode + k,
                    "t": t,
                    "state": [int(s.alarm), class_index(s.dominant_class), int(s.worst_status)],
                    "action": a.name,
                    "reward": r,
                    "node": obs[k].target,
                    "statuses": statuses,
                }
            )
        obs = nxt
    return [
        EpisodeResult(
            cum_reward=cum[k],
            td_loss=sq_td[k] / horizon if table is not None else 0.0,
            events=list(sim.events),
            log=logs[k],
            stability=stable[k] / horizon,
            recovery=recovery_time(sim.events, horizon),
        )
        for k, sim in enumerate(sims)
    ]


def epsilon_schedule(i: int, total: int, start: float, end: float) -> float:
    if total <= 1:
        return end
    return start + (end - start) * i / (total - 1)


def train_q(
    table: QTable,
    make_sim: Callable[[int], Simulation],
    episodes: int = 500,
    eps_start: float = 0.3,
    eps_end: float = 0.01,
    observer=None,
    seed: int = 0,
    first_episode: int = 0,
    total_episodes: int | None = None,
    lockstep: int = 1,
) -> list[EpisodeResult]:
    """Run ``episodes`` learning episodes; ``make_sim(i)`` builds episode i.
    ``first_episode``/``total_episodes`` place this block on a longer
    epsilon schedule. ``lockstep`` episodes run side by side per round."""
    total = total_episodes if total_episodes is not None else episodes
    rng = np.random.default_rng(np.random.SeedSequence([seed, first_episode]))
    results: list[EpisodeResult] = []
    for start in range(first_episode, first_episode + episodes, lockstep):
        ids = range(start, min(start + lockstep, first_episode + episodes))
        eps = [epsilon_schedule(i, total, eps_start, eps_end) for i in ids]
        sims = [make_sim(i) for i in ids]
        results.extend(run_episodes(sims, observer, table, eps, True, rng, first_episode=start))
    return results
