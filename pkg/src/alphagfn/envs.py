"""Compositional generation tasks on enumerable DAGs.

Two tasks are provided, both small enough to enumerate: set generation
(add one unused element per step until the set is full) and
non-autoregressive bit-sequence generation (fill any empty word slot).
Each environment carries the DAG, terminal log-rewards, a state energy
whose edge increments telescope to the terminal log-reward, and the
feature/action encodings the MLP model uses.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .graph import DagGraph

MAX_STATES = 200_000
SENTINEL = -1


class StateCountOverflow(ValueError):
    pass


@dataclass(eq=False)
class Env:
    """A DAG plus rewards and energies.

    ``log_reward`` and ``state_energy`` are indexed by state; entries for
    non-terminal states of ``log_reward`` are NaN. ``state_energy`` at the
    sink is NaN because the sink's energy depends on the terminal it was
    reached from; terminal edges use ``-log R(x) - energy(x)`` instead.
    """

    graph: DagGraph
    log_reward: np.ndarray
    state_energy: np.ndarray | None = None
    features: np.ndarray | None = None
    edge_action: np.ndarray | None = None
    num_actions: int = 0
    mode_threshold: float = math.inf
    _edge_energy: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        g = self.graph
        self.log_reward = np.asarray(self.log_reward, dtype=np.float64)
        term = g.terminal_states
        if not np.all(np.isfinite(self.log_reward[term])):
            raise ValueError("every terminal state needs a finite log-reward")
        if self.state_energy is None:
            self.state_energy = np.zeros(g.num_states)
            self.state_energy[g.sink] = np.nan

    @classmethod
    def from_rewards(cls, graph: DagGraph, rewards: dict[int, float] | Sequence[float],
                     state_energy: np.ndarray | None = None) -> "Env":
        """Generic environment. ``rewards`` is keyed by terminal state index
        or given in ``graph.terminal_states`` order."""
        lr = np.full(graph.num_states, np.nan)
        if isinstance(rewards, dict):
            for x, r in rewards.items():
                lr[x] = math.log(r)
        else:
            lr[graph.terminal_states] = np.log(np.asarray(rewards, dtype=np.float64))
        return cls(graph, lr, state_energy)

    @property
    def terminals(self) -> np.ndarray:
        return self.graph.terminal_states

    def reward(self, x: int) -> float:
        return float(np.exp(self.log_reward[x]))

    def terminal_rewards(self) -> np.ndarray:
        return np.exp(self.log_reward[self.terminals])

    def edge_energies(self) -> np.ndarray:
        """Per-edge energy; telescopes to ``-log R(x)`` along a complete
        trajectory provided the source has zero energy."""
        if self._edge_energy is None:
            g = self.graph
            e = np.empty(g.num_edges)
            src, dst = g.edge_src, g.edge_dst
            inner = dst != g.sink
            e[inner] = self.state_energy[dst[inner]] - self.state_energy[src[inner]]
            term = ~inner
            e[term] = -self.log_reward[src[term]] - self.state_energy[src[term]]
            e.setflags(write=False)
            self._edge_energy = e
        return self._edge_energy

    def edge_energy(self, s: int, s2: int) -> float:
        return float(self.edge_energies()[self.graph.edge_id(s, s2)])

    def count_modes(self, samples: Iterable[int]) -> int:
        seen = {int(x) for x in samples}
        return sum(1 for x in seen if math.exp(self.log_reward[x]) > self.mode_threshold)

    def state_label(self, s: int):
        return s if self.graph.labels is None else self.graph.labels[s]


# ---------------------------------------------------------------- set generation

@dataclass(frozen=True)
class SetGenSpec:
    vocab_size: int = 10
    set_capacity: int = 5
    element_energies: tuple[float, ...] | None = None
    energy_group_size: int = 2
    reward_exponent: float = 1.0
    mode_threshold: float | None = None
    mode_threshold_percentile: float = 90.0

    def __post_init__(self):
        if not 0 <= self.set_capacity <= self.vocab_size:
            raise ValueError("set_capacity must lie in [0, vocab_size]")
        if self.reward_exponent <= 0:
            raise ValueError("reward_exponent must be positive")
        if self.energy_group_size < 1:
            raise ValueError("energy_group_size must be >= 1")
        if self.element_energies is not None:
            e = np.asarray(self.element_energies, dtype=np.float64)
            if e.shape != (self.vocab_size,):
                raise ValueError("need one energy per vocabulary element")


def sample_element_energies(vocab_size: int, group_size: int, rng: np.random.Generator) -> np.ndarray:
    n_groups = -(-vocab_size // group_size)
    values = rng.uniform(-1.0, 1.0, size=n_groups)
    return np.repeat(values, group_size)[:vocab_size]


@dataclass(eq=False)
class SetGenEnv(Env):
    spec: SetGenSpec | None = None
    element_energies: np.ndarray | None = None


def build_setgen(spec: SetGenSpec, seed: int = 0, max_states: int = MAX_STATES) -> SetGenEnv:
    """Set-generation DAG over all subsets of size <= capacity.

    Reward of a full set x is ``exp(-beta * sum of element energies)``.
    States are ordered by size, then lexicographically; the sink is last.
    """
    n, cap = spec.vocab_size, spec.set_capacity
    n_states = sum(math.comb(n, k) for k in range(cap + 1))
    if n_states + 1 > max_states:
        raise StateCountOverflow(f"set generation needs {n_states + 1} states (cap {max_states})")
    if spec.element_energies is not None:
        energies = np.asarray(spec.element_energies, dtype=np.float64)
    else:
        energies = sample_element_energies(n, spec.energy_group_size, np.random.default_rng(seed))
    states: list[tuple[int, ...]] = []
    for k in range(cap + 1):
        states.extend(itertools.combinations(range(n), k))
    index = {s: i for i, s in enumerate(states)}
    sink = len(states)
    edges = []
    action = []
    for i, s in enumerate(states):
        if len(s) == cap:
            edges.append((i, sink))
            action.append(n)
            continue
        members = set(s)
        for e in range(n):
            if e not in members:
                edges.append((i, index[tuple(sorted(s + (e,)))]))
                action.append(e)
    g = DagGraph.from_edges(edges, 0, sink, num_states=sink + 1, labels=states + ["s_f"])
    beta = spec.reward_exponent
    state_energy = np.array([beta * float(np.sum(energies[list(s)])) for s in states] + [np.nan])
    log_reward = np.full(sink + 1, np.nan)
    term = np.array([i for i, s in enumerate(states) if len(s) == cap])
    log_reward[term] = -state_energy[term]
    feats = np.zeros((sink + 1, n))
    for i, s in enumerate(states):
        feats[i, list(s)] = 1.0
    # edge ids are CSR-sorted, which can reorder the list we built
    action_by_edge = dict(zip(edges, action))
    edge_action = np.array([action_by_edge[e] for e in g.edges], dtype=np.int64)
    env = SetGenEnv(g, log_reward, state_energy, feats, edge_action, n + 1,
                    spec=spec, element_energies=energies)
    if spec.mode_threshold is not None:
        env.mode_threshold = float(spec.mode_threshold)
    else:
        env.mode_threshold = float(np.percentile(env.terminal_rewards(), spec.mode_threshold_percentile))
    return env


# ---------------------------------------------------------- bit-sequence generation

@dataclass(frozen=True)
class BitSeqSpec:
    total_bits: int = 8
    word_bits: int = 2
    modes: tuple[int, ...] | None = None
    num_modes: int = 4
    reward_exponent: float = 1.0
    mode_distance_threshold: int = 2

    def __post_init__(self):
        if self.word_bits < 1 or self.total_bits % self.word_bits:
            raise ValueError("word_bits must divide total_bits")
        if self.reward_exponent <= 0:
            raise ValueError("reward_exponent must be positive")
        if self.modes is not None:
            if len(set(self.modes)) != len(self.modes):
                raise ValueError("modes must be pairwise distinct")
            if any(not 0 <= m < 2**self.total_bits for m in self.modes):
                raise ValueError("mode out of range for total_bits")
        elif not 1 <= self.num_modes <= 2**self.total_bits:
            raise ValueError("num_modes out of range")

    @property
    def num_slots(self) -> int:
        return self.total_bits // self.word_bits


def parse_bits(s: str) -> int:
    return int(s, 2)


def _mode_words(mode: int, spec: BitSeqSpec) -> np.ndarray:
    k, L = spec.word_bits, spec.num_slots
    # slot 0 holds the most significant word
    return np.array([(mode >> (k * (L - 1 - i))) & ((1 << k) - 1) for i in range(L)], dtype=np.int64)


def _popcount(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64)
    out = np.zeros_like(x)
    while np.any(x):
        out += x & 1
        x = x >> 1
    return out


def masked_distances(words: Sequence[int], mode_words: np.ndarray) -> np.ndarray:
    """Bit-level Hamming distance to every mode, ignoring sentinel slots."""
    w = np.asarray(words, dtype=np.int64)
    filled = w != SENTINEL
    diff = np.where(filled[None, :], w[None, :] ^ mode_words, 0)
    return _popcount(diff).sum(axis=1)


@dataclass(eq=False)
class BitSeqEnv(Env):
    spec: BitSeqSpec | None = None
    modes: np.ndarray | None = None
    mode_words: np.ndarray | None = None

    def masked_distances(self, words: Sequence[int]) -> np.ndarray:
        return masked_distances(words, self.mode_words)

    def count_modes(self, samples: Iterable[int]) -> int:
        thr = self.spec.mode_distance_threshold
        found = np.zeros(len(self.modes), dtype=bool)
        for x in {int(x) for x in samples}:
            found |= self.masked_distances(self.graph.labels[x]) < thr
        return int(found.sum())

    def sequence_of(self, x: int) -> int:
        k = self.spec.word_bits
        value = 0
        for w in self.graph.labels[x]:
            value = (value << k) | int(w)
        return value


def build_bitseq(spec: BitSeqSpec, seed: int = 0, max_states: int = MAX_STATES) -> BitSeqEnv:
    """Non-autoregressive bit-sequence DAG: any empty slot may be filled with
    any word. Reward ``exp(-min Hamming distance to a mode) ** beta``."""
    k, L = spec.word_bits, spec.num_slots
    W = 1 << k
    n_states = (W + 1) ** L
    if n_states + 1 > max_states:
        raise StateCountOverflow(f"bit sequences need {n_states + 1} states (cap {max_states})")
    if spec.modes is not None:
        modes = np.array(spec.modes, dtype=np.int64)
    else:
        rng = np.random.default_rng(seed)
        modes = np.sort(rng.choice(2**spec.total_bits, size=spec.num_modes, replace=False)).astype(np.int64)
    mode_words = np.stack([_mode_words(int(m), spec) for m in modes])
    values = [SENTINEL] + list(range(W))
    states = sorted(itertools.product(values, repeat=L),
                    key=lambda s: (sum(v != SENTINEL for v in s), s))
    index = {s: i for i, s in enumerate(states)}
    sink = len(states)
    edges, action = [], []
    for i, s in enumerate(states):
        empty = [j for j, v in enumerate(s) if v == SENTINEL]
        if not empty:
            edges.append((i, sink))
            action.append(L * W)
            continue
        for j in empty:
            for w in range(W):
                t = s[:j] + (w,) + s[j + 1:]
                edges.append((i, index[t]))
                action.append(j * W + w)
    g = DagGraph.from_edges(edges, 0, sink, num_states=sink + 1, labels=states + ["s_f"])
    beta = spec.reward_exponent
    energy = np.full(sink + 1, np.nan)
    for i, s in enumerate(states):
        energy[i] = beta * float(masked_distances(s, mode_words).min())
    log_reward = np.full(sink + 1, np.nan)
    term = np.array([i for i, s in enumerate(states) if SENTINEL not in s])
    log_reward[term] = -energy[term]
    feats = np.zeros((sink + 1, L * (W + 1)))
    for i, s in enumerate(states):
        for j, v in enumerate(s):
            feats[i, j * (W + 1) + (0 if v == SENTINEL else v + 1)] = 1.0
    action_by_edge = dict(zip(edges, action))
    edge_action = np.array([action_by_edge[e] for e in g.edges], dtype=np.int64)
    return BitSeqEnv(g, log_reward, energy, feats, edge_action, L * W + 1,
                     spec=spec, modes=modes, mode_words=mode_words)


def build_env(kind: str, spec=None, seed: int = 0) -> Env:
    """Build an environment from a spec object or a dict of spec fields."""
    if kind not in ("setgen", "bitseq"):
        raise ValueError(f"unknown environment kind {kind!r}")
    cls = SetGenSpec if kind == "setgen" else BitSeqSpec
    if spec is None:
        spec = cls()
    elif isinstance(spec, dict):
        kw = dict(spec)
        for key in ("element_energies", "modes"):
            if kw.get(key) is not None:
                kw[key] = tuple(kw[key])
        spec = cls(**kw)
    return build_setgen(spec, seed) if kind == "setgen" else build_bitseq(spec, seed)


def count_modes(samples: Iterable[int], env: Env) -> int:
    return env.count_modes(samples)


def edge_energy(env: Env, s: int, s2: int) -> float:
    return env.edge_energy(s, s2)
