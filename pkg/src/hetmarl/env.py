"""A small two-team grid battle with heterogeneous unit classes.

Allies are learning agents; enemies follow a scripted policy and show up in
the state graph as non-agent entity classes. Two unit types ship by default,
a fast long-range fragile one and a slow armoured melee one, in a 2 + 3
composition per side.

Unit ids are stable for the whole episode: allies take ``0..na-1`` and
enemies ``na..na+ne-1``. Graph node ids equal unit ids and dead units stay in
the graph as isolated nodes with zero hp.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import IO, Mapping

import numpy as np

from .errors import ConfigError, ContractError
from .graph import ClassTable, NodeClass, StateGraph, build_relations, to_text

# (dx, dy) for action ids 0..3
MOVES = ((0, 1), (0, -1), (1, 0), (-1, 0))
ALLY, ENEMY = 0, 1


@dataclass(frozen=True)
class UnitSpec:
    name: str
    max_hp: float
    move_speed: int
    attack_range: float
    attack_damage: float
    cooldown: int
    team_flag_feature: bool = False

    @property
    def feature_width(self) -> int:
        return 5 if self.team_flag_feature else 4


RANGED = UnitSpec("ranged", max_hp=80.0, move_speed=2, attack_range=5.0,
                  attack_damage=10.0, cooldown=2, team_flag_feature=True)
MELEE = UnitSpec("melee", max_hp=150.0, move_speed=1, attack_range=1.0,
                 attack_damage=8.0, cooldown=1)


@dataclass(frozen=True)
class EnvConfig:
    allies: tuple[str, ...] = ("ranged", "ranged", "melee", "melee", "melee")
    enemies: tuple[str, ...] = ("ranged", "ranged", "melee", "melee", "melee")
    units: Mapping[str, UnitSpec] = field(
        default_factory=lambda: {"ranged": RANGED, "melee": MELEE})
    width: int = 16
    height: int = 16
    step_limit: int = 100
    obs_radius: float = 8.0
    full_agent_comm: bool = False
    # inclusive (x0, x1, y0, y1) spawn rectangles
    ally_zone: tuple[int, int, int, int] = (1, 3, 5, 10)
    enemy_zone: tuple[int, int, int, int] = (12, 14, 5, 10)


@dataclass
class BattleState:
    team: np.ndarray
    kind: tuple[str, ...]
    pos: np.ndarray
    hp: np.ndarray
    cooldown: np.ndarray
    step: int = 0
    done: bool = False

    def copy(self) -> "BattleState":
        return replace(self, pos=self.pos.copy(), hp=self.hp.copy(),
                       cooldown=self.cooldown.copy())

    def __eq__(self, other) -> bool:
        if not isinstance(other, BattleState):
            return NotImplemented
        return (self.kind == other.kind and self.step == other.step
                and self.done == other.done and np.array_equal(self.team, other.team)
                and np.array_equal(self.pos, other.pos) and np.array_equal(self.hp, other.hp)
                and np.array_equal(self.cooldown, other.cooldown))

    @property
    def alive(self) -> np.ndarray:
        return self.hp > 0


@dataclass
class StepResult:
    state: BattleState
    graph: StateGraph
    rewards: dict[int, float]
    masks: dict[int, np.ndarray]
    done: bool
    victory: bool = False


def _distance(a, b) -> float:
    return math.hypot(float(a[0] - b[0]), float(a[1] - b[1]))


class Skirmish:
    """Environment dynamics; ``reset`` and ``step`` never mutate their inputs."""

    def __init__(self, config: EnvConfig | None = None, trace: IO[str] | None = None):
        self.config = config or EnvConfig()
        cfg = self.config
        if len(cfg.allies) < 1 or len(cfg.enemies) < 1:
            raise ConfigError("each team needs at least one unit")
        for k in (*cfg.allies, *cfg.enemies):
            if k not in cfg.units:
                raise ConfigError(f"unknown unit type {k!r}")
        for s in {cfg.units[k] for k in (*cfg.allies, *cfg.enemies)}:
            if min(s.max_hp, s.move_speed, s.attack_range, s.attack_damage, s.cooldown) <= 0:
                raise ConfigError(f"unit spec {s.name!r} must have positive stats")
        for zone, n in ((cfg.ally_zone, len(cfg.allies)), (cfg.enemy_zone, len(cfg.enemies))):
            x0, x1, y0, y1 = zone
            if not (0 <= x0 <= x1 < cfg.width and 0 <= y0 <= y1 < cfg.height):
                raise ConfigError(f"spawn zone {zone} outside the grid")
            if (x1 - x0 + 1) * (y1 - y0 + 1) < n:
                raise ConfigError(f"spawn zone {zone} too small for {n} units")
        self.trace = trace
        self.n_allies = len(cfg.allies)
        self.n_enemies = len(cfg.enemies)
        self.n_actions = 4 + self.n_enemies + 1
        self.noop = self.n_actions - 1

        ally_kinds = list(dict.fromkeys(cfg.allies))
        enemy_kinds = list(dict.fromkeys(cfg.enemies))
        classes = [NodeClass(k, cfg.units[k].feature_width, True, self.n_actions)
                   for k in ally_kinds]
        classes += [NodeClass(f"enemy_{k}", cfg.units[k].feature_width, False)
                    for k in enemy_kinds]
        self.class_table = ClassTable(tuple(classes))
        self.relations = build_relations(self.class_table)
        self.unit_class = np.array(
            [ally_kinds.index(k) for k in cfg.allies]
            + [len(ally_kinds) + enemy_kinds.index(k) for k in cfg.enemies], dtype=np.int64)
        self.enemy_max_hp_total = float(sum(cfg.units[k].max_hp for k in cfg.enemies))

    # ------------------------------------------------------------ lifecycle

    def reset(self, seed: int | None = None) -> tuple[BattleState, StateGraph, dict[int, np.ndarray]]:
        cfg = self.config
        rng = np.random.default_rng(seed)
        positions = []
        for zone, n in ((cfg.ally_zone, self.n_allies), (cfg.enemy_zone, self.n_enemies)):
            x0, x1, y0, y1 = zone
            cells = [(x, y) for x in range(x0, x1 + 1) for y in range(y0, y1 + 1)]
            picks = rng.choice(len(cells), size=n, replace=False)
            positions += [cells[i] for i in picks]
        kinds = (*cfg.allies, *cfg.enemies)
        state = BattleState(
            team=np.array([ALLY] * self.n_allies + [ENEMY] * self.n_enemies, dtype=np.int64),
            kind=kinds,
            pos=np.array(positions, dtype=np.int64),
            hp=np.array([cfg.units[k].max_hp for k in kinds], dtype=np.float64),
            cooldown=np.zeros(len(kinds), dtype=np.int64),
        )
        graph = self.to_graph(state)
        self._trace(graph)
        return state, graph, self.valid_actions(state)

    def step(self, state: BattleState, actions: Mapping[int, int]) -> StepResult:
        if state.done:
            raise ContractError("episode is done; call reset")
        masks = self.valid_actions(state)
        alive = state.alive
        for a in range(self.n_allies):
            if alive[a] and a not in actions:
                raise ContractError(f"no action given for live agent {a}")
        for a, act in actions.items():
            if a not in masks:
                raise ContractError(f"agent {a} is not an ally agent")
            if not (0 <= act < self.n_actions) or not masks[a][act]:
                raise ContractError(f"agent {a}: action {act} is not valid")

        cfg = self.config
        nxt = state.copy()
        n_units = len(state.kind)
        moves: dict[int, tuple[int, int]] = {}
        attacks: dict[int, int] = {}
        for a in range(self.n_allies):
            if not alive[a]:
                continue
            act = int(actions[a])
            if act < 4:
                dx, dy = MOVES[act]
                sp = cfg.units[state.kind[a]].move_speed
                moves[a] = (state.pos[a, 0] + dx * sp, state.pos[a, 1] + dy * sp)
            elif act < self.noop:
                attacks[a] = self.n_allies + act - 4
        for e in range(self.n_allies, n_units):
            if alive[e]:
                kind, target = self._enemy_decision(state, e)
                if kind == "attack":
                    attacks[e] = target
                elif kind == "move":
                    moves[e] = target

        # moves first, in unit id order; a blocked move leaves the unit in place
        occupied = {tuple(p) for i, p in enumerate(state.pos.tolist()) if alive[i]}
        for u in sorted(moves):
            dest = tuple(int(v) for v in moves[u])
            if dest in occupied:
                continue
            occupied.discard(tuple(int(v) for v in nxt.pos[u]))
            occupied.add(dest)
            nxt.pos[u] = dest

        rewards = {a: 0.0 for a in range(self.n_allies) if alive[a]}
        fired = np.zeros(n_units, dtype=bool)
        for u in sorted(attacks):
            t = attacks[u]
            spec = cfg.units[state.kind[u]]
            if _distance(nxt.pos[u], nxt.pos[t]) > spec.attack_range:
                continue
            fired[u] = True
            dealt = min(spec.attack_damage, nxt.hp[t])
            nxt.hp[t] -= dealt
            if u < self.n_allies:
                rewards[u] += dealt / self.enemy_max_hp_total
                if dealt > 0 and nxt.hp[t] <= 0:
                    rewards[u] += 0.5
        nxt.hp = np.maximum(nxt.hp, 0.0)
        # a unit with cooldown c attacks at most once every c steps
        for u in range(n_units):
            if fired[u]:
                nxt.cooldown[u] = cfg.units[state.kind[u]].cooldown - 1
            else:
                nxt.cooldown[u] = max(0, nxt.cooldown[u] - 1)
        nxt.cooldown[nxt.hp <= 0] = 0
        nxt.step = state.step + 1

        allies_left = bool(np.any(nxt.hp[:self.n_allies] > 0))
        enemies_left = bool(np.any(nxt.hp[self.n_allies:] > 0))
        victory = allies_left and not enemies_left
        if victory:
            for a in rewards:
                rewards[a] += 1.0
        nxt.done = (not allies_left) or (not enemies_left) or nxt.step >= cfg.step_limit
        graph = self.to_graph(nxt)
        self._trace(graph)
        return StepResult(nxt, graph, rewards, self.valid_actions(nxt), nxt.done, victory)

    # ------------------------------------------------------------ scripted enemies

    def _enemy_decision(self, state: BattleState, e: int):
        spec = self.config.units[state.kind[e]]
        alive = state.alive
        best, best_d = None, math.inf
        for a in range(self.n_allies):
            if alive[a]:
                d = _distance(state.pos[e], state.pos[a])
                if d < best_d:
                    best, best_d = a, d
        if best is None:
            return "hold", None
        if best_d <= spec.attack_range:
            return ("attack", best) if state.cooldown[e] == 0 else ("hold", None)
        occupied = {tuple(p) for i, p in enumerate(state.pos.tolist()) if alive[i]}
        target = state.pos[best]
        choice, choice_d = None, best_d
        for dx, dy in MOVES:
            for k in range(1, spec.move_speed + 1):
                dest = (int(state.pos[e, 0] + dx * k), int(state.pos[e, 1] + dy * k))
                if not self._in_bounds(dest) or dest in occupied:
                    continue
                d = _distance(dest, target)
                if d < choice_d - 1e-12:
                    choice, choice_d = dest, d
        return ("move", choice) if choice is not None else ("hold", None)

    # ------------------------------------------------------------ observations

    def _in_bounds(self, p) -> bool:
        return 0 <= p[0] < self.config.width and 0 <= p[1] < self.config.height

    def valid_actions(self, state: BattleState) -> dict[int, np.ndarray]:
        """Mask per ally agent; dead agents may only no-op."""
        cfg = self.config
        alive = state.alive
        occupied = {tuple(p) for i, p in enumerate(state.pos.tolist()) if alive[i]}
        masks = {}
        for a in range(self.n_allies):
            m = np.zeros(self.n_actions, dtype=bool)
            m[self.noop] = True
            if alive[a] and not state.done:
                spec = cfg.units[state.kind[a]]
                for i, (dx, dy) in enumerate(MOVES):
                    dest = (int(state.pos[a, 0] + dx * spec.move_speed),
                            int(state.pos[a, 1] + dy * spec.move_speed))
                    m[i] = self._in_bounds(dest) and dest not in occupied
                if state.cooldown[a] == 0:
                    for k in range(self.n_enemies):
                        e = self.n_allies + k
                        m[4 + k] = bool(alive[e]) and \
                            _distance(state.pos[a], state.pos[e]) <= spec.attack_range
            masks[a] = m
        return masks

    def node_features(self, state: BattleState, u: int) -> np.ndarray:
        cfg = self.config
        spec = cfg.units[state.kind[u]]
        f = [state.hp[u] / spec.max_hp, state.pos[u, 0] / cfg.width,
             state.pos[u, 1] / cfg.height, state.cooldown[u] / spec.cooldown]
        if spec.team_flag_feature:
            f.append(1.0 if state.team[u] == ALLY else 0.0)
        return np.asarray(f, dtype=np.float32)

    def to_graph(self, state: BattleState, obs_radius: float | None = None,
                 full_agent_comm: bool | None = None) -> StateGraph:
        """Arc j -> z for every live node j within ``obs_radius`` of live ally z."""
        cfg = self.config
        radius = cfg.obs_radius if obs_radius is None else obs_radius
        fac = cfg.full_agent_comm if full_agent_comm is None else full_agent_comm
        alive = state.alive
        n = len(state.kind)
        live_allies = [a for a in range(self.n_allies) if alive[a]]
        arcs = []
        for z in live_allies:
            cz = self.unit_class[z]
            for j in range(n):
                if j == z or not alive[j]:
                    continue
                near = _distance(state.pos[j], state.pos[z]) <= radius
                if near or (fac and j < self.n_allies):
                    arcs.append((j, z, self.relations[(cz, self.unit_class[j])]))
        feats = tuple(self.node_features(state, u) for u in range(n))
        return StateGraph(self.unit_class.copy(), feats,
                          np.asarray(arcs, dtype=np.int64).reshape(-1, 3), tuple(live_allies))

    def _trace(self, graph: StateGraph) -> None:
        if self.trace is not None:
            # one record per state, blank-line separated
            self.trace.write(to_text(graph) + "\n")


def random_policy(masks: Mapping[int, np.ndarray], rng: np.random.Generator) -> dict[int, int]:
    """Uniform choice among each agent's valid actions."""
    out = {}
    for a, m in masks.items():
        valid = np.flatnonzero(m)
        if valid.size == 0:
            raise ContractError(f"agent {a} has no valid action")
        out[a] = int(valid[rng.integers(valid.size)])
    return out
