"""DQN training for HMAGQ-Net: targets, loss, TRR, target sync, train/eval loops."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .env import EnvConfig, Skirmish, random_policy
from .errors import ConfigError, DivergenceError
from .graph import StateGraph
from .model import (ForwardOutput, GraphBatch, ModelConfig, Params, clone_params, forward,
                    infer_config, init_params, select_actions)
from .numerics import AdamState, GradTape, Tensor
from .replay import PrioritizedReplay, Transition

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    total_steps: int = 1_000_000
    target_update_interval: int = 250
    lr: float = 2.5e-4
    l2_coef: float = 1e-5
    trr_coef: float = 0.01
    gamma: float = 0.99
    eps_max: float = 0.95
    eps_min: float = 0.1
    eps_decay_fraction: float = 0.5
    per_alpha: float = 0.6
    per_beta: float = 0.4
    per_beta_anneal: bool = False
    batch_size: int = 32
    buffer_capacity: int = 50_000
    warmup_steps: int = 0
    comms: str = "rgcn"
    frf: bool = False
    fac: bool = False
    trr: bool = False
    num_bases: int = 4
    seed: int = 0
    obs_radius: float = 8.0
    step_limit: int = 100
    checkpoint_interval: int = 10_000
    record_wall_time: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0 <= self.gamma < 1:
            raise ConfigError(f"gamma must satisfy 0 <= gamma < 1, got {self.gamma}")
        if self.eps_min > self.eps_max:
            raise ConfigError("eps_min must not exceed eps_max")
        if not (0 <= self.eps_min and self.eps_max <= 1):
            raise ConfigError("epsilon bounds must lie in [0, 1]")
        if self.comms not in ("rgcn", "gat"):
            raise ConfigError(f"comms must be 'rgcn' or 'gat', got {self.comms!r}")
        if self.trr and self.comms != "gat":
            raise ConfigError("trr requires comms = gat (it regularizes attention weights)")
        for name in ("total_steps", "target_update_interval", "batch_size", "buffer_capacity",
                     "step_limit", "checkpoint_interval"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    def env_config(self) -> EnvConfig:
        return EnvConfig(obs_radius=self.obs_radius, full_agent_comm=self.fac,
                         step_limit=self.step_limit)

    def model_config(self, env: Skirmish) -> ModelConfig:
        return ModelConfig(env.class_table, comms=self.comms, frf=self.frf,
                           num_bases=self.num_bases)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_types(cls) -> dict[str, type]:
        return {f.name: type(f.default) for f in fields(cls)}


@dataclass
class TrainMetrics:
    episode: int
    steps_alive: int
    mean_agent_reward: float
    epsilon: float
    mean_loss: float
    wall_seconds: float


# ---------------------------------------------------------------- schedule


def epsilon(step: int, config: TrainConfig) -> float:
    """Linear decay from eps_max to eps_min over the first part of training."""
    end = config.total_steps * config.eps_decay_fraction
    if end <= 0 or step >= end:
        return config.eps_min
    frac = max(step, 0) / end
    return config.eps_max + frac * (config.eps_min - config.eps_max)


# ---------------------------------------------------------------- targets and loss


def td_targets(batch: Sequence[Transition], target_params: Mapping[str, Tensor],
               model_cfg: ModelConfig, gamma: float,
               target_out: ForwardOutput | None = None) -> list[dict[int, float]]:
    """Per-agent bootstrapped targets, using valid next actions only.

    Agents that are dead in ``s_next`` (or whose episode ended) get ``y = r``.
    """
    need = [i for i, t in enumerate(batch) if not t.done]
    nextq: dict[tuple[int, int], np.ndarray] = {}
    if need and gamma > 0:
        if target_out is None:
            target_out = forward([batch[i].s_next for i in need], target_params, model_cfg,
                                 check=False)
        for k, i in enumerate(need):
            for a, q in target_out.per_agent(k).items():
                nextq[(i, a)] = q
    out = []
    for i, t in enumerate(batch):
        ys = {}
        for a, r in t.rewards.items():
            q = nextq.get((i, a))
            if t.done or q is None or gamma == 0:
                ys[a] = float(r)
            else:
                m = np.asarray(t.next_masks[a], dtype=bool)
                ys[a] = float(r) + gamma * float(np.max(q[m]))
        out.append(ys)
    return out


def kl_divergence(p, q) -> float:
    """KL(p || q) for discrete distributions, with 0 log 0 = 0."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / q[nz])))


def trr_penalty(policy_out: ForwardOutput, target_out: ForwardOutput,
                agent_rows: np.ndarray) -> Tensor:
    """Mean over agents and heads of KL(target attention || policy attention).

    Both outputs must come from graphs sharing the same arcs so the attention
    supports line up; only ``agent_rows`` (union node ids) are counted.
    """
    if not policy_out.attention or not target_out.attention:
        raise ConfigError("temporal relation regularization needs an attention (gat) model")
    pa, ta = policy_out.attention[-1], target_out.attention[-1]
    if len(agent_rows) == 0:
        return Tensor(0.0)
    n = policy_out.batch.num_nodes
    q = ta.weights.data
    logp = nx.log(pa.weights + 1e-12)
    terms = nx.mul(q, nx.log(q + 1e-12)) - nx.mul(logp, q)
    per_node = nx.segment_sum(terms, pa.dst, n)
    picked = nx.gather_rows(per_node, agent_rows)
    return nx.mean(picked)


@dataclass
class LossResult:
    loss: Tensor
    td_errors: list[np.ndarray]  # per transition, one entry per live agent of s
    targets: list[dict[int, float]]


def compute_loss(batch: Sequence[Transition], params: Mapping[str, Tensor],
                 target_params: Mapping[str, Tensor], weights: Sequence[float],
                 model_cfg: ModelConfig, gamma: float, trr_coef: float = 0.0) -> LossResult:
    """Importance-weighted batch mean of the per-class averaged squared TD error.

    For each transition the error is ``sum_c (1/|Z|) sum_{z in c} delta_z**2``.
    With ``trr_coef > 0`` a TRR penalty is added (gat models only).
    """
    table = model_cfg.class_table
    nz = len(table.agent_classes)
    w = np.asarray(weights, dtype=np.float64)
    ys = td_targets(batch, target_params, model_cfg, gamma)
    out = forward([t.s for t in batch], params, model_cfg, check=False)
    b = out.batch
    dt = nx.default_dtype()
    total = None
    td: list[list[float]] = [[] for _ in batch]
    for c, q in out.q.items():
        owner, local = b.agent_graph[c], b.agent_local[c]
        acts = np.array([batch[i].actions[int(a)] for i, a in zip(owner, local)], dtype=np.int64)
        y = np.array([ys[i][int(a)] for i, a in zip(owner, local)], dtype=dt)
        chosen = nx.pick(q, np.arange(len(acts)), acts)
        delta = nx.sub(y, chosen)
        scale = (w[owner] / (nz * len(batch))).astype(dt)
        term = nx.sum(nx.mul(nx.square(delta), scale))
        total = term if total is None else total + term
        for i, d in zip(owner, delta.data):
            td[i].append(float(d))
    if total is None:
        total = Tensor(0.0)
    if trr_coef:
        total = total + nx.mul(_trr_term(batch, out, target_params, model_cfg), trr_coef)
    if not np.isfinite(total.item()):
        bad = next((i for i, d in enumerate(td) if not np.all(np.isfinite(d))), None)
        raise DivergenceError(f"non-finite loss (offending transition index: {bad})")
    return LossResult(total, [np.asarray(d) for d in td], ys)


def _trr_term(batch: Sequence[Transition], policy_out: ForwardOutput,
              target_params: Mapping[str, Tensor], model_cfg: ModelConfig) -> Tensor:
    # next-state features on the current arcs, so both attention maps share support
    hybrid = [StateGraph(t.s_next.node_classes, t.s_next.features, t.s.arcs, t.s.agent_ids)
              for t in batch]
    target_out = forward(GraphBatch(hybrid, model_cfg.class_table, check=False),
                         target_params, model_cfg, check=False)
    b = policy_out.batch
    rows = [int(off + a) for t, off in zip(batch, b.offsets)
            for a in t.s.agent_ids if a in set(t.s_next.agent_ids)]
    return trr_penalty(policy_out, target_out, np.asarray(rows, dtype=np.int64))


def sync_target(params: Mapping[str, Tensor]) -> Params:
    """Bit-exact copy of the policy parameters."""
    return clone_params(params)


# ---------------------------------------------------------------- training loop


@dataclass
class Trainer:
    """Owns the environment, both networks, the buffer and the optimizer."""

    config: TrainConfig
    on_checkpoint: Callable[[Params, str], None] | None = None
    params: Params = field(init=False)
    target: Params = field(init=False)
    optimizer_steps: int = field(init=False, default=0)
    sync_count: int = field(init=False, default=0)

    def __post_init__(self):
        cfg = self.config
        cfg.validate()
        self.env = Skirmish(cfg.env_config())
        self.model_cfg = cfg.model_config(self.env)
        self.rng = np.random.default_rng(cfg.seed)
        self.params = init_params(self.model_cfg, np.random.default_rng([cfg.seed, 1]))
        self.target = sync_target(self.params)
        self.adam = AdamState.for_params(self.params)
        self.buffer = PrioritizedReplay(cfg.buffer_capacity, cfg.per_alpha)

    def _beta(self, step: int) -> float:
        cfg = self.config
        if not cfg.per_beta_anneal:
            return cfg.per_beta
        return cfg.per_beta + (1.0 - cfg.per_beta) * min(1.0, step / cfg.total_steps)

    def learn(self, step: int) -> float:
        cfg = self.config
        batch, weights, ids = self.buffer.sample(cfg.batch_size, cfg.per_alpha,
                                                 self._beta(step), self.rng)
        trr = cfg.trr_coef if cfg.trr else 0.0
        leaves = {k: nx.param(v.data, k) for k, v in self.params.items()}
        with GradTape() as tape:
            res = compute_loss(batch, leaves, self.target, weights, self.model_cfg,
                               cfg.gamma, trr)
        grads = nx.backward(tape, res.loss, leaves)
        self.params, self.adam = nx.adam_update(self.params, grads, self.adam, cfg.lr,
                                                cfg.l2_coef)
        self.buffer.update_priorities(ids, [float(np.mean(np.abs(d))) for d in res.td_errors])
        self.optimizer_steps += 1
        return res.loss.item()

    def run(self) -> Iterator[TrainMetrics]:
        # the mode stays on between yields; it only affects subnormal floats
        with nx.flush_denormals():
            yield from self._run()

    def _run(self) -> Iterator[TrainMetrics]:
        cfg = self.config
        env = self.env
        start = time.perf_counter()
        state, graph, masks = env.reset(int(self.rng.integers(2**31)))
        episode, ep_reward, losses = 0, 0.0, []
        for step in range(1, cfg.total_steps + 1):
            eps = epsilon(step - 1, cfg)
            q = forward(graph, self.params, self.model_cfg).per_agent(0)
            actions = select_actions(q, {a: masks[a] for a in graph.agent_ids}, eps, self.rng)
            res = env.step(state, actions)
            self.buffer.push(Transition(graph, actions, res.graph, res.rewards, res.done,
                                        res.masks))
            ep_reward += sum(res.rewards.values())
            if step > cfg.warmup_steps and len(self.buffer) >= cfg.batch_size:
                try:
                    losses.append(self.learn(step))
                except DivergenceError:
                    if self.on_checkpoint:
                        self.on_checkpoint(self.params, "diverged")
                    raise
            if step % cfg.target_update_interval == 0:
                self.target = sync_target(self.params)
                self.sync_count += 1
            if self.on_checkpoint and step % cfg.checkpoint_interval == 0:
                self.on_checkpoint(self.params, f"step{step}")
            state, graph, masks = res.state, res.graph, res.masks
            if res.done:
                wall = time.perf_counter() - start if cfg.record_wall_time else 0.0
                yield TrainMetrics(episode, state.step, ep_reward / env.n_allies, eps,
                                   float(np.mean(losses)) if losses else 0.0, wall)
                episode += 1
                ep_reward, losses = 0.0, []
                state, graph, masks = env.reset(int(self.rng.integers(2**31)))
        if self.on_checkpoint:
            self.on_checkpoint(self.params, "final")


@dataclass
class TrainResult:
    metrics: list[TrainMetrics]
    params: Params
    optimizer_steps: int
    sync_count: int


def train(config: TrainConfig, on_checkpoint: Callable[[Params, str], None] | None = None,
          on_metrics: Callable[[TrainMetrics], None] | None = None) -> TrainResult:
    trainer = Trainer(config, on_checkpoint)
    metrics = []
    for m in trainer.run():
        metrics.append(m)
        if on_metrics:
            on_metrics(m)
    return TrainResult(metrics, trainer.params, trainer.optimizer_steps, trainer.sync_count)


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalSummary:
    episodes: list[TrainMetrics]
    mean_steps_all: float
    mean_reward_all: float
    mean_steps_last10: float
    mean_reward_last10: float


def last_window(n: int, fraction: float = 0.1) -> int:
    """Number of trailing episodes in the "last 10%" window."""
    return max(1, int(math.ceil(n * fraction - 1e-9))) if n else 0


def summarize(episodes: list[TrainMetrics]) -> EvalSummary:
    k = last_window(len(episodes))
    tail = episodes[-k:] if k else []

    def avg(rows, attr):
        return float(np.mean([getattr(r, attr) for r in rows])) if rows else float("nan")

    return EvalSummary(episodes, avg(episodes, "steps_alive"), avg(episodes, "mean_agent_reward"),
                       avg(tail, "steps_alive"), avg(tail, "mean_agent_reward"))


def _episode_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def run_episodes(policy: Callable, episodes: int, seed: int, env_cfg: EnvConfig,
                 eps_value: float = 0.0) -> list[TrainMetrics]:
    env = Skirmish(env_cfg)
    rng = np.random.default_rng([seed, 7])
    rows = []
    with nx.flush_denormals():
        for k in range(episodes):
            state, graph, masks = env.reset(_episode_seed(seed, k))
            total = 0.0
            while True:
                live = {a: masks[a] for a in graph.agent_ids}
                res = env.step(state, policy(graph, live, rng))
                total += sum(res.rewards.values())
                state, graph, masks = res.state, res.graph, res.masks
                if res.done:
                    break
            rows.append(TrainMetrics(k, state.step, total / env.n_allies, eps_value, 0.0, 0.0))
    return rows


def evaluate(params: Mapping[str, Tensor], episodes: int, seed: int,
             env_cfg: EnvConfig | None = None, model_cfg: ModelConfig | None = None
             ) -> EvalSummary:
    """Greedy (epsilon = 0) rollouts of a trained network."""
    env_cfg = env_cfg or EnvConfig()
    env = Skirmish(env_cfg)
    model_cfg = model_cfg or infer_config(params, env.class_table)

    def greedy(graph, masks, rng):
        q = forward(graph, params, model_cfg).per_agent(0)
        return select_actions(q, masks, 0.0, rng)

    return summarize(run_episodes(greedy, episodes, seed, env_cfg))


def baseline(episodes: int, seed: int, env_cfg: EnvConfig | None = None) -> EvalSummary:
    """Agents that pick uniformly among their valid actions."""
    return summarize(run_episodes(lambda g, m, rng: random_policy(m, rng), episodes, seed,
                                  env_cfg or EnvConfig(), eps_value=1.0))
