"""PPO-Clip training with GAE, rollout collection and checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import env
from .core import Instance, makespan
from .instances import GenConfig, generate_sd
from .policy import ReLANet, StateBatch, select_action
from .representation import ScaleConfig

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "rela-checkpoint"
CHECKPOINT_VERSION = 1
GAE_LAMBDA = {"SD1": 0.05, "SD2": 0.2}


class CheckpointError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class PPOConfig:
    gamma: float = 1.0
    gae_lambda: float = 0.05
    clip_eps: float = 0.2
    epochs_per_update: int = 4
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    grad_clip_norm: float = 1.0
    lr: float = 3e-4
    episodes: int = 1000
    envs_per_batch: int = 20
    resample_every: int = 20
    validate_every: int = 10
    val_size: int = 100
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.gae_lambda <= 1:
            raise ValueError(f"gae_lambda must be in (0, 1], got {self.gae_lambda}")
        if not 0 < self.clip_eps < 1:
            raise ValueError(f"clip_eps must be in (0, 1), got {self.clip_eps}")
        for name in ("epochs_per_update", "episodes", "envs_per_batch", "resample_every", "validate_every", "val_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")

    @classmethod
    def for_scheme(cls, scheme: str, **overrides) -> "PPOConfig":
        overrides.setdefault("gae_lambda", GAE_LAMBDA[scheme.upper()])
        return cls(**overrides)

    @classmethod
    def from_file(cls, path: str | Path) -> "PPOConfig":
        doc = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown PPOConfig fields {sorted(unknown)}")
        return cls(**doc)


@dataclass
class Trajectory:
    batch: StateBatch
    actions: np.ndarray  # (T, 2): action row (front op in job order), machine index
    rewards: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    final_state: env.EnvState = field(repr=False, default=None)

    def __len__(self):
        return len(self.actions)

    @property
    def makespan(self) -> int:
        return int(self.final_state.op_end.max())


def run_episodes(net: ReLANet, instances: Sequence, mode: str, rng=None, record: bool = False) -> list:
    """Roll out one episode per instance in lockstep, one batched forward per step.

    ``rng`` is either one generator, whose draws are consumed in instance order
    at every step, or a sequence with one isolated generator per instance.
    Returns final states, or :class:`Trajectory` objects when ``record`` is set.
    """
    rngs = list(rng) if isinstance(rng, (list, tuple)) else [rng] * len(instances)
    states = [env.reset(inst) for inst in instances]
    logs = [{"feats": [], "actions": [], "rewards": [], "logps": [], "values": []} for _ in instances]
    while True:
        active = [i for i, s in enumerate(states) if not s.done]
        if not active:
            break
        feats = [env.extract_features(states[i]) for i in active]
        batch = StateBatch.from_bundles(feats, [states[i].arrays.op_adjacency for i in active])
        out = net.forward(batch)
        B = len(active)
        flat_mask = batch.pair_mask.reshape(B, -1)
        probs = ad.masked_softmax(out.logits.data.reshape(B, -1), flat_mask).data
        M = batch.pair_mask.shape[2]
        for row, i in enumerate(active):
            cand_flat = np.nonzero(flat_mask[row])[0]
            idx, logp = select_action(probs[row, cand_flat], mode, rngs[i])
            r_idx, j = divmod(int(cand_flat[idx]), M)
            g = int(feats[row].front_ops[r_idx])
            a = states[i].arrays
            states[i], r, _ = env.step(states[i], env.CandidatePair(int(a.op_job[g]), int(a.op_k[g]), j))
            if record:
                log_i = logs[i]
                log_i["feats"].append(feats[row])
                log_i["actions"].append((r_idx, j))
                log_i["rewards"].append(r)
                log_i["logps"].append(logp)
                log_i["values"].append(float(out.values.data[row]))
    if not record:
        return states
    trajectories = []
    for state, lg in zip(states, logs):
        T = len(lg["actions"])
        dones = np.zeros(T, dtype=bool)
        dones[-1] = True
        trajectories.append(
            Trajectory(
                StateBatch.from_bundles(lg["feats"], [state.arrays.op_adjacency] * T),
                np.array(lg["actions"], dtype=np.int64).reshape(T, 2),
                np.array(lg["rewards"]),
                np.array(lg["logps"]),
                np.array(lg["values"]),
                dones,
                state,
            )
        )
    return trajectories


def run_episode(net: ReLANet, instance, mode: str, rng=None, record: bool = False):
    return run_episodes(net, [instance], mode, rng, record)[0]


def collect_rollouts(instances: Sequence, net: ReLANet, mode: str = "sampling", rng=None) -> list[Trajectory]:
    return run_episodes(net, instances, mode, rng, record=True)


def gae_advantages(rewards, values, dones, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalised advantage estimation with a zero bootstrap after terminal steps."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    T = len(rewards)
    adv = np.zeros(T)
    running = 0.0
    for t in reversed(range(T)):
        next_value = 0.0 if dones[t] or t == T - 1 else values[t + 1]
        nonterminal = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        running = delta + gamma * lam * nonterminal * running
        adv[t] = running
    return adv, adv + values


@dataclass
class PPOBatch:
    trajectories: list[Trajectory]
    advantages: np.ndarray  # normalised, concatenated over trajectories
    returns: np.ndarray
    old_log_probs: np.ndarray


def prepare_batch(trajectories: Sequence[Trajectory], config: PPOConfig, normalize: bool = True) -> PPOBatch:
    advs, rets = [], []
    for tr in trajectories:
        a, r = gae_advantages(tr.rewards, tr.values, tr.dones, config.gamma, config.gae_lambda)
        advs.append(a)
        rets.append(r)
    adv = np.concatenate(advs)
    if normalize:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return PPOBatch(list(trajectories), adv, np.concatenate(rets), np.concatenate([t.log_probs for t in trajectories]))


def evaluate_policy_terms(net: ReLANet, trajectories: Sequence[Trajectory]):
    """Recompute log-probs of taken actions, entropies and values in one batched forward."""
    batch = StateBatch.concat([tr.batch for tr in trajectories])
    out = net.forward(batch)
    B, J, M = batch.pair_mask.shape
    mask = batch.pair_mask.reshape(B, J * M)
    actions = np.concatenate([tr.actions for tr in trajectories])
    flat = actions[:, 0] * M + actions[:, 1]
    lp_all = ad.masked_log_softmax(ad.reshape(out.logits, (B, J * M)), mask)
    logp = ad.getitem(lp_all, (np.arange(B), flat))
    p = ad.mul(ad.exp(lp_all), mask.astype(float))
    entropy = ad.mul(ad.tsum(ad.mul(p, lp_all), axis=-1), -1.0)
    return logp, entropy, out.values


def ppo_loss(net: ReLANet, batch: PPOBatch, config: PPOConfig, clip_eps: float | None = None) -> dict:
    eps = config.clip_eps if clip_eps is None else clip_eps
    logp, ent, val = evaluate_policy_terms(net, batch.trajectories)
    A = batch.advantages
    ratio = ad.exp(ad.sub(logp, batch.old_log_probs))
    surr = ad.mul(ratio, A)
    if math.isfinite(eps):
        surr = ad.minimum(surr, ad.mul(ad.clip(ratio, 1.0 - eps, 1.0 + eps), A))
    actor = ad.mul(ad.mean(surr), -1.0)
    value = ad.mean(ad.square(ad.sub(val, batch.returns)))
    entropy = ad.mean(ent)
    total = ad.sub(ad.add(actor, ad.mul(value, config.value_coef)), ad.mul(entropy, config.entropy_coef))
    return {"total": total, "actor": actor, "value": value, "entropy": entropy, "ratio": ratio}


def ppo_update(net: ReLANet, trajectories: Sequence[Trajectory], config: PPOConfig) -> dict:
    batch = prepare_batch(trajectories, config)
    report = {"epochs": []}
    for _ in range(config.epochs_per_update):
        net.store.zero_grad()
        with ad.Tape() as tape:
            terms = ppo_loss(net, batch, config)
            total = terms["total"].item()
            if not math.isfinite(total):
                raise TrainingError(
                    f"non-finite loss: actor={terms['actor'].item()} value={terms['value'].item()} "
                    f"entropy={terms['entropy'].item()}"
                )
            tape.backward(terms["total"])
        grad_norm = net.store.clip_grad_norm(config.grad_clip_norm)
        ad.optimizer_step(net.store, config.lr)
        report["epochs"].append(
            {
                "total": total,
                "actor": terms["actor"].item(),
                "value": terms["value"].item(),
                "entropy": terms["entropy"].item(),
                "grad_norm": grad_norm,
            }
        )
    return report


# checkpoints ------------------------------------------------------------------------


def checkpoint_doc(net: ReLANet, meta: dict | None = None) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "fingerprint": net.config.fingerprint(),
        "config": net.config.to_dict(),
        "meta": meta or {},
        **net.store.to_doc(),
    }


def save_checkpoint(net: ReLANet, path: str | Path, meta: dict | None = None):
    Path(path).write_text(json.dumps(checkpoint_doc(net, meta)))


def load_checkpoint(path: str | Path, config: ScaleConfig | None = None, force: bool = False) -> ReLANet:
    try:
        doc = json.loads(Path(path).read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} document")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    try:
        stored_cfg = ScaleConfig.from_dict(doc["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid network config ({exc})") from exc
    if stored_cfg.fingerprint() != doc.get("fingerprint"):
        raise CheckpointError(f"{path}: fingerprint does not match the stored config")
    if config is not None and config.fingerprint() != stored_cfg.fingerprint() and not force:
        raise CheckpointError(
            f"{path}: checkpoint fingerprint {stored_cfg.fingerprint()} does not match "
            f"requested config {config.fingerprint()} (use force to override)"
        )
    net = ReLANet(stored_cfg)
    try:
        net.store.load_doc(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt parameter data ({exc})") from exc
    return net


# training loop ------------------------------------------------------------------------


@dataclass
class TrainResult:
    final: ReLANet
    best: ReLANet
    best_val: float
    curve: list[dict]


def resample_episodes(config: PPOConfig) -> list[int]:
    """Episodes (1-based) at which a fresh training batch is drawn."""
    return list(range(1, config.episodes + 1, config.resample_every))


def validation_episodes(config: PPOConfig) -> list[int]:
    """Episodes (1-based) after which the greedy policy is validated; the last episode always is."""
    points = list(range(config.validate_every, config.episodes + 1, config.validate_every))
    if not points or points[-1] != config.episodes:
        points.append(config.episodes)
    return points


def validation_set(scheme: str, n_jobs: int, n_machines: int, config: PPOConfig) -> list[env.InstanceArrays]:
    gen = GenConfig(scheme, n_jobs, n_machines, seed=20_000 + config.seed)
    return [env.InstanceArrays(generate_sd(gen, k)) for k in range(config.val_size)]


def greedy_mean_makespan(net: ReLANet, instances: Sequence) -> float:
    states = run_episodes(net, instances, "greedy")
    return float(np.mean([s.op_end.max() for s in states]))


def _clone(net: ReLANet) -> ReLANet:
    twin = ReLANet(net.config)
    twin.store.load_doc(net.store.to_doc())
    return twin


def train(
    scheme: str,
    n_jobs: int,
    n_machines: int,
    config: PPOConfig,
    net_config: ScaleConfig | None = None,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Train one policy; one episode is a PPO update on ``envs_per_batch`` parallel instances."""
    net = ReLANet(net_config, seed=config.seed)
    rng = np.random.default_rng(config.seed)
    train_gen = GenConfig(scheme, n_jobs, n_machines, seed=10_000 + config.seed)
    val = validation_set(scheme, n_jobs, n_machines, config)
    curve: list[dict] = []
    best, best_val = None, math.inf
    instances: list = []
    resample_at = set(resample_episodes(config))
    validate_at = set(validation_episodes(config))
    log_file = open(log_path, "w") if log_path else None
    try:
        for episode in range(1, config.episodes + 1):
            if episode in resample_at:
                batch_no = (episode - 1) // config.resample_every
                base = batch_no * config.envs_per_batch
                instances = [env.InstanceArrays(generate_sd(train_gen, base + k)) for k in range(config.envs_per_batch)]
            trajectories = collect_rollouts(instances, net, "sampling", rng)
            report = ppo_update(net, trajectories, config)
            if episode in validate_at:
                score = greedy_mean_makespan(net, val)
                last = report["epochs"][-1]
                record = {
                    "episode": episode,
                    "val_makespan": score,
                    "train_makespan": float(np.mean([t.final_state.op_end.max() for t in trajectories])),
                    "actor_loss": last["actor"],
                    "value_loss": last["value"],
                }
                curve.append(record)
                if log_file:
                    log_file.write(json.dumps(record) + "\n")
                    log_file.flush()
                log.info("episode %d val %.3f", episode, score)
                if score < best_val:
                    best_val, best = score, _clone(net)
    finally:
        if log_file:
            log_file.close()
    return TrainResult(net, best if best is not None else _clone(net), best_val, curve)
