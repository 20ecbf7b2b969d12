"""Clipped-surrogate policy optimisation with GAE, batched by whole episodes."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ..nn import AdamState, adam_step, clip_by_global_norm
from .agent import ActorCritic, load_checkpoint, save_checkpoint
from .env import Trajectory, episode


@dataclass(frozen=True)
class PpoConfig:
    episodes: int = 1200
    batch: int = 25  # episodes per update
    lr: float = 5e-4
    entropy_coef: float = 0.01
    gamma: float = 0.95
    clip: float = 0.2
    lam: float = 0.95
    epochs: int = 10
    minibatch: int = 512
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    r_max: float = 4.0
    hidden: tuple[int, ...] = (256, 256)
    log_std_init: float = math.log(0.3)
    seed: int = 0  # policy init, sampling and minibatch shuffling

    def __post_init__(self):
        if self.episodes < 0 or self.batch < 1 or self.epochs < 1 or self.minibatch < 1:
            raise ValueError("episodes >= 0, batch, epochs and minibatch >= 1 required")
        if not (0.0 < self.gamma <= 1.0 and 0.0 <= self.lam <= 1.0):
            raise ValueError("gamma must lie in (0, 1], lambda in [0, 1]")
        if self.lr <= 0 or self.clip <= 0:
            raise ValueError("lr and clip must be positive")


def gae(rewards, values, gamma: float, lam: float, last_value: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Advantages and return targets; ``last_value`` bootstraps past the final step."""
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    if r.shape != v.shape or r.ndim != 1:
        raise ValueError(f"rewards {r.shape} and values {v.shape} must be equal-length vectors")
    adv = np.zeros_like(r)
    running = 0.0
    for t in reversed(range(len(r))):
        nxt = v[t + 1] if t + 1 < len(r) else last_value
        delta = r[t] + gamma * nxt - v[t]
        running = delta + gamma * lam * running
        adv[t] = running
    return adv, adv + v


def normalize(adv: np.ndarray) -> np.ndarray:
    if adv.size < 2:
        return adv - adv.mean()
    std = adv.std()
    return (adv - adv.mean()) / (std if std > 1e-12 else 1.0)


@dataclass
class Batch:
    states: np.ndarray
    raw: np.ndarray
    logp_old: np.ndarray
    adv: np.ndarray
    returns: np.ndarray

    def __len__(self) -> int:
        return len(self.raw)

    def take(self, idx) -> "Batch":
        return Batch(self.states[idx], self.raw[idx], self.logp_old[idx], self.adv[idx], self.returns[idx])


def make_batch(trajs: list[Trajectory], gamma: float, lam: float) -> Batch:
    advs, rets = [], []
    for tr in trajs:
        a, r = gae(tr.rewards, tr.values, gamma, lam)
        advs.append(a)
        rets.append(r)
    return Batch(
        states=np.vstack([np.atleast_2d(np.asarray(tr.states)) for tr in trajs if len(tr)]),
        raw=np.concatenate([tr.raw for tr in trajs]),
        logp_old=np.concatenate([tr.logp for tr in trajs]),
        adv=normalize(np.concatenate(advs)),
        returns=np.concatenate(rets),
    )


def clipped_objective(ratio: np.ndarray, adv: np.ndarray, clip: float) -> np.ndarray:
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv)


def surrogate(ac: ActorCritic, b: Batch, clip: float) -> float:
    """Mean clipped surrogate of ``ac`` on a batch (no entropy term)."""
    mu = ac.mean(b.states)
    ratio = np.exp(ac.log_prob(b.raw, mu) - b.logp_old)
    return float(np.mean(clipped_objective(ratio, b.adv, clip)))


def actor_loss_and_grads(ac: ActorCritic, b: Batch, clip: float, entropy_coef: float):
    """Loss = -mean(clipped surrogate) - entropy_coef * entropy, with gradients."""
    mu, cache = ac.actor.forward(b.states)
    mu = mu[:, 0]
    sigma = ac.std
    z = (b.raw - mu) / sigma
    logp = -0.5 * z * z - ac.log_std[0] - 0.5 * math.log(2 * math.pi)
    ratio = np.exp(logp - b.logp_old)
    obj = clipped_objective(ratio, b.adv, clip)
    loss = -float(obj.mean()) - entropy_coef * ac.entropy()
    # the unclipped branch carries the gradient; clipped samples contribute nothing
    active = np.where(b.adv >= 0, ratio <= 1.0 + clip, ratio >= 1.0 - clip)
    dlogp = -(ratio * b.adv * active) / len(b)
    grads, _ = ac.actor.backward(cache, (dlogp * z / sigma)[:, None])
    g_logstd = np.array([float(np.sum(dlogp * (z * z - 1.0))) - entropy_coef])
    stats = {
        "actor_loss": loss,
        "clip_frac": float(np.mean(np.abs(ratio - 1.0) > clip)),
        "approx_kl": float(np.mean(b.logp_old - logp)),
    }
    return loss, grads + [g_logstd], stats


def critic_loss_and_grads(ac: ActorCritic, b: Batch, value_coef: float):
    v, cache = ac.critic.forward(b.states)
    err = v[:, 0] - b.returns
    loss = value_coef * float(np.mean(err * err))
    grads, _ = ac.critic.backward(cache, (2.0 * value_coef * err / len(b))[:, None])
    return loss, grads


@dataclass
class Optimizers:
    actor: AdamState
    critic: AdamState

    @classmethod
    def for_model(cls, ac: ActorCritic) -> "Optimizers":
        return cls(AdamState.like(ac.actor_params()), AdamState.like(ac.critic.params))

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"opt.actor.t": np.array([self.actor.t]), "opt.critic.t": np.array([self.critic.t])}
        for name, st in (("actor", self.actor), ("critic", self.critic)):
            for i, (m, v) in enumerate(zip(st.m, st.v)):
                out[f"opt.{name}.m{i}"] = m
                out[f"opt.{name}.v{i}"] = v
        return out

    @classmethod
    def from_arrays(cls, ac: ActorCritic, d: dict[str, np.ndarray]) -> "Optimizers":
        opt = cls.for_model(ac)
        for name, st in (("actor", opt.actor), ("critic", opt.critic)):
            st.t = int(d[f"opt.{name}.t"][0])
            st.m = [np.array(d[f"opt.{name}.m{i}"]) for i in range(len(st.m))]
            st.v = [np.array(d[f"opt.{name}.v{i}"]) for i in range(len(st.v))]
        return opt


def ppo_update(ac: ActorCritic, trajs: list[Trajectory], cfg: PpoConfig, opt: Optimizers,
               rng: np.random.Generator) -> dict[str, float]:
    """Several epochs of shuffled minibatch steps; returns mean diagnostics."""
    b = make_batch(trajs, cfg.gamma, cfg.lam)
    n = len(b)
    if n == 0:
        return {}
    sums: dict[str, float] = {}
    count = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch):
            mb = b.take(order[start:start + cfg.minibatch])
            a_loss, a_grads, stats = actor_loss_and_grads(ac, mb, cfg.clip, cfg.entropy_coef)
            c_loss, c_grads = critic_loss_and_grads(ac, mb, cfg.value_coef)
            if not (math.isfinite(a_loss) and math.isfinite(c_loss)):
                raise FloatingPointError(f"non-finite loss: actor={a_loss} critic={c_loss} stats={stats}")
            a_grads, a_norm = clip_by_global_norm(a_grads, cfg.max_grad_norm)
            c_grads, c_norm = clip_by_global_norm(c_grads, cfg.max_grad_norm)
            adam_step(ac.actor_params(), a_grads, opt.actor, cfg.lr)
            adam_step(ac.critic.params, c_grads, opt.critic, cfg.lr)
            ac.actor.touch()
            ac.critic.touch()
            stats.update(critic_loss=c_loss, actor_grad_norm=a_norm, critic_grad_norm=c_norm)
            for k, v in stats.items():
                sums[k] = sums.get(k, 0.0) + v
            count += 1
    return {k: v / count for k, v in sums.items()}


# -- training loop ------------------------------------------------------------

@dataclass
class CurveRow:
    episode: int
    ret: float
    tts_h: float
    mean_rate: float
    truncated: bool = False


@dataclass
class TrainResult:
    policy: ActorCritic  # final parameters
    best: ActorCritic  # parameters whose sampled batch had the lowest mean score
    best_score: float
    curve: list[CurveRow] = field(default_factory=list)
    updates: list[dict] = field(default_factory=list)


def episode_score(traj: Trajectory) -> float:
    """Lower is better: TTS when the environment reports it, else negative return."""
    return traj.tts_h if math.isfinite(traj.tts_h) else -traj.total_reward


def _save(path: Path, ac, best, best_score, opt, rng, curve, updates, cfg, meta) -> None:
    extra = {f"best.{k}": v for k, v in best.state_dict().items()}
    extra.update(opt.arrays())
    doc = {
        "kind": "training",
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(cfg).items()},
        "episodes_done": len(curve),
        "best_score": best_score,
        "rng": rng.bit_generator.state,
        "curve": [dataclasses.astuple(r) for r in curve],
        "updates": updates,
        **(meta or {}),
    }
    save_checkpoint(path, ac, doc, extra)


def load_training(path: str | Path):
    ac, meta, extra = load_checkpoint(path)
    best = ActorCritic.from_state({k[5:]: v for k, v in extra.items() if k.startswith("best.")})
    opt = Optimizers.from_arrays(ac, extra)
    return ac, best, opt, meta


def train(env, cfg: PpoConfig, eval_env=None, checkpoint: str | Path | None = None,
          resume: bool = False, on_update: Callable[[int, dict], None] | None = None,
          meta: dict | None = None) -> TrainResult:
    """Run ``cfg.episodes`` sampled episodes on ``env``, updating every ``cfg.batch``.

    The kept ``best`` policy is the one whose sampled batch scored best on
    average. After each update the mean policy is also rolled out once on
    ``eval_env`` (default: ``env``) for the diagnostics. With
    ``resume`` and an existing ``checkpoint``, training continues from the
    last completed update.
    """
    eval_env = env if eval_env is None else eval_env
    ckpt = Path(checkpoint) if checkpoint is not None else None
    dim = len(env.reset())
    if resume and ckpt is not None and ckpt.exists():
        ac, best, opt, saved = load_training(ckpt)
        if ac.state_dim != dim:
            raise ValueError(f"checkpoint expects state width {ac.state_dim}, environment gives {dim}")
        rng = np.random.default_rng()
        rng.bit_generator.state = saved["rng"]
        curve = [CurveRow(*row) for row in saved["curve"]]
        updates = list(saved["updates"])
        best_score = float(saved["best_score"])
    else:
        ac = ActorCritic(dim, cfg.hidden, env.low, env.high, cfg.log_std_init, seed=cfg.seed)
        opt = Optimizers.for_model(ac)
        rng = np.random.default_rng(cfg.seed + 1)
        curve, updates = [], []
        best = ac.copy()
        best_score = math.inf
        if ckpt is not None:
            _save(ckpt, ac, best, best_score, opt, rng, curve, updates, cfg, meta)

    while len(curve) < cfg.episodes:
        n = min(cfg.batch, cfg.episodes - len(curve))
        trajs = []
        sampled_by = ac.copy()
        try:
            for _ in range(n):
                tr = episode(env, ac, rng)
                trajs.append(tr)
                curve.append(CurveRow(len(curve) + 1, tr.discounted_return(cfg.gamma), tr.tts_h,
                                      tr.mean_rate, tr.truncated))
            diag = ppo_update(ac, trajs, cfg, opt, rng)
            probe = episode(eval_env, ac, deterministic=True)
        except FloatingPointError as exc:
            if ckpt is not None:
                dump = ckpt.with_name(ckpt.stem + ".failed.npz")
                _save(dump, ac, best, best_score, opt, rng, curve, updates, cfg,
                      {**(meta or {}), "error": str(exc)})
                raise FloatingPointError(f"{exc} (state dumped to {dump})") from exc
            raise
        # a single deterministic rollout on the training seed is a fragile
        # selector; the batch mean also charges for breakdowns under noise
        batch_score = float(np.mean([episode_score(tr) for tr in trajs]))
        if batch_score < best_score:
            best, best_score = sampled_by, batch_score
        diag.update(episode=len(curve), eval_score=episode_score(probe), batch_score=batch_score, std=ac.std)
        updates.append(diag)
        if ckpt is not None:
            _save(ckpt, ac, best, best_score, opt, rng, curve, updates, cfg, meta)
        if on_update is not None:
            on_update(len(updates), diag)
    return TrainResult(ac, best, best_score, curve, updates)


def write_curve(curve: list[CurveRow], path: str | Path, header_comment: str | None = None) -> None:
    with open(path, "w") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        fh.write("episode,return,tts_h,mean_rate\n")
        for r in curve:
            fh.write(f"{r.episode},{r.ret:.9f},{r.tts_h:.6f},{r.mean_rate:.4f}\n")


def config_from_json(text: str) -> PpoConfig:
    d = json.loads(text)
    if "hidden" in d:
        d["hidden"] = tuple(d["hidden"])
    return PpoConfig(**d)
