"""Gaussian actor-critic on a [0, 1] action scale mapped onto metering rates."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from ..nn import DenseNet

LOG_2PI = math.log(2.0 * math.pi)
CHECKPOINT_VERSION = 1


class ActorCritic:
    """Actor: [d, 256, 256, 1] tanh/tanh/relu. Critic: same trunk, linear head.

    The actor's output is the mean of a Gaussian over a unit action scale;
    ``low + a * (high - low)`` clamped to [low, high] is the applied value.
    """

    def __init__(
        self,
        state_dim: int,
        hidden: tuple[int, ...] = (256, 256),
        low: float = 50.0,
        high: float = 300.0,
        log_std: float = math.log(0.3),
        seed: int = 0,
    ):
        rng = np.random.default_rng(seed)
        sizes = [state_dim, *hidden, 1]
        self.actor = DenseNet(sizes, ["tanh"] * len(hidden) + ["relu"], rng,
                              output_gain=0.01, output_bias=0.5)
        self.critic = DenseNet(sizes, ["tanh"] * len(hidden) + ["none"], rng, output_gain=1.0)
        self.log_std = np.array([float(log_std)])
        self.low = float(low)
        self.high = float(high)

    @property
    def state_dim(self) -> int:
        return self.actor.sizes[0]

    @property
    def std(self) -> float:
        return float(np.exp(self.log_std[0]))

    def actor_params(self) -> list[np.ndarray]:
        return self.actor.params + [self.log_std]

    def to_rate(self, a):
        """Map unit-scale actions onto the applied range, clamped."""
        return np.clip(self.low + np.asarray(a, dtype=float) * (self.high - self.low), self.low, self.high)

    def mean(self, state) -> np.ndarray:
        return self.actor(state)[..., 0]

    def value(self, state) -> np.ndarray:
        return self.critic(state)[..., 0]

    def log_prob(self, a, mu) -> np.ndarray:
        ls = self.log_std[0]
        z = (np.asarray(a) - mu) / math.exp(ls)
        return -0.5 * z * z - ls - 0.5 * LOG_2PI

    def entropy(self) -> float:
        return float(self.log_std[0] + 0.5 * (1.0 + LOG_2PI))

    def copy(self) -> "ActorCritic":
        other = ActorCritic.__new__(ActorCritic)
        other.actor = self.actor.copy()
        other.critic = self.critic.copy()
        other.log_std = self.log_std.copy()
        other.low, other.high = self.low, self.high
        return other

    # -- checkpoints ---------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        d = {}
        d.update(self.actor.state_dict("actor."))
        d.update(self.critic.state_dict("critic."))
        d["log_std"] = self.log_std
        d["bounds"] = np.array([self.low, self.high])
        return d

    @classmethod
    def from_state(cls, d) -> "ActorCritic":
        ac = cls.__new__(cls)
        n_hidden = len(d["actor.sizes"]) - 2
        ac.actor = DenseNet.from_state(d, ["tanh"] * n_hidden + ["relu"], "actor.")
        ac.critic = DenseNet.from_state(d, ["tanh"] * n_hidden + ["none"], "critic.")
        ac.log_std = np.array(d["log_std"], dtype=float)
        ac.low, ac.high = (float(x) for x in d["bounds"])
        return ac


def sample_action(ac: ActorCritic, state, rng: np.random.Generator) -> tuple[float, float, float]:
    """Draw a unit-scale action; returns (raw sample, applied value, log-prob of the raw sample)."""
    mu = float(ac.mean(state))
    if not math.isfinite(mu):
        raise FloatingPointError(f"policy mean is not finite for state {state}")
    a = mu + ac.std * float(rng.standard_normal())
    return a, float(ac.to_rate(a)), float(ac.log_prob(a, mu))


def deterministic_action(ac: ActorCritic, state) -> float:
    return float(ac.to_rate(ac.mean(state)))


def save_checkpoint(path: str | Path, ac: ActorCritic, meta: dict | None = None,
                    extra: dict[str, np.ndarray] | None = None) -> None:
    arrays = {f"ac.{k}": v for k, v in ac.state_dict().items()}
    if extra:
        arrays.update(extra)
    doc = {"format": "perimeter-lab/checkpoint", "version": CHECKPOINT_VERSION, **(meta or {})}
    arrays["meta"] = np.frombuffer(json.dumps(doc, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[ActorCritic, dict, dict[str, np.ndarray]]:
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(arrays.pop("meta").tobytes().decode())
    if meta.get("format") != "perimeter-lab/checkpoint":
        raise ValueError(f"{path} is not a checkpoint")
    ac = ActorCritic.from_state({k[3:]: v for k, v in arrays.items() if k.startswith("ac.")})
    extra = {k: v for k, v in arrays.items() if not k.startswith("ac.")}
    return ac, meta, extra
