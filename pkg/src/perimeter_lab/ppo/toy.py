"""A single-store inflow-control plant whose optimum is computable exactly.

A store holds ``n`` vehicles and discharges ``outflow(n)`` per step, a
hump-shaped function that collapses to zero when the store is full. Demand
arrives into an outside queue; each step the controller picks how many queued
vehicles to admit. Reward is discharge divided by peak discharge. The plant is
deterministic with integer state, so backward induction over (step, store,
queue) gives the exact optimal discounted return. From the default overloaded
start the optimum is a threshold rule: admit nothing until the store drains,
then admit at the peak discharge.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class StorePlant:
    capacity: int = 40
    peak_outflow: int = 6
    max_admit: int = 10
    # starts overloaded: constant admission either starves or gridlocks the store
    initial_store: int = 32
    demand: tuple[int, ...] = (6,) * 30

    @property
    def horizon(self) -> int:
        return len(self.demand)

    @property
    def max_queue(self) -> int:
        return int(sum(self.demand))

    def outflow(self, n) -> np.ndarray:
        x = np.asarray(n, dtype=float) / self.capacity
        return np.rint(4.0 * self.peak_outflow * x * (1.0 - x)).astype(int)

    def transition(self, t: int, n, w, k):
        """Admit up to ``k``; returns (next store, next queue, reward). Vectorised."""
        w = np.asarray(w) + self.demand[t]
        admit = np.minimum(np.minimum(k, w), self.capacity - np.asarray(n))
        n1 = np.asarray(n) + admit
        out = self.outflow(n1)
        return n1 - out, w - admit, out / self.peak_outflow


def optimal_return(plant: StorePlant, gamma: float) -> tuple[float, np.ndarray]:
    """Exact optimum from the initial state by backward induction.

    Returns the value and the greedy admission table indexed ``[t, n, w]``.
    """
    N, W, H = plant.capacity, plant.max_queue, plant.horizon
    n_idx, w_idx = np.meshgrid(np.arange(N + 1), np.arange(W + 1), indexing="ij")
    value = np.zeros((N + 1, W + 1))
    policy = np.zeros((H, N + 1, W + 1), dtype=int)
    for t in reversed(range(H)):
        best = np.full((N + 1, W + 1), -np.inf)
        arg = np.zeros((N + 1, W + 1), dtype=int)
        for k in range(plant.max_admit + 1):
            n1, w1, r = plant.transition(t, n_idx, w_idx, k)
            q = r + gamma * value[n1, np.minimum(w1, W)]
            better = q > best + 1e-12
            best = np.where(better, q, best)
            arg = np.where(better, k, arg)
        value = best
        policy[t] = arg
    return float(value[plant.initial_store, 0]), policy


def rollout_return(plant: StorePlant, gamma: float, choose) -> float:
    """Discounted return of ``choose(t, n, w) -> admission count`` from the initial state."""
    n, w = plant.initial_store, 0
    g, disc = 0.0, 1.0
    for t in range(plant.horizon):
        n, w, r = plant.transition(t, n, w, int(choose(t, n, w)))
        n, w = int(n), int(w)
        g += disc * float(r)
        disc *= gamma
    return g


def best_threshold(plant: StorePlant, gamma: float) -> tuple[int, float]:
    """Brute force over 'admit fully while the store is below theta, else nothing'."""
    scores = [(rollout_return(plant, gamma, lambda t, n, w, th=th: plant.max_admit if n < th else 0), th)
              for th in range(plant.capacity + 1)]
    ret, th = max(scores)
    return th, ret


class StoreEnv:
    """Episode interface over :class:`StorePlant` for the generic trainer.

    The state is (store, queue, current demand, elapsed fraction), each in
    [0, 1]. The action is an admission count in [0, max_admit], rounded.
    """

    low = 0.0

    def __init__(self, plant: StorePlant = StorePlant()):
        self.plant = plant
        self.high = float(plant.max_admit)
        self.t = self.n = self.w = 0

    def _state(self) -> np.ndarray:
        p = self.plant
        d = p.demand[self.t] if self.t < p.horizon else 0
        return np.array([self.n / p.capacity, min(self.w / max(p.max_queue, 1), 1.0),
                         d / max(max(p.demand), 1), self.t / p.horizon])

    def reset(self) -> np.ndarray:
        self.t = self.w = 0
        self.n = self.plant.initial_store
        return self._state()

    def step(self, rate: float | None):
        k = self.plant.max_admit if rate is None else int(np.floor(float(rate) + 0.5))
        n, w, r = self.plant.transition(self.t, self.n, self.w, k)
        self.n, self.w = int(n), int(w)
        self.t += 1
        return self._state(), float(r), self.t >= self.plant.horizon, {"rate": k}
