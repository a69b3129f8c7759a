"""Gaussian diffusion over patient interaction rows.

The forward process corrupts a binary row toward noise; an MLP predicts the
clean row from a corrupted one.  Inference iterates the deterministic
posterior mean and keeps the top-k scored columns per patient.
"""

from __future__ import annotations

import hashlib
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from examrec.errors import ConfigError


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    s: float
    alpha_low: float
    alpha_up: float
    alpha_bar: np.ndarray  # alpha_bar[t-1] for t = 1..T
    beta: np.ndarray

    def alpha_bar_at(self, t):
        """alpha_bar_t with the convention alpha_bar_0 = 1; ``t`` may be an array."""
        padded = np.concatenate([[1.0], self.alpha_bar])
        return padded[t]

    def snr(self, t):
        ab = self.alpha_bar_at(t)
        return ab / (1.0 - ab)

    def hash(self) -> str:
        blob = f"{self.T}:{self.s!r}:{self.alpha_low!r}:{self.alpha_up!r}".encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def make_schedule(s: float, alpha_low: float, alpha_up: float, T: int) -> DiffusionSchedule:
    """Linear noise schedule: 1 - alpha_bar_t ramps from s*alpha_low to s*alpha_up."""
    if not 0.0 <= s <= 1.0:
        raise ConfigError("s", "noise scale must lie in [0, 1]")
    if not 0.0 < alpha_low < alpha_up < 1.0:
        raise ConfigError("alpha_low", "need 0 < alpha_low < alpha_up < 1")
    if T < 2:
        raise ConfigError("T", "need at least 2 steps")
    if s * alpha_up >= 1.0:
        raise ConfigError("s", "s * alpha_up must be < 1")
    w = np.arange(T, dtype=np.float64) / (T - 1)
    # weighted form so both endpoints are exact in floating point
    one_minus = s * ((1.0 - w) * alpha_low + w * alpha_up)
    alpha_bar = 1.0 - one_minus
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    beta = 1.0 - alpha_bar / prev
    return DiffusionSchedule(T, float(s), float(alpha_low), float(alpha_up), alpha_bar, beta)


def _check_step(t, schedule: DiffusionSchedule, low: int = 1):
    t_arr = np.asarray(t.cpu() if torch.is_tensor(t) else t)
    if t_arr.size and (t_arr.min() < low or t_arr.max() > schedule.T):
        raise ValueError(f"diffusion step out of range [{low}, {schedule.T}]: {t}")


def forward_diffuse(x0: torch.Tensor, t, schedule: DiffusionSchedule, noise: torch.Tensor) -> torch.Tensor:
    """Sample x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) noise.

    ``t`` is a scalar or one step per row of a 2-D ``x0``.
    """
    _check_step(t, schedule)
    ab = torch.as_tensor(schedule.alpha_bar_at(np.asarray(t.cpu() if torch.is_tensor(t) else t)),
                         dtype=x0.dtype)
    if ab.ndim == 1 and x0.ndim == 2:
        ab = ab[:, None]
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * noise


def step_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class DenoiserNet(nn.Module):
    """MLP predicting x_0 from (x_t, sinusoidal embedding of t)."""

    def __init__(self, width: int, step_dim: int = 16, hidden: int | None = None):
        super().__init__()
        hidden = hidden or min(max(width, 64), 1024)
        self.width = width
        self.step_dim = step_dim
        self.net = nn.Sequential(
            nn.Linear(width + step_dim, hidden), nn.Tanh(),
            nn.Linear(hidden, hidden), nn.Tanh(),
            nn.Linear(hidden, width),
        )

    def forward(self, x_t: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        emb = step_embedding(t, self.step_dim).to(x_t.dtype)
        return self.net(torch.cat([x_t, emb], dim=-1))


def elbo_weights(t: np.ndarray, schedule: DiffusionSchedule) -> np.ndarray:
    """Per-step loss weight: 1 at t=1, half the SNR drop for t >= 2."""
    t = np.asarray(t)
    w = np.ones(t.shape, dtype=np.float64)
    later = t >= 2
    w[later] = 0.5 * (schedule.snr(t[later] - 1) - schedule.snr(t[later]))
    return w


def elbo_loss(x0: torch.Tensor, denoiser, schedule: DiffusionSchedule,
              rng: torch.Generator, t: torch.Tensor | None = None) -> torch.Tensor:
    """Monte Carlo ELBO with one uniformly drawn step per row.

    ``t`` may be injected for testing; otherwise it is drawn from ``rng``.
    """
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    if t is None:
        t = torch.randint(1, schedule.T + 1, (x0.shape[0],), generator=rng)
    noise = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
    x_t = forward_diffuse(x0, t, schedule, noise)
    pred = denoiser(x_t, t)
    sq = ((pred - x0) ** 2).sum(dim=-1)
    w = torch.as_tensor(elbo_weights(t.numpy(), schedule), dtype=x0.dtype)
    return (w * sq).mean()


@dataclass
class GateState:
    """Recent recommendation losses for the task-adaptive gate."""

    delta: int = 5
    epsilon: float = 0.2
    history: deque = field(default_factory=deque)
    last: float = 1.0  # most recent multiplier

    def __post_init__(self):
        if self.delta <= 1:
            raise ConfigError("gate_window", "window must exceed 1")
        if not 0.0 < self.epsilon <= 1.0:
            raise ConfigError("gate_eps", "threshold must lie in (0, 1]")
        self.history = deque(self.history, maxlen=self.delta + 1)


def gate(state: GateState, current_loss: float) -> float:
    """Return 1 when the loss change exceeds its recent mean, else epsilon.

    The change is ``current - previous``; a change at or below the running
    mean means the graph is already helping, so diffusion training is damped.
    Until ``delta + 1`` losses are recorded the gate stays open.
    """
    hist = state.history
    if len(hist) < state.delta + 1:
        out = 1.0
    else:
        h = list(hist)
        change = current_loss - h[-1]
        mean_change = sum(b - a for a, b in zip(h[:-1], h[1:])) / state.delta
        out = 1.0 if change > mean_change else state.epsilon
    hist.append(float(current_loss))
    state.last = out
    return out


def gated_elbo(x0, denoiser, schedule, state: GateState, current_rec_loss: float, rng,
               t: torch.Tensor | None = None) -> torch.Tensor:
    return gate(state, current_rec_loss) * elbo_loss(x0, denoiser, schedule, rng, t=t)


def posterior_coefficients(t: int, schedule: DiffusionSchedule) -> tuple[float, float]:
    """Coefficients (on x0_hat, on x_t) of the Gaussian posterior mean of x_{t-1}."""
    ab_t = float(schedule.alpha_bar_at(t))
    ab_prev = float(schedule.alpha_bar_at(t - 1))
    beta_t = float(schedule.beta[t - 1])
    c0 = math.sqrt(ab_prev) * beta_t / (1.0 - ab_t)
    ct = math.sqrt(1.0 - beta_t) * (1.0 - ab_prev) / (1.0 - ab_t)
    return c0, ct


@torch.no_grad()
def reverse_denoise(x_in: torch.Tensor, T_inf: int, schedule: DiffusionSchedule, denoiser) -> torch.Tensor:
    """Deterministic posterior-mean iteration from step ``T_inf`` down to 1."""
    if not 0 <= T_inf <= schedule.T:
        raise ValueError(f"T_inf must lie in [0, {schedule.T}], got {T_inf}")
    if T_inf == 0:
        return x_in
    x_t = x_in
    x0_hat = x_in
    for t in range(T_inf, 0, -1):
        steps = torch.full((x_t.shape[0],), t, dtype=torch.long)
        x0_hat = denoiser(x_t, steps)
        c0, ct = posterior_coefficients(t, schedule)
        x_t = c0 * x0_hat + ct * x_t
    return x0_hat


@dataclass(frozen=True)
class DenoisedSubgraph:
    adjacency: np.ndarray
    k: int
    scores: np.ndarray
    patient_ids: tuple[int, ...]


def rebuild_subgraph(scores: np.ndarray, k: int, graph) -> DenoisedSubgraph:
    """Keep the k highest-scoring columns of every row; ties go to lower indices."""
    if k < 1:
        raise ConfigError("k", "must be >= 1")
    scores = np.asarray(scores, dtype=np.float64)
    n, width = scores.shape
    kk = min(k, width)
    order = np.argsort(-scores, axis=1, kind="stable")[:, :kk]
    A = np.zeros((n, width), dtype=np.uint8)
    np.put_along_axis(A, order, 1, axis=1)
    return DenoisedSubgraph(A, k, scores, tuple(graph.patient_ids))


def with_demographics(subgraph: DenoisedSubgraph, graph) -> DenoisedSubgraph:
    """Re-impose the age and gender edges of ``graph`` on a rebuilt subgraph."""
    A = subgraph.adjacency.copy()
    mask = graph.demographic_mask
    A[:, mask] = np.maximum(A[:, mask], graph.adjacency[:, mask])
    return DenoisedSubgraph(A, subgraph.k, subgraph.scores, subgraph.patient_ids)


def save_subgraph(subgraph: DenoisedSubgraph, schedule: DiffusionSchedule, path) -> None:
    rows, cols = np.nonzero(subgraph.adjacency)
    lines = [f"#subgraph k={subgraph.k} schedule={schedule.hash()} "
             f"shape={subgraph.adjacency.shape[0]}x{subgraph.adjacency.shape[1]}"]
    lines += [f"{subgraph.patient_ids[r]}\t{c}" for r, c in zip(rows, cols)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_subgraph(path, patient_ids=None) -> tuple[DenoisedSubgraph, str]:
    """Read an edge list; returns the subgraph (scores empty) and the schedule hash."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    meta = dict(p.split("=", 1) for p in lines[0].split()[1:])
    width = int(meta["shape"].split("x")[1])
    edges = [tuple(int(x) for x in ln.split("\t")) for ln in lines[1:] if ln.strip()]
    if patient_ids is None:
        patient_ids = tuple(sorted({pid for pid, _ in edges}))
    row_of = {pid: r for r, pid in enumerate(patient_ids)}
    A = np.zeros((len(patient_ids), width), dtype=np.uint8)
    for pid, c in edges:
        A[row_of[pid], c] = 1
    return DenoisedSubgraph(A, int(meta["k"]), np.zeros((0, width)), tuple(patient_ids)), meta["schedule"]
