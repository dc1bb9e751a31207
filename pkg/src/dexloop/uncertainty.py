"""MC-dropout uncertainty scoring and peak-segment selection.

A rollout's uncertainty at a timestep is the mean population variance, over
all flattened chunk dimensions, of N stochastic forward passes with dropout
enabled. The top-k peaks of the per-timestep trace, spaced so their context
windows cannot overlap, become the review segments offered for corrective
relabeling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeMismatch


@dataclass(frozen=True)
class UncertaintyTrace:
    """Per-timestep scalar uncertainty over one episode."""

    u: np.ndarray
    episode_id: str = ""
    num_passes: int = 10

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float).reshape(-1)
        if np.any(u < 0):
            raise ValueError("uncertainty values must be nonnegative")
        object.__setattr__(self, "u", u)

    def __len__(self):
        return self.u.shape[0]


@dataclass(frozen=True)
class Segment:
    """A context window around one uncertainty peak; bounds are inclusive."""

    episode_id: str
    peak_t: int
    start_t: int
    end_t: int
    rank: int

    def __post_init__(self):
        if not self.start_t <= self.peak_t <= self.end_t:
            raise ValueError("segment window must contain its peak")

    @property
    def frames(self) -> int:
        return self.end_t - self.start_t + 1

    def overlaps(self, other: "Segment") -> bool:
        return not (self.end_t < other.start_t or self.start_t > other.end_t)


def mc_dropout_samples(policy, window: np.ndarray, n_passes: int = 10,
                       base_seed: int = 0, shared_noise: bool = True) -> np.ndarray:
    """N stochastic chunk predictions; pass i uses dropout seed base_seed^i.

    With shared_noise (the default) every pass reuses the same diffusion
    noise sequence, so for the DDPM backend the spread across passes
    isolates dropout-induced variance instead of sampling noise. The whole
    set is deterministic given base_seed.
    """
    if n_passes < 2:
        raise ValueError("need at least 2 passes to estimate variance")
    dropout_seeds = [base_seed ^ i for i in range(n_passes)]
    if shared_noise:
        return policy.sample_chunks_batch(window, noise_seed=base_seed,
                                          dropout_seeds=dropout_seeds)
    chunks = [policy.sample_chunk(window, noise_seed=base_seed ^ i,
                                  dropout_seed=base_seed ^ i)
              for i in range(n_passes)]
    return np.stack(chunks)


def uncertainty_score(samples: np.ndarray) -> float:
    """Mean population variance across all flattened action dimensions.

    Sorting each dimension's N values first makes the result exactly
    invariant to sample order, and shifting by the per-dimension minimum
    makes identical samples score exactly zero; neither changes the
    mathematical variance.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim < 2:
        raise ShapeMismatch("expected N samples of identical chunk shape")
    n = samples.shape[0]
    if n < 2:
        raise ShapeMismatch("need at least 2 samples")
    flat = np.sort(samples.reshape(n, -1), axis=0)
    shifted = flat - flat[0]
    centered = shifted - shifted.mean(axis=0)
    return float(np.mean(np.mean(centered * centered, axis=0)))


def select_segments(trace: UncertaintyTrace, k: int = 3,
                    window_seconds: float = 2.0, dt: float = 0.05) -> list[Segment]:
    """Greedy non-maximum suppression of the top-k uncertainty peaks.

    Repeatedly takes the global argmax among timesteps whose context
    window would not overlap an already-selected window (suppression
    radius of one full window), ties broken by earliest timestep. Windows
    are clipped at episode bounds, so selected segments never overlap and
    never leave the episode.
    """
    steps = len(trace)
    if steps == 0:
        raise ValueError("trace is empty")
    if k < 1:
        raise ValueError("k must be >= 1")
    frames = max(int(round(window_seconds / dt)), 1)
    half_before = frames // 2
    half_after = frames - half_before - 1

    def window_of(t: int) -> tuple[int, int]:
        return max(0, t - half_before), min(steps - 1, t + half_after)

    available = np.ones(steps, dtype=bool)
    segments: list[Segment] = []
    while len(segments) < k and available.any():
        masked = np.where(available, trace.u, -np.inf)
        peak = int(np.argmax(masked))  # argmax returns the earliest maximum
        start, end = window_of(peak)
        segments.append(Segment(trace.episode_id, peak, start, end,
                                rank=len(segments) + 1))
        for t in np.flatnonzero(available):
            s, e = window_of(int(t))
            if not (e < start or s > end):
                available[t] = False
    return segments
