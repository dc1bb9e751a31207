"""Trainable action-chunk policies over low-dimensional state observations.

Two backends share one MLP core built on the autodiff tape: a behavioral
cloning head that regresses normalized H x D action chunks directly, and a
conditional DDPM that learns to predict the noise added to a chunk and
samples by running the full reverse diffusion. Both carry dropout on the
hidden layers so the same networks support MC-dropout uncertainty scoring
at inference time.

Observations are short histories of state vectors (n_obs_steps entries)
rather than images; the supervision loop is observation-agnostic, and a
state vector keeps the stack desk-scale.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeMismatch, Var


class EmptyDataset(ValueError):
    """Training requires at least one sample."""


MAGIC = b"VDGP"
FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

class Normalizer:
    """Per-dimension min/max scaling to [-1, 1], sklearn-style fit/transform."""

    def __init__(self):
        self.low = None
        self.high = None

    def fit(self, X: np.ndarray) -> "Normalizer":
        X = np.asarray(X, dtype=float).reshape(-1, X.shape[-1])
        self.low = X.min(axis=0)
        self.high = X.max(axis=0)
        return self

    @property
    def fitted(self) -> bool:
        return self.low is not None

    def _span(self) -> np.ndarray:
        # the floor keeps near-constant dimensions from amplifying float
        # noise into huge normalized values; round-trips stay exact since
        # transform and inverse share the same floored span
        return np.maximum(self.high - self.low, 1e-6)

    def transform(self, X: np.ndarray) -> np.ndarray:
        return 2.0 * (np.asarray(X, dtype=float) - self.low) / self._span() - 1.0

    def inverse_transform(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=float) + 1.0) * 0.5 * self._span() + self.low

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.low).tobytes())
        h.update(np.ascontiguousarray(self.high).tobytes())
        return h.hexdigest()[:16]

    def state(self) -> dict:
        return {"low": self.low.tolist(), "high": self.high.tolist()}

    @staticmethod
    def from_state(state: dict) -> "Normalizer":
        n = Normalizer()
        n.low = np.asarray(state["low"], dtype=float)
        n.high = np.asarray(state["high"], dtype=float)
        return n


# ---------------------------------------------------------------------------
# MLP core
# ---------------------------------------------------------------------------

def _dropout_masks(rng: np.random.Generator, sizes, rate: float, batch: int) -> list:
    """Inverted-dropout masks per hidden layer; expectation equals identity."""
    if rate <= 0.0:
        return [np.ones((batch, s)) for s in sizes]
    keep = 1.0 - rate
    return [(rng.random((batch, s)) >= rate) / keep for s in sizes]


class MLP:
    """Fully connected net with dropout on hidden activations."""

    def __init__(self, sizes: list[int], seed: int, activation: str = "relu"):
        self.sizes = list(sizes)
        self.activation = activation
        rng = np.random.default_rng(seed)
        self.weights: list[Var] = []
        self.biases: list[Var] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            self.weights.append(ad.param(w))
            self.biases.append(ad.param(np.zeros(fan_out)))

    @property
    def params(self) -> list[Var]:
        return self.weights + self.biases

    def _act(self, h: Var) -> Var:
        return ad.apply(self.activation, h)

    def forward_graph(self, x: Var, masks: list[np.ndarray] | None = None) -> Var:
        """Tape-building forward used for training."""
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.add(ad.matmul(h, w), b)
            if i < last:
                h = self._act(h)
                if masks is not None:
                    h = ad.mul(h, ad.constant(masks[i]))
        return h

    def forward(self, x: np.ndarray, dropout_rate: float = 0.0,
                dropout_rng: np.random.Generator | None = None) -> np.ndarray:
        """Fast inference path; pass a generator to enable dropout."""
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        h = x.reshape(1, -1) if squeeze else x
        if h.shape[1] != self.sizes[0]:
            raise ShapeMismatch(f"expected input dim {self.sizes[0]}, got {h.shape[1]}")
        last = len(self.weights) - 1
        act = np.tanh if self.activation == "tanh" else lambda v: np.maximum(v, 0.0)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.value + b.value
            if i < last:
                h = act(h)
                if dropout_rng is not None:
                    (m,) = _dropout_masks(dropout_rng, [h.shape[1]], dropout_rate, h.shape[0])
                    h = h * m
        return h[0] if squeeze else h

    def forward_rows(self, x: np.ndarray, dropout_rate: float,
                     row_seeds: list[int | None]) -> np.ndarray:
        """Batched forward where row i uses its own dropout seed.

        Bit-identical to calling forward() per row, which is what makes
        batched MC-dropout passes equal to the sequential definition.
        """
        x = np.asarray(x, dtype=float)
        rngs = [None if s is None else np.random.default_rng(s) for s in row_seeds]
        if len(rngs) != x.shape[0]:
            raise ShapeMismatch("one dropout seed per row required")
        h = x
        last = len(self.weights) - 1
        act = np.tanh if self.activation == "tanh" else lambda v: np.maximum(v, 0.0)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.value + b.value
            if i < last:
                h = act(h)
                for r, rng in enumerate(rngs):
                    if rng is not None:
                        (m,) = _dropout_masks(rng, [h.shape[1]], dropout_rate, 1)
                        h[r] = h[r] * m[0]
        return h

    def hidden_sizes(self) -> list[int]:
        return self.sizes[1:-1]

    def flat_weights(self) -> np.ndarray:
        return np.concatenate([p.value.ravel() for p in self.params])

    def load_flat(self, flat: np.ndarray) -> None:
        offset = 0
        for p in self.params:
            n = p.value.size
            p.value = flat[offset:offset + n].reshape(p.value.shape).copy()
            offset += n
        if offset != flat.size:
            raise ShapeMismatch("weight blob size does not match architecture")


class Adam:
    """Standard Adam over a list of tape parameters."""

    def __init__(self, params: list[Var], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mhat = self.m[i] / (1 - self.b1 ** self.t)
            vhat = self.v[i] / (1 - self.b2 ** self.t)
            p.value = p.value - self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# datasets and training config
# ---------------------------------------------------------------------------

@dataclass
class TrainingSet:
    """Windowed samples: raw obs windows, env-space chunks, chunk masks."""

    windows: np.ndarray   # (N, n_obs_steps, obs_dim)
    chunks: np.ndarray    # (N, horizon, action_dim)
    masks: np.ndarray     # (N, horizon), 1 where the chunk step is real data

    def __post_init__(self):
        if self.windows.shape[0] != self.chunks.shape[0] or \
                self.chunks.shape[0] != self.masks.shape[0]:
            raise ShapeMismatch("windows, chunks, masks must share sample count")

    def __len__(self):
        return self.windows.shape[0]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 64
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0


def _epoch_batches(rng: np.random.Generator, n: int, batch_size: int):
    """Shuffled batches; datasets below the batch size are upsampled with
    replacement so one optimizer step still averages batch_size draws."""
    if n >= batch_size:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start:start + batch_size]
    else:
        yield rng.integers(0, n, size=batch_size)


# ---------------------------------------------------------------------------
# policy backends
# ---------------------------------------------------------------------------

class _ChunkPolicy:
    """Shared window/normalizer plumbing for the chunk-predicting backends."""

    obs_dim: int
    action_dim: int
    horizon: int
    n_obs_steps: int
    obs_normalizer: Normalizer
    action_normalizer: Normalizer

    def _check_window(self, window: np.ndarray) -> np.ndarray:
        window = np.asarray(window, dtype=float)
        if window.shape != (self.n_obs_steps, self.obs_dim):
            raise ShapeMismatch(
                f"expected window ({self.n_obs_steps}, {self.obs_dim}), got {window.shape}")
        return window

    def _norm_window(self, window: np.ndarray) -> np.ndarray:
        return self.obs_normalizer.transform(self._check_window(window)).ravel()

    def _fit_normalizers(self, data: TrainingSet) -> None:
        self.obs_normalizer.fit(data.windows.reshape(-1, self.obs_dim))
        self.action_normalizer.fit(data.chunks.reshape(-1, self.action_dim))

    def _prepare(self, data: TrainingSet):
        if len(data) == 0:
            raise EmptyDataset("training set is empty")
        self._fit_normalizers(data)
        X = self.obs_normalizer.transform(
            data.windows.reshape(-1, self.obs_dim)).reshape(len(data), -1)
        Y = self.action_normalizer.transform(
            data.chunks.reshape(-1, self.action_dim)).reshape(len(data), -1)
        M = np.repeat(data.masks, self.action_dim, axis=1)
        return X, Y, M

    def to_env_actions(self, chunk: np.ndarray) -> np.ndarray:
        return self.action_normalizer.inverse_transform(chunk)

    def _norm_windows(self, windows: np.ndarray) -> np.ndarray:
        windows = np.asarray(windows, dtype=float)
        if windows.ndim != 3 or windows.shape[1:] != (self.n_obs_steps, self.obs_dim):
            raise ShapeMismatch(
                f"expected windows (B, {self.n_obs_steps}, {self.obs_dim}), "
                f"got {windows.shape}")
        flat = self.obs_normalizer.transform(windows.reshape(-1, self.obs_dim))
        return flat.reshape(windows.shape[0], -1)


class BCPolicy(_ChunkPolicy):
    """Direct regression from an observation window to an action chunk."""

    backend = "bc"

    def __init__(self, obs_dim: int, action_dim: int, horizon: int = 16,
                 n_obs_steps: int = 2, hidden: tuple[int, ...] = (256, 256),
                 dropout_rate: float = 0.1, activation: str = "relu", seed: int = 0):
        if not 0.0 <= dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.horizon = horizon
        self.n_obs_steps = n_obs_steps
        self.hidden = tuple(hidden)
        self.dropout_rate = dropout_rate
        self.net = MLP([n_obs_steps * obs_dim, *hidden, horizon * action_dim],
                       seed=seed, activation=activation)
        self.obs_normalizer = Normalizer()
        self.action_normalizer = Normalizer()
        self.loss_curve: list[float] = []

    # -- training ----------------------------------------------------------

    def fit(self, data: TrainingSet, cfg: TrainConfig = TrainConfig()) -> list[float]:
        X, Y, M = self._prepare(data)
        rng = np.random.default_rng(cfg.seed)
        opt = Adam(self.net.params, lr=cfg.learning_rate, betas=cfg.betas)
        self.loss_curve = []
        n = X.shape[0]
        for _epoch in range(cfg.epochs):
            losses = []
            for idx in _epoch_batches(rng, n, cfg.batch_size):
                masks = _dropout_masks(rng, self.net.hidden_sizes(),
                                       self.dropout_rate, len(idx))
                pred = self.net.forward_graph(ad.constant(X[idx]), masks)
                loss = ad.mse(pred, ad.constant(Y[idx]), M[idx])
                ad.zero_grad(self.net.params)
                ad.backward(loss)
                opt.step()
                losses.append(float(loss.value))
            self.loss_curve.append(float(np.mean(losses)))
        return self.loss_curve

    # -- inference ----------------------------------------------------------

    def sample_chunk(self, window: np.ndarray, noise_seed: int = 0,
                     dropout_seed: int | None = None) -> np.ndarray:
        """Normalized H x D chunk; noise_seed is unused for this backend."""
        x = self._norm_window(window)
        rng = None if dropout_seed is None else np.random.default_rng(dropout_seed)
        out = self.net.forward(x, self.dropout_rate, rng)
        return np.clip(out.reshape(self.horizon, self.action_dim), -1.0, 1.0)

    def sample_chunks_batch(self, window: np.ndarray, noise_seed: int,
                            dropout_seeds: list[int | None]) -> np.ndarray:
        x = self._norm_window(window)
        X = np.tile(x, (len(dropout_seeds), 1))
        out = self.net.forward_rows(X, self.dropout_rate, dropout_seeds)
        return np.clip(out.reshape(len(dropout_seeds), self.horizon, self.action_dim),
                       -1.0, 1.0)

    def predict_batch(self, windows: np.ndarray, noise_seed: int = 0) -> np.ndarray:
        """Dropout-off chunks for a batch of distinct observation windows."""
        out = self.net.forward(self._norm_windows(windows))
        return np.clip(out.reshape(-1, self.horizon, self.action_dim), -1.0, 1.0)


# ---------------------------------------------------------------------------
# DDPM backend
# ---------------------------------------------------------------------------

def cosine_alpha_bar(num_steps: int, offset: float = 0.008) -> np.ndarray:
    """Cumulative alpha-bar on a cosine ramp; strictly decreasing in (0, 1)."""
    steps = np.arange(num_steps + 1, dtype=float)
    f = np.cos(((steps / num_steps) + offset) / (1 + offset) * np.pi / 2) ** 2
    ab = f[1:] / f[0]
    return np.clip(ab, 1e-8, 1.0 - 1e-8)


def timestep_embedding(t: int, dim: int, num_steps: int) -> np.ndarray:
    """Sinusoidal embedding of a diffusion timestep."""
    half = dim // 2
    freqs = np.exp(-np.log(1000.0) * np.arange(half) / max(half - 1, 1))
    angle = (t / max(num_steps - 1, 1)) * freqs * np.pi * 2
    return np.concatenate([np.sin(angle), np.cos(angle)])


class DDPMPolicy(_ChunkPolicy):
    """Conditional denoising diffusion over normalized action chunks.

    Trained to minimize the MSE between the predicted and true noise
    residual. Internally the MLP regresses the clean chunk and the noise
    prediction is emitted through the closed-form relation
    eps_hat = (x_t - sqrt(abar_t) * g) / sqrt(1 - abar_t); that keeps the
    learnable function O(1)-scaled where a raw noise head would need
    weights of order 1/sqrt(1 - abar_t) near the clean end of the
    schedule, which plain Adam cannot reach in a desk-scale step budget.
    """

    backend = "ddpm"

    def __init__(self, obs_dim: int, action_dim: int, horizon: int = 16,
                 n_obs_steps: int = 2, hidden: tuple[int, ...] = (256, 256),
                 dropout_rate: float = 0.1, diffusion_steps: int = 50,
                 time_embed_dim: int = 16, activation: str = "relu", seed: int = 0):
        if not 0.0 <= dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.horizon = horizon
        self.n_obs_steps = n_obs_steps
        self.hidden = tuple(hidden)
        self.dropout_rate = dropout_rate
        self.diffusion_steps = diffusion_steps
        self.time_embed_dim = time_embed_dim
        self.chunk_dim = horizon * action_dim
        in_dim = n_obs_steps * obs_dim + self.chunk_dim + time_embed_dim
        self.net = MLP([in_dim, *hidden, self.chunk_dim], seed=seed, activation=activation)
        self.alpha_bar = cosine_alpha_bar(diffusion_steps)
        alphas = np.empty(diffusion_steps)
        alphas[0] = self.alpha_bar[0]
        alphas[1:] = self.alpha_bar[1:] / self.alpha_bar[:-1]
        self.betas = np.clip(1.0 - alphas, 1e-8, 0.999)
        self.alphas = 1.0 - self.betas
        self.obs_normalizer = Normalizer()
        self.action_normalizer = Normalizer()
        self.loss_curve: list[float] = []

    def _embed(self, t_values: np.ndarray) -> np.ndarray:
        return np.stack([timestep_embedding(int(t), self.time_embed_dim,
                                            self.diffusion_steps) for t in t_values])

    def fit(self, data: TrainingSet, cfg: TrainConfig = TrainConfig()) -> list[float]:
        X, Y, M = self._prepare(data)
        rng = np.random.default_rng(cfg.seed)
        opt = Adam(self.net.params, lr=cfg.learning_rate, betas=cfg.betas)
        self.loss_curve = []
        n = X.shape[0]
        for _epoch in range(cfg.epochs):
            losses = []
            for idx in _epoch_batches(rng, n, cfg.batch_size):
                bsz = len(idx)
                t = rng.integers(0, self.diffusion_steps, size=bsz)
                eps = rng.normal(size=(bsz, self.chunk_dim))
                ab = self.alpha_bar[t][:, None]
                noisy = np.sqrt(ab) * Y[idx] + np.sqrt(1.0 - ab) * eps
                inp = np.concatenate([X[idx], noisy, self._embed(t)], axis=1)
                masks = _dropout_masks(rng, self.net.hidden_sizes(),
                                       self.dropout_rate, bsz)
                g = self.net.forward_graph(ad.constant(inp), masks)
                pred_eps = ad.sub(ad.constant(noisy / np.sqrt(1.0 - ab)),
                                  ad.mul(g, ad.constant(np.sqrt(ab / (1.0 - ab)))))
                loss = ad.mse(pred_eps, ad.constant(eps), M[idx])
                ad.zero_grad(self.net.params)
                ad.backward(loss)
                opt.step()
                losses.append(float(loss.value))
            self.loss_curve.append(float(np.mean(losses)))
        return self.loss_curve

    def _denoise_step(self, x: np.ndarray, obs_mat: np.ndarray, t: int,
                      dropout_rngs: list) -> np.ndarray:
        """Noise prediction at one diffusion step, dropout per row."""
        batch = x.shape[0]
        emb = np.tile(timestep_embedding(t, self.time_embed_dim, self.diffusion_steps),
                      (batch, 1))
        inp = np.concatenate([obs_mat, x, emb], axis=1)
        h = inp
        last = len(self.net.weights) - 1
        act = np.tanh if self.net.activation == "tanh" else lambda v: np.maximum(v, 0.0)
        for i, (w, b) in enumerate(zip(self.net.weights, self.net.biases)):
            h = h @ w.value + b.value
            if i < last:
                h = act(h)
                for r, rng in enumerate(dropout_rngs):
                    if rng is not None:
                        (m,) = _dropout_masks(rng, [h.shape[1]], self.dropout_rate, 1)
                        h[r] = h[r] * m[0]
        ab = self.alpha_bar[t]
        return (x - np.sqrt(ab) * h) / np.sqrt(1.0 - ab)

    def _reverse_diffusion(self, obs_mat: np.ndarray, noise_seed: int,
                           dropout_seeds: list[int | None]) -> np.ndarray:
        """Run the full reverse process; rows share the diffusion noise.

        Sharing the noise sequence across rows means that with several
        dropout seeds the row-to-row variance isolates dropout, not
        diffusion sampling noise.
        """
        batch = len(dropout_seeds)
        noise_rng = np.random.default_rng(noise_seed)
        dropout_rngs = [None if s is None else np.random.default_rng(s)
                        for s in dropout_seeds]
        x_init = noise_rng.normal(size=self.chunk_dim)
        x = np.tile(x_init, (batch, 1))
        for t in range(self.diffusion_steps - 1, -1, -1):
            eps_hat = self._denoise_step(x, obs_mat, t, dropout_rngs)
            ab = self.alpha_bar[t]
            # posterior over x_{t-1} through the clipped x0 estimate; the
            # clip keeps the near-unit betas at the schedule tail from
            # amplifying denoiser error
            x0_hat = np.clip((x - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab), -1.0, 1.0)
            if t == 0:
                x = x0_hat
                break
            ab_prev = self.alpha_bar[t - 1]
            beta = self.betas[t]
            coef0 = np.sqrt(ab_prev) * beta / (1.0 - ab)
            coef_t = np.sqrt(self.alphas[t]) * (1.0 - ab_prev) / (1.0 - ab)
            sigma = np.sqrt((1.0 - ab_prev) / (1.0 - ab) * beta)
            z = noise_rng.normal(size=self.chunk_dim)
            x = coef0 * x0_hat + coef_t * x + sigma * z
        return np.clip(x, -1.0, 1.0)

    def sample_chunk(self, window: np.ndarray, noise_seed: int = 0,
                     dropout_seed: int | None = None) -> np.ndarray:
        obs_mat = self._norm_window(window)[None, :]
        out = self._reverse_diffusion(obs_mat, noise_seed, [dropout_seed])
        return out[0].reshape(self.horizon, self.action_dim)

    def sample_chunks_batch(self, window: np.ndarray, noise_seed: int,
                            dropout_seeds: list[int | None]) -> np.ndarray:
        obs_mat = np.tile(self._norm_window(window), (len(dropout_seeds), 1))
        out = self._reverse_diffusion(obs_mat, noise_seed, dropout_seeds)
        return out.reshape(len(dropout_seeds), self.horizon, self.action_dim)

    def predict_batch(self, windows: np.ndarray, noise_seed: int = 0) -> np.ndarray:
        """Dropout-off chunks for a batch of distinct observation windows;
        the diffusion noise sequence is shared across rows."""
        obs_mat = self._norm_windows(windows)
        out = self._reverse_diffusion(obs_mat, noise_seed, [None] * obs_mat.shape[0])
        return out.reshape(-1, self.horizon, self.action_dim)


# ---------------------------------------------------------------------------
# construction and serialization
# ---------------------------------------------------------------------------

def make_policy(backend: str, obs_dim: int, action_dim: int, seed: int = 0,
                **kwargs):
    if backend == "bc":
        return BCPolicy(obs_dim, action_dim, seed=seed, **kwargs)
    if backend == "ddpm":
        return DDPMPolicy(obs_dim, action_dim, seed=seed, **kwargs)
    raise ValueError(f"unknown policy backend {backend!r}")


def train(data: TrainingSet, backend: str, obs_dim: int, action_dim: int,
          cfg: TrainConfig = TrainConfig(), **kwargs):
    """Train a fresh policy; returns (policy, per-epoch loss curve)."""
    policy = make_policy(backend, obs_dim, action_dim, seed=cfg.seed, **kwargs)
    curve = policy.fit(data, cfg)
    return policy, curve


def save_policy(policy, path) -> None:
    header = {
        "backend": policy.backend,
        "obs_dim": policy.obs_dim,
        "action_dim": policy.action_dim,
        "horizon": policy.horizon,
        "n_obs_steps": policy.n_obs_steps,
        "hidden": list(policy.hidden),
        "dropout_rate": policy.dropout_rate,
        "activation": policy.net.activation,
        "loss_curve": policy.loss_curve,
        "normalizers": {
            "obs": policy.obs_normalizer.state() if policy.obs_normalizer.fitted else None,
            "action": policy.action_normalizer.state() if policy.action_normalizer.fitted else None,
        },
    }
    if policy.backend == "ddpm":
        header["diffusion"] = {
            "steps": policy.diffusion_steps,
            "time_embed_dim": policy.time_embed_dim,
        }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    weights = np.ascontiguousarray(policy.net.flat_weights(), dtype="<f8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", FORMAT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(weights.tobytes())


def load_policy(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise ValueError("not a policy params file (bad magic)")
    version, = struct.unpack_from("<H", raw, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported params version {version}")
    hlen, = struct.unpack_from("<I", raw, 6)
    header = json.loads(raw[10:10 + hlen].decode("utf-8"))
    kwargs = dict(horizon=header["horizon"], n_obs_steps=header["n_obs_steps"],
                  hidden=tuple(header["hidden"]), dropout_rate=header["dropout_rate"],
                  activation=header["activation"])
    if header["backend"] == "ddpm":
        kwargs["diffusion_steps"] = header["diffusion"]["steps"]
        kwargs["time_embed_dim"] = header["diffusion"]["time_embed_dim"]
    policy = make_policy(header["backend"], header["obs_dim"], header["action_dim"],
                         seed=0, **kwargs)
    flat = np.frombuffer(raw[10 + hlen:], dtype="<f8")
    policy.net.load_flat(np.array(flat, dtype=float))
    norms = header["normalizers"]
    if norms["obs"] is not None:
        policy.obs_normalizer = Normalizer.from_state(norms["obs"])
    if norms["action"] is not None:
        policy.action_normalizer = Normalizer.from_state(norms["action"])
    policy.loss_curve = list(header.get("loss_curve", []))
    return policy
