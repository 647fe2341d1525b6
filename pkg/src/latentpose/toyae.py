"""Small fully-connected autoencoder with hand-written backpropagation.

Architecture: input -> hidden ReLU layers -> tanh latent -> mirrored decoder
-> sigmoid output, trained with Adam on a bootstrapped pixel-wise squared
loss (only the top 1/k pixels by reconstruction error contribute). Includes
the rotated-square training loop and the latent-trace sinusoid analysis.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .augment import AugmentConfig, augment, make_rng
from .errors import TrainingDivergedError
from .squares import CANVAS_SIZE, canonical_spec, draw_batch, sample_distribution

CHECKPOINT_MAGIC = b"TOYM"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# Bootstrapped loss


def _bootstrap_masks(errors: np.ndarray, k: int) -> np.ndarray:
    """Row-wise mask of the ceil(D/k) largest entries, ties to lower index."""
    n, d = errors.shape
    m = -(-d // k)
    if m >= d:
        return np.ones_like(errors, dtype=bool)
    kth = -np.partition(-errors, m - 1, axis=1)[:, m - 1]
    above = errors > kth[:, None]
    at = errors == kth[:, None]
    need = m - above.sum(axis=1)
    take = at & (np.cumsum(at, axis=1) <= need[:, None])
    return above | take


def bootstrapped_l2(x: np.ndarray, x_hat: np.ndarray, k: int) -> tuple[float, np.ndarray]:
    """Sum of the top-1/k per-pixel squared errors plus the gradient mask.

    With k=1 this is the plain squared-L2 reconstruction loss over all
    pixels. The mask marks exactly the contributing pixels.
    """
    x = np.asarray(x)
    x_hat = np.asarray(x_hat)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    if k < 1:
        raise ValueError("bootstrap factor k must be >= 1")
    errors = (np.asarray(x, dtype=np.float64) - x_hat) ** 2
    mask = _bootstrap_masks(errors.reshape(1, -1), k)[0].reshape(x.shape)
    return float(errors[mask].sum()), mask


# ---------------------------------------------------------------------------
# Model


@dataclass
class ToyModel:
    """Weights of the encoder/decoder pair; layer i maps (in_i -> out_i)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input_side: int
    latent_dim: int

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def copy(self) -> "ToyModel":
        return ToyModel(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.input_side,
            self.latent_dim,
        )


def init_toy_model(
    input_side: int = CANVAS_SIZE,
    hidden: tuple[int, ...] = (256, 64),
    latent_dim: int = 2,
    seed: int = 0,
    dtype=np.float32,
    rng=None,
) -> ToyModel:
    """Xavier-uniform initialized model with zero biases."""
    if rng is None:
        rng = make_rng(seed)
    input_dim = input_side * input_side
    dims = [input_dim, *hidden, latent_dim, *reversed(hidden), input_dim]
    weights = []
    biases = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return ToyModel(weights, biases, input_side, latent_dim)


def _latent_index(model: ToyModel) -> int:
    return len(model.weights) // 2 - 1


def _forward_layers(model: ToyModel, batch: np.ndarray) -> list[np.ndarray]:
    """Activations per layer; batch must be (n, input_dim) in the model dtype."""
    latent_at = _latent_index(model)
    last = len(model.weights) - 1
    activations = [batch]
    a = batch
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w + b
        if i == latent_at:
            a = np.tanh(z)
        elif i == last:
            a = 1.0 / (1.0 + np.exp(-z))
        else:
            a = np.maximum(z, 0.0)
        activations.append(a)
    return activations


def _as_batch(model: ToyModel, batch: np.ndarray) -> tuple[np.ndarray, tuple]:
    arr = np.asarray(batch, dtype=model.weights[0].dtype)
    if arr.ndim == 1:
        arr = arr[None, :]
    shape = arr.shape
    return arr.reshape(shape[0], -1), shape


def forward(model: ToyModel, batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Encode and decode a batch; returns (codes, reconstructions).

    Accepts (n, D), (n, H, W), or a single flat sample; reconstructions are
    returned in the input shape.
    """
    flat, shape = _as_batch(model, batch)
    if flat.shape[1] != model.input_dim:
        raise ValueError(f"batch has {flat.shape[1]} features, model expects {model.input_dim}")
    activations = _forward_layers(model, flat)
    return activations[_latent_index(model) + 1], activations[-1].reshape(shape)


def encode(model: ToyModel, batch: np.ndarray) -> np.ndarray:
    return forward(model, batch)[0]


def _backprop(model: ToyModel, activations, targets, mask):
    out = activations[-1]
    diff = (out - targets) * mask
    n = out.shape[0]
    loss = float(np.sum(np.square(diff, dtype=np.float64))) / n
    latent_at = _latent_index(model)
    last = len(model.weights) - 1
    delta = (2.0 / n) * diff * out * (1.0 - out)  # sigmoid derivative
    grads_w = [None] * len(model.weights)
    grads_b = [None] * len(model.weights)
    for i in range(last, -1, -1):
        grads_w[i] = activations[i].T @ delta
        grads_b[i] = delta.sum(axis=0)
        if i == 0:
            break
        back = delta @ model.weights[i].T
        a = activations[i]
        if i - 1 == latent_at:
            back *= 1.0 - a * a  # tanh derivative
        else:
            back *= a > 0  # relu derivative
        delta = back
    return loss, grads_w, grads_b


def backward(
    model: ToyModel,
    batch: np.ndarray,
    targets: np.ndarray,
    mask: np.ndarray,
) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Exact gradients of the masked mean squared reconstruction loss.

    The loss is mean over the batch of the per-sample sum of masked squared
    pixel errors; ``mask`` marks the bootstrapped pixels per sample.
    """
    flat, _ = _as_batch(model, batch)
    flat_t, _ = _as_batch(model, targets)
    if flat_t.shape != flat.shape:
        raise ValueError("targets must match the batch shape")
    flat_m = np.asarray(mask).reshape(flat.shape)
    return _backprop(model, _forward_layers(model, flat), flat_t, flat_m)


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and experiment settings; defaults are the toy-scale ones."""

    learning_rate: float = 2e-4
    batch_size: int = 64
    iterations: int = 10000
    bootstrap_k: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    input_side: int = CANVAS_SIZE
    hidden: tuple[int, ...] = (256, 64)
    latent_dim: int = 2

    def __post_init__(self):
        if min(self.learning_rate, self.batch_size, self.bootstrap_k, self.eps) <= 0:
            raise ValueError("learning_rate, batch_size, bootstrap_k and eps must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("Adam betas must be in (0, 1)")


LOSS_SAMPLE_EVERY = 100


def train(
    config: TrainConfig,
    input_dist: str,
    target_dist: str,
    augment_config: AugmentConfig | None = None,
) -> tuple[ToyModel, list[tuple[int, float]]]:
    """Train the autoencoder to reconstruct clean squares from sampled inputs.

    When the target distribution equals the input distribution the target is
    the input image itself (plain autoencoder). Otherwise the target is the
    canonical fixed-scale centered square of ``target_dist`` at the *same
    rotation* as the input, which makes the encoding invariant to the
    input's scale/translation variation. Optional augmentations apply to the
    input only; targets stay clean. Deterministic given the seed.
    """
    rng = make_rng(config.seed)
    model = init_toy_model(
        input_side=config.input_side,
        hidden=config.hidden,
        latent_dim=config.latent_dim,
        rng=rng,
    )
    if config.iterations == 0:
        return model, []
    side = config.input_side
    dim = side * side
    same = input_dist == target_dist
    if not same:
        canonical_spec(target_dist, 0.0)  # validates the pairing up front
    moments_m = [np.zeros_like(w) for w in model.weights + model.biases]
    moments_v = [np.zeros_like(w) for w in model.weights + model.biases]
    params = model.weights + model.biases
    curve = []
    one_minus_b1 = 1.0 - config.beta1
    one_minus_b2 = 1.0 - config.beta2
    for iteration in range(config.iterations):
        specs = [sample_distribution(input_dist, rng) for _ in range(config.batch_size)]
        inputs = draw_batch(specs, side).reshape(config.batch_size, dim)
        if same:
            targets = inputs
        else:
            targets = draw_batch([canonical_spec(target_dist, sp.r) for sp in specs], side)
            targets = targets.reshape(config.batch_size, dim)
        if augment_config is not None:
            inputs = np.stack(
                [augment(img.reshape(side, side), augment_config, rng)[0].reshape(dim) for img in inputs]
            ).astype(np.float32)
        activations = _forward_layers(model, inputs)
        errors = (targets.astype(np.float64) - activations[-1]) ** 2
        mask = _bootstrap_masks(errors, config.bootstrap_k)
        loss, grads_w, grads_b = _backprop(model, activations, targets, mask)
        if not math.isfinite(loss):
            raise TrainingDivergedError(f"loss became {loss}", iteration=iteration)
        step = iteration + 1
        scale_m = config.learning_rate / (1.0 - config.beta1**step)
        corr_v = 1.0 - config.beta2**step
        for p, g, m, v in zip(params, grads_w + grads_b, moments_m, moments_v):
            m *= config.beta1
            m += one_minus_b1 * g
            v *= config.beta2
            v += one_minus_b2 * np.square(g)
            p -= scale_m * m / (np.sqrt(v / corr_v) + config.eps)
        if iteration % LOSS_SAMPLE_EVERY == 0 or iteration == config.iterations - 1:
            curve.append((iteration, loss))
    return model, curve


# ---------------------------------------------------------------------------
# Latent-trace analysis


@dataclass(frozen=True)
class SinusoidFit:
    omega: float
    amplitude: float
    phase: float
    r_squared: float
    degenerate: bool = False


@dataclass(frozen=True)
class LatentAnalysis:
    angles: np.ndarray  # radians
    traces: dict  # name -> (n_angles, latent_dim) raw codes
    normalized: dict  # name -> (n_angles, latent_dim) in [-1, 1]
    fits: dict  # (name, dim) -> SinusoidFit
    phase_difference: dict  # name -> z1/z2 phase offset in radians

    def trace_gap(self, first: str, second: str) -> float:
        """Mean pointwise gap between two normalized traces."""
        return float(np.mean(np.abs(self.normalized[first] - self.normalized[second])))


_OMEGA_GRID = np.arange(0.25, 8.0 + 1e-9, 0.005)


def _fit_sinusoid(angles: np.ndarray, values: np.ndarray) -> SinusoidFit:
    """Least-squares A*sin(omega*r + phi) via an omega grid search."""
    sst = float(np.sum((values - values.mean()) ** 2))
    if sst < 1e-12:
        return SinusoidFit(0.0, 0.0, 0.0, 0.0, degenerate=True)
    sin = np.sin(_OMEGA_GRID[:, None] * angles[None, :])
    cos = np.cos(_OMEGA_GRID[:, None] * angles[None, :])
    ss = np.einsum("ij,ij->i", sin, sin)
    cc = np.einsum("ij,ij->i", cos, cos)
    sc = np.einsum("ij,ij->i", sin, cos)
    sy = sin @ values
    cy = cos @ values
    det = ss * cc - sc * sc
    det = np.where(np.abs(det) < 1e-12, np.inf, det)
    a = (cc * sy - sc * cy) / det
    b = (ss * cy - sc * sy) / det
    sse = float(np.sum(values**2)) - (a * sy + b * cy)
    best = int(np.argmin(sse))
    return SinusoidFit(
        omega=float(_OMEGA_GRID[best]),
        amplitude=float(math.hypot(a[best], b[best])),
        phase=float(math.atan2(b[best], a[best])),
        r_squared=1.0 - float(sse[best]) / sst,
    )


def analyze_latent(
    model: ToyModel,
    n_angles: int = 40,
    distributions: tuple[str, ...] = ("a", "b", "c"),
    seed: int = 0,
) -> LatentAnalysis:
    """Encode squares over a rotation sweep and fit sinusoids per latent dim.

    Latent dims are min-max normalized to [-1, 1] jointly across the listed
    distributions so traces are directly comparable; a dimension with no
    spread is flagged degenerate and the fit is skipped.
    """
    if model.latent_dim != 2:
        raise ValueError("latent-trace analysis expects a 2-dimensional latent space")
    rng = make_rng(seed)
    angles = np.arange(n_angles) * (2.0 * math.pi / n_angles)
    traces = {}
    for name in distributions:
        specs = [sample_distribution(name, rng, rotation=r) for r in angles]
        codes = encode(model, draw_batch(specs, model.input_side))
        traces[name] = codes.astype(np.float64)
    stacked = np.concatenate(list(traces.values()), axis=0)
    lo = stacked.min(axis=0)
    hi = stacked.max(axis=0)
    span = np.where(hi - lo < 1e-12, 1.0, hi - lo)
    normalized = {name: 2.0 * (t - lo) / span - 1.0 for name, t in traces.items()}
    fits = {}
    phase_difference = {}
    for name in distributions:
        for dim in range(model.latent_dim):
            if hi[dim] - lo[dim] < 1e-12:
                fits[(name, dim)] = SinusoidFit(0.0, 0.0, 0.0, 0.0, degenerate=True)
            else:
                fits[(name, dim)] = _fit_sinusoid(angles, normalized[name][:, dim])
        f0, f1 = fits[(name, 0)], fits[(name, 1)]
        if not (f0.degenerate or f1.degenerate):
            raw = f0.phase - f1.phase
            phase_difference[name] = math.atan2(math.sin(raw), math.cos(raw))
    return LatentAnalysis(angles, traces, normalized, fits, phase_difference)


def write_traces_csv(analysis: LatentAnalysis, path) -> None:
    """Normalized latent traces as CSV rows (r_deg, z1, z2, distribution)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("r_deg,z1,z2,distribution\n")
        for name, trace in analysis.normalized.items():
            for angle, (z1, z2) in zip(analysis.angles, trace):
                fh.write(f"{math.degrees(angle):.6f},{z1:.9f},{z2:.9f},{name}\n")


def write_loss_csv(curve, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("iteration,loss\n")
        for iteration, loss in curve:
            fh.write(f"{iteration},{loss:.9f}\n")


# ---------------------------------------------------------------------------
# Checkpoints
#
# Layout (little-endian): magic "TOYM" | u32 version | u32 matrix count |
# u32 input_side | u32 latent_dim; then per matrix u32 rows, u32 cols,
# rows*cols f32 weights (row-major), cols f32 bias.

_CKPT_HEADER = struct.Struct("<4sIIII")
_DIMS = struct.Struct("<II")


def save_toy_model(model: ToyModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(
            _CKPT_HEADER.pack(
                CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(model.weights), model.input_side, model.latent_dim
            )
        )
        for w, b in zip(model.weights, model.biases):
            fh.write(_DIMS.pack(w.shape[0], w.shape[1]))
            fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def load_toy_model(path) -> ToyModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _CKPT_HEADER.size:
        raise ValueError(f"{path}: truncated checkpoint header")
    magic, version, count, input_side, latent_dim = _CKPT_HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    offset = _CKPT_HEADER.size
    weights = []
    biases = []
    for _ in range(count):
        if offset + _DIMS.size > len(blob):
            raise ValueError(f"{path}: truncated at byte {offset}")
        rows, cols = _DIMS.unpack_from(blob, offset)
        offset += _DIMS.size
        need = 4 * (rows * cols + cols)
        if offset + need > len(blob):
            raise ValueError(f"{path}: truncated at byte {offset}")
        weights.append(np.frombuffer(blob, dtype="<f4", count=rows * cols, offset=offset).reshape(rows, cols).copy())
        offset += 4 * rows * cols
        biases.append(np.frombuffer(blob, dtype="<f4", count=cols, offset=offset).copy())
        offset += 4 * cols
    if offset != len(blob):
        raise ValueError(f"{path}: {len(blob) - offset} trailing bytes")
    model = ToyModel(weights, biases, input_side, latent_dim)
    dims = model.layer_dims()
    if dims[0] != input_side * input_side or dims[len(dims) // 2] != latent_dim:
        raise ValueError(f"{path}: layer dims {dims} disagree with the header")
    return model
