"""Encoder, channel, decoder; the rate-bounded training loop and its MMD-VAE reference."""

from __future__ import annotations

import enum
import math
import struct
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Parameter, Rng, Tensor
from .channel import ChannelSpec, apply_noise_channel, dequantize, make_quantizer, quantize
from .datasets import Dataset
from .errors import DomainError, FormatError, NumericalError, ShapeError
from .mmd import DEFAULT_KERNEL, KernelSpec, mmd2, mmd_to_standard_normal, null_mmd2

SIGMA_FLOOR = 0.01
DEFAULT_LAMBDA = 1000.0
ESCALATED_LAMBDA = 10_000.0
NULL_FACTOR = 3.0


class Variant(enum.IntEnum):
    BIRVAE = 0
    MMDVAE_BASELINE = 1


class Activation(enum.IntEnum):
    LINEAR = 0
    RELU = 1
    SIGMOID = 2


_ACTIVATIONS = {
    Activation.LINEAR: lambda t: t,
    Activation.RELU: ad.relu,
    Activation.SIGMOID: ad.sigmoid,
}


@dataclass
class Layer:
    weight: Tensor
    bias: Tensor
    activation: Activation

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape

    def __call__(self, x) -> Tensor:
        return _ACTIVATIONS[self.activation](ad.affine(x, self.weight, self.bias))

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


def glorot_layer(rng: Rng, fan_in: int, fan_out: int, activation: Activation,
                 name: str = "") -> Layer:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    w = (rng.random((fan_in, fan_out)) * 2.0 - 1.0) * limit
    return Layer(Parameter(w, f"{name}.weight"), Parameter(np.zeros(fan_out), f"{name}.bias"),
                 Activation(activation))


@dataclass
class Model:
    encoder: list[Layer]  # hidden trunk followed by a linear mean head
    decoder: list[Layer]
    channel: ChannelSpec
    variant: Variant = Variant.BIRVAE
    sigma_head: Layer | None = None  # baseline only: trunk -> log sigma

    def __post_init__(self):
        d = self.channel.d
        if self.encoder[-1].shape[1] != d or self.decoder[0].shape[0] != d:
            raise ShapeError(f"encoder output {self.encoder[-1].shape} and decoder input "
                             f"{self.decoder[0].shape} must both match d={d}")
        if self.encoder[0].shape[0] != self.decoder[-1].shape[1]:
            raise ShapeError("encoder input width differs from decoder output width")
        if self.variant == Variant.BIRVAE and self.sigma_head is not None:
            raise DomainError("a rate-bounded model has no learned variance")
        if self.variant == Variant.MMDVAE_BASELINE and self.sigma_head is None:
            raise DomainError("the baseline needs a sigma head")

    @property
    def input_dim(self) -> int:
        return self.encoder[0].shape[0]

    @property
    def d(self) -> int:
        return self.channel.d

    def layers(self) -> list[Layer]:
        head = [self.sigma_head] if self.sigma_head is not None else []
        return self.encoder + head + self.decoder

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers() for p in layer.parameters()]


def build_model(input_dim: int, d: int, arch: Sequence[int], channel: ChannelSpec,
                variant: Variant = Variant.BIRVAE, rng: Rng | None = None) -> Model:
    """MLP encoder/decoder with relu hidden layers and Glorot-uniform weights."""
    if channel.d != d:
        raise ShapeError(f"channel has d={channel.d}, model asked for d={d}")
    rng = rng or Rng(0)
    widths = [input_dim, *arch]
    encoder = [glorot_layer(rng, a, b, Activation.RELU, f"enc{i}")
               for i, (a, b) in enumerate(zip(widths, widths[1:]))]
    encoder.append(glorot_layer(rng, widths[-1], d, Activation.LINEAR, "enc_mean"))
    sigma_head = None
    if variant == Variant.MMDVAE_BASELINE:
        sigma_head = glorot_layer(rng, widths[-1], d, Activation.LINEAR, "enc_logsigma")
        # start at the floor (the deterministic reference encoder); a zero bias would give
        # sigma ~ 1, a 0 bpi channel the decoder learns to ignore
        sigma_head.bias.data[...] = math.log(SIGMA_FLOOR)
    rev = [d, *reversed(arch)]
    decoder = [glorot_layer(rng, a, b, Activation.RELU, f"dec{i}")
               for i, (a, b) in enumerate(zip(rev, rev[1:]))]
    decoder.append(glorot_layer(rng, rev[-1], input_dim, Activation.SIGMOID, "dec_out"))
    return Model(encoder, decoder, channel, Variant(variant), sigma_head)


# ----------------------------------------------------------------------------
# forward passes

def _check_width(model: Model, x: Tensor) -> None:
    if x.data.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(f"model expects {model.input_dim} input columns, got shape {x.shape}")


def _trunk(model: Model, x: Tensor) -> Tensor:
    h = x
    for layer in model.encoder[:-1]:
        h = layer(h)
    return h


def encode(model: Model, x) -> tuple[Tensor, Tensor | None]:
    """Encoder mean and, for the baseline, the floored per-dimension sigma."""
    x = ad.as_tensor(x)
    _check_width(model, x)
    h = _trunk(model, x)
    y = model.encoder[-1](h)
    sigma = None
    if model.sigma_head is not None:
        sigma = ad.clamp_min(ad.exp(model.sigma_head(h)), SIGMA_FLOOR)
    return y, sigma


def encode_mean(model: Model, x) -> Tensor:
    return encode(model, x)[0]


def decode(model: Model, z) -> Tensor:
    h = ad.as_tensor(z)
    for layer in model.decoder:
        h = layer(h)
    return h


def sample_latent(model: Model, y: Tensor, sigma: Tensor | None, rng: Rng) -> Tensor:
    if sigma is None:
        return apply_noise_channel(y, model.channel, rng)
    return ad.add(y, ad.mul(sigma, ad.sample_normal(rng, y.shape)))


def _finite(name: str, t: Tensor) -> None:
    if not np.all(np.isfinite(t.data)):
        raise NumericalError(f"non-finite values in {name} (shape {t.shape})")


def training_loss(model: Model, batch, lam: float, rng: Rng,
                  kernel: KernelSpec = DEFAULT_KERNEL) -> tuple[Tensor, Tensor, Tensor]:
    """``(MSE + lam * MMD, MSE, MMD)`` for one minibatch.

    The noise draw comes first, then the prior sample for the MMD term, both
    from ``rng``.
    """
    x = ad.as_tensor(batch)
    if x.data.ndim != 2 or x.shape[0] < 2:
        raise DomainError(f"a training batch needs at least two rows, got shape {x.shape}")
    y, sigma = encode(model, x)
    _finite("encoder output", y)
    z = sample_latent(model, y, sigma, rng)
    _finite("latent", z)
    x_hat = decode(model, z)
    _finite("decoder output", x_hat)
    mse_part = ad.mse(x_hat, x)
    mmd_part = mmd_to_standard_normal(z, rng, kernel)
    loss = mse_part if lam == 0 else ad.add(mse_part, ad.mul(mmd_part, lam))
    _finite("loss", loss)
    return loss, mse_part, mmd_part


def baseline_loss(model: Model, batch, lam: float, rng: Rng,
                  kernel: KernelSpec = DEFAULT_KERNEL) -> Tensor:
    if model.variant != Variant.MMDVAE_BASELINE:
        raise DomainError("baseline_loss needs the MMD-VAE baseline variant")
    return training_loss(model, batch, lam, rng, kernel)[0]


# ----------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    lam: float = DEFAULT_LAMBDA
    epochs: int = 50
    batch: int = 200
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    arch: tuple[int, ...] = (1024, 1024)
    latent_dim: int = 2
    rate_bpi: float | None = None
    sigma_eps2: float | None = None
    variant: Variant = Variant.BIRVAE

    def __post_init__(self):
        if self.batch < 2:
            raise DomainError("batch must be at least 2 for the MMD term")
        if self.lam < 0:
            raise DomainError(f"lambda must be non-negative, got {self.lam}")
        if self.epochs < 0:
            raise DomainError("epochs must be non-negative")
        self.arch = tuple(int(a) for a in self.arch)
        self.variant = Variant(self.variant)
        if self.rate_bpi is not None and self.sigma_eps2 is not None:
            implied = ChannelSpec.from_rate(self.rate_bpi, self.latent_dim).sigma_eps2
            if not math.isclose(implied, self.sigma_eps2, rel_tol=1e-9):
                raise DomainError("rate_bpi and sigma_eps2 disagree; give only one")

    @property
    def channel(self) -> ChannelSpec:
        if self.variant == Variant.MMDVAE_BASELINE:
            # the floor bounds the baseline's rate the same way a fixed sigma would
            return ChannelSpec.from_sigma2(SIGMA_FLOOR ** 2, self.latent_dim)
        if self.sigma_eps2 is not None:
            return ChannelSpec.from_sigma2(self.sigma_eps2, self.latent_dim)
        if self.rate_bpi is not None:
            return ChannelSpec.from_rate(self.rate_bpi, self.latent_dim)
        raise DomainError("set either rate_bpi or sigma_eps2")


@dataclass
class Checkpoint:
    model: Model
    config: TrainConfig
    history: list[tuple[float, float, float]] = field(default_factory=list)

    def to_bytes(self) -> bytes:
        return checkpoint_to_bytes(self)


class TrainingDiverged(NumericalError):
    def __init__(self, message: str, checkpoint: Checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


def minibatches(n: int, batch: int, perm: np.ndarray) -> list[np.ndarray]:
    """Consecutive slices of ``perm``; a trailing slice of one row joins its predecessor."""
    starts = list(range(0, n, batch))
    if len(starts) > 1 and n - starts[-1] < 2:
        starts.pop()
    bounds = starts[1:] + [n]
    return [perm[a:b] for a, b in zip(starts, bounds)]


def train(dataset: Dataset | np.ndarray, config: TrainConfig, *,
          on_epoch: Callable[[int, float, float, float], None] | None = None,
          check_aggregate: bool = True) -> Checkpoint:
    data = dataset.items if isinstance(dataset, Dataset) else np.asarray(dataset, dtype=np.float64)
    n = data.shape[0]
    if n < 2:
        raise DomainError("training needs at least two items")
    init_rng, shuffle_rng, noise_rng, check_rng = Rng(config.seed).spawn(4)
    model = build_model(data.shape[1], config.latent_dim, config.arch, config.channel,
                        config.variant, init_rng)
    params = model.parameters()
    opt = Adam(params, config.lr, config.beta1, config.beta2, config.eps_adam)
    history: list[tuple[float, float, float]] = []
    for epoch in range(config.epochs):
        snapshot = [p.data.copy() for p in params]
        totals = np.zeros(3)
        try:
            for idx in minibatches(n, config.batch, shuffle_rng.permutation(n)):
                opt.zero_grad()
                loss, mse_part, mmd_part = training_loss(model, data[idx], config.lam, noise_rng)
                ad.backward(loss)
                opt.step()
                totals += len(idx) * np.array([loss.item(), mse_part.item(), mmd_part.item()])
        except NumericalError as exc:
            for p, saved in zip(params, snapshot):
                p.data[...] = saved
            raise TrainingDiverged(f"training diverged in epoch {epoch + 1}: {exc}",
                                   Checkpoint(model, config, history)) from exc
        row = tuple(float(v) for v in totals / n)
        history.append(row)
        if on_epoch is not None:
            on_epoch(epoch + 1, *row)
    ckpt = Checkpoint(model, config, history)
    if check_aggregate and config.lam > 0 and config.epochs > 0:
        value, null_mean = aggregate_mmd(model, data, check_rng, n=min(n, 500), pairs=50)
        if value > NULL_FACTOR * null_mean:
            warnings.warn(
                f"aggregate latent MMD^2 {value:.3g} exceeds {NULL_FACTOR:g}x the null mean "
                f"{null_mean:.3g}; the N(0, I) constraint is loose, consider lambda="
                f"{ESCALATED_LAMBDA:g}", RuntimeWarning, stacklevel=2)
    return ckpt


# ----------------------------------------------------------------------------
# evaluation

def _chunks(n: int, size: int = 1000):
    for a in range(0, n, size):
        yield slice(a, min(a + size, n))


def latents(model: Model, x, rng: Rng | None = None) -> np.ndarray:
    """Noiseless encoder means, or channel outputs when ``rng`` is given."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty((x.shape[0], model.d))
    for s in _chunks(x.shape[0]):
        y, sigma = encode(model, x[s])
        out[s] = sample_latent(model, y, sigma, rng).data if rng is not None else y.data
    return out


def reconstruct(model: Model, x, rng: Rng | None = None, mode: str = "stochastic",
                dither: bool = True, seed: int = 0) -> np.ndarray:
    """Decoder output for ``x`` with the channel in the given state.

    ``quantized`` replaces the noise by the dithered lattice quantizer with the
    matching step; ``dither`` and ``seed`` configure it.
    """
    x = np.asarray(x, dtype=np.float64)
    if mode not in ("stochastic", "noiseless", "quantized"):
        raise DomainError(f"unknown channel mode {mode!r}")
    if mode == "stochastic" and rng is None:
        raise DomainError("stochastic reconstruction needs an rng")
    if mode == "quantized":
        q = make_quantizer(model.channel, dither, seed)
        z_all = dequantize(quantize(latents(model, x), q), q)
    out = np.empty((x.shape[0], model.input_dim))
    for s in _chunks(x.shape[0]):
        if mode == "quantized":
            z = z_all[s]
        else:
            y, sigma = encode(model, x[s])
            z = sample_latent(model, y, sigma, rng) if mode == "stochastic" else y
        out[s] = decode(model, z).data
    return out


def generate(model: Model, count: int, rng: Rng) -> np.ndarray:
    z = rng.standard_normal((count, model.d))
    return np.clip(decode(model, z).data, 0.0, 1.0)


def per_image_mse(x_hat: np.ndarray, x: np.ndarray) -> float:
    """Sum of squared pixel errors per image, averaged over images."""
    diff = np.asarray(x_hat) - np.asarray(x)
    return float(np.einsum("ij,ij->", diff, diff) / diff.shape[0])


EVAL_SEED = 20180921


def evaluate_mse(model: Model, x, mode: str = "stochastic", seed: int = EVAL_SEED,
                 dither: bool = True) -> float:
    rng = Rng(seed) if mode == "stochastic" else None
    return per_image_mse(reconstruct(model, x, rng, mode, dither, seed), x)


def aggregate_mmd(model: Model, x, rng: Rng, n: int = 1000, pairs: int = 100,
                  kernel: KernelSpec = DEFAULT_KERNEL) -> tuple[float, float]:
    """MMD^2 between ``n`` channel outputs and N(0, I), with the null mean at the same size."""
    x = np.asarray(x, dtype=np.float64)[:n]
    z = latents(model, x, rng)
    value = mmd2(z, rng.standard_normal(z.shape), kernel).item()
    null = null_mmd2(z.shape[0], model.d, rng, pairs, kernel)
    return value, float(null.mean())


# ----------------------------------------------------------------------------
# checkpoint file

CKPT_MAGIC = b"BIRV"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sHBHddH")
_LAYER_HEAD = struct.Struct("<IIB")


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    m = ckpt.model
    layers = m.layers()
    parts = [_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, int(m.variant), m.d,
                             m.channel.sigma_eps2, float(ckpt.config.lam), len(layers))]
    for layer in layers:
        rows, cols = layer.shape
        parts.append(_LAYER_HEAD.pack(rows, cols, int(layer.activation)))
        parts.append(np.ascontiguousarray(layer.weight.data, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(layer.bias.data, dtype="<f8").tobytes())
    parts.append(struct.pack("<I", len(ckpt.history)))
    parts.append(np.asarray(ckpt.history, dtype="<f8").reshape(-1, 3).tobytes())
    return b"".join(parts)


def checkpoint_from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < _CKPT_HEAD.size:
        raise FormatError("checkpoint truncated inside the header")
    magic, version, variant, d, sigma2, lam, nlayers = _CKPT_HEAD.unpack_from(blob, 0)
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}, expected {CKPT_MAGIC!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        variant = Variant(variant)
    except ValueError:
        raise FormatError(f"unknown model variant {variant}") from None
    pos = _CKPT_HEAD.size
    layers = []
    for i in range(nlayers):
        if pos + _LAYER_HEAD.size > len(blob):
            raise FormatError(f"checkpoint truncated in layer {i} header")
        rows, cols, act = _LAYER_HEAD.unpack_from(blob, pos)
        pos += _LAYER_HEAD.size
        nbytes = 8 * (rows * cols + cols)
        if pos + nbytes > len(blob):
            raise FormatError(f"checkpoint truncated in layer {i} weights")
        w = np.frombuffer(blob, "<f8", rows * cols, pos).reshape(rows, cols).astype(np.float64)
        b = np.frombuffer(blob, "<f8", cols, pos + 8 * rows * cols).astype(np.float64)
        pos += nbytes
        try:
            act = Activation(act)
        except ValueError:
            raise FormatError(f"unknown activation id {act} in layer {i}") from None
        layers.append(Layer(Parameter(w), Parameter(b), act))
    if pos + 4 > len(blob):
        raise FormatError("checkpoint truncated before the history block")
    (epochs,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if pos + 24 * epochs != len(blob):
        raise FormatError(f"history block holds {len(blob) - pos} bytes, expected {24 * epochs}")
    hist = np.frombuffer(blob, "<f8", 3 * epochs, pos).reshape(epochs, 3)
    history = [tuple(float(v) for v in row) for row in hist]

    # the encoder ends at its first linear layer; the baseline's sigma head follows it
    split = next((i for i, layer in enumerate(layers) if layer.activation == Activation.LINEAR), None)
    if split is None:
        raise FormatError("checkpoint has no linear encoder output layer")
    encoder = layers[:split + 1]
    rest = layers[split + 1:]
    sigma_head = None
    if variant == Variant.MMDVAE_BASELINE:
        if not rest:
            raise FormatError("baseline checkpoint lacks its sigma head")
        sigma_head, rest = rest[0], rest[1:]
    if not rest:
        raise FormatError("checkpoint has no decoder layers")
    for chain in (encoder, rest):
        for a, b in zip(chain, chain[1:]):
            if a.shape[1] != b.shape[0]:
                raise FormatError(f"layer widths do not chain: {a.shape} -> {b.shape}")
    if sigma_head is not None and sigma_head.shape != encoder[-1].shape:
        raise FormatError(f"sigma head {sigma_head.shape} does not match the mean head")
    try:
        channel = ChannelSpec.from_sigma2(sigma2, d)
        model = Model(encoder, rest, channel, variant, sigma_head)
    except (ShapeError, DomainError) as exc:
        raise FormatError(f"inconsistent checkpoint: {exc}") from exc
    arch = tuple(layer.shape[1] for layer in encoder[:-1])
    config = TrainConfig(lam=lam, epochs=epochs, arch=arch, latent_dim=d,
                         sigma_eps2=None if variant == Variant.MMDVAE_BASELINE else sigma2,
                         variant=variant)
    return Checkpoint(model, config, history)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        return checkpoint_from_bytes(f.read())

