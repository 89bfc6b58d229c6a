"""
Spectral-domain autoencoder for adaptive filter weights

    E(w) = E2( silu( layernorm( E1( [Re rfft w, Im rfft w] ) ) ) )
    D(z) = irfft( D2( silu( layernorm( D1(z) ) ) ) )

The vae/infovae variants give E2 2k outputs: mean and log-variance heads.
Forward passes can record a tape; reverse-mode gradients are computed by
hand from the tape (parameters, decoder VJP) and the decoder JVP by
forward-mode propagation. Everything runs in float64.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.special import expit

from .config import MODEL
from .errors import ContainerError, NumericError, ShapeError, UsageError

VARIANTS = ("plain", "vae", "infovae")

# documented parameter order of the model blob
LAYER_ORDER = ("encoder_l1", "encoder_l2", "decoder_l1", "decoder_l2")
PARAMETER_ORDER = tuple(f"{layer}.{part}" for layer in LAYER_ORDER for part in ("weight", "bias"))


# =============================================================================
# SPECTRAL MAPS
# =============================================================================

def spectral_size(filter_len: int) -> int:
    return 2 * (filter_len // 2 + 1)


def _check_even(filter_len: int):
    if filter_len < 2 or filter_len % 2:
        raise ShapeError(f"Filter length must be even and >= 2, got {filter_len}")


def rfft_concat(w: np.ndarray) -> np.ndarray:
    """[Re rfft(w), Im rfft(w)] along the last axis"""
    w = np.asarray(w, dtype=np.float64)
    _check_even(w.shape[-1])
    spectrum = np.fft.rfft(w, axis=-1)
    return np.concatenate((spectrum.real, spectrum.imag), axis=-1)


def irfft_concat(s: np.ndarray) -> np.ndarray:
    """Inverse of rfft_concat; DC and Nyquist imaginary slots are ignored"""
    s = np.asarray(s, dtype=np.float64)
    size = s.shape[-1]
    if size % 2 or size < 4:
        raise ShapeError(f"Spectral vector length must be 2*(L/2+1) with even L, got {size}")
    bins = size // 2
    return np.fft.irfft(s[..., :bins] + 1j * s[..., bins:], n=2 * (bins - 1), axis=-1)


def rfft_concat_adjoint(s_bar: np.ndarray) -> np.ndarray:
    """Transpose of rfft_concat: spectral cotangent -> tap cotangent"""
    s_bar = np.asarray(s_bar, dtype=np.float64)
    bins = s_bar.shape[-1] // 2
    length = 2 * (bins - 1)
    weight = np.full(bins, 0.5)
    weight[0] = weight[-1] = 1.0
    spectrum = (s_bar[..., :bins] + 1j * s_bar[..., bins:]) * weight
    return length * np.fft.irfft(spectrum, n=length, axis=-1)


def irfft_concat_adjoint(w_bar: np.ndarray) -> np.ndarray:
    """Transpose of irfft_concat: tap cotangent -> spectral cotangent"""
    w_bar = np.asarray(w_bar, dtype=np.float64)
    length = w_bar.shape[-1]
    _check_even(length)
    spectrum = np.fft.rfft(w_bar, axis=-1)
    weight = np.full(length // 2 + 1, 2.0 / length)
    weight[0] = weight[-1] = 1.0 / length
    real = spectrum.real * weight
    imag = spectrum.imag * weight
    imag[..., 0] = 0.0
    imag[..., -1] = 0.0
    return np.concatenate((real, imag), axis=-1)


# =============================================================================
# ACTIVATIONS
# =============================================================================

def silu(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x * expit(x)


def silu_grad(x: np.ndarray) -> np.ndarray:
    sig = expit(x)
    return sig * (1.0 + x * (1.0 - sig))


@dataclass
class LayerNormCache:
    normalized: np.ndarray
    scale: np.ndarray        # sqrt(max(var, eps)), one per row
    floored: np.ndarray      # rows whose variance sat below eps


def layernorm(v: np.ndarray, epsilon: float = MODEL["ln_epsilon"]) -> Tuple[np.ndarray, LayerNormCache]:
    """(v - mean) / sqrt(max(var, eps)) over the last axis, no affine"""
    v = np.asarray(v, dtype=np.float64)
    centered = v - v.mean(axis=-1, keepdims=True)
    var = np.mean(centered ** 2, axis=-1, keepdims=True)
    floored = var < epsilon
    scale = np.sqrt(np.maximum(var, epsilon))
    out = centered / scale
    return out, LayerNormCache(out, scale, floored)


def layernorm_backward(g: np.ndarray, cache: LayerNormCache) -> np.ndarray:
    """Cotangent through layernorm; the Jacobian is symmetric, so this is also its JVP"""
    g_centered = g - g.mean(axis=-1, keepdims=True)
    x = cache.normalized
    full = (g_centered - x * np.mean(g * x, axis=-1, keepdims=True)) / cache.scale
    flat = g_centered / cache.scale
    return np.where(cache.floored, flat, full)


# =============================================================================
# LAYERS AND MODEL
# =============================================================================

@dataclass
class DenseLayer:
    """y = W x + b with W stored out x in"""
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"Inconsistent layer shapes {self.weight.shape} / {self.bias.shape}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weight.T + self.bias

    @classmethod
    def uniform(cls, in_dim: int, out_dim: int, rng: np.random.Generator) -> "DenseLayer":
        bound = math.sqrt(1.0 / in_dim)
        return cls(rng.uniform(-bound, bound, (out_dim, in_dim)), rng.uniform(-bound, bound, out_dim))

    @classmethod
    def zeros(cls, in_dim: int, out_dim: int) -> "DenseLayer":
        return cls(np.zeros((out_dim, in_dim)), np.zeros(out_dim))


@dataclass
class BlockTape:
    """Activations of one dense -> layernorm -> silu -> dense stack"""
    inputs: np.ndarray
    pre_norm: np.ndarray
    norm: LayerNormCache
    hidden: np.ndarray
    outputs: np.ndarray


@dataclass
class EncoderTape:
    net: BlockTape

    @property
    def head(self) -> np.ndarray:
        return self.net.outputs


@dataclass
class Reparameterization:
    """Links decoder inputs to an encoder head: z = mean (+ exp(logvar/2) eta)"""
    encoder: EncoderTape
    eta: Optional[np.ndarray] = None
    rows: Optional[np.ndarray] = None   # encoder rows feeding each decoder row


@dataclass
class DecoderTape:
    net: BlockTape
    link: Optional[Reparameterization] = None


def _block_forward(first: DenseLayer, second: DenseLayer, x: np.ndarray, epsilon: float) -> BlockTape:
    pre = first(x)
    normed, cache = layernorm(pre, epsilon)
    hidden = silu(normed)
    return BlockTape(x, pre, cache, hidden, second(hidden))


def _block_backward(first: DenseLayer, second: DenseLayer, tape: BlockTape,
                    g_out: np.ndarray) -> Tuple[Tuple[np.ndarray, ...], np.ndarray]:
    """Returns ((dW1, db1, dW2, db2), d_inputs); gradients summed over rows"""
    g_w2 = g_out.T @ tape.hidden
    g_b2 = g_out.sum(axis=0)
    g_hidden = g_out @ second.weight
    g_normed = g_hidden * silu_grad(tape.norm.normalized)
    g_pre = layernorm_backward(g_normed, tape.norm)
    g_w1 = g_pre.T @ tape.inputs
    g_b1 = g_pre.sum(axis=0)
    return (g_w1, g_b1, g_w2, g_b2), g_pre @ first.weight


def _block_input_cotangent(first: DenseLayer, second: DenseLayer, tape: BlockTape,
                           g_out: np.ndarray) -> np.ndarray:
    """Input cotangents only; g_out rows may outnumber the taped rows (broadcast)"""
    g_normed = (g_out @ second.weight) * silu_grad(tape.norm.normalized)
    return layernorm_backward(g_normed, tape.norm) @ first.weight


@dataclass
class AutoencoderModel:
    """Two-layer spectral encoder/decoder (plain, vae or infovae heads)"""
    encoder_l1: DenseLayer
    encoder_l2: DenseLayer
    decoder_l1: DenseLayer
    decoder_l2: DenseLayer
    variant: str = MODEL["variant"]
    filter_len: int = 0
    hidden_dim: int = MODEL["hidden_dim"]
    latent_dim: int = MODEL["latent_dim"]
    ln_epsilon: float = MODEL["ln_epsilon"]
    seed: int = MODEL["seed"]
    metadata: Dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ShapeError(f"Unknown variant '{self.variant}' (expected one of {VARIANTS})")
        _check_even(self.filter_len)
        spec = spectral_size(self.filter_len)
        expected = {
            "encoder_l1": (self.hidden_dim, spec),
            "encoder_l2": (self.head_dim, self.hidden_dim),
            "decoder_l1": (self.hidden_dim, self.latent_dim),
            "decoder_l2": (spec, self.hidden_dim),
        }
        for name, shape in expected.items():
            layer = getattr(self, name)
            if layer.weight.shape != shape:
                raise ShapeError(f"{name} weight is {layer.weight.shape}, expected {shape}")

    @property
    def head_dim(self) -> int:
        return self.latent_dim if self.variant == "plain" else 2 * self.latent_dim

    @property
    def is_variational(self) -> bool:
        return self.variant != "plain"

    @classmethod
    def initialize(cls, filter_len: int, hidden_dim: int = MODEL["hidden_dim"],
                   latent_dim: int = MODEL["latent_dim"], variant: str = MODEL["variant"],
                   seed: int = MODEL["seed"], ln_epsilon: float = MODEL["ln_epsilon"]) -> "AutoencoderModel":
        """Uniform +-sqrt(1/fan_in) initialization, seeded"""
        _check_even(filter_len)
        rng = np.random.default_rng(seed)
        spec = spectral_size(filter_len)
        head = latent_dim if variant == "plain" else 2 * latent_dim
        return cls(
            encoder_l1=DenseLayer.uniform(spec, hidden_dim, rng),
            encoder_l2=DenseLayer.uniform(hidden_dim, head, rng),
            decoder_l1=DenseLayer.uniform(latent_dim, hidden_dim, rng),
            decoder_l2=DenseLayer.uniform(hidden_dim, spec, rng),
            variant=variant, filter_len=filter_len, hidden_dim=hidden_dim,
            latent_dim=latent_dim, ln_epsilon=ln_epsilon, seed=seed,
        )

    def layers(self) -> List[DenseLayer]:
        return [getattr(self, name) for name in LAYER_ORDER]

    def parameters(self) -> Dict[str, np.ndarray]:
        """Parameter arrays by name in blob order (live references)"""
        params = {}
        for name, layer in zip(LAYER_ORDER, self.layers()):
            params[f"{name}.weight"] = layer.weight
            params[f"{name}.bias"] = layer.bias
        return params

    def copy(self) -> "AutoencoderModel":
        clone = [DenseLayer(l.weight.copy(), l.bias.copy()) for l in self.layers()]
        return AutoencoderModel(*clone, variant=self.variant, filter_len=self.filter_len,
                                hidden_dim=self.hidden_dim, latent_dim=self.latent_dim,
                                ln_epsilon=self.ln_epsilon, seed=self.seed,
                                metadata=json.loads(json.dumps(self.metadata)))

    # --- decoder protocol used by the latent controllers ---

    def encode_mean(self, w: np.ndarray) -> np.ndarray:
        out = encode(self, w)
        return out[0] if isinstance(out, tuple) else out

    def decode(self, z: np.ndarray) -> np.ndarray:
        return decode(self, z)

    def vjp(self, z: np.ndarray, v: np.ndarray) -> np.ndarray:
        return decoder_vjp(self, z, v)

    def jvp(self, z: np.ndarray, u: np.ndarray) -> np.ndarray:
        return decoder_jvp(self, z, u)


# =============================================================================
# FORWARD / REVERSE
# =============================================================================

def _as_batch(x: np.ndarray, width: int, what: str) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.ndim != 2 or batch.shape[1] != width:
        raise ShapeError(f"{what} must have trailing length {width}, got shape {x.shape}")
    return batch, single


def encode_with_tape(model: AutoencoderModel, w: np.ndarray) -> EncoderTape:
    """Batched encoder pass (rows of w) with recorded activations"""
    batch, _ = _as_batch(w, model.filter_len, "Filter")
    return EncoderTape(_block_forward(model.encoder_l1, model.encoder_l2, rfft_concat(batch), model.ln_epsilon))


def split_head(model: AutoencoderModel, head: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    k = model.latent_dim
    return head[..., :k], head[..., k:]


def encode(model: AutoencoderModel, w: np.ndarray):
    """Latent code (plain) or (mean, logvar) (vae/infovae)"""
    _, single = _as_batch(w, model.filter_len, "Filter")
    head = encode_with_tape(model, w).head
    if single:
        head = head[0]
    if model.is_variational:
        return split_head(model, head)
    return head


def decode_with_tape(model: AutoencoderModel, z: np.ndarray,
                     link: Optional[Reparameterization] = None) -> Tuple[np.ndarray, DecoderTape]:
    batch, _ = _as_batch(z, model.latent_dim, "Latent vector")
    net = _block_forward(model.decoder_l1, model.decoder_l2, batch, model.ln_epsilon)
    return irfft_concat(net.outputs), DecoderTape(net, link)


def decode(model: AutoencoderModel, z: np.ndarray) -> np.ndarray:
    """Filter weights D(z)"""
    _, single = _as_batch(z, model.latent_dim, "Latent vector")
    w, _ = decode_with_tape(model, z)
    return w[0] if single else w


def decoder_vjp(model: AutoencoderModel, z: np.ndarray, v: np.ndarray) -> np.ndarray:
    """
    Upsilon(z) v with Upsilon_ij = dw_j / dz_i.

    v may be a single length-L cotangent or a matrix of them (m x L); the
    forward pass at z is shared across rows.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (model.latent_dim,):
        raise ShapeError(f"Latent vector must have length {model.latent_dim}, got shape {z.shape}")
    cotangents, single = _as_batch(v, model.filter_len, "Cotangent")
    _, tape = decode_with_tape(model, z)
    g_spec = irfft_concat_adjoint(cotangents)
    g_z = _block_input_cotangent(model.decoder_l1, model.decoder_l2, tape.net, g_spec)
    if not np.all(np.isfinite(g_z)):
        raise NumericError("Non-finite decoder VJP")
    return g_z[0] if single else g_z


def decoder_jvp(model: AutoencoderModel, z: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Upsilon(z)^T u: directional derivative of D at z along u"""
    z = np.asarray(z, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if z.shape != (model.latent_dim,) or u.shape != (model.latent_dim,):
        raise ShapeError(f"z and u must have length {model.latent_dim}")
    _, tape = decode_with_tape(model, z)
    d_pre = model.decoder_l1.weight @ u
    d_norm = layernorm_backward(d_pre[None, :], tape.net.norm)
    d_hidden = silu_grad(tape.net.norm.normalized) * d_norm
    d_spec = d_hidden @ model.decoder_l2.weight.T
    out = irfft_concat(d_spec)[0]
    if not np.all(np.isfinite(out)):
        raise NumericError("Non-finite decoder JVP")
    return out


@dataclass
class LossAdjoint:
    """Cotangents of a scalar loss w.r.t. recorded encoder heads and decoder outputs"""
    encoder: List[Tuple[EncoderTape, np.ndarray]] = field(default_factory=list)
    decoder: List[Tuple[DecoderTape, np.ndarray]] = field(default_factory=list)

    def add_encoder(self, tape: EncoderTape, g_head: np.ndarray):
        self.encoder.append((tape, g_head))

    def add_decoder(self, tape: DecoderTape, g_w: np.ndarray):
        self.decoder.append((tape, g_w))


def _head_cotangent(model: AutoencoderModel, link: Reparameterization, g_z: np.ndarray) -> np.ndarray:
    head = link.encoder.head if link.rows is None else link.encoder.head[link.rows]
    if not model.is_variational:
        return g_z
    g_mean = g_z
    if link.eta is None:
        g_logvar = np.zeros_like(g_z)
    else:
        _, logvar = split_head(model, head)
        g_logvar = g_z * link.eta * 0.5 * np.exp(0.5 * logvar)
    return np.concatenate((g_mean, g_logvar), axis=-1)


def parameter_gradients(model: AutoencoderModel, loss_adjoint: Optional[LossAdjoint]) -> Dict[str, np.ndarray]:
    """
    Exact reverse-mode gradients for every weight and bias.

    Decoder cotangents flow back through their Reparameterization link into
    the encoder tape they were sampled from.
    """
    if loss_adjoint is None or not (loss_adjoint.encoder or loss_adjoint.decoder):
        raise UsageError("No recorded activations: run a forward pass with a tape first")

    grads = {name: np.zeros_like(p) for name, p in model.parameters().items()}
    pending = list(loss_adjoint.encoder)

    for tape, g_w in loss_adjoint.decoder:
        if tape is None:
            raise UsageError("Decoder adjoint without a recorded tape")
        g_spec = irfft_concat_adjoint(np.atleast_2d(g_w))
        (dw1, db1, dw2, db2), g_z = _block_backward(model.decoder_l1, model.decoder_l2, tape.net, g_spec)
        grads["decoder_l1.weight"] += dw1
        grads["decoder_l1.bias"] += db1
        grads["decoder_l2.weight"] += dw2
        grads["decoder_l2.bias"] += db2
        if tape.link is not None:
            g_head = _head_cotangent(model, tape.link, g_z)
            if tape.link.rows is not None:
                full = np.zeros_like(tape.link.encoder.head)
                np.add.at(full, tape.link.rows, g_head)
                g_head = full
            pending.append((tape.link.encoder, g_head))

    for tape, g_head in pending:
        if tape is None:
            raise UsageError("Encoder adjoint without a recorded tape")
        (dw1, db1, dw2, db2), _ = _block_backward(model.encoder_l1, model.encoder_l2,
                                                  tape.net, np.atleast_2d(g_head))
        grads["encoder_l1.weight"] += dw1
        grads["encoder_l1.bias"] += db1
        grads["encoder_l2.weight"] += dw2
        grads["encoder_l2.bias"] += db2

    return grads


# =============================================================================
# MODEL FILES
# =============================================================================

def save_model(model: AutoencoderModel, path: Union[str, Path], embed: bool = True) -> Path:
    """
    JSON manifest plus float64 little-endian parameter blob.

    embed=True stores the blob as base-16 text in the manifest; otherwise it
    goes to a sidecar '<stem>.bin'.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    params = model.parameters()
    blob = b"".join(params[name].astype("<f8").tobytes(order="C") for name in PARAMETER_ORDER)
    manifest = {
        "format": "lfxlms-model",
        "version": 1,
        "variant": model.variant,
        "filter_len": model.filter_len,
        "hidden_dim": model.hidden_dim,
        "latent_dim": model.latent_dim,
        "ln_epsilon": model.ln_epsilon,
        "seed": model.seed,
        "metadata": model.metadata,
        "layer_order": list(PARAMETER_ORDER),
        "shapes": {name: list(params[name].shape) for name in PARAMETER_ORDER},
        "dtype": "<f8",
    }
    if embed:
        manifest["parameters_hex"] = blob.hex()
    else:
        sidecar = path.with_suffix(".bin")
        sidecar.write_bytes(blob)
        manifest["parameters_file"] = sidecar.name
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, default=str)
    return path


def load_model(path: Union[str, Path]) -> AutoencoderModel:
    """Load and shape-check a model written by save_model"""
    path = Path(path)
    if not path.exists():
        raise ContainerError(f"Model file not found: {path}")
    try:
        with open(path) as f:
            manifest = json.load(f)
        if "parameters_hex" in manifest:
            blob = bytes.fromhex(manifest["parameters_hex"])
        else:
            blob = (path.parent / manifest["parameters_file"]).read_bytes()
        filter_len = int(manifest["filter_len"])
        hidden = int(manifest["hidden_dim"])
        latent = int(manifest["latent_dim"])
        variant = manifest["variant"]
    except (json.JSONDecodeError, KeyError, ValueError, OSError) as e:
        raise ContainerError(f"{path}: unreadable model manifest ({e})") from e

    template = AutoencoderModel.initialize(filter_len, hidden, latent, variant, seed=0)
    shapes = {name: p.shape for name, p in template.parameters().items()}
    declared = {name: tuple(s) for name, s in manifest.get("shapes", {}).items()}
    if declared and declared != shapes:
        raise ShapeError(f"{path}: declared shapes {declared} do not match {variant} L={filter_len} h={hidden} k={latent}")
    total = sum(int(np.prod(s)) for s in shapes.values())
    values = np.frombuffer(blob, dtype="<f8")
    if values.size != total:
        raise ShapeError(f"{path}: blob holds {values.size} values, model needs {total}")

    arrays, offset = {}, 0
    for name in PARAMETER_ORDER:
        count = int(np.prod(shapes[name]))
        arrays[name] = values[offset:offset + count].reshape(shapes[name]).astype(np.float64)
        offset += count
    layers = [DenseLayer(arrays[f"{n}.weight"], arrays[f"{n}.bias"]) for n in LAYER_ORDER]
    return AutoencoderModel(*layers, variant=variant, filter_len=filter_len, hidden_dim=hidden,
                            latent_dim=latent, ln_epsilon=float(manifest.get("ln_epsilon", MODEL["ln_epsilon"])),
                            seed=int(manifest.get("seed", 0)), metadata=manifest.get("metadata", {}))
