"""The frequency-aware mixer network.

A stack of depth-N blocks, each an adaptive Fourier filter (learnable
complex frequency filter plus optional low-rank enhancement) followed by
a standard token-mixing / channel-mixing layer.  Features are kept as
[tokens, channels] in mixer space and transposed to [channels, tokens]
in frequency space.

The filter initializes to (1, 0) and the enhancement up-projection to
zero, so a freshly built network is exactly a plain mixer.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, fields, replace

import numpy as np

from . import tensor as tc
from .fft import ComplexTensor, complex_mul, fft2, ifft2
from .linalg import m_svd_complex
from .tensor import Tensor

LN_EPS = 1e-6


@dataclass
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    channels_in: int = 1
    embed_dim: int = 64
    depth: int = 4
    token_mlp_dim: int = 32
    channel_mlp_dim: int = 128
    num_classes: int = 7
    lre_rank: int = 4
    lre_reduction: int = 4
    aff_enabled: bool = True
    lre_enabled: bool = True

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def tokens(self):
        return self.grid * self.grid

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * self.channels_in

    def validate(self):
        for f in fields(self):
            if f.type == "int" and getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be positive")
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.lre_reduction:
            raise ValueError(
                f"lre_reduction {self.lre_reduction} must divide embed_dim {self.embed_dim}"
            )
        if self.lre_enabled:
            hi = min(self.embed_dim // self.lre_reduction, self.tokens)
            if not 1 <= self.lre_rank <= hi:
                raise ValueError(f"lre_rank {self.lre_rank} out of range [1, {hi}]")
        return self


def parameter_count(cfg):
    """Closed-form count of learnable scalars for a config."""
    t, c = cfg.tokens, cfg.embed_dim
    total = cfg.patch_dim * c + c * cfg.num_classes
    per_mixer = t * cfg.token_mlp_dim * 2 + c * cfg.channel_mlp_dim * 2 + 4 * c
    total += cfg.depth * per_mixer
    if cfg.aff_enabled:
        per_aff = 2 * c * t
        if cfg.lre_enabled:
            per_aff += 2 * c * (c // cfg.lre_reduction)
        total += cfg.depth * per_aff
    return total


def _xavier(rng, shape):
    fan_in, fan_out = shape[0], shape[-1]
    return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=shape)


def _param(data):
    return Tensor(data, requires_grad=True)


class AFFLayer:
    """Learnable frequency filter plus optional low-rank enhancement."""

    def __init__(self, cfg, rng):
        c, t = cfg.embed_dim, cfg.tokens
        self.w_filter = ComplexTensor(_param(np.ones((c, t))), _param(np.zeros((c, t))))
        self.rank = cfg.lre_rank
        if cfg.lre_enabled:
            self.w_down = _param(_xavier(rng, (c, c // cfg.lre_reduction)))
            self.w_up = _param(np.zeros((c // cfg.lre_reduction, c)))
        else:
            self.w_down = None
            self.w_up = None


class MixerLayer:
    """Token-mixing and channel-mixing blocks with pre-norms."""

    def __init__(self, cfg, rng):
        t, c = cfg.tokens, cfg.embed_dim
        self.ln1_gamma = _param(np.ones(c))
        self.ln1_beta = _param(np.zeros(c))
        self.w_p1 = _param(_xavier(rng, (t, cfg.token_mlp_dim)))
        self.w_p2 = _param(_xavier(rng, (cfg.token_mlp_dim, t)))
        self.ln2_gamma = _param(np.ones(c))
        self.ln2_beta = _param(np.zeros(c))
        self.w_c1 = _param(_xavier(rng, (c, cfg.channel_mlp_dim)))
        self.w_c2 = _param(_xavier(rng, (cfg.channel_mlp_dim, c)))


def _swap_last(t):
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return t.transpose(*axes)


def patch_embed(images, w, patch_size):
    """Split into non-overlapping patches, flatten each row-major, and
    project with the embedding matrix.  Accepts [c, H, W] or [B, c, H, W]."""
    single = images.ndim == 3
    if single:
        images = images.reshape((1,) + images.shape)
    if images.ndim != 4:
        raise ValueError(f"expected [B, c, H, W] images, got shape {images.shape}")
    b, c, h, wdt = images.shape
    if h != wdt or h % patch_size:
        raise ValueError(f"image {h}x{wdt} incompatible with patch size {patch_size}")
    g = h // patch_size
    x = images.reshape(b, c, g, patch_size, g, patch_size)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    x = x.reshape(b, g * g, c * patch_size * patch_size)
    out = x.matmul(w)
    return out.reshape(out.shape[1:]) if single else out


def mixer_layer_forward(x, layer):
    """Token-mixing then channel-mixing residual blocks on [.., T, C]."""
    y = tc.layer_norm(x, layer.ln1_gamma, layer.ln1_beta, LN_EPS)
    yt = _swap_last(y)
    h = tc.gelu(yt.matmul(layer.w_p1)).matmul(layer.w_p2)
    z = x + _swap_last(h)
    y2 = tc.layer_norm(z, layer.ln2_gamma, layer.ln2_beta, LN_EPS)
    return z + tc.gelu(y2.matmul(layer.w_c1)).matmul(layer.w_c2)


def lff_forward(x, w_filter):
    """Transform [.., T, C] features to the [.., C, T] frequency matrix and
    multiply elementwise by the learnable filter."""
    return complex_mul(fft2(_swap_last(x)), w_filter)


def lre_forward(z_freq, layer):
    """Bottleneck the spectrum on the channel axis, keep its rank-k part,
    and project back up; real and imaginary parts share the projections."""
    wd = layer.w_down.transpose()
    down = ComplexTensor(wd.matmul(z_freq.re), wd.matmul(z_freq.im))
    kept = m_svd_complex(down, layer.rank)
    wu = layer.w_up.transpose()
    return ComplexTensor(wu.matmul(kept.re), wu.matmul(kept.im))


def aff_forward(x, layer):
    """Filter features in the frequency domain; identity when disabled."""
    if layer is None:
        return x
    spectrum = fft2(_swap_last(x))
    z = complex_mul(spectrum, layer.w_filter)
    if layer.w_up is not None:
        z = z + lre_forward(spectrum, layer)
    return _swap_last(ifft2(z).re)


class FAMLPModel:
    """Patch embedding, depth x (filter + mixer), mean-pool head."""

    def __init__(self, config, seed=0):
        config.validate()
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x51EC7]))
        self.patch_w = _param(_xavier(rng, (config.patch_dim, config.embed_dim)))
        self.layers = []
        for _ in range(config.depth):
            aff = AFFLayer(config, rng) if config.aff_enabled else None
            self.layers.append((aff, MixerLayer(config, rng)))
        self.head_w = _param(_xavier(rng, (config.embed_dim, config.num_classes)))

    # -- parameters ----------------------------------------------------

    def named_parameters(self):
        params = {"patch_embed.w": self.patch_w}
        for i, (aff, mixer) in enumerate(self.layers):
            if aff is not None:
                params[f"layers.{i}.aff.w_filter.re"] = aff.w_filter.re
                params[f"layers.{i}.aff.w_filter.im"] = aff.w_filter.im
                if aff.w_down is not None:
                    params[f"layers.{i}.aff.w_down"] = aff.w_down
                    params[f"layers.{i}.aff.w_up"] = aff.w_up
            params[f"layers.{i}.mixer.ln1.gamma"] = mixer.ln1_gamma
            params[f"layers.{i}.mixer.ln1.beta"] = mixer.ln1_beta
            params[f"layers.{i}.mixer.w_p1"] = mixer.w_p1
            params[f"layers.{i}.mixer.w_p2"] = mixer.w_p2
            params[f"layers.{i}.mixer.ln2.gamma"] = mixer.ln2_gamma
            params[f"layers.{i}.mixer.ln2.beta"] = mixer.ln2_beta
            params[f"layers.{i}.mixer.w_c1"] = mixer.w_c1
            params[f"layers.{i}.mixer.w_c2"] = mixer.w_c2
        params["head.w"] = self.head_w
        return params

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.grad = None

    def copy(self, requires_grad=False):
        """Structural clone with copied parameter values."""
        clone = FAMLPModel(replace(self.config), seed=0)
        src = self.named_parameters()
        for name, p in clone.named_parameters().items():
            p.data = src[name].data.copy()
            p.requires_grad = requires_grad
        return clone

    # -- forward -------------------------------------------------------

    def forward(self, images):
        if not isinstance(images, Tensor):
            images = Tensor(images)
        single = images.ndim == 3
        h = patch_embed(images, self.patch_w, self.config.patch_size)
        for aff, mixer in self.layers:
            h = aff_forward(h, aff)
            h = mixer_layer_forward(h, mixer)
        pooled = h.mean(axis=-2)
        logits = pooled.reshape(-1, self.config.embed_dim).matmul(self.head_w)
        return logits.reshape((self.config.num_classes,)) if single else logits

    __call__ = forward

    def forward_collect(self, images, layer_index):
        """Forward pass that also returns the features entering layer
        ``layer_index``, after its filter, and after its mixer."""
        if not 0 <= layer_index < len(self.layers):
            raise ValueError(f"layer index {layer_index} out of range")
        if not isinstance(images, Tensor):
            images = Tensor(images)
        h = patch_embed(images, self.patch_w, self.config.patch_size)
        probes = {}
        for i, (aff, mixer) in enumerate(self.layers):
            if i == layer_index:
                probes["before"] = h
            h = aff_forward(h, aff)
            if i == layer_index:
                probes["after_aff"] = h
            h = mixer_layer_forward(h, mixer)
            if i == layer_index:
                probes["after_mixer"] = h
        pooled = h.mean(axis=-2)
        probes["logits"] = pooled.reshape(-1, self.config.embed_dim).matmul(self.head_w)
        return probes


def model_forward(model, image):
    """Logits [K] for one [c, H, W] image."""
    return model.forward(image)


# ---------------------------------------------------------------------
# checkpoints: config manifest + named tensor records in one file
# ---------------------------------------------------------------------

_CKPT_MAGIC = b"FAMC"
_CKPT_VERSION = 1


def config_to_lines(cfg):
    out = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        out.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(out) + "\n"


def config_from_lines(text):
    kwargs = {}
    types = {f.name: f.type for f in fields(ModelConfig)}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in types:
            raise ValueError(f"unknown model config key {key!r}")
        kwargs[key] = value.lower() == "true" if types[key] == "bool" else int(value)
    return ModelConfig(**kwargs)


def save_checkpoint(model, path):
    params = model.named_parameters()
    manifest = config_to_lines(model.config).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<II", _CKPT_VERSION, len(manifest)))
        f.write(manifest)
        f.write(struct.pack("<I", len(params)))
        for name, p in params.items():
            encoded = name.encode()
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            tc.write_tensor_to(f, p)


def load_checkpoint(path):
    with open(path, "rb") as f:
        if f.read(4) != _CKPT_MAGIC:
            raise ValueError(f"{path} is not a model checkpoint")
        version, mlen = struct.unpack("<II", f.read(8))
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        cfg = config_from_lines(f.read(mlen).decode())
        model = FAMLPModel(cfg, seed=0)
        params = model.named_parameters()
        (count,) = struct.unpack("<I", f.read(4))
        if count != len(params):
            raise ValueError(f"checkpoint has {count} tensors, model needs {len(params)}")
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode()
            t = tc.read_tensor_from(f)
            if name not in params:
                raise ValueError(f"unexpected tensor {name!r} in checkpoint")
            if t.shape != params[name].shape:
                raise ValueError(f"shape mismatch for {name}: {t.shape} vs {params[name].shape}")
            params[name].data = t.data
    return model
