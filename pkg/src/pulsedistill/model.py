"""Windowed sparse-attention encoder over 2-channel signal segments.

Tokens are non-overlapping patches of both channels, linearly projected
and summed with a learned positional embedding.  Each block applies
pre-LN windowed attention (queries and keys are layer-normalized before
the logit matmul, which bounds the logits) and a GELU feed-forward.  Two
heads sit on the mean-pooled features: a projection head producing the
distillation logits and a feed-forward head reconstructing per-channel
amplitude and phase spectra.

Attention comes in two equivalent forms: a dense masked reference and a
banded kernel that only evaluates the n*(w+1) logits inside the window,
giving O(n*w) cost.
"""

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, FormatError
from .preprocess import SEGMENT_SAMPLES

CHECKPOINT_MAGIC = b"CKP1"


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    hidden: int = 512
    mlp: int = 256
    heads: int = 4
    window: int = 8
    patch_len: int = 60
    out_dim: int = 512
    input_samples: int = SEGMENT_SAMPLES
    spectral_bins: int = -1  # -1 = derive from input_samples
    n_channels: int = 2

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.window < 0 or self.window % 2 != 0:
            raise ConfigError(f"window must be even and >= 0, got {self.window}")
        if self.input_samples % self.patch_len != 0:
            raise ConfigError(
                f"patch_len {self.patch_len} must divide {self.input_samples}"
            )
        if self.layers < 0:
            raise ConfigError(f"layers must be >= 0, got {self.layers}")
        if self.spectral_bins == -1:
            object.__setattr__(self, "spectral_bins", self.input_samples // 2 + 1)

    @property
    def n_tokens(self):
        return self.input_samples // self.patch_len

    @property
    def d_head(self):
        return self.hidden // self.heads


# Appendix-style size presets: layer count, hidden width, FFN width, heads.
BASE = ModelConfig(layers=2, hidden=512, mlp=256, heads=4)
LARGE = ModelConfig(layers=21, hidden=512, mlp=512, heads=4)
HUGE = ModelConfig(layers=50, hidden=512, mlp=2048, heads=8)


def init_params(config: ModelConfig, seed=0, scale=0.02):
    """Fresh parameter dict (name -> Tensor with requires_grad)."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed)))

    def w(*shape):
        return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad=True)

    c = config
    params = {
        "embed.w": w(c.n_channels * c.patch_len, c.hidden),
        "embed.b": zeros(c.hidden),
        "embed.pos": w(c.n_tokens, c.hidden),
    }
    for i in range(c.layers):
        p = f"block{i}."
        params[p + "ln1.g"] = ones(c.hidden)
        params[p + "ln1.b"] = zeros(c.hidden)
        for name in ("q", "k", "v", "o"):
            params[p + f"attn.{name}w"] = w(c.hidden, c.hidden)
            params[p + f"attn.{name}b"] = zeros(c.hidden)
        params[p + "ln2.g"] = ones(c.hidden)
        params[p + "ln2.b"] = zeros(c.hidden)
        params[p + "ffn.w1"] = w(c.hidden, c.mlp)
        params[p + "ffn.b1"] = zeros(c.mlp)
        params[p + "ffn.w2"] = w(c.mlp, c.hidden)
        params[p + "ffn.b2"] = zeros(c.hidden)
    params["final_ln.g"] = ones(c.hidden)
    params["final_ln.b"] = zeros(c.hidden)
    params["head.w1"] = w(c.hidden, c.hidden)
    params["head.b1"] = zeros(c.hidden)
    params["head.w2"] = w(c.hidden, c.out_dim)
    params["head.b2"] = zeros(c.out_dim)
    params["recon.w1"] = w(c.hidden, c.hidden)
    params["recon.b1"] = zeros(c.hidden)
    params["recon.amp_w"] = w(c.hidden, c.n_channels * c.spectral_bins)
    params["recon.amp_b"] = zeros(c.n_channels * c.spectral_bins)
    params["recon.pha_w"] = w(c.hidden, c.n_channels * c.spectral_bins)
    params["recon.pha_b"] = zeros(c.n_channels * c.spectral_bins)
    return params


def param_count(config: ModelConfig):
    """Exact number of scalar parameters for a config."""
    return sum(int(np.prod(t.shape)) for t in init_params(config, seed=0).values())


def clone_params(params, requires_grad=False):
    """Deep copy of a parameter dict (used for the EMA teacher)."""
    return {
        name: Tensor(t.data.copy(), requires_grad=requires_grad)
        for name, t in params.items()
    }


def tokenize(params, config: ModelConfig, segments):
    """Patchify (B, C, N) segments into (B, n_tokens, hidden) embeddings."""
    x = np.asarray(segments, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    b, c, n = x.shape
    if c != config.n_channels or n != config.input_samples:
        raise ContractError(
            f"expected (*, {config.n_channels}, {config.input_samples}) segments, "
            f"got {x.shape}"
        )
    pl = config.patch_len
    # (B, C, T, P) -> (B, T, C*P): each token sees both channels' patch
    patches = x.reshape(b, c, n // pl, pl).transpose(0, 2, 1, 3).reshape(b, n // pl, c * pl)
    tokens = ad.matmul(Tensor(patches), params["embed.w"])
    tokens = ad.add(tokens, params["embed.b"])
    return ad.add(tokens, params["embed.pos"])


def window_mask(n, w):
    """Boolean (n, n) mask: position i may attend to j iff |i - j| <= w/2.

    w = 0 degenerates to self-only attention; w >= 2(n-1) allows everything.
    """
    if w < 0 or w % 2 != 0:
        raise ConfigError(f"window must be even and >= 0, got {w}")
    idx = np.arange(n)
    return np.abs(idx[:, None] - idx[None, :]) <= w // 2


def _band_indices(n, w):
    half = w // 2
    offsets = np.arange(-half, half + 1)
    idx = np.arange(n)[:, None] + offsets[None, :]
    valid = (idx >= 0) & (idx < n)
    return np.clip(idx, 0, n - 1), valid


def pwsa_attention(q, k, v, mask):
    """Dense masked attention with layer-normalized queries and keys.

    q, k, v: (..., n, d_head).  mask: boolean (n, n), True = may attend.
    Masked positions receive -inf logits before the softmax.
    """
    q, k, v = ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v)
    d_head = q.shape[-1]
    qn = ad.layer_norm(q, axis=-1)
    kn = ad.layer_norm(k, axis=-1)
    logits = ad.mul(ad.matmul(qn, ad.transpose(kn)), 1.0 / np.sqrt(d_head))
    logits = ad.masked_fill(logits, ~np.asarray(mask, dtype=bool), -np.inf)
    weights = ad.softmax(logits, axis=-1)
    return ad.matmul(weights, v)


def _banded_core(qn, kn, v, w):
    """Fused banded attention: only the n*(w+1) in-window logits exist.

    Inputs are already layer-normalized q/k plus raw v, each (..., n, d).
    Forward and backward are single tape nodes, so training keeps the
    O(n*w) cost profile.
    """
    n, d = qn.shape[-2], qn.shape[-1]
    idx, valid = _band_indices(n, w)
    inv_sqrt = 1.0 / np.sqrt(d)

    kb = kn.data[..., idx, :]  # (..., n, w+1, d)
    vb = v.data[..., idx, :]
    logits = np.einsum("...nd,...nwd->...nw", qn.data, kb) * inv_sqrt
    logits = np.where(valid, logits, -np.inf)
    logits -= logits.max(axis=-1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=-1, keepdims=True)
    out = np.einsum("...nw,...nwd->...nd", weights, vb)

    def backward(g):
        g_weights = np.einsum("...nd,...nwd->...nw", g, vb)
        inner = (g_weights * weights).sum(axis=-1, keepdims=True)
        g_logits = weights * (g_weights - inner) * inv_sqrt
        gq = np.einsum("...nw,...nwd->...nd", g_logits, kb)
        g_kb = np.einsum("...nw,...nd->...nwd", g_logits, qn.data)
        g_vb = np.einsum("...nw,...nd->...nwd", weights, g)
        gk = _scatter_band(g_kb, idx, n)
        gv = _scatter_band(g_vb, idx, n)
        return gq, gk, gv

    return ad._node(out, (qn, kn, v), backward, "banded_attention")


def _scatter_band(g_band, idx, n):
    """Accumulate (..., n, w+1, d) band gradients back onto (..., n, d)."""
    lead = g_band.shape[:-3]
    wp1, d = g_band.shape[-2], g_band.shape[-1]
    flat = g_band.reshape(-1, g_band.shape[-3], wp1, d)
    out = np.zeros((flat.shape[0], n, d))
    batch_idx = np.arange(flat.shape[0])[:, None, None]
    np.add.at(out, (batch_idx, idx[None]), flat)
    return out.reshape(*lead, n, d)


def banded_pwsa_attention(q, k, v, w):
    """Windowed attention via the banded kernel; equals pwsa_attention with
    window_mask(n, w) up to round-off."""
    q, k, v = ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v)
    qn = ad.layer_norm(q, axis=-1)
    kn = ad.layer_norm(k, axis=-1)
    return _banded_core(qn, kn, v, w)


def banded_attention_forward(qn, kn, v, w):
    """numpy-only forward of the banded kernel (no tape); used by the
    scaling benchmark."""
    n, d = qn.shape[-2], qn.shape[-1]
    idx, valid = _band_indices(n, w)
    kb = kn[..., idx, :]
    vb = v[..., idx, :]
    logits = np.einsum("...nd,...nwd->...nw", qn, kb) / np.sqrt(d)
    logits = np.where(valid, logits, -np.inf)
    logits -= logits.max(axis=-1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=-1, keepdims=True)
    return np.einsum("...nw,...nwd->...nd", weights, vb)


def full_attention_forward(qn, kn, v):
    """numpy-only dense attention (no mask); the benchmark reference."""
    d = qn.shape[-1]
    logits = qn @ np.swapaxes(kn, -1, -2) / np.sqrt(d)
    logits -= logits.max(axis=-1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=-1, keepdims=True)
    return weights @ v


def _split_heads(t, heads):
    b, n, h = t.shape
    t = ad.reshape(t, (b, n, heads, h // heads))
    return ad.transpose(t, 1, 2)  # (B, H, n, d)


def _merge_heads(t):
    b, heads, n, d = t.shape
    t = ad.transpose(t, 1, 2)
    return ad.reshape(t, (b, n, heads * d))


def _linear(x, params, prefix):
    return ad.add(ad.matmul(x, params[prefix + "w"]), params[prefix + "b"])


def _attention_block(x, params, config, prefix):
    normed = ad.layer_norm(
        x, axis=-1, gain=params[prefix + "ln1.g"], bias=params[prefix + "ln1.b"]
    )
    q = _split_heads(_linear(normed, params, prefix + "attn.q"), config.heads)
    k = _split_heads(_linear(normed, params, prefix + "attn.k"), config.heads)
    v = _split_heads(_linear(normed, params, prefix + "attn.v"), config.heads)
    context = banded_pwsa_attention(q, k, v, config.window)
    context = _linear(_merge_heads(context), params, prefix + "attn.o")
    x = ad.add(x, context)
    normed = ad.layer_norm(
        x, axis=-1, gain=params[prefix + "ln2.g"], bias=params[prefix + "ln2.b"]
    )
    h = ad.gelu(ad.add(ad.matmul(normed, params[prefix + "ffn.w1"]), params[prefix + "ffn.b1"]))
    h = ad.add(ad.matmul(h, params[prefix + "ffn.w2"]), params[prefix + "ffn.b2"])
    return ad.add(x, h)


def encode(params, config: ModelConfig, segments):
    """Token features and distillation logits for a batch of segments.

    Returns (features (B, n_tokens, hidden), logits (B, out_dim)).
    Raises on non-finite activations, naming the offending block.
    """
    x = tokenize(params, config, segments)
    for i in range(config.layers):
        x = _attention_block(x, params, config, f"block{i}.")
        if not np.all(np.isfinite(x.data)):
            raise RuntimeError(f"non-finite activation after block {i}")
    features = ad.layer_norm(
        x, axis=-1, gain=params["final_ln.g"], bias=params["final_ln.b"]
    )
    pooled = ad.mean(features, axis=1)
    h = ad.gelu(ad.add(ad.matmul(pooled, params["head.w1"]), params["head.b1"]))
    logits = ad.add(ad.matmul(h, params["head.w2"]), params["head.b2"])
    return features, logits


def reconstruct_spectra(params, config: ModelConfig, features):
    """Amplitude and phase estimates from encoder features.

    Returns (amp (B, C, bins) with amp >= 0 via softplus,
    phase (B, C, bins) in (-pi, pi) via pi*tanh).
    """
    pooled = ad.mean(features, axis=1)
    h = ad.gelu(ad.add(ad.matmul(pooled, params["recon.w1"]), params["recon.b1"]))
    b = h.shape[0]
    shape = (b, config.n_channels, config.spectral_bins)
    amp = ad.softplus(ad.add(ad.matmul(h, params["recon.amp_w"]), params["recon.amp_b"]))
    pha = ad.tanh(ad.add(ad.matmul(h, params["recon.pha_w"]), params["recon.pha_b"]))
    return ad.reshape(amp, shape), ad.mul(ad.reshape(pha, shape), np.pi)


def pooled_features(params, config: ModelConfig, segments):
    """Mean-pooled encoder features as a plain array (no tape)."""
    frozen = {name: Tensor(t.data) for name, t in params.items()}
    features, _ = encode(frozen, config, segments)
    return features.data.mean(axis=1)


def save_checkpoint(path, config: ModelConfig, params, meta=None):
    """Write config plus named parameter tensors (little-endian f32)."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        payload = {"model": asdict(config), "meta": meta or {}}
        blob = json.dumps(payload, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<IQ", len(blob), len(params)))
        fh.write(blob)
        for name in sorted(params):
            nb = name.encode("utf-8")
            tensor = params[name]
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            shape = tensor.shape
            fh.write(struct.pack("<I", len(shape)))
            fh.write(struct.pack(f"<{len(shape)}Q", *shape))
            fh.write(tensor.data.astype("<f4").tobytes())


def load_checkpoint(path, requires_grad=False):
    """Read a checkpoint; returns (config, params, meta)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad magic {magic!r}", offset=0)
        head = fh.read(12)
        if len(head) != 12:
            raise FormatError("truncated header", offset=fh.tell())
        blob_len, n_params = struct.unpack("<IQ", head)
        blob = fh.read(blob_len)
        if len(blob) != blob_len:
            raise FormatError("truncated config", offset=fh.tell())
        payload = json.loads(blob.decode("utf-8"))
        config = ModelConfig(**payload["model"])
        meta = payload.get("meta", {})
        params = {}
        for i in range(n_params):
            raw = fh.read(4)
            if len(raw) != 4:
                raise FormatError(f"truncated parameter {i}", offset=fh.tell())
            (name_len,) = struct.unpack("<I", raw)
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
            count = int(np.prod(shape)) if shape else 1
            data = fh.read(4 * count)
            if len(data) != 4 * count:
                raise FormatError(f"truncated tensor {name!r}", offset=fh.tell())
            arr = np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float64)
            params[name] = Tensor(arr, requires_grad=requires_grad)
        if fh.read(1):
            raise FormatError("trailing bytes after last tensor", offset=fh.tell() - 1)
    return config, params, meta
