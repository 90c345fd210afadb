"""Task decoders on top of aggregated encoder features.

Classification decoders (language id, speaker verification) follow an
ECAPA-like recipe shrunk to desk scale: pointwise feature projection, a few
squeeze-excitation residual conv blocks, channel-wise attentive statistics
pooling, a bottleneck embedding, and an additive-angular-margin cosine head.
Both classification decoders expose their bottleneck embedding, which is what
the conditioning path consumes; the same decoder object serves intermediate
condition estimation and final prediction, so parameters are shared by
construction.

The ASR decoder downsamples by 2 with a strided conv, applies a small
transformer, and emits per-frame log-posteriors with blank at index 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .encoder import LayerParams, init_layer, EncoderConfig, forward_layer, sinusoidal_positions

VARIANCE_FLOOR = 1e-8


class EmptyInputError(ValueError):
    """No frames to pool or decode."""


class SequenceTooShortError(ValueError):
    """Input has fewer frames than the decoder's downsampling needs."""


# -- attentive statistics pooling -------------------------------------------------

@dataclass
class AttnPoolParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named_parameters(self, prefix: str = ""):
        return [(prefix + k, getattr(self, k)) for k in self.__dataclass_fields__]


def attentive_stats_pool(f: Tensor, params: AttnPoolParams) -> Tensor:
    """Channel-wise attentive mean and std of ``f`` (C, T) -> (2C,).

    Attention scores come from a small tanh MLP shared across frames and are
    softmax-normalized over time per channel. With zeroed attention parameters
    this reduces to the plain mean and population std. The variance is floored
    at 1e-8, so a single frame yields std exactly 1e-4.
    """
    if f.data.ndim != 2:
        raise ShapeError(f"attentive_stats_pool expects (C, T), got {f.shape}")
    c, t = f.shape
    if t == 0:
        raise EmptyInputError("attentive_stats_pool: zero frames")
    scores = params.w2 @ ad.tanh(params.w1 @ f + params.b1.reshape(-1, 1)) + params.b2.reshape(-1, 1)
    attn = ad.softmax(scores, axis=1)
    mu = (attn * f).sum(axis=1)
    second = (attn * f * f).sum(axis=1)
    var = ad.clip(second - mu * mu, VARIANCE_FLOOR, np.inf)
    return ad.concat([mu, ad.sqrt(var)], axis=0)


# -- additive angular margin loss --------------------------------------------------

def cross_entropy(logits: Tensor, label: int) -> Tensor:
    k = logits.shape[0]
    if not 0 <= label < k:
        raise ValueError(f"label {label} out of range for {k} classes")
    onehot = np.zeros(k, dtype=logits.dtype.type)
    onehot[label] = 1.0
    sel = Tensor(onehot)
    return ad.logsumexp(logits, axis=0) - (logits * sel).sum()


def aam_loss(cos_logits: Tensor, label: int, margin: float = 0.0, scale: float = 10.0) -> Tensor:
    """Additive angular margin softmax loss on cosine logits.

    The true-class cosine cos(theta) is replaced by cos(theta + margin) before
    scaling; margin 0 keeps the logits bitwise unchanged, making the loss equal
    plain cross-entropy on scale * cos.
    """
    k = cos_logits.shape[0]
    if not 0 <= label < k:
        raise ValueError(f"label {label} out of range for {k} classes")
    onehot = np.zeros(k, dtype=cos_logits.dtype.type)
    onehot[label] = 1.0
    sel = Tensor(onehot)
    cos_y = (cos_logits * sel).sum()
    sin_y = ad.sqrt(ad.clip(1.0 - cos_y * cos_y, 1e-12, 1.0))
    margined = cos_y * math.cos(margin) - sin_y * math.sin(margin)
    shifted = cos_logits + sel * (margined - cos_y)
    logits = shifted * Tensor(np.asarray(scale, dtype=cos_logits.dtype))
    return ad.logsumexp(logits, axis=0) - (logits * sel).sum()


def _l2_normalize(x: Tensor, axis: int, eps: float = 1e-12) -> Tensor:
    sq = (x * x).sum(axis=axis, keepdims=True)
    return x / ad.sqrt(sq + Tensor(np.asarray(eps, dtype=x.dtype)))


# -- classification decoder ---------------------------------------------------------

@dataclass
class ClsConfig:
    task: str
    in_channels: int
    num_classes: int
    num_layer_outputs: int
    proj_width: int = 64
    num_blocks: int = 1
    embed_dim: int = 32
    margin: float = 0.0
    scale: float = 10.0

    @property
    def se_hidden(self) -> int:
        return max(1, self.proj_width // 4)

    @property
    def pool_hidden(self) -> int:
        return max(1, self.proj_width // 2)


@dataclass
class ClsOutput:
    embedding: Tensor  # (E,) bottleneck, feeds conditioning
    cos: Tensor  # (K,) cosine similarities
    logits: Tensor  # (K,) scaled cosines
    posteriors: Tensor  # (K,) softmax of logits


class ClsDecoder:
    """Utterance classifier / embedding extractor over (C, T) features."""

    def __init__(self, cfg: ClsConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        p, c = cfg.proj_width, cfg.in_channels

        def t(shape, fan_in, grad=True):
            return Tensor(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape).astype(dtype), requires_grad=grad)

        def zeros(shape):
            return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

        self.agg_w = zeros(cfg.num_layer_outputs)
        self.feat_w = t((p, c, 1), c)
        self.feat_b = zeros(p)
        self.blocks = []
        for _ in range(cfg.num_blocks):
            self.blocks.append(
                {
                    "conv_w": t((p, p, 3), 3 * p),
                    "conv_b": zeros(p),
                    "se_w1": t((cfg.se_hidden, p), p),
                    "se_b1": zeros(cfg.se_hidden),
                    "se_w2": t((p, cfg.se_hidden), cfg.se_hidden),
                    "se_b2": zeros(p),
                }
            )
        self.pool = AttnPoolParams(
            w1=t((cfg.pool_hidden, p), p),
            b1=zeros(cfg.pool_hidden),
            w2=t((p, cfg.pool_hidden), cfg.pool_hidden),
            b2=zeros(p),
        )
        # normalizing the pooled stats keeps plain SGD stable across feature scales
        self.pool_ln_g = Tensor(np.ones(2 * p, dtype=dtype), requires_grad=True)
        self.pool_ln_b = zeros(2 * p)
        self.emb_w = t((cfg.embed_dim, 2 * p), 2 * p)
        self.emb_b = zeros(cfg.embed_dim)
        self.head_w = t((cfg.num_classes, cfg.embed_dim), cfg.embed_dim)

    def named_parameters(self):
        items = [("agg.w", self.agg_w), ("feat.w", self.feat_w), ("feat.b", self.feat_b)]
        for i, blk in enumerate(self.blocks):
            items += [(f"block{i}.{k}", v) for k, v in blk.items()]
        items += self.pool.named_parameters("pool.")
        items += [("pool.ln_g", self.pool_ln_g), ("pool.ln_b", self.pool_ln_b)]
        items += [("emb.w", self.emb_w), ("emb.b", self.emb_b), ("head.w", self.head_w)]
        return items

    def forward(self, features: Tensor) -> ClsOutput:
        if features.data.ndim != 2 or features.shape[0] != self.cfg.in_channels:
            raise ShapeError(f"{self.cfg.task} decoder expects ({self.cfg.in_channels}, T), got {features.shape}")
        if features.shape[1] == 0:
            raise EmptyInputError(f"{self.cfg.task} decoder got zero frames")
        h = ad.relu(ad.conv1d(features, self.feat_w, self.feat_b))
        for blk in self.blocks:
            y = ad.relu(ad.conv1d(h, blk["conv_w"], blk["conv_b"], padding=1))
            m = y.mean(axis=1, keepdims=True)
            se = ad.sigmoid(blk["se_w2"] @ ad.relu(blk["se_w1"] @ m + blk["se_b1"].reshape(-1, 1)) + blk["se_b2"].reshape(-1, 1))
            h = h + y * se
        pooled = attentive_stats_pool(h, self.pool)
        pooled = ad.layer_norm(pooled, self.pool_ln_g, self.pool_ln_b, axis=-1)
        e = (self.emb_w @ pooled.reshape(-1, 1)).reshape(self.cfg.embed_dim) + self.emb_b
        cosines = (
            _l2_normalize(self.head_w, axis=1) @ _l2_normalize(e.reshape(-1, 1), axis=0)
        ).reshape(self.cfg.num_classes)
        logits = cosines * Tensor(np.asarray(self.cfg.scale, dtype=cosines.dtype))
        return ClsOutput(embedding=e, cos=cosines, logits=logits, posteriors=ad.softmax(logits, axis=0))

    def loss(self, out: ClsOutput, label: int) -> Tensor:
        return aam_loss(out.cos, label, margin=self.cfg.margin, scale=self.cfg.scale)


# -- ASR decoder ---------------------------------------------------------------------

@dataclass
class AsrConfig:
    in_channels: int
    vocab_size: int  # includes blank at index 0
    num_layer_outputs: int
    width: int = 64
    heads: int = 4
    ffn_width: int = 128
    num_layers: int = 2


@dataclass
class AsrOutput:
    log_post: Tensor  # (V, T') log-probabilities, blank at row 0

    @property
    def num_frames(self) -> int:
        return self.log_post.shape[1]


class AsrDecoder:
    """Strided-conv downsample (factor 2) + small transformer + CTC-ready head."""

    def __init__(self, cfg: AsrConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        enc_cfg = EncoderConfig(
            num_layers=cfg.num_layers, hidden_width=cfg.width,
            attention_heads=cfg.heads, ffn_width=cfg.ffn_width, input_dim=cfg.in_channels,
        )
        enc_cfg.validate()

        def zeros(shape):
            return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

        self.agg_w = zeros(cfg.num_layer_outputs)
        self.down_w = Tensor(
            rng.normal(0.0, 1.0 / np.sqrt(3 * cfg.in_channels), size=(cfg.width, cfg.in_channels, 3)).astype(dtype),
            requires_grad=True,
        )
        self.down_b = zeros(cfg.width)
        self.layers: list[LayerParams] = [init_layer(enc_cfg, rng, dtype) for _ in range(cfg.num_layers)]
        self.out_w = Tensor(
            rng.normal(0.0, 1.0 / np.sqrt(cfg.width), size=(cfg.width, cfg.vocab_size)).astype(dtype),
            requires_grad=True,
        )
        self.out_b = zeros(cfg.vocab_size)

    def named_parameters(self):
        items = [("agg.w", self.agg_w), ("feat.down.w", self.down_w), ("feat.down.b", self.down_b)]
        for i, layer in enumerate(self.layers):
            items += layer.named_parameters(f"layer{i:02d}.")
        items += [("out.w", self.out_w), ("out.b", self.out_b)]
        return items

    def forward(self, features: Tensor) -> AsrOutput:
        if features.data.ndim != 2 or features.shape[0] != self.cfg.in_channels:
            raise ShapeError(f"asr decoder expects ({self.cfg.in_channels}, T), got {features.shape}")
        t = features.shape[1]
        if t < 2:
            raise SequenceTooShortError(f"asr decoder needs at least 2 frames, got {t}")
        h = ad.conv1d(features, self.down_w, self.down_b, stride=2, padding=1)  # (W, ceil(T/2))
        h = h + Tensor(sinusoidal_positions(self.cfg.width, h.shape[1], dtype=h.dtype.type))
        for layer in self.layers:
            h = forward_layer(layer, h, self.cfg.heads)
        frames = h.transpose() @ self.out_w + self.out_b  # (T', V)
        return AsrOutput(log_post=ad.log_softmax(frames, axis=-1).transpose())
