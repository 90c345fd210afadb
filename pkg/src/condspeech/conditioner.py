"""Feature-modulation adapters that condition a frozen encoder.

A conditioner turns a compact conditioning feature ``z`` (R,) into a
per-channel affine transform of a hidden representation ``S`` (C, T):

    gamma = W_g z + b_g        beta = W_b z + b_b          (channel affine)
    alpha_t = 1 + v^T relu(W_a [S_t; z] + b_a)             (time attention)
    S~[c, t] = alpha_t * (gamma_c * S[c, t] + beta_c)

Two modes exist: ``cc`` (channel affine only, alpha is implicitly 1) and
``tcac`` (channel affine plus time attention). At identity initialization
(W_g = W_b = 0, b_g = 1, b_b = 0, v = 0) modulation returns ``S`` bit-exactly,
so inserting adapters cannot perturb a pretrained model before training.

Conditions from several tasks compose elementwise: alphas and gammas multiply,
betas add.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

CC = "cc"
TCAC = "tcac"

PROVENANCES = ("ground_truth", "hard_label", "soft_label", "embedding")


class ModeError(ValueError):
    """Unknown conditioner mode or provenance selector."""


class MissingFieldError(ValueError):
    """The chosen provenance needs an input that was not supplied."""


@dataclass
class ConditionerParams:
    """Adapter parameters for one layer and one conditioning task."""

    mode: str
    w_gamma: Tensor
    b_gamma: Tensor
    w_beta: Tensor
    b_beta: Tensor
    w_alpha: Tensor | None = None
    b_alpha: Tensor | None = None
    v_alpha: Tensor | None = None

    def named_parameters(self, prefix: str = ""):
        items = [
            (prefix + "w_gamma", self.w_gamma),
            (prefix + "b_gamma", self.b_gamma),
            (prefix + "w_beta", self.w_beta),
            (prefix + "b_beta", self.b_beta),
        ]
        if self.mode == TCAC:
            items += [
                (prefix + "w_alpha", self.w_alpha),
                (prefix + "b_alpha", self.b_alpha),
                (prefix + "v_alpha", self.v_alpha),
            ]
        return items

    @property
    def channels(self) -> int:
        return self.w_gamma.shape[0]

    @property
    def cond_dim(self) -> int:
        return self.w_gamma.shape[1]


@dataclass
class ConditioningFeature:
    """A conditioning vector plus bookkeeping about where it came from."""

    z: Tensor
    source_task: str
    provenance: str


@dataclass
class ConditionTriple:
    """(alpha, gamma, beta) ready to apply; ``alpha`` is None in CC mode."""

    gamma: Tensor
    beta: Tensor
    alpha: Tensor | None = None


@dataclass
class EmbeddingProjection:
    """Linear map from a decoder bottleneck embedding to the condition space."""

    w: Tensor
    b: Tensor

    def named_parameters(self, prefix: str = ""):
        return [(prefix + "w", self.w), (prefix + "b", self.b)]


def init_identity(
    channels: int,
    cond_dim: int,
    mode: str = CC,
    attn_hidden: int | None = None,
    rng: np.random.Generator | None = None,
    dtype=np.float32,
) -> ConditionerParams:
    """Identity-initialized adapter: modulation is a bit-exact no-op.

    In TCAC mode ``v_alpha`` is zeroed (forcing alpha = 1) while ``w_alpha``
    stays randomly initialized; zeroing it too would pin the ReLU at 0 and
    permanently block gradient flow into the attention branch.
    """
    if mode not in (CC, TCAC):
        raise ModeError(f"unknown conditioner mode {mode!r}")
    p = ConditionerParams(
        mode=mode,
        w_gamma=Tensor(np.zeros((channels, cond_dim), dtype=dtype), requires_grad=True),
        b_gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
        w_beta=Tensor(np.zeros((channels, cond_dim), dtype=dtype), requires_grad=True),
        b_beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
    )
    if mode == TCAC:
        if attn_hidden is None:
            attn_hidden = max(1, channels // 4)
        if rng is None:
            rng = np.random.default_rng(0)
        scale = 1.0 / np.sqrt(channels + cond_dim)
        p.w_alpha = Tensor(
            rng.normal(0.0, scale, size=(attn_hidden, channels + cond_dim)).astype(dtype),
            requires_grad=True,
        )
        p.b_alpha = Tensor(np.zeros(attn_hidden, dtype=dtype), requires_grad=True)
        p.v_alpha = Tensor(np.zeros(attn_hidden, dtype=dtype), requires_grad=True)
    return p


def _check_z(params: ConditionerParams, z: Tensor):
    if z.shape != (params.cond_dim,):
        raise ShapeError(f"condition z has shape {z.shape}, adapter expects ({params.cond_dim},)")


def channel_affine(params: ConditionerParams, z: Tensor) -> tuple[Tensor, Tensor]:
    """Per-channel scale and shift predicted from ``z``."""
    _check_z(params, z)
    zc = z.reshape(params.cond_dim, 1)
    gamma = (params.w_gamma @ zc).reshape(params.channels) + params.b_gamma
    beta = (params.w_beta @ zc).reshape(params.channels) + params.b_beta
    return gamma, beta


def time_attention(params: ConditionerParams, s: Tensor, z: Tensor) -> Tensor:
    """Per-frame scalar gate alpha (T,). TCAC only."""
    if params.mode != TCAC:
        raise ModeError("time_attention is only defined for tcac-mode conditioners")
    _check_z(params, z)
    c, t = s.shape
    if c != params.channels:
        raise ShapeError(f"hidden state has {c} channels, adapter expects {params.channels}")
    ones_row = Tensor(np.ones((1, t), dtype=s.dtype.type))
    z_tiled = z.reshape(params.cond_dim, 1) * ones_row
    joint = ad.concat([s, z_tiled], axis=0)
    pre = params.w_alpha @ joint + params.b_alpha.reshape(-1, 1)
    h = ad.relu(pre)
    scores = (params.v_alpha.reshape(1, -1) @ h).reshape(t)
    return scores + Tensor(np.ones(t, dtype=s.dtype.type))


def condition_triple(params: ConditionerParams, s: Tensor, z: Tensor) -> ConditionTriple:
    gamma, beta = channel_affine(params, z)
    alpha = time_attention(params, s, z) if params.mode == TCAC else None
    return ConditionTriple(gamma=gamma, beta=beta, alpha=alpha)


def apply_modulation(triple: ConditionTriple, s: Tensor) -> Tensor:
    c = triple.gamma.shape[0]
    out = s * triple.gamma.reshape(c, 1) + triple.beta.reshape(c, 1)
    if triple.alpha is not None:
        out = out * triple.alpha.reshape(1, -1)
    return out


def modulate(params: ConditionerParams, s: Tensor, z: Tensor) -> Tensor:
    """Condition hidden state ``s`` (C, T) on ``z`` (R,)."""
    if s.data.ndim != 2 or s.shape[0] != params.channels:
        raise ShapeError(f"modulate expects ({params.channels}, T) hidden state, got {s.shape}")
    return apply_modulation(condition_triple(params, s, z), s)


def compose_conditions(triples: list[ConditionTriple]) -> ConditionTriple:
    """Combine per-task conditions: gammas/alphas multiply, betas add."""
    if not triples:
        raise ValueError("compose_conditions needs at least one condition")
    gamma, beta, alpha = triples[0].gamma, triples[0].beta, triples[0].alpha
    for t in triples[1:]:
        if t.gamma.shape != gamma.shape:
            raise ShapeError(f"cannot compose conditions over {gamma.shape} and {t.gamma.shape}")
        gamma = gamma * t.gamma
        beta = beta + t.beta
        if t.alpha is not None:
            alpha = t.alpha if alpha is None else alpha * t.alpha
    return ConditionTriple(gamma=gamma, beta=beta, alpha=alpha)


def project_embedding(proj: EmbeddingProjection, e: Tensor, eps: float = 1e-5) -> Tensor:
    """z = LayerNorm(W e + b); standardization only, no learned affine."""
    r, emb = proj.w.shape
    if e.shape != (emb,):
        raise ShapeError(f"embedding has shape {e.shape}, projection expects ({emb},)")
    pre = (proj.w @ e.reshape(emb, 1)).reshape(r) + proj.b
    gain = Tensor(np.ones(r, dtype=pre.dtype.type))
    bias = Tensor(np.zeros(r, dtype=pre.dtype.type))
    return ad.layer_norm(pre, gain, bias, axis=0, eps=eps)


def identity_padded_projection(cond_dim: int, num_classes: int, dtype=np.float32) -> Tensor:
    """Constant (R, K) matrix mapping class vectors into condition space."""
    if cond_dim < num_classes:
        raise ShapeError(
            f"label projection needs cond_dim >= num_classes, got {cond_dim} < {num_classes}"
        )
    m = np.zeros((cond_dim, num_classes), dtype=dtype)
    m[:num_classes, :num_classes] = np.eye(num_classes, dtype=dtype)
    return Tensor(m)


def encode_condition(
    provenance: str,
    *,
    source_task: str,
    posteriors: Tensor | None = None,
    embedding: Tensor | None = None,
    true_label: int | None = None,
    label_projection: Tensor | None = None,
    embedding_projection: EmbeddingProjection | None = None,
) -> ConditioningFeature:
    """Build the conditioning feature for one utterance under a provenance.

    ground_truth / hard_label use a one-hot class vector (no gradient path);
    soft_label keeps the posterior graph alive; embedding projects the decoder
    bottleneck through the shared linear + LayerNorm map.
    """
    if provenance not in PROVENANCES:
        raise ModeError(f"unknown provenance {provenance!r}; expected one of {PROVENANCES}")

    if provenance == "embedding":
        if embedding is None or embedding_projection is None:
            raise MissingFieldError("embedding provenance needs an embedding and its projection")
        z = project_embedding(embedding_projection, embedding)
        return ConditioningFeature(z=z, source_task=source_task, provenance=provenance)

    if label_projection is None:
        raise MissingFieldError(f"{provenance} provenance needs a label projection matrix")
    num_classes = label_projection.shape[1]

    if provenance == "ground_truth":
        if true_label is None:
            raise MissingFieldError("ground_truth provenance needs the true label")
        onehot = np.zeros(num_classes, dtype=label_projection.dtype.type)
        onehot[int(true_label)] = 1.0
        vec = Tensor(onehot)
    elif provenance == "hard_label":
        if posteriors is None:
            raise MissingFieldError("hard_label provenance needs task posteriors")
        onehot = np.zeros(num_classes, dtype=label_projection.dtype.type)
        onehot[int(np.argmax(posteriors.data))] = 1.0
        vec = Tensor(onehot)
    else:  # soft_label
        if posteriors is None:
            raise MissingFieldError("soft_label provenance needs task posteriors")
        vec = posteriors

    z = (label_projection @ vec.reshape(num_classes, 1)).reshape(label_projection.shape[0])
    return ConditioningFeature(z=z, source_task=source_task, provenance=provenance)
