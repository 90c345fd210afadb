"""Frozen transformer encoder with hierarchical self-conditioning.

The encoder is a small pre-norm transformer over frame features laid out as
(channels, time). It is pretrained once with a masked-frame reconstruction
pretext and then frozen; all later adaptation happens through conditioner
adapters inserted after each layer's attention sublayer (before the residual
add).

Conditioning schedule: while running the stack, the conditioning feature for a
task is re-estimated every ``group_size`` layers from a weighted average of
the layer outputs produced so far, using the same decoder that produces the
final prediction. Layers past the last full boundary keep the most recent
estimate. ``run_dual`` instead runs one unconditioned pass, estimates a single
utterance-level condition, and re-runs the whole stack conditioned on it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import conditioner as cond
from .autodiff import ShapeError, Tensor


class ConfigError(ValueError):
    """Inconsistent or unsupported model configuration."""


@dataclass
class EncoderConfig:
    num_layers: int = 6
    hidden_width: int = 64
    attention_heads: int = 4
    ffn_width: int = 128
    input_dim: int = 16
    lid_group_size: int = 3
    sv_group_size: int = 6
    cond_dim: int = 16
    cond_attn_hidden: int | None = None  # None -> hidden_width // 4
    ln_eps: float = 1e-5

    def validate(self):
        if self.hidden_width % self.attention_heads:
            raise ConfigError(
                f"hidden width {self.hidden_width} not divisible by {self.attention_heads} heads"
            )
        if self.num_layers < 1 or self.lid_group_size < 1 or self.sv_group_size < 1:
            raise ConfigError("layer and group counts must be positive")

    @property
    def attn_hidden(self) -> int:
        return self.cond_attn_hidden or max(1, self.hidden_width // 4)


@dataclass
class LayerParams:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named_parameters(self, prefix: str = ""):
        return [(prefix + k, getattr(self, k)) for k in self.__dataclass_fields__]


def _linear_init(rng, fan_in, fan_out, dtype):
    scale = 1.0 / np.sqrt(fan_in)
    return rng.normal(0.0, scale, size=(fan_in, fan_out)).astype(dtype)


def init_layer(cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32) -> LayerParams:
    c, f = cfg.hidden_width, cfg.ffn_width

    def lin(fi, fo):
        return Tensor(_linear_init(rng, fi, fo, dtype), requires_grad=True)

    def vec(n, val=0.0):
        return Tensor(np.full(n, val, dtype=dtype), requires_grad=True)

    return LayerParams(
        ln1_g=vec(c, 1.0), ln1_b=vec(c),
        wq=lin(c, c), bq=vec(c), wk=lin(c, c), bk=vec(c),
        wv=lin(c, c), bv=vec(c), wo=lin(c, c), bo=vec(c),
        ln2_g=vec(c, 1.0), ln2_b=vec(c),
        w1=lin(c, f), b1=vec(f), w2=lin(f, c), b2=vec(c),
    )


def sinusoidal_positions(channels: int, frames: int, dtype=np.float32) -> np.ndarray:
    """Fixed (channels, frames) positional code; not a parameter."""
    pos = np.arange(frames, dtype=np.float64)
    half = channels // 2
    div = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / max(1, half))
    pe = np.zeros((channels, frames), dtype=np.float64)
    pe[0 : 2 * half : 2] = np.sin(div[:, None] * pos[None, :])
    pe[1 : 2 * half : 2] = np.cos(div[:, None] * pos[None, :])
    return pe.astype(dtype)


def multi_head_attention(layer: LayerParams, h: Tensor, num_heads: int) -> Tensor:
    """Self-attention over ``h`` (T, C); returns the projected output (T, C)."""
    t, c = h.shape
    dh = c // num_heads
    q = h @ layer.wq + layer.bq
    k = h @ layer.wk + layer.bk
    v = h @ layer.wv + layer.bv

    def split(x):
        return x.reshape(t, num_heads, dh).transpose(1, 0, 2)

    qh, kh, vh = split(q), split(k), split(v)
    scores = (qh @ kh.transpose(0, 2, 1)) * Tensor(np.asarray(1.0 / np.sqrt(dh), dtype=h.dtype))
    attn = ad.softmax(scores, axis=-1)
    ctx = (attn @ vh).transpose(1, 0, 2).reshape(t, c)
    return ctx @ layer.wo + layer.bo


def forward_layer(
    layer: LayerParams,
    s: Tensor,
    num_heads: int,
    conditions: list[tuple[cond.ConditionerParams, Tensor]] | None = None,
    ln_eps: float = 1e-5,
) -> Tensor:
    """One pre-norm block over ``s`` (C, T). ``conditions`` holds per-task
    (adapter params, z) pairs applied to the attention output before its
    residual add; None leaves the arithmetic untouched."""
    if s.data.ndim != 2:
        raise ShapeError(f"forward_layer expects (C, T), got {s.shape}")
    x = s.transpose()  # (T, C)
    h = ad.layer_norm(x, layer.ln1_g, layer.ln1_b, axis=-1, eps=ln_eps)
    attn_out = multi_head_attention(layer, h, num_heads)
    if conditions:
        attn_ct = attn_out.transpose()
        triples = [cond.condition_triple(p, attn_ct, z) for p, z in conditions]
        attn_ct = cond.apply_modulation(cond.compose_conditions(triples), attn_ct)
        attn_out = attn_ct.transpose()
    x = x + attn_out
    h2 = ad.layer_norm(x, layer.ln2_g, layer.ln2_b, axis=-1, eps=ln_eps)
    ffn = ad.relu(h2 @ layer.w1 + layer.b1) @ layer.w2 + layer.b2
    return (x + ffn).transpose()


def weighted_sum(outputs: list[Tensor], weights: Tensor) -> Tensor:
    """Softmax-weighted average of layer outputs; allows a prefix of the
    weight vector when only the first k outputs exist yet."""
    k = len(outputs)
    if k == 0:
        raise ShapeError("weighted_sum needs at least one layer output")
    if weights.data.ndim != 1 or k > weights.shape[0]:
        raise ShapeError(
            f"{k} layer outputs cannot be aggregated with weight vector of shape {weights.shape}"
        )
    w = ad.softmax(ad.narrow(weights, 0, 0, k), axis=0) if k > 1 else Tensor(
        np.ones(1, dtype=weights.dtype)
    )
    acc = outputs[0] * ad.narrow(w, 0, 0, 1)
    for i in range(1, k):
        acc = acc + outputs[i] * ad.narrow(w, 0, i, 1)
    return acc


@dataclass
class EncoderState:
    """Frozen encoder weights plus (optional) conditioning adapters."""

    cfg: EncoderConfig
    embed_w: Tensor
    embed_b: Tensor
    mask_vec: Tensor
    layers: list[LayerParams]
    conditioners: dict[str, list[cond.ConditionerParams]] = field(default_factory=dict)
    cond_projs: dict[str, cond.EmbeddingProjection] = field(default_factory=dict)
    label_projs: dict[str, Tensor] = field(default_factory=dict)

    def named_parameters(self):
        items = [
            ("encoder.embed.w", self.embed_w),
            ("encoder.embed.b", self.embed_b),
            ("encoder.embed.mask", self.mask_vec),
        ]
        for i, layer in enumerate(self.layers):
            items += layer.named_parameters(f"encoder.layer{i:02d}.")
        for task in sorted(self.conditioners):
            for i, cp in enumerate(self.conditioners[task]):
                items += cp.named_parameters(f"cond.{task}.layer{i:02d}.")
            items += self.cond_projs[task].named_parameters(f"cond.{task}.zproj.")
        return items

    def group_size(self, task: str) -> int:
        return self.cfg.lid_group_size if task == "lid" else self.cfg.sv_group_size


def init_encoder_state(cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32) -> EncoderState:
    cfg.validate()
    c, c0 = cfg.hidden_width, cfg.input_dim
    return EncoderState(
        cfg=cfg,
        embed_w=Tensor(_linear_init(rng, c0, c, dtype).T.copy(), requires_grad=True),
        embed_b=Tensor(np.zeros(c, dtype=dtype), requires_grad=True),
        mask_vec=Tensor(rng.normal(0.0, 0.1, size=c).astype(dtype), requires_grad=True),
        layers=[init_layer(cfg, rng, dtype) for _ in range(cfg.num_layers)],
    )


def add_conditioners(
    state: EncoderState,
    tasks: tuple[str, ...],
    mode: str,
    embed_dims: dict[str, int],
    num_classes: dict[str, int],
    rng: np.random.Generator,
    dtype=np.float32,
):
    """Attach identity-initialized adapters plus condition projections."""
    cfg = state.cfg
    if "lid" in tasks and "sv" in tasks and cfg.sv_group_size % cfg.lid_group_size:
        raise ConfigError(
            f"sv group size {cfg.sv_group_size} must be a multiple of lid group size {cfg.lid_group_size}"
        )
    for task in tasks:
        state.conditioners[task] = [
            cond.init_identity(
                cfg.hidden_width, cfg.cond_dim, mode=mode, attn_hidden=cfg.attn_hidden, rng=rng, dtype=dtype
            )
            for _ in range(cfg.num_layers)
        ]
        e = embed_dims[task]
        state.cond_projs[task] = cond.EmbeddingProjection(
            w=Tensor(rng.normal(0.0, 1.0 / np.sqrt(e), size=(cfg.cond_dim, e)).astype(dtype), requires_grad=True),
            b=Tensor(np.zeros(cfg.cond_dim, dtype=dtype), requires_grad=True),
        )
        if task in num_classes:
            state.label_projs[task] = cond.identity_padded_projection(
                cfg.cond_dim, num_classes[task], dtype=dtype
            )


def embed_features(state: EncoderState, features: Tensor, mask_cols: np.ndarray | None = None) -> Tensor:
    """Project input frames (C0, T) into the model width and add positions."""
    c0, t = features.shape
    if c0 != state.cfg.input_dim:
        raise ShapeError(f"features have {c0} channels, encoder expects {state.cfg.input_dim}")
    x = state.embed_w @ features + state.embed_b.reshape(-1, 1)
    if mask_cols is not None and mask_cols.any():
        keep = Tensor((~mask_cols).astype(x.dtype.type).reshape(1, t))
        fill = Tensor(mask_cols.astype(x.dtype.type).reshape(1, t))
        x = x * keep + state.mask_vec.reshape(-1, 1) * fill
    return x + Tensor(sinusoidal_positions(state.cfg.hidden_width, t, dtype=x.dtype.type))


def boundaries(num_layers: int, group: int) -> list[int]:
    """Layer indices (1-based) after which a condition is re-estimated."""
    return [b for b in range(group, num_layers + 1, group)]


@dataclass
class BoundaryEstimate:
    task: str
    layer: int
    prediction: object
    feature: cond.ConditioningFeature | None


@dataclass
class EncoderRun:
    layer_outputs: list[Tensor]  # length L+1, index 0 is the embedded input
    final: dict[str, object]  # task -> decoder output
    estimates: list[BoundaryEstimate]
    dropped: set[str]
    encoder_passes: int = 1


def _estimate_condition(state, decoders, task, outputs, provenance, true_labels):
    dec = decoders[task]
    agg = weighted_sum(outputs, dec.agg_w)
    pred = dec.forward(agg)
    task_prov = provenance if task == "lid" else "embedding"
    label = (true_labels or {}).get(task)
    feature = cond.encode_condition(
        task_prov,
        source_task=task,
        posteriors=getattr(pred, "posteriors", None),
        embedding=getattr(pred, "embedding", None),
        true_label=label,
        label_projection=state.label_projs.get(task),
        embedding_projection=state.cond_projs.get(task),
    )
    return pred, feature


def run_hierarchical(
    state: EncoderState,
    decoders: dict[str, object],
    features: Tensor,
    *,
    condition_tasks: tuple[str, ...] = (),
    output_tasks: tuple[str, ...] | None = None,
    provenance: str = "embedding",
    true_labels: dict[str, int] | None = None,
    detach_conditions: bool = False,
    condition_dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> EncoderRun:
    """Single conditioned pass with per-group condition re-estimation."""
    cfg = state.cfg
    for task in condition_tasks:
        if task not in state.conditioners:
            raise ConfigError(f"no adapters attached for conditioning task {task!r}")
        if task not in decoders:
            raise ConfigError(f"conditioning task {task!r} scheduled but no decoder supplied")

    dropped: set[str] = set()
    if condition_dropout > 0.0:
        if rng is None:
            raise ConfigError("condition_dropout needs an rng")
        dropped = {t for t in condition_tasks if rng.random() < condition_dropout}

    bmap: dict[int, list[str]] = {}
    for task in condition_tasks:
        if task in dropped:
            continue
        for b in boundaries(cfg.num_layers, state.group_size(task)):
            if b < cfg.num_layers:  # the final-layer estimate is the final head itself
                bmap.setdefault(b, []).append(task)

    outputs = [embed_features(state, features)]
    active: dict[str, cond.ConditioningFeature] = {}
    estimates: list[BoundaryEstimate] = []

    for li in range(1, cfg.num_layers + 1):
        conditions = []
        for task in condition_tasks:
            feat = active.get(task)
            if feat is not None:
                conditions.append((state.conditioners[task][li - 1], feat.z))
        out = forward_layer(
            state.layers[li - 1], outputs[-1], cfg.attention_heads,
            conditions=conditions or None, ln_eps=cfg.ln_eps,
        )
        outputs.append(out)
        for task in bmap.get(li, ()):  # re-estimate from everything so far
            pred, feature = _estimate_condition(state, decoders, task, outputs, provenance, true_labels)
            if detach_conditions:
                feature = cond.ConditioningFeature(
                    z=feature.z.detach(), source_task=feature.source_task, provenance=feature.provenance
                )
            active[task] = feature
            estimates.append(BoundaryEstimate(task=task, layer=li, prediction=pred, feature=feature))

    wanted = output_tasks if output_tasks is not None else tuple(decoders)
    final = {}
    for task in wanted:
        dec = decoders[task]
        final[task] = dec.forward(weighted_sum(outputs, dec.agg_w))
    return EncoderRun(layer_outputs=outputs, final=final, estimates=estimates, dropped=dropped)


def run_dual(
    state: EncoderState,
    decoders: dict[str, object],
    features: Tensor,
    *,
    condition_tasks: tuple[str, ...] = ("lid",),
    output_tasks: tuple[str, ...] | None = None,
    provenance: str = "embedding",
    true_labels: dict[str, int] | None = None,
    detach_conditions: bool = False,
) -> EncoderRun:
    """Two-pass conditioning: estimate once from an unconditioned pass, then
    re-run every layer under that single utterance-level condition. With
    ground_truth provenance the first pass is skipped entirely."""
    cfg = state.cfg
    for task in condition_tasks:
        if task not in state.conditioners:
            raise ConfigError(f"no adapters attached for conditioning task {task!r}")

    estimates: list[BoundaryEstimate] = []
    active: dict[str, cond.ConditioningFeature] = {}
    passes = 0

    needs_first_pass = any(
        not (task == "lid" and provenance == "ground_truth") for task in condition_tasks
    )
    if needs_first_pass:
        first = run_hierarchical(
            state, decoders, features, condition_tasks=(), output_tasks=tuple(condition_tasks),
            provenance=provenance, true_labels=true_labels,
        )
        passes += 1
        for task in condition_tasks:
            pred = first.final[task]
            task_prov = provenance if task == "lid" else "embedding"
            feature = cond.encode_condition(
                task_prov,
                source_task=task,
                posteriors=getattr(pred, "posteriors", None),
                embedding=getattr(pred, "embedding", None),
                true_label=(true_labels or {}).get(task),
                label_projection=state.label_projs.get(task),
                embedding_projection=state.cond_projs.get(task),
            )
            if detach_conditions:
                feature = cond.ConditioningFeature(feature.z.detach(), task, feature.provenance)
            active[task] = feature
            estimates.append(BoundaryEstimate(task=task, layer=0, prediction=pred, feature=feature))
    else:
        for task in condition_tasks:
            feature = cond.encode_condition(
                "ground_truth",
                source_task=task,
                true_label=(true_labels or {}).get(task),
                label_projection=state.label_projs.get(task),
            )
            active[task] = feature
            estimates.append(BoundaryEstimate(task=task, layer=0, prediction=None, feature=feature))

    outputs = [embed_features(state, features)]
    for li in range(1, cfg.num_layers + 1):
        conditions = [(state.conditioners[t][li - 1], active[t].z) for t in condition_tasks]
        outputs.append(
            forward_layer(
                state.layers[li - 1], outputs[-1], cfg.attention_heads,
                conditions=conditions or None, ln_eps=cfg.ln_eps,
            )
        )
    passes += 1

    wanted = output_tasks if output_tasks is not None else tuple(decoders)
    final = {t: decoders[t].forward(weighted_sum(outputs, decoders[t].agg_w)) for t in wanted}
    return EncoderRun(
        layer_outputs=outputs, final=final, estimates=estimates, dropped=set(), encoder_passes=passes
    )


# -- parameter accounting ------------------------------------------------------

def conditioner_param_count(cfg: EncoderConfig, mode: str) -> int:
    """Closed-form adapter size for one task: L * (2*(C*R + C) [+ attention])."""
    c, r, l = cfg.hidden_width, cfg.cond_dim, cfg.num_layers
    per_layer = 2 * (c * r + c)
    if mode == cond.TCAC:
        per_layer += cfg.attn_hidden * (c + r) + 2 * cfg.attn_hidden
    return l * per_layer


def trainable_parameter_report(state: EncoderState, decoders: dict[str, object] | None = None) -> dict:
    """Per-block parameter counts plus the adapter-to-encoder ratio.

    ``adapter_total`` counts conditioner tensors, condition projections, and
    the conditioning decoders' feature blocks (aggregation weights + input
    projection); that is the set of parameters added around the frozen encoder,
    and the ratio reported against the frozen encoder size.
    """
    blocks: dict[str, dict] = {}

    def put(name, params):
        n = sum(int(np.prod(p.shape)) for _, p in params)
        trainable = any(p.requires_grad for _, p in params)
        blocks[name] = {"params": n, "trainable": trainable}
        return n

    enc = [(k, p) for k, p in state.named_parameters() if k.startswith("encoder.")]
    encoder_total = put("encoder", enc)

    adapter_total = 0
    for task in sorted(state.conditioners):
        items = []
        for i, cp in enumerate(state.conditioners[task]):
            items += cp.named_parameters(f"layer{i:02d}.")
        adapter_total += put(f"cond.{task}", items)
        adapter_total += put(f"cond.{task}.zproj", state.cond_projs[task].named_parameters())

    if decoders:
        for task in sorted(decoders):
            dec = decoders[task]
            feat = [(k, p) for k, p in dec.named_parameters() if k.startswith(("agg.", "feat."))]
            body = [(k, p) for k, p in dec.named_parameters() if not k.startswith(("agg.", "feat."))]
            nf = put(f"dec.{task}.feat", feat)
            put(f"dec.{task}.body", body)
            if task in state.conditioners:
                adapter_total += nf

    trainable_total = sum(b["params"] for b in blocks.values() if b["trainable"])
    return {
        "blocks": blocks,
        "encoder_total": encoder_total,
        "adapter_total": adapter_total,
        "trainable_total": trainable_total,
        "ratio": adapter_total / encoder_total if encoder_total else 0.0,
    }


# -- masked-frame pretext --------------------------------------------------------

def pretrain_frozen_encoder(
    cfg: EncoderConfig,
    feature_arrays: list[np.ndarray],
    *,
    epochs: int = 2,
    lr: float = 0.01,
    mask_rate: float = 0.3,
    batch_size: int = 8,
    seed: int = 0,
    dtype=np.float32,
) -> EncoderState:
    """Train the encoder on masked-frame reconstruction, then freeze it.

    The reconstruction head is local to this function and discarded; the
    returned state's parameters all have requires_grad=False.
    """
    rng = np.random.default_rng(seed)
    state = init_encoder_state(cfg, rng, dtype=dtype)
    head_w = Tensor(
        rng.normal(0.0, 1.0 / np.sqrt(cfg.hidden_width), size=(cfg.input_dim, cfg.hidden_width)).astype(dtype),
        requires_grad=True,
    )
    head_b = Tensor(np.zeros(cfg.input_dim, dtype=dtype), requires_grad=True)
    params = [p for _, p in state.named_parameters()] + [head_w, head_b]

    order = np.arange(len(feature_arrays))
    for _ in range(epochs):
        rng.shuffle(order)
        for start in range(0, len(order), batch_size):
            chunk = order[start : start + batch_size]
            for p in params:
                p.grad = None
            got = 0
            for idx in chunk:
                x = feature_arrays[idx]
                t = x.shape[1]
                mask = rng.random(t) < mask_rate
                if not mask.any():
                    mask[rng.integers(t)] = True
                feats = Tensor(np.asarray(x, dtype=dtype))
                h = embed_features(state, feats, mask_cols=mask)
                for layer in state.layers:
                    h = forward_layer(layer, h, cfg.attention_heads, ln_eps=cfg.ln_eps)
                recon = head_w @ h + head_b.reshape(-1, 1)
                sel = Tensor(mask.astype(dtype).reshape(1, t))
                diff = (recon - feats) * sel
                denom = float(cfg.input_dim * mask.sum())
                loss = (diff * diff).sum() * Tensor(np.asarray(1.0 / denom, dtype=dtype))
                loss.backward()
                got += 1
            if got:
                inv = 1.0 / got
                for p in params:
                    if p.grad is not None:
                        p.data -= (lr * inv) * p.grad
    for _, p in state.named_parameters():
        p.requires_grad = False
        p.grad = None
    return state
