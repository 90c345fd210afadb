"""Experiment harness: staged training, evaluation, and pipeline orchestration.

A pipeline is a sequence of stages over a frozen, pretext-trained encoder.
Each stage declares which parameter blocks may move; everything else is
hash-verified (SHA-256 over serialized tensors) before and after the stage,
and any drift raises InvariantBreach (CLI exit code 2). The optimizer is
plain momentum-free gradient descent with a fixed per-stage learning rate
(SV-only stages ramp up linearly over the first 5% of steps).

Modes:
  frozen_baseline  decoders trained on the frozen encoder, no conditioning
  ca_hier_L        hierarchical language conditioning (adapters + ASR decoder
                   + LID feature projection trainable)
  ca_hier_LS       adds a speaker condition and an SV decoder stage
  ca_dual_L        two-pass conditioning with one utterance-level estimate
  full_finetune    unfreezes the encoder, no adapters
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NumericalError, Tensor
from .conditioner import CC, TCAC
from .decoders import AsrConfig, AsrDecoder, ClsConfig, ClsDecoder, aam_loss, attentive_stats_pool, AttnPoolParams
from .encoder import (
    ConfigError,
    EncoderConfig,
    EncoderState,
    add_conditioners,
    forward_layer,
    init_encoder_state,
    init_layer,
    pretrain_frozen_encoder,
    run_dual,
    run_hierarchical,
    trainable_parameter_report,
    weighted_sum,
)
from .losses import ctc_loss, ctc_greedy_decode, multitask_loss
from .metrics import REPORT_FIELDS, cer as cer_metric, eer, levenshtein, lid_accuracy, min_dcf, write_report
from .serialize import block_hash, load_checkpoint, save_checkpoint
from .synthdata import Corpus, CorpusSpec, build_corpora

MODES = ("frozen_baseline", "ca_hier_L", "ca_hier_LS", "ca_dual_L", "full_finetune")
CONFIG_SCHEMA_VERSION = 1


class InvariantBreach(RuntimeError):
    """A frozen block changed, or gradients crossed a task mask."""


@dataclass
class ExperimentConfig:
    mode: str = "ca_hier_L"
    seed: int = 7
    conditioner_mode: str = CC
    provenance: str = "embedding"
    condition_dropout: float = 0.5
    detach_conditions: bool = False
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    lid_proj_width: int = 64
    sv_proj_width: int = 96
    lid_blocks: int = 1
    sv_blocks: int = 3
    embed_dim: int = 32
    sv_margin: float = 0.3
    aam_scale: float = 10.0
    asr_width: int = 64
    asr_heads: int = 4
    asr_ffn: int = 128
    asr_layers: int = 2
    # the CTC loss is a sum over frames and dwarfs the classification losses;
    # the smaller asr weight keeps plain SGD stable at these scales
    loss_weights: dict = field(default_factory=lambda: {"asr": 0.25, "lid": 1.0, "sv": 1.0})
    pretext_epochs: int = 2
    pretext_lr: float = 0.01
    pretext_mask_rate: float = 0.3
    stage_overrides: dict = field(default_factory=dict)

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.conditioner_mode not in (CC, TCAC):
            raise ConfigError(f"unknown conditioner mode {self.conditioner_mode!r}")
        self.encoder.validate()
        if self.encoder.cond_dim < self.corpus.num_languages:
            raise ConfigError(
                f"cond_dim {self.encoder.cond_dim} too small for {self.corpus.num_languages} "
                "languages (label provenances need an identity-padded projection)"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema_version"] = CONFIG_SCHEMA_VERSION
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        ver = data.pop("schema_version", CONFIG_SCHEMA_VERSION)
        if ver != CONFIG_SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema version {ver!r}")
        if "encoder" in data and isinstance(data["encoder"], dict):
            data["encoder"] = EncoderConfig(**data["encoder"])
        if "corpus" in data and isinstance(data["corpus"], dict):
            data["corpus"] = CorpusSpec(**data["corpus"])
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    def condition_tasks(self) -> tuple[str, ...]:
        return {
            "frozen_baseline": (),
            "ca_hier_L": ("lid",),
            "ca_dual_L": ("lid",),
            "ca_hier_LS": ("lid", "sv"),
            "full_finetune": (),
        }[self.mode]


@dataclass
class Stage:
    name: str
    corpus: str  # asr_lid | sv | mixed
    losses: tuple[str, ...]
    trainable: tuple[str, ...]
    epochs: int
    lr: float
    batch_size: int = 16
    condition_tasks: tuple[str, ...] = ()
    warmup_frac: float = 0.0
    dual: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


# stage hyperparameters are tuned for the toy scale; adapter stages keep the
# smaller learning rate of the reference schedule
LR_DECODER = 0.05
LR_ADAPTER = 0.02

_DECODER_STAGE = Stage(
    name="decoders", corpus="mixed", losses=("asr", "lid", "sv"),
    trainable=("dec.asr", "dec.lid", "dec.sv"), epochs=12, lr=LR_DECODER,
)


def build_stage_plan(config: ExperimentConfig) -> list[Stage]:
    plans: dict[str, list[Stage]] = {
        "frozen_baseline": [_DECODER_STAGE],
        "ca_hier_L": [
            _DECODER_STAGE,
            Stage(
                name="ca_lid", corpus="asr_lid", losses=("asr", "lid"),
                trainable=("cond.lid", "dec.asr", "dec.lid.feat"),
                epochs=6, lr=LR_ADAPTER, condition_tasks=("lid",),
            ),
        ],
        "ca_dual_L": [
            _DECODER_STAGE,
            Stage(
                name="dual_lid", corpus="asr_lid", losses=("asr", "lid"),
                trainable=("cond.lid", "dec.asr", "dec.lid.feat"),
                epochs=6, lr=LR_ADAPTER, condition_tasks=("lid",), dual=True,
            ),
        ],
        "full_finetune": [
            _DECODER_STAGE,
            Stage(
                name="finetune_all", corpus="mixed", losses=("asr", "lid", "sv"),
                trainable=("encoder", "dec.asr", "dec.lid", "dec.sv"),
                epochs=3, lr=LR_ADAPTER,
            ),
        ],
    }
    plans["ca_hier_LS"] = plans["ca_hier_L"] + [
        Stage(
            name="sv_decoder", corpus="sv", losses=("sv",), trainable=("dec.sv",),
            epochs=6, lr=LR_DECODER, condition_tasks=("lid",), warmup_frac=0.05,
        ),
        Stage(
            name="ca_lid_sv", corpus="mixed", losses=("asr", "lid", "sv"),
            trainable=("cond.lid", "cond.sv", "dec.asr", "dec.lid.feat", "dec.sv.feat"),
            epochs=3, lr=LR_ADAPTER, condition_tasks=("lid", "sv"),
        ),
    ]
    stages = [Stage(**vars(s)) for s in plans[config.mode]]
    for st in stages:
        over = config.stage_overrides.get(st.name)
        if over:
            unknown = set(over) - set(st.__dataclass_fields__)
            if unknown:
                raise ConfigError(f"unknown stage override fields for {st.name}: {sorted(unknown)}")
            for k, v in over.items():
                setattr(st, k, tuple(v) if isinstance(getattr(st, k), tuple) else v)
    return stages


# -- model bundle ---------------------------------------------------------------

@dataclass
class ModelBundle:
    config: ExperimentConfig
    encoder_state: EncoderState
    decoders: dict[str, object]
    speaker_index: dict[str, int]

    def named_parameters(self):
        items = list(self.encoder_state.named_parameters())
        for task in sorted(self.decoders):
            items += [(f"dec.{task}.{k}", p) for k, p in self.decoders[task].named_parameters()]
        return items

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters()}

    def frozen_keys(self) -> set[str]:
        return {k for k, p in self.named_parameters() if not p.requires_grad}


def _expand_blocks(names: tuple[str, ...]) -> tuple[str, ...]:
    """Map stage block names to parameter-key prefixes."""
    out = []
    for name in names:
        if name.endswith(".feat"):  # decoder feature projection incl. aggregation weights
            base = name[: -len(".feat")]
            out += [f"{base}.agg.", f"{base}.feat."]
        else:
            out.append(name + ".")
    return tuple(out)


def set_trainable(bundle: ModelBundle, blocks: tuple[str, ...]):
    prefixes = _expand_blocks(blocks)
    for key, p in bundle.named_parameters():
        p.requires_grad = any(key.startswith(pre) for pre in prefixes)
        p.grad = None


def build_bundle(
    config: ExperimentConfig,
    corpus: Corpus,
    base_encoder: EncoderState | None = None,
) -> ModelBundle:
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 11]))
    state = base_encoder if base_encoder is not None else init_encoder_state(config.encoder, rng)
    tasks = config.condition_tasks()
    if tasks:
        add_conditioners(
            state,
            tasks,
            config.conditioner_mode,
            embed_dims={t: config.embed_dim for t in tasks},
            num_classes={"lid": corpus.num_languages} if "lid" in tasks else {},
            rng=np.random.default_rng(np.random.SeedSequence([config.seed, 12])),
        )
    speakers = sorted({u.speaker_id for u in corpus.splits.get("train_sv", ()) if u.speaker_id})
    n_out = config.encoder.num_layers + 1
    dec_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 13]))
    c = config.encoder.hidden_width
    decoders = {
        "asr": AsrDecoder(
            AsrConfig(
                in_channels=c, vocab_size=corpus.spec.ctc_vocab, num_layer_outputs=n_out,
                width=config.asr_width, heads=config.asr_heads,
                ffn_width=config.asr_ffn, num_layers=config.asr_layers,
            ),
            dec_rng,
        ),
        "lid": ClsDecoder(
            ClsConfig(
                task="lid", in_channels=c, num_classes=corpus.num_languages,
                num_layer_outputs=n_out, proj_width=config.lid_proj_width,
                num_blocks=config.lid_blocks, embed_dim=config.embed_dim,
                margin=0.0, scale=config.aam_scale,
            ),
            dec_rng,
        ),
        "sv": ClsDecoder(
            ClsConfig(
                task="sv", in_channels=c, num_classes=max(2, len(speakers)),
                num_layer_outputs=n_out, proj_width=config.sv_proj_width,
                num_blocks=config.sv_blocks, embed_dim=config.embed_dim,
                margin=config.sv_margin, scale=config.aam_scale,
            ),
            dec_rng,
        ),
    }
    return ModelBundle(
        config=config, encoder_state=state, decoders=decoders,
        speaker_index={s: i for i, s in enumerate(speakers)},
    )


def load_bundle_weights(bundle: ModelBundle, tensors: dict[str, np.ndarray]):
    params = dict(bundle.named_parameters())
    missing = set(params) - set(tensors)
    extra = set(tensors) - set(params)
    if missing or extra:
        raise ConfigError(
            f"checkpoint does not match the model: missing {sorted(missing)[:4]}, extra {sorted(extra)[:4]}"
        )
    for key, p in params.items():
        arr = tensors[key]
        if tuple(arr.shape) != tuple(p.shape):
            raise ConfigError(f"{key}: checkpoint shape {arr.shape} != model shape {p.shape}")
        p.data = arr.astype(p.data.dtype, copy=True)
        p.grad = None


# -- per-utterance forward ---------------------------------------------------------

def _item_labels(bundle: ModelBundle, utt, wanted: tuple[str, ...]) -> dict:
    labels = {"asr": None, "lid": None, "sv": None}
    if "asr" in wanted and utt.transcript:
        labels["asr"] = utt.transcript
    if "lid" in wanted and utt.lang_id is not None:
        labels["lid"] = utt.lang_id
    if "sv" in wanted and utt.speaker_id is not None:
        idx = bundle.speaker_index.get(utt.speaker_id)
        labels["sv"] = idx
    return labels


def _item_provenance(config: ExperimentConfig, utt) -> str:
    if config.provenance == "ground_truth" and utt.lang_id is None:
        return "hard_label"  # no oracle label available for this item
    return config.provenance


def forward_utterance(
    bundle: ModelBundle,
    utt,
    output_tasks: tuple[str, ...],
    *,
    train: bool = False,
    rng: np.random.Generator | None = None,
    condition_tasks: tuple[str, ...] | None = None,
    dual: bool | None = None,
):
    """Run one utterance through the mode-appropriate encoder pass."""
    cfgv = bundle.config
    tasks = cfgv.condition_tasks() if condition_tasks is None else condition_tasks
    use_dual = (cfgv.mode == "ca_dual_L") if dual is None else dual
    feats = Tensor(utt.features)
    true_labels = {"lid": utt.lang_id} if utt.lang_id is not None else {}
    kwargs = dict(
        condition_tasks=tasks,
        output_tasks=output_tasks,
        provenance=_item_provenance(cfgv, utt),
        true_labels=true_labels,
        detach_conditions=cfgv.detach_conditions,
    )
    if use_dual and tasks:
        return run_dual(bundle.encoder_state, bundle.decoders, feats, **kwargs)
    return run_hierarchical(
        bundle.encoder_state, bundle.decoders, feats,
        condition_dropout=cfgv.condition_dropout if (train and tasks) else 0.0,
        rng=rng,
        **kwargs,
    )


def _loss_fns(bundle: ModelBundle):
    return {
        "asr": lambda out, target: ctc_loss(out.log_post, target),
        "lid": lambda out, label: bundle.decoders["lid"].loss(out, label),
        "sv": lambda out, label: bundle.decoders["sv"].loss(out, label),
    }


# -- gradient-mask probe -------------------------------------------------------------

def _check_gradient_masks(bundle: ModelBundle, stage: Stage, items: list):
    """One labeled probe per task: a loss must not leak gradients into decoders
    of other tasks unless those decoders feed the conditioning path."""
    fns = _loss_fns(bundle)
    probes = []
    for task in ("asr", "sv"):
        probe = next((u for u in items if _item_labels(bundle, u, (task,))[task] is not None), None)
        if probe is not None:
            probes.append((task, probe))
    for task, utt in probes:
        for _, p in bundle.named_parameters():
            p.grad = None
        run = forward_utterance(bundle, utt, (task,), train=False, condition_tasks=stage.condition_tasks, dual=stage.dual)
        labels = _item_labels(bundle, utt, (task,))
        loss = multitask_loss([(run.final, labels)], bundle.config.loss_weights, fns)
        if not loss.requires_grad:  # nothing trainable on this task's path
            continue
        loss.backward()
        for other in ("asr", "lid", "sv"):
            if other == task or other in stage.condition_tasks:
                continue
            if other == "lid" and task == "asr" and "lid" in stage.condition_tasks:
                continue
            for key, p in bundle.decoders[other].named_parameters():
                if p.grad is not None and np.any(p.grad != 0):
                    raise InvariantBreach(
                        f"gradient mask violated: {task}-only probe reached dec.{other}.{key}"
                    )
        for _, p in bundle.named_parameters():
            p.grad = None


# -- training ---------------------------------------------------------------------

def _stage_items(corpus: Corpus, which: str) -> list:
    if which == "asr_lid":
        return list(corpus.splits["train_asr_lid"])
    if which == "sv":
        return list(corpus.splits["train_sv"])
    if which == "mixed":
        return list(corpus.splits["train_asr_lid"]) + list(corpus.splits["train_sv"])
    raise ConfigError(f"unknown stage corpus {which!r}")


def run_stage(
    bundle: ModelBundle,
    stage: Stage,
    corpus: Corpus,
    *,
    seed: int,
    out_dir: str | Path | None = None,
    log=None,
) -> dict:
    """Train one stage in place; verify frozen blocks via SHA-256 before/after."""
    set_trainable(bundle, stage.trainable)
    arrays = bundle.named_arrays()
    frozen = bundle.frozen_keys()
    pre_hash = block_hash({k: arrays[k] for k in frozen})

    items = _stage_items(corpus, stage.corpus)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    drop_rng = np.random.default_rng(np.random.SeedSequence([seed, 102]))
    fns = _loss_fns(bundle)
    trainables = [p for _, p in bundle.named_parameters() if p.requires_grad]

    total_steps = max(1, stage.epochs * math.ceil(len(items) / stage.batch_size))
    warm_steps = int(stage.warmup_frac * total_steps)
    step = 0
    last_loss = float("nan")
    order = np.arange(len(items))
    for epoch in range(stage.epochs):
        _check_gradient_masks(bundle, stage, items)
        rng.shuffle(order)
        for start in range(0, len(order), stage.batch_size):
            batch_items = [items[i] for i in order[start : start + stage.batch_size]]
            batch = []
            for utt in batch_items:
                labels = _item_labels(bundle, utt, stage.losses)
                needed = tuple(t for t in stage.losses if labels[t] is not None)
                if not needed:
                    continue
                run = forward_utterance(
                    bundle, utt, needed, train=True, rng=drop_rng,
                    condition_tasks=stage.condition_tasks, dual=stage.dual,
                )
                batch.append((run.final, labels))
            if not batch:
                continue
            loss = multitask_loss(batch, bundle.config.loss_weights, fns)
            if not np.isfinite(loss.data):
                raise NumericalError(f"stage {stage.name}: non-finite loss at step {step}")
            for p in trainables:
                p.grad = None
            if loss.requires_grad:
                loss.backward()
            lr = stage.lr * ((step + 1) / warm_steps if step < warm_steps else 1.0)
            for p in trainables:
                if p.grad is not None:
                    p.data -= lr * p.grad
                    p.grad = None
            last_loss = float(loss.data)
            step += 1
        if log:
            log(f"stage {stage.name} epoch {epoch + 1}/{stage.epochs} loss {last_loss:.4f}")

    post_arrays = bundle.named_arrays()
    post_hash = block_hash({k: post_arrays[k] for k in frozen})
    if post_hash != pre_hash:
        raise InvariantBreach(f"stage {stage.name}: frozen parameter blocks changed during training")

    info = {
        "stage": stage.to_dict(),
        "steps": step,
        "final_loss": last_loss,
        "frozen_hash": post_hash,
    }
    if out_dir is not None:
        save_checkpoint(
            Path(out_dir),
            post_arrays,
            frozen=frozen,
            config=bundle.config.to_dict(),
            stage={"name": stage.name, "steps": step, "frozen_hash": post_hash},
        )
    return info


# -- evaluation ---------------------------------------------------------------------

def evaluate(bundle: ModelBundle, corpus: Corpus) -> dict:
    """Report the five benchmark metrics on the evaluation splits."""
    report: dict[str, float] = {}
    with ad.no_grad():
        for field_name, split in (("cer_normal", "eval_normal"), ("cer_fewshot", "eval_fewshot")):
            dist = 0
            total = 0
            for utt in corpus.splits.get(split, ()):
                run = forward_utterance(bundle, utt, ("asr",))
                hyp = ctc_greedy_decode(run.final["asr"].log_post)
                dist += levenshtein(utt.transcript, hyp)
                total += len(utt.transcript)
            report[field_name] = dist / total if total else float("nan")

        preds, refs = [], []
        for split in ("eval_normal", "eval_fewshot"):
            for utt in corpus.splits.get(split, ()):
                run = forward_utterance(bundle, utt, ("lid",))
                preds.append(int(np.argmax(run.final["lid"].posteriors.data)))
                refs.append(utt.lang_id)
        report["lid_acc"] = lid_accuracy(preds, refs) if refs else float("nan")

        emb: dict[str, np.ndarray] = {}
        for utt in corpus.splits.get("eval_sv", ()):
            run = forward_utterance(bundle, utt, ("sv",))
            e = run.final["sv"].embedding.data.astype(np.float64)
            emb[utt.utt_id] = e / (np.linalg.norm(e) + 1e-12)
        targets, nontargets = [], []
        for a, b, is_target in corpus.trials:
            score = float(emb[a] @ emb[b])
            (targets if is_target else nontargets).append(score)
        if targets and nontargets:
            report["eer"] = eer(targets, nontargets)
            report["min_dcf"] = min_dcf(targets, nontargets)
        else:
            report["eer"] = float("nan")
            report["min_dcf"] = float("nan")
    return {k: report[k] for k in REPORT_FIELDS}


LOWER_IS_BETTER = {"cer_normal": True, "cer_fewshot": True, "lid_acc": False, "eer": True, "min_dcf": True}


def compare(reports: list[dict], names: list[str] | None = None) -> dict:
    """Relative improvement (%) of each report against the first one.

    Error metrics count reductions as improvement; accuracies count increases.
    Metrics missing on either side get None (rendered as a gap marker).
    """
    if not reports:
        raise ValueError("compare needs at least one report")
    names = names or [f"report{i}" for i in range(len(reports))]
    base = reports[0]
    rows = []
    for name, rep in zip(names[1:], reports[1:]):
        row = {}
        for metric in REPORT_FIELDS:
            b, n = base.get(metric), rep.get(metric)
            if b is None or n is None or not (np.isfinite(b) and np.isfinite(n)) or b == 0:
                row[metric] = None
                continue
            delta = (b - n) / b if LOWER_IS_BETTER.get(metric, True) else (n - b) / b
            row[metric] = 100.0 * delta
        rows.append({"name": name, "improvement_pct": row})
    return {"baseline": names[0], "rows": rows}


def format_comparison(cmp: dict) -> str:
    header = ["vs " + cmp["baseline"]] + list(REPORT_FIELDS)
    lines = ["  ".join(f"{h:>12}" for h in header)]
    for row in cmp["rows"]:
        cells = [f"{row['name']:>12}"]
        for metric in REPORT_FIELDS:
            v = row["improvement_pct"][metric]
            cells.append(f"{v:>11.1f}%" if v is not None else f"{'-':>12}")
        lines.append("  ".join(cells))
    return "\n".join(lines)


# -- pipeline -------------------------------------------------------------------------

def _json_key(*parts) -> str:
    h = hashlib.sha256()
    for part in parts:
        h.update(json.dumps(part, sort_keys=True, default=str).encode())
    return h.hexdigest()[:20]


def _model_signature(config: ExperimentConfig) -> dict:
    """Everything that shapes the parameter set and unconditioned training.

    Deliberately excludes mode and provenance: stages that do not condition
    produce identical weights across modes sharing this signature, so their
    cached results are interchangeable.
    """
    return {
        "encoder": asdict(config.encoder),
        "pretext": [config.pretext_epochs, config.pretext_lr, config.pretext_mask_rate],
        "seed": config.seed,
        "conditioner_mode": config.conditioner_mode,
        "condition_tasks": list(config.condition_tasks()),
        "embed_dim": config.embed_dim,
        "decoders": [
            config.lid_proj_width, config.sv_proj_width, config.lid_blocks, config.sv_blocks,
            config.sv_margin, config.aam_scale,
            config.asr_width, config.asr_heads, config.asr_ffn, config.asr_layers,
        ],
        "loss_weights": config.loss_weights,
    }


def prepare_base_encoder(
    config: ExperimentConfig, corpus: Corpus, cache_dir: str | Path | None = None
) -> EncoderState:
    """Pretext-train (or load from cache) the frozen encoder."""
    pret = {
        "epochs": config.pretext_epochs,
        "lr": config.pretext_lr,
        "mask": config.pretext_mask_rate,
        "seed": config.seed,
    }
    key = _json_key(asdict(config.encoder), asdict(corpus.spec), pret)
    cache = Path(cache_dir) / f"base_{key}" if cache_dir else None
    state = init_encoder_state(config.encoder, np.random.default_rng(0))
    if cache is not None and (cache / "manifest.json").exists():
        tensors, _ = load_checkpoint(cache)
        for k, p in state.named_parameters():
            p.data = tensors[k].astype(p.data.dtype, copy=True)
            p.requires_grad = False
        return state
    feats = [u.features for u in _stage_items(corpus, "mixed")]
    state = pretrain_frozen_encoder(
        config.encoder, feats,
        epochs=config.pretext_epochs, lr=config.pretext_lr,
        mask_rate=config.pretext_mask_rate, seed=config.seed,
    )
    if cache is not None:
        arrays = {k: p.data for k, p in state.named_parameters()}
        save_checkpoint(cache, arrays, frozen=set(arrays), config={"kind": "base_encoder", "key": key})
    return state


@dataclass
class PipelineResult:
    report: dict
    report_path: Path
    checkpoint_dir: Path
    stage_infos: list[dict]
    bundle: ModelBundle


def run_pipeline(
    config: ExperimentConfig,
    out_dir: str | Path,
    *,
    corpus: Corpus | None = None,
    stage_cache: str | Path | None = None,
    log=None,
) -> PipelineResult:
    """Prepare data and the frozen encoder, run the staged plan, evaluate.

    ``stage_cache`` (a directory) memoizes completed stages by a key covering
    everything that determines their outcome: corpus spec, model config, and
    the stage list up to that point. Training is deterministic, so a cache hit
    is bit-identical to retraining.
    """
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if corpus is None:
        corpus = build_corpora(config.corpus)
    base = prepare_base_encoder(config, corpus, cache_dir=stage_cache)
    bundle = build_bundle(config, corpus, base_encoder=base)

    cum_key = _json_key(asdict(corpus.spec), _model_signature(config))
    stage_infos = []
    last_dir = out / "base"
    for idx, stage in enumerate(build_stage_plan(config)):
        extras = (
            {"provenance": config.provenance, "dropout": config.condition_dropout,
             "detach": config.detach_conditions}
            if (stage.condition_tasks or stage.dual)
            else {}
        )
        cum_key = _json_key(cum_key, stage.to_dict(), extras)
        stage_dir = out / f"stage{idx}_{stage.name}"
        cached = Path(stage_cache) / f"stage_{cum_key}" if stage_cache else None
        if cached is not None and (cached / "manifest.json").exists():
            tensors, manifest = load_checkpoint(cached)
            set_trainable(bundle, stage.trainable)
            load_bundle_weights(bundle, tensors)
            info = {"stage": stage.to_dict(), "cached": True, **manifest.get("stage", {})}
            save_checkpoint(
                stage_dir, bundle.named_arrays(), frozen=bundle.frozen_keys(),
                config=config.to_dict(), stage=manifest.get("stage", {}),
            )
        else:
            info = run_stage(
                bundle, stage, corpus,
                seed=config.seed + 1000 * (idx + 1), out_dir=stage_dir, log=log,
            )
            if cached is not None:
                save_checkpoint(
                    cached, bundle.named_arrays(), frozen=bundle.frozen_keys(),
                    config=config.to_dict(),
                    stage={"name": stage.name, "steps": info["steps"], "frozen_hash": info["frozen_hash"]},
                )
        stage_infos.append(info)
        last_dir = stage_dir
        if log:
            log(f"finished stage {stage.name}")

    report = evaluate(bundle, corpus)
    report_path = out / "report.json"
    write_report(report_path, report)
    (out / "stages.json").write_text(json.dumps(stage_infos, indent=1, default=str))
    return PipelineResult(
        report=report, report_path=report_path, checkpoint_dir=last_dir,
        stage_infos=stage_infos, bundle=bundle,
    )


def load_pipeline_bundle(ckpt_dir: str | Path, corpus: Corpus | None = None) -> tuple[ModelBundle, Corpus]:
    """Rebuild a bundle (and its corpus) from a stage checkpoint directory."""
    tensors, manifest = load_checkpoint(ckpt_dir)
    config = ExperimentConfig.from_dict(manifest["config"])
    if corpus is None:
        corpus = build_corpora(config.corpus)
    bundle = build_bundle(config, corpus)
    load_bundle_weights(bundle, tensors)
    frozen = {b["name"] for b in manifest["blocks"] if b["frozen"]}
    for k, p in bundle.named_parameters():
        p.requires_grad = k not in frozen
    return bundle, corpus


# -- quick verification suites ---------------------------------------------------------

def gradcheck_suite(seed: int = 0) -> dict[str, ad.GradCheckReport]:
    """Gradient checks (float64, h=1e-5) for every differentiable building block."""
    from . import conditioner as cond

    rng = np.random.default_rng(seed)
    f64 = np.float64
    reports: dict[str, ad.GradCheckReport] = {}

    def t(shape, scale=1.0, grad=True):
        return Tensor(rng.normal(0.0, scale, size=shape).astype(f64), requires_grad=grad)

    a, b = t((3, 4)), t((4, 2))
    reports["matmul"] = ad.grad_check(lambda: (a @ b).sum(), [("a", a), ("b", b)])

    x, g, bb = t((5, 6)), t(6), t(6)
    reports["layer_norm"] = ad.grad_check(
        lambda: (ad.layer_norm(x, g, bb, axis=-1) * ad.tanh(x)).sum(),
        [("x", x), ("gain", g), ("bias", bb)],
    )

    s = t((4, 7))
    w = t((7, 3))
    reports["softmax"] = ad.grad_check(
        lambda: (ad.softmax(s @ w, axis=-1) * ad.sigmoid(s @ w)).sum(), [("s", s), ("w", w)]
    )

    cfg = EncoderConfig(num_layers=1, hidden_width=8, attention_heads=2, ffn_width=12, input_dim=4)
    layer = init_layer(cfg, rng, dtype=f64)
    sx = t((8, 5))
    reports["attention_block"] = ad.grad_check(
        lambda: (forward_layer(layer, sx, cfg.attention_heads) * ad.tanh(sx)).sum(),
        [("s", sx)] + layer.named_parameters(),
    )

    cp = cond.init_identity(6, 3, mode=TCAC, attn_hidden=4, rng=rng, dtype=f64)
    for _, p in cp.named_parameters():
        p.data = rng.normal(0.0, 0.5, size=p.shape).astype(f64)
    sm, zm = t((6, 5)), t(3)
    reports["tcac_modulate"] = ad.grad_check(
        lambda: (cond.modulate(cp, sm, zm) * ad.sigmoid(sm)).sum(),
        [("s", sm), ("z", zm)] + cp.named_parameters(),
    )

    pool = AttnPoolParams(w1=t((3, 6), 0.5), b1=t(3, 0.5), w2=t((6, 3), 0.5), b2=t(6, 0.5))
    fp = t((6, 5))
    mix = t(12, grad=False)
    reports["attentive_stats_pool"] = ad.grad_check(
        lambda: (attentive_stats_pool(fp, pool) * mix).sum(),
        [("f", fp)] + pool.named_parameters("pool."),
    )

    for margin in (0.0, 0.3):
        e = t(5)
        whead = t((4, 5))
        from .decoders import _l2_normalize

        def aam_fn():
            cosines = (_l2_normalize(whead, axis=1) @ _l2_normalize(e.reshape(5, 1), axis=0)).reshape(4)
            return aam_loss(cosines, 1, margin=margin, scale=8.0)

        reports[f"aam_loss_m{margin}"] = ad.grad_check(aam_fn, [("e", e), ("w", whead)])

    lp = Tensor(rng.normal(0.0, 1.0, size=(5, 8)).astype(f64), requires_grad=True)
    reports["ctc_loss"] = ad.grad_check(
        lambda: ctc_loss(ad.log_softmax(lp, axis=0), [1, 3, 3]), [("log_post", lp)]
    )
    return reports


def selftest(log=print) -> bool:
    """Fast internal consistency checks; returns True when everything passes."""
    from . import conditioner as cond

    ok = True

    def check(name, passed):
        nonlocal ok
        ok = ok and passed
        log(f"[{'ok' if passed else 'FAIL'}] {name}")

    rng = np.random.default_rng(0)
    s = Tensor(rng.normal(size=(8, 6)).astype(np.float32))
    z = Tensor(rng.normal(size=(4,)).astype(np.float32))
    for mode in (CC, TCAC):
        p = cond.init_identity(8, 4, mode=mode, rng=rng)
        same = np.array_equal(cond.modulate(p, s, z).data, s.data)
        check(f"identity modulation is bit-exact ({mode})", same)

    reps = gradcheck_suite(seed=1)
    for name in ("matmul", "layer_norm", "ctc_loss"):
        check(f"grad check {name} <= 1e-4", reps[name].ok)

    lp = ad.log_softmax(Tensor(rng.normal(size=(3, 4)).astype(np.float64)), axis=0)
    from itertools import product

    total = -np.inf
    for path in product(range(3), repeat=4):
        if ctc_greedy_decode(np.eye(3)[list(path)].T) == [1, 2]:
            total = np.logaddexp(total, sum(lp.data[v, t] for t, v in enumerate(path)))
    loss = ctc_loss(lp, [1, 2])
    check("ctc matches path enumeration", abs(loss.item() + total) < 1e-9)

    check("eer sweep example", abs(eer([0.2], [0.8]) - 1.0) < 1e-12)
    check("min_dcf tied single scores", abs(min_dcf([0.5], [0.5]) - 1.0) < 1e-12)
    return ok
