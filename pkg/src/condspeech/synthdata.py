"""Synthetic speech-like corpora with language, transcript, and speaker labels.

Each language is a bigram token chain over a small vocabulary drawn from a
global token inventory. Token prototypes share a language-independent base
bank (by vocabulary position) plus a small language offset, so the k-th token
of two languages sounds nearly alike while mapping to different token ids;
resolving that ambiguity requires knowing the language, which is what makes
language conditioning genuinely useful downstream. Speakers add an offset
vector and a per-channel filter. All randomness is seeded: a language model
depends only on (seed, lang_id), an utterance only on (seed, utterance id).

Label availability mirrors the intended tasks: ASR/LID items carry transcript
plus language (never a speaker id), SV items carry only a speaker id.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .serialize import save_tensor, load_tensor


class CorpusConfigError(ValueError):
    """The corpus request is internally inconsistent or infeasible."""


@dataclass
class CorpusSpec:
    seed: int = 2024
    feature_dim: int = 16
    global_vocab: int = 30  # token ids 1..30; 0 is the CTC blank
    lang_vocab: int = 6
    max_vocab_overlap: float = 0.3
    frames_per_token: int = 3
    min_tokens: int = 4
    max_tokens: int = 9
    noise: float = 0.15
    proto_min_dist: float = 2.0
    lang_offset_scale: float = 1.0
    speaker_offset_scale: float = 0.25
    speaker_filter_scale: float = 0.15
    num_normal_langs: int = 8
    utts_per_normal_lang: int = 120
    num_fewshot_langs: int = 4
    utts_per_fewshot_lang: int = 5
    extended_fewshot: bool = False
    extended_utts_per_lang: int = 30
    eval_utts_per_normal_lang: int = 30
    eval_utts_per_fewshot_lang: int = 15
    num_sv_speakers: int = 40
    utts_per_sv_speaker: int = 15
    num_sv_eval_speakers: int = 12
    utts_per_sv_eval_speaker: int = 8
    num_trial_pairs: int = 200  # per side (target / nontarget)

    @property
    def num_languages(self) -> int:
        return self.num_normal_langs + self.num_fewshot_langs

    @property
    def ctc_vocab(self) -> int:
        return self.global_vocab + 1

    def to_json(self) -> str:
        return json.dumps({"schema_version": 1, **asdict(self)}, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CorpusSpec":
        data = json.loads(text)
        data.pop("schema_version", None)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise CorpusConfigError(f"unknown corpus spec fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class LanguageModel:
    lang_id: int
    vocab: np.ndarray  # (v,) global token ids
    prototypes: np.ndarray  # (v, feature_dim)
    transitions: np.ndarray  # (v, v) row-stochastic, zero diagonal
    offset: np.ndarray  # (feature_dim,) additive language signature


@dataclass
class SpeakerModel:
    speaker_id: str
    offset: np.ndarray
    filter: np.ndarray


@dataclass
class Utterance:
    utt_id: str
    features: np.ndarray  # (feature_dim, T) float32
    lang_id: int | None = None
    transcript: list[int] | None = None
    speaker_id: str | None = None

    def __post_init__(self):
        if self.transcript is not None and self.lang_id is None:
            raise CorpusConfigError(f"{self.utt_id}: transcript present without language label")


def _utt_seed(corpus_seed: int, utt_id: str) -> int:
    digest = hashlib.blake2b(f"{corpus_seed}:{utt_id}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _base_bank(spec: CorpusSpec) -> np.ndarray:
    """Shared token prototype bank with a minimum pairwise distance."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xBA5E]))
    bank = []
    attempts = 0
    while len(bank) < spec.lang_vocab:
        cand = rng.normal(0.0, 1.0, spec.feature_dim)
        attempts += 1
        if attempts > 1000:
            raise CorpusConfigError("could not place prototypes at the requested minimum distance")
        if all(np.linalg.norm(cand - b) >= spec.proto_min_dist for b in bank):
            bank.append(cand)
    return np.stack(bank)


def gen_language(spec: CorpusSpec, lang_id: int, forbidden_overlaps: list[np.ndarray] | None = None) -> LanguageModel:
    """Deterministic language model for (spec.seed, lang_id).

    ``forbidden_overlaps`` holds previously assigned vocabularies; the new
    vocabulary is re-drawn until every pairwise overlap stays within
    ``max_vocab_overlap`` of the per-language vocabulary size.
    """
    if spec.lang_vocab > spec.global_vocab:
        raise CorpusConfigError("per-language vocabulary larger than the global inventory")
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1, lang_id]))
    max_shared = int(spec.max_vocab_overlap * spec.lang_vocab)
    prev_sets = [set(int(v) for v in prev) for prev in (forbidden_overlaps or [])]
    vocab = None
    for _ in range(4000):
        # grow token by token; a candidate is admissible while every pairwise
        # overlap with an existing vocabulary stays within the cap
        chosen: list[int] = []
        shared = [0] * len(prev_sets)
        for _slot in range(spec.lang_vocab):
            pool = [
                tok
                for tok in range(1, spec.global_vocab + 1)
                if tok not in chosen
                and all(s + (tok in prev) <= max_shared for s, prev in zip(shared, prev_sets))
            ]
            if not pool:
                break
            tok = int(rng.choice(pool))
            chosen.append(tok)
            shared = [s + (tok in prev) for s, prev in zip(shared, prev_sets)]
        if len(chosen) == spec.lang_vocab:
            vocab = np.sort(np.asarray(chosen, dtype=np.int64))
            break
    if vocab is None:
        raise CorpusConfigError(
            f"cannot draw a vocabulary for language {lang_id} within overlap {spec.max_vocab_overlap}"
        )
    direction = rng.normal(0.0, 1.0, spec.feature_dim)
    direction /= np.linalg.norm(direction)
    offset = spec.lang_offset_scale * direction
    prototypes = _base_bank(spec) + offset[None, :]
    trans = rng.uniform(0.2, 1.0, size=(spec.lang_vocab, spec.lang_vocab))
    np.fill_diagonal(trans, 0.0)  # no immediate repeats, keeps CTC alignments feasible
    trans /= trans.sum(axis=1, keepdims=True)
    return LanguageModel(
        lang_id=lang_id, vocab=vocab, prototypes=prototypes, transitions=trans, offset=offset
    )


def gen_speaker(spec: CorpusSpec, speaker_id: str) -> SpeakerModel:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 2, _utt_seed(spec.seed, speaker_id)]))
    return SpeakerModel(
        speaker_id=speaker_id,
        offset=rng.normal(0.0, spec.speaker_offset_scale, spec.feature_dim),
        filter=np.exp(rng.normal(0.0, spec.speaker_filter_scale, spec.feature_dim)),
    )


def neutral_speaker(spec: CorpusSpec) -> SpeakerModel:
    return SpeakerModel(
        speaker_id="neutral",
        offset=np.zeros(spec.feature_dim),
        filter=np.ones(spec.feature_dim),
    )


def gen_utterance(
    spec: CorpusSpec,
    lang: LanguageModel,
    speaker: SpeakerModel,
    utt_id: str,
    *,
    noise: float | None = None,
    num_tokens: int | None = None,
) -> Utterance:
    """Sample a token chain and emit frames: (prototype + speaker offset) *
    speaker filter + Gaussian noise, ``frames_per_token`` frames per token."""
    rng = np.random.default_rng(_utt_seed(spec.seed, utt_id))
    noise = spec.noise if noise is None else noise
    n = num_tokens or int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
    v = spec.lang_vocab
    positions = [int(rng.integers(v))]
    for _ in range(n - 1):
        positions.append(int(rng.choice(v, p=lang.transitions[positions[-1]])))
    frames = []
    for k in positions:
        proto = (lang.prototypes[k] + speaker.offset) * speaker.filter
        for _ in range(spec.frames_per_token):
            eps = rng.normal(0.0, 1.0, spec.feature_dim) if noise > 0 else 0.0
            frames.append(proto + noise * eps)
    features = np.stack(frames).T.astype(np.float32)
    transcript = [int(lang.vocab[k]) for k in positions]
    return Utterance(
        utt_id=utt_id, features=features, lang_id=lang.lang_id, transcript=transcript
    )


@dataclass
class Corpus:
    spec: CorpusSpec
    languages: list[LanguageModel]
    splits: dict[str, list[Utterance]] = field(default_factory=dict)
    trials: list[tuple[str, str, int]] = field(default_factory=list)

    @property
    def num_languages(self) -> int:
        return self.spec.num_languages

    def utterance_index(self) -> dict[str, Utterance]:
        return {u.utt_id: u for split in self.splits.values() for u in split}


def build_languages(spec: CorpusSpec) -> list[LanguageModel]:
    langs: list[LanguageModel] = []
    for lid in range(spec.num_languages):
        langs.append(gen_language(spec, lid, [l.vocab for l in langs]))
    return langs


def build_corpora(spec: CorpusSpec) -> Corpus:
    """Generate every split plus speaker-verification trials."""
    if spec.num_sv_eval_speakers < 2:
        raise CorpusConfigError("speaker trials need at least two held-out speakers")
    if spec.max_tokens * spec.frames_per_token < 2:
        raise CorpusConfigError("utterances must span at least two frames")
    langs = build_languages(spec)
    normal = langs[: spec.num_normal_langs]
    fewshot = langs[spec.num_normal_langs :]
    splits: dict[str, list[Utterance]] = {
        "train_asr_lid": [],
        "train_sv": [],
        "eval_normal": [],
        "eval_fewshot": [],
        "eval_sv": [],
    }

    def asr_item(lang, split, n):
        uid = f"{split}_l{lang.lang_id:02d}_u{n:04d}"
        spk = gen_speaker(spec, "bg_" + uid)  # anonymous background speaker
        spk = SpeakerModel(None, spk.offset, spk.filter)
        return gen_utterance(spec, lang, spk, uid)

    for lang in normal:
        for n in range(spec.utts_per_normal_lang):
            splits["train_asr_lid"].append(asr_item(lang, "trn", n))
        for n in range(spec.eval_utts_per_normal_lang):
            splits["eval_normal"].append(asr_item(lang, "evn", n))
    for lang in fewshot:
        for n in range(spec.utts_per_fewshot_lang):
            splits["train_asr_lid"].append(asr_item(lang, "trf", n))
        for n in range(spec.eval_utts_per_fewshot_lang):
            splits["eval_fewshot"].append(asr_item(lang, "evf", n))
        if spec.extended_fewshot:
            for n in range(spec.extended_utts_per_lang):
                u = asr_item(lang, "trx", n)
                u.transcript = None  # language label only
                splits["train_asr_lid"].append(u)

    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 3]))

    def sv_item(speaker_name, split, n):
        uid = f"{split}_{speaker_name}_u{n:04d}"
        lang = langs[int(rng.integers(len(langs)))]
        spk = gen_speaker(spec, speaker_name)
        u = gen_utterance(spec, lang, spk, uid)
        u.transcript = None
        u.lang_id = None  # speaker-only labels on SV items
        u.speaker_id = speaker_name
        return u

    for s in range(spec.num_sv_speakers):
        name = f"spk{s:03d}"
        for n in range(spec.utts_per_sv_speaker):
            splits["train_sv"].append(sv_item(name, "svt", n))
    eval_names = [f"spk{spec.num_sv_speakers + s:03d}" for s in range(spec.num_sv_eval_speakers)]
    for name in eval_names:
        for n in range(spec.utts_per_sv_eval_speaker):
            splits["eval_sv"].append(sv_item(name, "sve", n))

    by_speaker: dict[str, list[str]] = {}
    for u in splits["eval_sv"]:
        by_speaker.setdefault(u.speaker_id, []).append(u.utt_id)
    same_pairs = [
        (ids[i], ids[j])
        for ids in by_speaker.values()
        for i in range(len(ids))
        for j in range(i + 1, len(ids))
    ]
    diff_pairs = []
    names = sorted(by_speaker)
    for _ in range(4 * spec.num_trial_pairs):
        a, b = rng.choice(len(names), size=2, replace=False)
        ua = by_speaker[names[a]][int(rng.integers(len(by_speaker[names[a]])))]
        ub = by_speaker[names[b]][int(rng.integers(len(by_speaker[names[b]])))]
        if (ua, ub) not in diff_pairs:
            diff_pairs.append((ua, ub))
        if len(diff_pairs) >= spec.num_trial_pairs:
            break
    if len(same_pairs) < spec.num_trial_pairs:
        raise CorpusConfigError(
            f"requested {spec.num_trial_pairs} target trials but only {len(same_pairs)} same-speaker pairs exist"
        )
    pick = rng.permutation(len(same_pairs))[: spec.num_trial_pairs]
    trials = [(same_pairs[i][0], same_pairs[i][1], 1) for i in pick]
    trials += [(a, b, 0) for a, b in diff_pairs[: spec.num_trial_pairs]]
    return Corpus(spec=spec, languages=langs, splits=splits, trials=trials)


# -- persistence -------------------------------------------------------------------

def save_corpus(corpus: Corpus, out_dir: str | Path):
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "spec.json").write_text(corpus.spec.to_json())
    for split, items in corpus.splits.items():
        lines = []
        for u in items:
            save_tensor(out / "features" / f"{u.utt_id}.tensor", u.features)
            lines.append(
                json.dumps(
                    {
                        "id": u.utt_id,
                        "lang": u.lang_id,
                        "transcript": u.transcript,
                        "speaker": u.speaker_id,
                        "features": f"features/{u.utt_id}.tensor",
                    },
                    sort_keys=True,
                )
            )
        (out / f"{split}.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""))
    trial_lines = [f"{a} {b} {t}" for a, b, t in corpus.trials]
    (out / "trials.txt").write_text("\n".join(trial_lines) + ("\n" if trial_lines else ""))


def load_corpus(data_dir: str | Path) -> Corpus:
    root = Path(data_dir)
    spec = CorpusSpec.from_json((root / "spec.json").read_text())
    corpus = Corpus(spec=spec, languages=build_languages(spec))
    for path in sorted(root.glob("*.jsonl")):
        items = []
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            items.append(
                Utterance(
                    utt_id=rec["id"],
                    features=load_tensor(root / rec["features"]),
                    lang_id=rec["lang"],
                    transcript=rec["transcript"],
                    speaker_id=rec["speaker"],
                )
            )
        corpus.splits[path.stem] = items
    trials_path = root / "trials.txt"
    if trials_path.exists():
        for line in trials_path.read_text().splitlines():
            if line.strip():
                a, b, t = line.split()
                corpus.trials.append((a, b, int(t)))
    return corpus
