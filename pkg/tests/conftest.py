import copy

import numpy as np
import pytest

from condspeech.encoder import EncoderConfig
from condspeech.harness import ExperimentConfig
from condspeech.synthdata import CorpusSpec, build_corpora


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ONE_EPOCH = {
    name: {"epochs": 1}
    for name in ("decoders", "ca_lid", "dual_lid", "sv_decoder", "ca_lid_sv", "finetune_all")
}


def micro_config(mode="frozen_baseline", **kw) -> ExperimentConfig:
    """Smallest experiment that still trains: two layers, width 16, one epoch."""
    base = dict(
        mode=mode,
        corpus=tiny_spec(),
        encoder=EncoderConfig(
            num_layers=2, hidden_width=16, attention_heads=2, ffn_width=24,
            input_dim=16, lid_group_size=1, sv_group_size=2, cond_dim=8,
        ),
        lid_proj_width=12, sv_proj_width=12, lid_blocks=1, sv_blocks=1,
        embed_dim=6, asr_width=8, asr_heads=2, asr_ffn=16, asr_layers=1,
        pretext_epochs=1,
        stage_overrides=copy.deepcopy(ONE_EPOCH),
    )
    base.update(kw)
    return ExperimentConfig(**base)


def tiny_spec(**overrides) -> CorpusSpec:
    base = dict(
        num_normal_langs=3,
        num_fewshot_langs=2,
        utts_per_normal_lang=12,
        utts_per_fewshot_lang=3,
        eval_utts_per_normal_lang=4,
        eval_utts_per_fewshot_lang=3,
        num_sv_speakers=6,
        utts_per_sv_speaker=4,
        num_sv_eval_speakers=4,
        utts_per_sv_eval_speaker=4,
        num_trial_pairs=20,
    )
    base.update(overrides)
    return CorpusSpec(**base)


@pytest.fixture(scope="session")
def small_corpus():
    return build_corpora(tiny_spec())


@pytest.fixture(scope="session")
def small_config():
    return ExperimentConfig(mode="frozen_baseline", corpus=tiny_spec(), pretext_epochs=1)


@pytest.fixture(scope="session")
def small_base_encoder(small_corpus, small_config):
    from condspeech.harness import prepare_base_encoder

    return prepare_base_encoder(small_config, small_corpus)
