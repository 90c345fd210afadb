"""Experiment harness tests: configuration handling, stage plans, trainability
masks, frozen-weight enforcement, pipeline determinism, and CLI exit codes."""

import copy
import json
import types

import numpy as np
import pytest

import condspeech.cli as cli
import condspeech.harness as hn
from condspeech.autodiff import NumericalError, Tensor
from condspeech.conditioner import TCAC
from condspeech.encoder import ConfigError
from condspeech.harness import ExperimentConfig, InvariantBreach
from condspeech.metrics import REPORT_FIELDS
from condspeech.serialize import block_hash
from condspeech.synthdata import build_corpora

from conftest import micro_config, tiny_spec


@pytest.fixture(scope="module")
def micro_corpus():
    return build_corpora(tiny_spec())


@pytest.fixture(scope="module")
def micro_base(micro_corpus):
    return hn.prepare_base_encoder(micro_config(), micro_corpus)


def fresh_base(base):
    state = copy.deepcopy(base)
    state.conditioners = {}
    state.cond_projs = {}
    state.label_projs = {}
    return state


# -- configuration ------------------------------------------------------------


def test_config_json_roundtrip():
    cfg = micro_config(mode="ca_hier_LS", conditioner_mode=TCAC, provenance="soft_label")
    loaded = ExperimentConfig.from_json(json.dumps(cfg.to_dict()))
    assert loaded == cfg


def test_config_rejects_unknown_fields():
    d = micro_config().to_dict()
    d["learning_rate_schedule"] = "cosine"
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(d)


def test_config_rejects_bad_mode_and_conditioner():
    with pytest.raises(ConfigError):
        micro_config(mode="ca_everything").validate()
    with pytest.raises(ConfigError):
        micro_config(conditioner_mode="film++").validate()


def test_config_rejects_unsupported_schema_version():
    d = micro_config().to_dict()
    d["schema_version"] = 99
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(d)


def test_config_rejects_cond_dim_smaller_than_languages():
    cfg = micro_config()
    cfg.encoder.cond_dim = 3  # five languages need at least five slots
    with pytest.raises(ConfigError):
        cfg.validate()


@pytest.mark.parametrize(
    "mode,tasks",
    [("frozen_baseline", ()), ("ca_hier_L", ("lid",)), ("ca_dual_L", ("lid",)),
     ("ca_hier_LS", ("lid", "sv")), ("full_finetune", ())],
)
def test_condition_tasks_per_mode(mode, tasks):
    assert micro_config(mode=mode).condition_tasks() == tasks


# -- stage plans ---------------------------------------------------------------


def test_stage_plan_shapes():
    plan = {m: [s.name for s in hn.build_stage_plan(micro_config(mode=m))] for m in hn.MODES}
    assert plan["frozen_baseline"] == ["decoders"]
    assert plan["ca_hier_L"] == ["decoders", "ca_lid"]
    assert plan["ca_dual_L"] == ["decoders", "dual_lid"]
    assert plan["ca_hier_LS"] == ["decoders", "ca_lid", "sv_decoder", "ca_lid_sv"]
    assert plan["full_finetune"] == ["decoders", "finetune_all"]


def test_stage_plan_flags():
    dual = hn.build_stage_plan(micro_config(mode="ca_dual_L"))[1]
    assert dual.dual and dual.condition_tasks == ("lid",)
    ft = hn.build_stage_plan(micro_config(mode="full_finetune"))[1]
    assert "encoder" in ft.trainable and not ft.condition_tasks
    ls = hn.build_stage_plan(micro_config(mode="ca_hier_LS"))
    assert ls[3].condition_tasks == ("lid", "sv")
    assert all(s.condition_tasks == () for s in hn.build_stage_plan(micro_config()))


def test_stage_overrides_apply_and_convert_tuples():
    cfg = micro_config(
        stage_overrides={"decoders": {"epochs": 3, "lr": 0.5, "trainable": ["dec.asr"]}}
    )
    st = hn.build_stage_plan(cfg)[0]
    assert (st.epochs, st.lr, st.trainable) == (3, 0.5, ("dec.asr",))


def test_stage_overrides_reject_unknown_field():
    cfg = micro_config(stage_overrides={"decoders": {"momentum": 0.9}})
    with pytest.raises(ConfigError):
        hn.build_stage_plan(cfg)


def test_mutating_one_plan_leaves_the_template_alone():
    cfg = micro_config(stage_overrides={"decoders": {"epochs": 99}})
    assert hn.build_stage_plan(cfg)[0].epochs == 99
    assert hn.build_stage_plan(micro_config(stage_overrides={}))[0].epochs == 12


# -- trainability masks ------------------------------------------------------------


def test_expand_blocks():
    assert hn._expand_blocks(("dec.lid.feat",)) == ("dec.lid.agg.", "dec.lid.feat.")
    assert hn._expand_blocks(("encoder", "cond.lid")) == ("encoder.", "cond.lid.")


def test_set_trainable_masks_exact_prefixes(micro_corpus, micro_base):
    bundle = hn.build_bundle(micro_config(mode="ca_hier_L"), micro_corpus, fresh_base(micro_base))
    hn.set_trainable(bundle, ("cond.lid", "dec.lid.feat"))
    for key, p in bundle.named_parameters():
        want = key.startswith(("cond.lid.", "dec.lid.agg.", "dec.lid.feat."))
        assert p.requires_grad == want, key


def test_build_bundle_attaches_mode_appropriate_adapters(micro_corpus, micro_base):
    plain = hn.build_bundle(micro_config(), micro_corpus, fresh_base(micro_base))
    assert not plain.encoder_state.conditioners
    ls = hn.build_bundle(micro_config(mode="ca_hier_LS"), micro_corpus, fresh_base(micro_base))
    assert set(ls.encoder_state.conditioners) == {"lid", "sv"}
    assert ls.decoders["lid"].cfg.num_classes == micro_corpus.num_languages
    assert ls.decoders["sv"].cfg.num_classes == len(ls.speaker_index)
    assert list(ls.speaker_index.values()) == sorted(ls.speaker_index.values())


def test_load_bundle_weights_validates_keys_and_shapes(micro_corpus, micro_base):
    bundle = hn.build_bundle(micro_config(), micro_corpus, fresh_base(micro_base))
    arrays = bundle.named_arrays()
    with pytest.raises(ConfigError, match="missing"):
        hn.load_bundle_weights(bundle, {k: v for k, v in list(arrays.items())[:-1]})
    extra = dict(arrays, bogus=np.zeros(3, np.float32))
    with pytest.raises(ConfigError, match="extra"):
        hn.load_bundle_weights(bundle, extra)
    bad = dict(arrays)
    bad["dec.lid.agg.w"] = np.zeros(99, np.float32)
    with pytest.raises(ConfigError, match="shape"):
        hn.load_bundle_weights(bundle, bad)


# -- run_stage ---------------------------------------------------------------------


def test_run_stage_trains_only_selected_blocks(micro_corpus, micro_base):
    bundle = hn.build_bundle(micro_config(), micro_corpus, fresh_base(micro_base))
    before = {k: v.copy() for k, v in bundle.named_arrays().items()}
    stage = hn.Stage(
        name="probe", corpus="asr_lid", losses=("lid",),
        trainable=("dec.lid.feat",), epochs=1, lr=0.01, batch_size=8,
    )
    info = hn.run_stage(bundle, stage, micro_corpus, seed=0)
    assert info["steps"] > 0 and np.isfinite(info["final_loss"])
    changed = {k for k, v in bundle.named_arrays().items() if not np.array_equal(v, before[k])}
    assert changed  # training moved something
    assert all(k.startswith(("dec.lid.agg.", "dec.lid.feat.")) for k in changed)


def test_run_stage_empty_trainable_set_is_a_noop(micro_corpus, micro_base):
    bundle = hn.build_bundle(micro_config(), micro_corpus, fresh_base(micro_base))
    before = block_hash(bundle.named_arrays())
    stage = hn.Stage(
        name="inert", corpus="asr_lid", losses=("lid",), trainable=(), epochs=1, lr=0.1
    )
    hn.run_stage(bundle, stage, micro_corpus, seed=0)
    assert block_hash(bundle.named_arrays()) == before


def test_run_stage_detects_frozen_weight_drift(micro_corpus, micro_base, monkeypatch):
    bundle = hn.build_bundle(micro_config(), micro_corpus, fresh_base(micro_base))

    def sabotage(bundle_, stage_, items_):
        bundle_.encoder_state.embed_w.data[0, 0] += 1.0  # frozen tensor

    monkeypatch.setattr(hn, "_check_gradient_masks", sabotage)
    stage = hn.Stage(
        name="drift", corpus="asr_lid", losses=("lid",), trainable=("dec.lid",), epochs=1, lr=0.01
    )
    with pytest.raises(InvariantBreach, match="frozen"):
        hn.run_stage(bundle, stage, micro_corpus, seed=0)


def test_gradient_mask_probe_detects_cross_task_leak(micro_corpus, micro_base, monkeypatch):
    bundle = hn.build_bundle(micro_config(), micro_corpus, fresh_base(micro_base))
    hn.set_trainable(bundle, ("dec.asr", "dec.lid", "dec.sv"))
    real_fns = hn._loss_fns(bundle)

    def leaky(bundle_):
        fns = dict(real_fns)
        lid_head = bundle_.decoders["lid"].head_w
        fns["asr"] = lambda out, target: real_fns["asr"](out, target) + (lid_head * lid_head).sum()
        return fns

    monkeypatch.setattr(hn, "_loss_fns", leaky)
    stage = hn.Stage(
        name="leak", corpus="asr_lid", losses=("asr",), trainable=("dec.asr",), epochs=1, lr=0.01
    )
    items = micro_corpus.splits["train_asr_lid"]
    with pytest.raises(InvariantBreach, match="gradient mask"):
        hn._check_gradient_masks(bundle, stage, items)


def test_gradient_mask_probe_passes_on_stock_wiring(micro_corpus, micro_base):
    bundle = hn.build_bundle(micro_config(), micro_corpus, fresh_base(micro_base))
    hn.set_trainable(bundle, ("dec.asr", "dec.lid", "dec.sv"))
    stage = hn.build_stage_plan(micro_config())[0]
    items = hn._stage_items(micro_corpus, "mixed")
    hn._check_gradient_masks(bundle, stage, items)  # must not raise


def test_stage_items_unknown_split(micro_corpus):
    with pytest.raises(ConfigError):
        hn._stage_items(micro_corpus, "held_out")


# -- identity contract ----------------------------------------------------------------


@pytest.mark.parametrize("cmode", ["cc", TCAC])
def test_untrained_adapters_leave_outputs_bit_identical(micro_corpus, micro_base, cmode):
    """Identity-initialized conditioning must be a no-op for every output head."""
    kw = {} if cmode == "cc" else {"conditioner_mode": TCAC}
    plain = hn.build_bundle(micro_config(), micro_corpus, fresh_base(micro_base))
    ca = hn.build_bundle(micro_config(mode="ca_hier_L", **kw), micro_corpus, fresh_base(micro_base))
    for utt in micro_corpus.splits["eval_normal"][:4]:
        a = hn.forward_utterance(plain, utt, ("asr", "lid"))
        b = hn.forward_utterance(ca, utt, ("asr", "lid"))
        assert a.final["asr"].log_post.data.tobytes() == b.final["asr"].log_post.data.tobytes()
        assert a.final["lid"].logits.data.tobytes() == b.final["lid"].logits.data.tobytes()


# -- evaluation and comparison -----------------------------------------------------------


def test_evaluate_report_fields_and_ranges(micro_corpus, micro_base):
    bundle = hn.build_bundle(micro_config(), micro_corpus, fresh_base(micro_base))
    report = hn.evaluate(bundle, micro_corpus)
    assert tuple(report) == REPORT_FIELDS
    assert all(np.isfinite(v) for v in report.values())
    assert 0.0 <= report["lid_acc"] <= 1.0
    assert 0.0 <= report["eer"] <= 1.0
    assert report["cer_normal"] >= 0.0 and report["min_dcf"] >= 0.0


def test_compare_relative_improvements():
    base = {"cer_normal": 0.29, "cer_fewshot": 0.8, "lid_acc": 0.5, "eer": 0.2, "min_dcf": 0.6}
    better = {"cer_normal": 0.194, "cer_fewshot": 0.8, "lid_acc": 0.6, "eer": 0.25, "min_dcf": 0.6}
    cmp = hn.compare([base, better], ["base", "sys"])
    row = cmp["rows"][0]["improvement_pct"]
    assert row["cer_normal"] == pytest.approx(100 * (0.29 - 0.194) / 0.29)  # ~33.1
    assert row["lid_acc"] == pytest.approx(20.0)  # higher accuracy counts as improvement
    assert row["eer"] == pytest.approx(-25.0)  # regression shows as negative
    assert cmp["baseline"] == "base"


def test_compare_marks_missing_metrics():
    base = {"cer_normal": 0.3}
    other = {"cer_normal": 0.2, "eer": 0.1}
    cmp = hn.compare([base, other])
    row = cmp["rows"][0]["improvement_pct"]
    assert row["eer"] is None and row["lid_acc"] is None
    assert row["cer_normal"] is not None
    table = hn.format_comparison(cmp)
    assert "-" in table and "cer_normal" in table
    with pytest.raises(ValueError):
        hn.compare([])


# -- pipeline -------------------------------------------------------------------------


def test_pipeline_runs_are_deterministic(tmp_path, micro_corpus):
    cfg = micro_config()
    r1 = hn.run_pipeline(cfg, tmp_path / "a", corpus=micro_corpus)
    r2 = hn.run_pipeline(micro_config(), tmp_path / "b", corpus=micro_corpus)
    for k in REPORT_FIELDS:
        assert r1.report[k] == pytest.approx(r2.report[k], abs=1e-6)
    assert block_hash(r1.bundle.named_arrays()) == block_hash(r2.bundle.named_arrays())


def test_stage_cache_hit_is_bit_identical(tmp_path, micro_corpus):
    cache = tmp_path / "cache"
    r1 = hn.run_pipeline(micro_config(), tmp_path / "a", corpus=micro_corpus, stage_cache=cache)
    assert not any(i.get("cached") for i in r1.stage_infos)
    r2 = hn.run_pipeline(micro_config(), tmp_path / "b", corpus=micro_corpus, stage_cache=cache)
    assert all(i.get("cached") for i in r2.stage_infos)
    assert block_hash(r1.bundle.named_arrays()) == block_hash(r2.bundle.named_arrays())
    assert r1.report == r2.report


def test_conditioned_stage_cache_distinguishes_provenance(tmp_path, micro_corpus):
    cache = tmp_path / "cache"
    hn.run_pipeline(micro_config(mode="ca_hier_L"), tmp_path / "a", corpus=micro_corpus, stage_cache=cache)
    r = hn.run_pipeline(
        micro_config(mode="ca_hier_L", provenance="ground_truth"),
        tmp_path / "b", corpus=micro_corpus, stage_cache=cache,
    )
    # the unconditioned decoder stage is shared, the conditioned stage is not
    assert r.stage_infos[0].get("cached")
    assert not r.stage_infos[1].get("cached")


def test_pipeline_checkpoint_roundtrip(tmp_path, micro_corpus):
    res = hn.run_pipeline(micro_config(mode="ca_hier_L"), tmp_path / "run", corpus=micro_corpus)
    bundle, corpus2 = hn.load_pipeline_bundle(res.checkpoint_dir, corpus=micro_corpus)
    utt = micro_corpus.splits["eval_normal"][0]
    a = hn.forward_utterance(res.bundle, utt, ("asr", "lid"))
    b = hn.forward_utterance(bundle, utt, ("asr", "lid"))
    assert a.final["asr"].log_post.data.tobytes() == b.final["asr"].log_post.data.tobytes()
    orig_frozen = res.bundle.frozen_keys()
    assert bundle.frozen_keys() == orig_frozen
    assert hn.evaluate(bundle, corpus2) == res.report


# -- CLI ---------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory, micro_corpus):
    """Corpus directory, config file, and a trained run shared by CLI tests."""
    root = tmp_path_factory.mktemp("cliws")
    spec_path = root / "spec.json"
    spec_path.write_text(tiny_spec().to_json())
    data_dir = root / "data"
    assert cli.main(["gen-data", "--spec", str(spec_path), "--out", str(data_dir)]) == 0
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(micro_config().to_dict()))
    out_dir = root / "run"
    code = cli.main([
        "train", "--config", str(cfg_path), "--out", str(out_dir),
        "--data", str(data_dir), "--quiet",
    ])
    assert code == 0
    return types.SimpleNamespace(
        root=root, spec=spec_path, data=data_dir, config=cfg_path,
        run=out_dir, ckpt=out_dir / "stage0_decoders",
    )


def test_cli_train_writes_report_and_checkpoint(cli_workspace):
    report = json.loads((cli_workspace.run / "report.json").read_text())
    assert tuple(sorted(report)) == tuple(sorted(REPORT_FIELDS))
    assert (cli_workspace.ckpt / "manifest.json").exists()


def test_cli_eval_matches_train_report(cli_workspace, capsys, tmp_path):
    out = tmp_path / "r.json"
    code = cli.main([
        "eval", "--ckpt", str(cli_workspace.ckpt), "--data", str(cli_workspace.data),
        "--report", str(out),
    ])
    assert code == 0
    got = json.loads(out.read_text())
    want = json.loads((cli_workspace.run / "report.json").read_text())
    for k in REPORT_FIELDS:
        assert got[k] == pytest.approx(want[k], abs=1e-6)


def test_cli_compare_table_and_artifacts(cli_workspace, capsys, tmp_path):
    a = cli_workspace.run / "report.json"
    b = tmp_path / "other.json"
    rep = json.loads(a.read_text())
    rep["cer_normal"] *= 0.5
    b.write_text(json.dumps(rep))
    js = tmp_path / "cmp.json"
    png = tmp_path / "cmp.png"
    code = cli.main(["compare", str(a), str(b), "--json", str(js), "--plot", str(png)])
    assert code == 0
    table = capsys.readouterr().out
    assert "cer_normal" in table
    assert json.loads(js.read_text())["rows"][0]["improvement_pct"]["cer_normal"] == pytest.approx(50.0)
    assert png.stat().st_size > 0


def test_cli_param_report(cli_workspace, capsys):
    code = cli.main(["param-report", "--ckpt", str(cli_workspace.ckpt), "--data", str(cli_workspace.data)])
    assert code == 0
    rep = json.loads(capsys.readouterr().out)
    assert {"blocks", "encoder_total", "adapter_total", "trainable_total", "ratio"} <= set(rep)


def test_cli_selftest(capsys):
    assert cli.main(["selftest"]) == 0


def test_cli_gradcheck_formats_and_fails_loudly(monkeypatch, capsys):
    fake_ok = {"matmul": types.SimpleNamespace(ok=True, max_rel_err=3e-7)}
    monkeypatch.setattr(hn, "gradcheck_suite", lambda seed=0: fake_ok)
    assert cli.main(["gradcheck"]) == 0
    assert "matmul: max rel err 3e-07 [ok]" in capsys.readouterr().out
    fake_bad = {"matmul": types.SimpleNamespace(ok=False, max_rel_err=0.5)}
    monkeypatch.setattr(hn, "gradcheck_suite", lambda seed=0: fake_bad)
    assert cli.main(["gradcheck"]) == 3


def test_cli_exit_codes(monkeypatch, tmp_path, cli_workspace):
    assert cli.main(["no-such-command"]) == 1
    assert cli.main(["train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 1

    def boom(*a, **kw):
        raise InvariantBreach("frozen parameter blocks changed during training")

    monkeypatch.setattr(hn, "run_pipeline", boom)
    code = cli.main([
        "train", "--config", str(cli_workspace.config), "--out", str(tmp_path / "x"), "--quiet",
    ])
    assert code == 2

    def nan(*a, **kw):
        raise NumericalError("non-finite loss")

    monkeypatch.setattr(hn, "run_pipeline", nan)
    code = cli.main([
        "train", "--config", str(cli_workspace.config), "--out", str(tmp_path / "y"), "--quiet",
    ])
    assert code == 3


def test_cli_seed_env_override(monkeypatch, tmp_path, capsys):
    monkeypatch.setenv("CONDSPEECH_SEED", "4242")
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(tiny_spec().to_json())
    assert cli.main(["gen-data", "--spec", str(spec_path), "--out", str(tmp_path / "d")]) == 0
    saved = json.loads((tmp_path / "d" / "spec.json").read_text())
    assert saved["seed"] == 4242
    monkeypatch.setenv("CONDSPEECH_SEED", "not-a-number")
    assert cli.main(["gen-data", "--spec", str(spec_path), "--out", str(tmp_path / "e")]) == 1
