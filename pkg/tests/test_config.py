"""Strict config parsing, canonical serialization, and CSV reporting."""
import configparser

import numpy as np
import pytest

from hasnets.config import ExperimentConfig, config_text, load_config, save_config
from hasnets.errors import ConfigurationError
from hasnets.reporting import (LEDGER_COLUMNS, REPORT_COLUMNS, SCAN_COLUMNS,
                               _fmt, merge_reports, write_ledger, write_merged,
                               write_report, write_scan, write_timing)
from hasnets.strip import StripReport
from hasnets.training import IterationSnapshot


def test_defaults_cover_a_complete_run():
    cfg = load_config()
    assert cfg.run.seed == 0
    assert cfg.run.out == "runs/latest"
    assert cfg.data.source == "synth"
    assert cfg.data.synth_n == 10000
    assert cfg.split.test_count == 2000
    assert cfg.poison.mode == "none"
    assert cfg.model.architecture == "desk_cnn"
    assert cfg.optimizer.kind == "sgd-momentum"
    assert cfg.train.trainer == "undefended"
    assert cfg.hasnet.s == 0.3 and cfg.hasnet.d == 0.4 and cfg.hasnet.tau == 1e-8
    assert cfg.gradshape.clip_norm == 4.0
    assert cfg.strip.enabled is False
    assert cfg.eval.baseline_accuracy is None


def test_config_file_round_trips_canonically(tmp_path):
    overrides = {
        ("run", "seed"): "5",
        ("run", "out"): "runs/exp",
        ("split", "healing_fraction"): "0.2",
        ("poison", "mode"): "conventional",
        ("poison", "epsilon"): "0.45",
        ("train", "trainer"): "hasnet",
        ("strip", "enabled"): "yes",
        ("eval", "baseline_accuracy"): "0.9",
    }
    cfg = load_config(overrides=overrides)
    assert cfg.run.seed == 5
    assert cfg.split.healing_fraction == 0.2
    assert cfg.strip.enabled is True
    assert cfg.eval.baseline_accuracy == 0.9

    path = tmp_path / "config.ini"
    save_config(cfg, path)
    reloaded = load_config(path)
    assert config_text(reloaded) == config_text(cfg)
    assert reloaded.poison.epsilon == 0.45


def test_serialization_materializes_every_field():
    text = config_text(ExperimentConfig())
    cp = configparser.ConfigParser()
    cp.read_string(text)
    assert set(cp.sections()) == {"run", "data", "split", "poison", "model",
                                  "optimizer", "train", "hasnet", "gradshape",
                                  "strip", "eval"}
    assert cp["hasnet"]["tau"] == "1e-08"
    assert cp["strip"]["enabled"] == "false"
    assert cp["eval"]["baseline_accuracy"] == "none"
    assert cp["optimizer"]["learning_rate"] == "0.01"


def test_unknown_sections_and_keys_are_fatal(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[wormhole]\nx = 1\n")
    with pytest.raises(ConfigurationError, match=r"unknown config section \[wormhole\]"):
        load_config(bad)
    bad.write_text("[run]\nspeed = 9\n")
    with pytest.raises(ConfigurationError, match="unknown config key 'speed'"):
        load_config(bad)
    with pytest.raises(ConfigurationError, match=r"unknown config override \[run\] nope"):
        load_config(overrides={("run", "nope"): "1"})
    with pytest.raises(ConfigurationError, match="unknown config override"):
        load_config(overrides={("warp", "seed"): "1"})


def test_malformed_values_are_fatal(tmp_path):
    with pytest.raises(ConfigurationError, match=r"\[run\] seed: expected an integer"):
        load_config(overrides={("run", "seed"): "abc"})
    with pytest.raises(ConfigurationError, match=r"\[hasnet\] s: expected a number"):
        load_config(overrides={("hasnet", "s"): "lots"})
    with pytest.raises(ConfigurationError, match="expected true/false"):
        load_config(overrides={("strip", "enabled"): "maybe"})
    with pytest.raises(ConfigurationError, match="expected a number or none"):
        load_config(overrides={("eval", "baseline_accuracy"): "high"})
    bad = tmp_path / "broken.ini"
    bad.write_text("run]\nseed = 1\n")
    with pytest.raises(ConfigurationError, match="cannot parse"):
        load_config(bad)


@pytest.mark.parametrize("raw,value", [
    ("true", True), ("yes", True), ("1", True), ("on", True),
    ("false", False), ("no", False), ("0", False), ("off", False),
    ("TRUE", True), ("Off", False),
])
def test_bool_spellings(raw, value):
    assert load_config(overrides={("strip", "enabled"): raw}).strip.enabled is value


def test_optional_float_accepts_none_spelling():
    cfg = load_config(overrides={("eval", "baseline_accuracy"): "NONE"})
    assert cfg.eval.baseline_accuracy is None


@pytest.mark.parametrize("overrides,needle", [
    ({("poison", "mode"): "conventional", ("poison", "epsilon"): "0.05"}, "epsilon"),
    ({("poison", "mode"): "lunar"}, "unknown poison mode"),
    ({("poison", "budget"): "-1"}, "budget"),
    ({("split", "healing_fraction"): "0.6"}, "healing_fraction"),
    ({("split", "test_count"): "0"}, "test_count"),
    ({("train", "trainer"): "bogus"}, "unknown trainer"),
    ({("train", "loss"): "hinge"}, "unknown loss"),
    ({("train", "epochs"): "0"}, "epochs"),
    ({("hasnet", "max_iterations"): "0"}, "max_iterations"),
    ({("hasnet", "s"): "0"}, "s must"),
    ({("hasnet", "policy"): "policy7"}, "unknown policy"),
    ({("optimizer", "kind"): "adam"}, "unknown optimizer"),
    ({("optimizer", "batch_size"): "0"}, "batch_size"),
    ({("gradshape", "clip_norm"): "0"}, "clip_norm"),
    ({("strip", "frr"): "1.5"}, "frr"),
    ({("strip", "clean_count"): "0"}, "strip set sizes"),
    ({("data", "source"): "idx"}, "idx_images"),
    ({("data", "source"): "cache"}, "cache_path"),
])
def test_cross_field_validation(overrides, needle):
    with pytest.raises(ConfigurationError, match=needle):
        load_config(overrides=overrides)


def test_low_epsilon_is_fine_while_poisoning_is_off():
    cfg = load_config(overrides={("poison", "epsilon"): "0.05"})
    assert cfg.poison.epsilon == 0.05


# ------------------------------------------------------------- reporting


def test_fmt_rules():
    assert _fmt(None) == ""
    assert _fmt(True) == "1" and _fmt(False) == "0"
    assert _fmt(np.bool_(True)) == "1"
    assert _fmt(float("nan")) == ""
    assert _fmt(0.5) == "0.5"
    assert _fmt(1.0 / 3.0) == "0.333333333333"
    assert _fmt(7) == "7"
    assert _fmt("summary") == "summary"


def test_write_report_golden_bytes(tmp_path):
    path = tmp_path / "report.csv"
    write_report(path, [
        {"kind": "iter", "iteration": 1, "clean_accuracy": 0.5, "asr": float("nan"),
         "selected_count": 10, "retained_count": 12, "removed_count": 3,
         "mean_neg_gamma_poisoned": 0.25, "mean_neg_gamma_clean": -0.125},
        {"kind": "summary", "clean_accuracy": 0.975, "asr": 0.0, "rad": 0.03125},
    ])
    expected = (
        "hnr1,iteration,clean_accuracy,asr,selected_count,retained_count,"
        "removed_count,mean_neg_gamma_poisoned,mean_neg_gamma_clean,rad\r\n"
        "iter,1,0.5,,10,12,3,0.25,-0.125,\r\n"
        "summary,,0.975,0,,,,,,0.03125\r\n"
    )
    assert path.read_bytes() == expected.encode()
    assert tuple(expected.split("\r\n")[0].split(",")) == REPORT_COLUMNS


def test_write_report_rejects_out_of_range_rates(tmp_path):
    with pytest.raises(ConfigurationError, match=r"outside \[0, 1\]"):
        write_report(tmp_path / "r.csv", [{"kind": "iter", "clean_accuracy": 1.2}])
    with pytest.raises(ConfigurationError, match="asr"):
        write_report(tmp_path / "r.csv", [{"kind": "iter", "asr": -0.5}])


def test_write_ledger_golden_bytes(tmp_path):
    snap = IterationSnapshot(
        iteration=1, ids=np.array([3, 7]), neg_gamma=np.array([0.5, -0.25]),
        l1=np.array([1.0, float("nan")]), l2=np.array([0.75, 2.0]),
        status=np.array([0, 2]), selected_count=1, retained_count=1,
        removed_count=1, m=0.0, m2=0.0, seconds=0.0)
    path = tmp_path / "ledger.csv"
    write_ledger(path, [snap], {3: True})
    expected = (
        "iteration,id,neg_gamma,l1,l2,status,poison_flag\r\n"
        "1,3,0.5,1,0.75,selected,1\r\n"
        "1,7,-0.25,,2,removed,0\r\n"
    )
    assert path.read_bytes() == expected.encode()
    assert tuple(expected.split("\r\n")[0].split(",")) == LEDGER_COLUMNS


def test_write_scan_golden_bytes(tmp_path):
    report = StripReport(ids=np.array([1, 2]), scores=np.array([0.5, 1.25]),
                         flagged=np.array([True, False]),
                         poison_flags=np.array([False, True]), threshold=0.9)
    path = tmp_path / "strip.csv"
    write_scan(path, report)
    expected = "id,score,flagged,poison_flag\r\n1,0.5,1,0\r\n2,1.25,0,1\r\n"
    assert path.read_bytes() == expected.encode()
    assert tuple(expected.split("\r\n")[0].split(",")) == SCAN_COLUMNS


def test_write_timing_golden_bytes(tmp_path):
    path = tmp_path / "timing.csv"
    write_timing(path, [(1, 0.1234567), (2, 2.0)])
    assert path.read_bytes() == b"iteration,seconds\r\n1,0.123\r\n2,2.000\r\n"


def make_report(path, kind, acc):
    write_report(path, [{"kind": kind, "clean_accuracy": acc}])


def test_merge_reports_tags_rows_with_their_source(tmp_path):
    make_report(tmp_path / "alpha.csv", "summary", 0.5)
    make_report(tmp_path / "beta.csv", "summary", 0.75)
    rows = merge_reports([tmp_path / "alpha.csv", tmp_path / "beta.csv"])
    assert rows[0] == ("source",) + REPORT_COLUMNS
    assert len(rows) == 3
    assert rows[1][0] == "alpha" and rows[1][1] == "summary"
    assert rows[2][0] == "beta" and rows[2][3] == "0.75"

    merged = tmp_path / "merged.csv"
    write_merged(merged, rows)
    text = merged.read_bytes().decode()
    assert text.startswith("source,hnr1,")
    assert "beta,summary" in text


def test_merge_reports_rejects_foreign_csv(tmp_path):
    alien = tmp_path / "alien.csv"
    alien.write_text("a,b,c\r\n1,2,3\r\n")
    with pytest.raises(ConfigurationError, match="not a hnr1 report"):
        merge_reports([alien])
