import csv
import json
import struct
import warnings

import numpy as np
import pytest

from causalmeta import cli
from causalmeta.config import ConfigError, ExperimentConfig, dump_config, parse_config
from causalmeta.io import (MAGIC, CheckpointError, ConfigHashWarning, RunManifest,
                           checkpoint_bytes, emit_metrics, load_checkpoint, read_matrix,
                           read_metrics, save_checkpoint)
from causalmeta.meta import METRIC_COLUMNS, MetricsRow
from causalmeta.models import init_bundle

TINY = """\
mode: causal
iterations: 4
eval_tasks: 3
model:
  encoder_hidden: [8]
  n_z: 6
  n_factors: 4
  head_hidden: [8]
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY)
    return str(path)


# ------------------------------------------------------------------ config

def test_empty_document_gives_defaults():
    assert parse_config("") == ExperimentConfig()
    assert parse_config({}) == ExperimentConfig()


def test_lambdas_echoed_exactly():
    c = parse_config("causal:\n  lambda1: 0.4\n  lambda2: 0.2\n")
    assert c.causal.lambda1 == 0.4 and c.causal.lambda2 == 0.2
    again = parse_config(dump_config(c))
    assert again == c


def test_misspelled_key_is_named():
    with pytest.raises(ConfigError, match="lamda1"):
        parse_config("causal:\n  lamda1: 0.4\n")


def test_type_and_constraint_errors_name_the_field():
    with pytest.raises(ConfigError, match="batch_size"):
        parse_config({"batch_size": "four"})
    with pytest.raises(ConfigError, match="mode"):
        parse_config({"mode": "fancy"})


# ------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    b = init_bundle(parse_config(TINY))
    p1 = save_checkpoint(b, tmp_path / "a.ckpt", "abc")
    loaded = load_checkpoint(p1, "abc")
    for k, v in b.named_params().items():
        assert v.data.tobytes() == loaded.named_params()[k].data.tobytes()
    p2 = save_checkpoint(loaded, tmp_path / "b.ckpt", "abc")
    assert p1.read_bytes() == p2.read_bytes()
    assert p1.read_bytes().startswith(MAGIC)


def test_plain_checkpoint_round_trip(tmp_path):
    b = init_bundle(ExperimentConfig(mode="plain"))
    loaded = load_checkpoint(save_checkpoint(b, tmp_path / "p.ckpt"))
    assert loaded.mode == "plain" and loaded.xi is None
    assert checkpoint_bytes(loaded) == checkpoint_bytes(b)


def test_mismatched_hash_warns_and_loads(tmp_path):
    p = save_checkpoint(init_bundle(parse_config(TINY)), tmp_path / "a.ckpt", "abc")
    with pytest.warns(ConfigHashWarning):
        b = load_checkpoint(p, "xyz")
    assert b.mode == "causal"
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        load_checkpoint(p)


def test_tampered_length_rejected(tmp_path):
    blob = bytearray(checkpoint_bytes(init_bundle(parse_config(TINY))))
    header_len = struct.unpack_from("<I", blob, len(MAGIC) + 4)[0]
    text = blob[len(MAGIC) + 8:len(MAGIC) + 8 + header_len].decode()
    first = json.loads(text)["entries"][0]["nbytes"]
    bad = text.replace(f'"nbytes":{first}', f'"nbytes":{first + 8}', 1)
    assert len(bad) == len(text) + len(str(first + 8)) - len(str(first))
    tampered = bytes(blob[:len(MAGIC)]) + struct.pack("<II", 1, len(bad)) + bad.encode() \
        + bytes(blob[len(MAGIC) + 8 + header_len:])
    (tmp_path / "t.ckpt").write_bytes(tampered)
    with pytest.raises(CheckpointError, match="length"):
        load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "u.ckpt").write_bytes(bytes(blob[:-8]))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "u.ckpt")


def test_version_mismatch_names_versions(tmp_path):
    blob = bytearray(checkpoint_bytes(init_bundle(parse_config(TINY))))
    struct.pack_into("<I", blob, len(MAGIC), 7)
    (tmp_path / "v.ckpt").write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="expected 1, got 7"):
        load_checkpoint(tmp_path / "v.ckpt")


def test_bad_magic_rejected(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "x.ckpt")


# ----------------------------------------------------------------- metrics

def _rows(n):
    return [MetricsRow(i, "train", 0.5 / (i + 1), 1.0 / 3, 0.1 * i, 2.0 ** -i, 0.25 * i) for i in range(n)]


@pytest.mark.parametrize("n,lines", [(0, 1), (3, 4)])
def test_metrics_line_counts(tmp_path, n, lines):
    p = emit_metrics(_rows(n), tmp_path / "m.csv")
    text = p.read_text().splitlines()
    assert len(text) == lines
    assert tuple(text[0].split(",")) == METRIC_COLUMNS


def test_metrics_parse_back_equal(tmp_path):
    rows = _rows(5)
    assert read_metrics(emit_metrics(rows, tmp_path / "m.csv")) == rows


def test_metrics_without_timing_zero_seconds(tmp_path):
    p = emit_metrics(_rows(3), tmp_path / "m.csv", timing=False)
    with open(p) as fh:
        assert {r["seconds"] for r in csv.DictReader(fh)} == {"0.0"}


# ------------------------------------------------------------------- CLI

def test_unknown_subcommand_fails(capsys):
    assert cli.main(["frobnicate"]) != 0
    assert "usage" in capsys.readouterr().err


def test_bad_config_reports_error(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("lamda1: 3\n")
    assert cli.main(["theorem1", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "lamda1" in capsys.readouterr().err
    assert not (tmp_path / "o" / "manifest.json").exists()


def test_gradcheck_subcommand(tmp_path):
    out = tmp_path / "gc"
    assert cli.main(["gradcheck", "--nets", "2", "--out", str(out)]) == 0
    report = json.loads((out / "gradcheck.json").read_text())
    assert report["passed"] == report["checks"] > 0


def test_train_then_export_gram(tmp_path, tiny_config):
    run = tmp_path / "run"
    assert cli.main(["train", "--config", tiny_config, "--out", str(run)]) == 0
    assert len((run / "metrics.csv").read_text().splitlines()) == 5
    gram_dir = tmp_path / "gram"
    assert cli.main(["export-gram", "--checkpoint", str(run / "model.ckpt"), "--out", str(gram_dir)]) == 0
    g = read_matrix(gram_dir / "gram.csv")
    assert g.shape == (4, 4)
    assert np.all(g >= 0) and np.allclose(g, g.T)


def test_eval_on_checkpoint(tmp_path, tiny_config):
    run = tmp_path / "run"
    assert cli.main(["train", "--config", tiny_config, "--out", str(run)]) == 0
    before = (run / "model.ckpt").read_bytes()
    ev = tmp_path / "ev"
    assert cli.main(["eval", "--config", tiny_config, "--checkpoint", str(run / "model.ckpt"),
                     "--out", str(ev)]) == 0
    result = json.loads((ev / "eval.json").read_text())
    assert result["n_tasks"] == 3
    assert (run / "model.ckpt").read_bytes() == before     # inputs are never touched


def test_export_gram_rejects_plain_checkpoint(tmp_path, tiny_config):
    run = tmp_path / "run"
    assert cli.main(["train", "--config", tiny_config, "--mode", "plain", "--out", str(run)]) == 0
    assert cli.main(["export-gram", "--checkpoint", str(run / "model.ckpt"),
                     "--out", str(tmp_path / "g")]) == 1


def test_manifest_lists_outputs_and_round_trips(tmp_path, tiny_config):
    run = tmp_path / "run"
    assert cli.main(["train", "--config", tiny_config, "--seed", "3", "--out", str(run)]) == 0
    m = RunManifest.read(run / "manifest.json")
    assert m.command == "train" and m.seed == 3
    assert set(m.outputs) == {"config.yaml", "metrics.csv", "timing.csv", "model.ckpt"}
    assert m.config_object() == parse_config(tiny_config).replace(seed=3)
    # the manifest is the newest file in the run directory
    newest = max(run.iterdir(), key=lambda p: p.stat().st_mtime_ns)
    assert newest.name == "manifest.json"


def test_manifest_refuses_missing_outputs(tmp_path):
    m = RunManifest("train", {}, 0, "0", "now", "now", ["nothing.csv"])
    with pytest.raises(FileNotFoundError):
        m.write(tmp_path)


def test_rerun_from_manifest_is_bit_identical(tmp_path, tiny_config):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["train", "--config", tiny_config, "--out", str(a)]) == 0
    # reproduce from the snapshot alone
    assert cli.main(["train", "--config", str(a / "config.yaml"), "--out", str(b)]) == 0
    for name in ("metrics.csv", "model.ckpt", "config.yaml"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
