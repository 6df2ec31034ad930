import math
import os
import pathlib

import numpy as np
import pytest

import rticket

TINY = """
[run]
seeds = 1
[data]
train_size = 100
dev_size = 20
test_size = 20
pretrain_size = 120
[model]
embed_dim = 8
layers = 1
heads = 2
mlp_dim = 16
[pretrain]
epochs = 1
[finetune]
epochs = 1
lr = 1e-3
[masks]
epochs = 1
batch_size = 32
[adversarial]
steps = 1
[prune]
sparsities = 0.5
[attack]
max_examples = 20
"""


def test_gate_boundaries():
    g = rticket.GateParams([-math.log(11.0), math.log(11.0), 0.0])
    m = rticket.inference_gate(g)
    assert m[0] == pytest.approx(0.0, abs=1e-12)
    assert m[1] == pytest.approx(1.0, abs=1e-12)
    assert m[2] == pytest.approx(0.5, abs=1e-12)
    assert 0.0 <= rticket.expected_l0(g) <= 1.0


def test_sampled_gates_are_bounded_and_seeded():
    g = rticket.GateParams.initialized(500, seed=3)
    a = rticket.sample_gates(g, 9)
    b = rticket.sample_gates(g, 9)
    assert np.array_equal(a, b)
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_model_probabilities():
    cfg = rticket.ModelConfig()
    cfg.vocab_size = 12
    cfg.embed_dim = 8
    cfg.num_heads = 2
    cfg.mlp_dim = 16
    cfg.max_seq_len = 6
    model = rticket.MaskedModel(cfg, 4)
    p = model.predict_proba([[4, 5, 6], [7, 0, 0]])
    assert p.shape == (2, 2)
    assert np.allclose(p.sum(axis=1), 1.0)
    assert model.theta.size > model.maskable_count


def test_draw_ticket_sparsity():
    cfg = rticket.ModelConfig()
    cfg.vocab_size = 12
    cfg.embed_dim = 8
    cfg.num_heads = 2
    cfg.mlp_dim = 16
    model = rticket.MaskedModel(cfg, 1)
    g = rticket.GateParams.initialized(model.maskable_count, seed=2)
    t = rticket.draw_ticket(g, cfg, 0.4)
    assert t.pruned_count() == math.floor(0.4 * model.maskable_count)
    with pytest.raises(rticket.ConfigError):
        rticket.draw_ticket(g, cfg, 1.0)


def test_config_errors_surface_as_value_errors():
    with pytest.raises(ValueError, match="masks.lambda|masks"):
        rticket.parse_config("[masks]\nlambda = -2\n")
    assert len(rticket.parse_config(TINY).hash) == 16


def test_runner_end_to_end(tmp_path):
    cfg = rticket.parse_config(TINY)
    rticket.run_stage(cfg, "all", out=tmp_path)
    sweep = (tmp_path / "report" / "sweep.csv").read_text().splitlines()
    assert sweep[0].startswith("method,sparsity,split")
    model = rticket.load_checkpoint(tmp_path / "seed-1" / "finetuned.ckpt")
    assert model.has_pretrained
    ticket = rticket.load_ticket(tmp_path / "seed-1" / "tickets" / "robust-0.5.ticket", model.config)
    assert ticket.provenance == "robust"
    assert ticket.sparsity() == pytest.approx(0.5, abs=1.0 / len(ticket.keep_mask))


def test_retrain_without_pretraining_is_refused(tmp_path):
    cfg = rticket.parse_config(TINY)
    with pytest.raises(rticket.StateError, match="pretrain"):
        rticket.run_stage(cfg, "retrain", out=tmp_path)


@pytest.mark.skipif("RTICKET_CLI" not in os.environ, reason="command-line binary not provided")
def test_cli_reports_field_errors(tmp_path):
    import subprocess

    bad = tmp_path / "bad.ini"
    bad.write_text("[finetune]\nlr = quick\n")
    proc = subprocess.run([os.environ["RTICKET_CLI"], "finetune", "--config", str(bad)], capture_output=True, text=True)
    assert proc.returncode == 2
    assert "finetune.lr" in proc.stderr
