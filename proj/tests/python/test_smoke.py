import math

import numpy as np
import pytest

import jreg


def test_displacement_examples():
    assert jreg.displacement([1.0, 0.0], [0.0, 1.0]) == pytest.approx(0.5)
    assert jreg.displacement([1.0, 0.0], [1.0, 1.0]) == pytest.approx(0.14644661, abs=1e-8)
    with pytest.raises(jreg.DegenerateInputError):
        jreg.displacement([0.0, 0.0], [0.0, 0.0])
    with pytest.raises(jreg.DimensionError):
        jreg.displacement([1.0], [1.0, 2.0])


def test_jump_rate_and_weights():
    psi = [0.3, 0.1, 0.2, 0.4]
    assert jreg.jump_rate(psi, 4) == pytest.approx(20.0)
    assert jreg.jump_rates(psi) == pytest.approx({4: 20.0, 3: 30.0, 2: 30.0})
    with pytest.raises(jreg.RangeError):
        jreg.jump_rate(psi, 1)
    w = jreg.layer_weights(0.0, 12)
    assert w == pytest.approx([1 / 12] * 12, abs=1e-15)
    w = jreg.layer_weights(1.0, 3)
    assert sum(w) == pytest.approx(1.0, abs=1e-12)
    assert w[0] < w[1] < w[2]
    assert jreg.redundancy_delta([0.2758, 0.5], [0.2730, 0.5]) == pytest.approx([0.0028, 0.0], abs=1e-12)


def test_profile_matches_numpy():
    rng = np.random.default_rng(0)
    states = [rng.normal(size=(6, 5)) for _ in range(4)]
    p = jreg.profile(states)
    for l in range(1, 4):
        a, b = states[l - 1], states[l]
        cos = (a * b).sum(1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1) + 1e-12)
        assert p[l - 1] == pytest.approx(float(np.mean(1 - 0.5 * (1 + cos))), abs=1e-12)
    w = jreg.layer_weights(1.0, 3)
    assert jreg.disp_loss(states, 1.0) == pytest.approx(float(np.dot(w, p)), abs=1e-12)
    assert jreg.disp_loss(states, 1.0, "final_only") == pytest.approx(p[-1], abs=1e-12)


def test_model_forward_and_early_exit():
    cfg = jreg.ModelConfig()
    cfg.n_layers, cfg.d_model, cfg.n_heads, cfg.d_ffn, cfg.vocab_size, cfg.max_seq_len = 2, 8, 4, 16, 17, 16
    m = jreg.Model.init(cfg, 3)
    tokens = np.array([[1, 2, 3, 4, 5]], dtype=np.int32)
    logits, states = m.forward(tokens)
    assert logits.shape == (1, 5, 17)
    assert len(states) == 3 and states[0].shape == (5, 8)
    assert np.array_equal(m.forward_exit_at(tokens, 2), logits)
    with pytest.raises(jreg.VocabularyError):
        m.forward(np.array([[17]], dtype=np.int32))


def test_cli_round_trip(tmp_path):
    corpus = jreg.synth_corpus("markov_bytes", 5000, 1)
    assert corpus.shape == (5000,) and corpus.max() < 256
    code, out, err = jreg.run(["weights", "--alpha", "0", "--layers", "4"])
    assert code == 0, err
    assert out.count("0.250000") == 4
    code, _, err = jreg.run(["jump", "--profile", str(tmp_path / "missing.csv")])
    assert code != 0 and err.startswith("error: io:")


def test_tiny_training_run(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(
        '{"model": {"n_layers": 2, "d_model": 16, "n_heads": 2, "d_ffn": 32, "max_seq_len": 16},'
        ' "train": {"total_steps": 6, "warmup_steps": 1, "batch_size": 4, "seq_len": 16, "eval_every": 3,'
        ' "probe_windows": 4, "eval_windows": 8, "eval_batch_size": 4}, "data": {"synth_size": 20000}}'
    )
    out_dir = tmp_path / "run"
    code, out, err = jreg.run(["train", "--config", str(cfg), "--out-dir", str(out_dir)])
    assert code == 0, err
    m = jreg.Model.load(out_dir / "ckpt_00000006.bin")
    assert m.config.d_model == 16
    assert math.isfinite(float(out.split("final validation loss ")[1].split()[0]))
