import numpy as np
import pytest

from tempofuse import features as F
from tempofuse.gradsuite import reduced_model_config
from tempofuse.models import (MODEL_KINDS, BackboneConfig, Checkpoint, CheckpointError, ModelConfig,
                              TempoBranchConfig, build_backbone, build_model, canonical_kind,
                              forward_fusion, forward_tempo_branch, forward_tempogram_only,
                              load_checkpoint, save_checkpoint)
from tempofuse.nn import tensor as T
from tempofuse.nn.layers import Conv1d
from tempofuse.nn.optim import Adam

# Independently derived from the layer shapes (see hand formula below) and frozen.
PARAM_COUNTS = {
    "mel_only": 2_003_358,
    "ftg_only": 283_486,
    "actg_only": 479_070,
    "early_fusion": 2_664_158,
    "late_fusion": 2_664_414,
}


def hand_count(kind: str) -> int:
    c, k = 128, 3
    block1 = (1 * c * k * k) + 2 * c + (c * c * k * k) + 2 * c + (1 * c + c)
    block = 2 * (c * c * k * k + 2 * c)
    backbone = block1 + 6 * block

    def classifier(width):
        return width * 512 + 512 + 512 * 30 + 30

    def group(bins):
        return sum(bins * 64 * kk + 64 for kk in (3, 3, 5, 5))

    conv2d = 64 * 64 * 9 + 64
    tempo = {"ftg_only": group(193), "actg_only": group(384), "early_fusion": group(577),
             "late_fusion": group(193) + group(384)}
    if kind == "mel_only":
        return backbone + classifier(128)
    if kind in ("ftg_only", "actg_only"):
        return tempo[kind] + conv2d + classifier(64)
    return backbone + tempo[kind] + conv2d + classifier(192)


def small(kind, seed=0):
    return build_model(reduced_model_config(kind, seed))


def small_inputs(rng, n=3):
    return {"mel": rng.standard_normal((n, 12, 16)),
            "fourier": rng.standard_normal((n, 7, 16)),
            "autocorrelation": rng.standard_normal((n, 9, 16))}


@pytest.mark.parametrize("kind", MODEL_KINDS)
def test_parameter_counts(kind):
    model = build_model(ModelConfig(kind))
    assert model.n_parameters() == PARAM_COUNTS[kind] == hand_count(kind)


def test_default_backbone_logits_shape():
    model = build_backbone(BackboneConfig()).eval()
    out = model(mel=np.random.default_rng(0).standard_normal((1, 128, 200)))
    assert out.shape == (1, 30)
    assert np.isfinite(out.data).all()


def test_zeroed_output_layer_gives_uniform_softmax():
    model = build_model(ModelConfig("late_fusion")).eval()
    model.classifier.dense2.weight.data[...] = 0
    model.classifier.dense2.bias.data[...] = 0
    rng = np.random.default_rng(1)
    p = model.predict_proba(rng.standard_normal((1, 128, 200)), rng.standard_normal((1, 193, 200)),
                            rng.standard_normal((1, 384, 200)))
    np.testing.assert_allclose(p, 1 / 30, atol=1e-6)


@pytest.mark.parametrize("kind", MODEL_KINDS)
def test_eval_is_batch_independent_and_deterministic(kind):
    model = small(kind).eval()
    x = small_inputs(np.random.default_rng(2), 4)
    full = model(**x).data
    for i in range(4):
        one = model(**{k: v[i:i + 1] for k, v in x.items()}).data
        np.testing.assert_allclose(one[0], full[i], rtol=1e-10, atol=1e-12)
    np.testing.assert_array_equal(model(**x).data, full)
    p = model.predict_proba(**x)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_zero_tempograms_with_zero_bias_give_zero_embedding():
    model = small("late_fusion").eval()
    for m in model.tempo.modules():
        if getattr(m, "bias", None) is not None:
            m.bias.data[...] = 0
    emb = forward_tempo_branch(model, np.zeros((2, 7, 16)), np.zeros((2, 9, 16)))
    assert emb.shape == (2, 4)
    assert not emb.data.any()


def test_fusion_structure():
    early = build_model(ModelConfig("early"))
    late = build_model(ModelConfig("late"))
    assert early.tempo.group_bins == [577]
    assert late.tempo.group_bins == [193, 384]
    assert sum(isinstance(m, Conv1d) for m in early.modules()) == 4
    assert sum(isinstance(m, Conv1d) for m in late.modules()) == 8
    for m in (early, late):
        assert m.classifier.dense1.weight.shape == (192, 512)


def test_early_and_late_share_io_shapes():
    x = small_inputs(np.random.default_rng(3), 2)
    a = forward_fusion(small("early_fusion").eval(), x["mel"], x["fourier"], x["autocorrelation"])
    b = forward_fusion(small("late_fusion").eval(), x["mel"], x["fourier"], x["autocorrelation"])
    assert a.shape == b.shape == (2, 3)


def test_tempogram_only_row_checks():
    rng = np.random.default_rng(4)
    ftg = build_model(ModelConfig("ftg_only")).eval()
    actg = build_model(ModelConfig("actg_only")).eval()
    assert forward_tempogram_only(ftg, rng.standard_normal((1, 193, 200))).shape == (1, 30)
    assert forward_tempogram_only(actg, rng.standard_normal((1, 384, 200))).shape == (1, 30)
    with pytest.raises(ValueError):
        forward_tempogram_only(ftg, rng.standard_normal((1, 384, 200)))
    with pytest.raises(ValueError):
        forward_tempogram_only(actg, rng.standard_normal((1, 193, 200)))
    with pytest.raises(ValueError):
        forward_tempogram_only(build_model(ModelConfig("late")), rng.standard_normal((1, 193, 200)))
    with pytest.raises(ValueError):
        forward_fusion(ftg, None, None, None)


def test_missing_input_raises():
    with pytest.raises(ValueError, match="mel"):
        small("early_fusion")(fourier=np.zeros((1, 7, 16)), autocorrelation=np.zeros((1, 9, 16)))


def test_mismatched_tempogram_extents_raise():
    with pytest.raises(ValueError):
        small("early_fusion")(mel=np.zeros((1, 12, 16)), fourier=np.zeros((1, 7, 16)),
                              autocorrelation=np.zeros((1, 9, 15)))


def test_zero_tempo_embedding_leaves_mel_path():
    # With the tempo embedding forced to zero, logits depend on mel only.
    model = small("late_fusion").eval()
    model.tempo.conv2d.weight.data[...] = 0
    model.tempo.conv2d.bias.data[...] = 0
    rng = np.random.default_rng(5)
    x = small_inputs(rng, 2)
    a = model(**x).data
    b = model(mel=x["mel"], fourier=rng.standard_normal((2, 7, 16)),
              autocorrelation=rng.standard_normal((2, 9, 16))).data
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("kind", ["early_fusion", "late_fusion"])
def test_default_fusion_gradients_flow(kind):
    model = build_model(ModelConfig(kind)).train()
    rng = np.random.default_rng(6)
    logits = model(rng.standard_normal((2, 128, 200)), rng.standard_normal((2, 193, 200)),
                   rng.standard_normal((2, 384, 200)))
    T.cross_entropy(logits, np.array([0, 7])).backward()
    dead = [n for n, p in model.named_parameters() if p.grad is None or not np.any(p.grad)]
    assert dead == []


def test_model_config_validation():
    with pytest.raises(ValueError):
        canonical_kind("middle")
    with pytest.raises(ValueError):
        BackboneConfig(dropout=1.0)
    with pytest.raises(ValueError):
        BackboneConfig(n_blocks=9)
    with pytest.raises(ValueError):
        TempoBranchConfig(kernels=(3, 3, 5))
    with pytest.raises(ValueError):
        TempoBranchConfig(fusion="middle")
    assert canonical_kind("early") == "early_fusion"
    cfg = ModelConfig("late")
    assert ModelConfig(**cfg.to_dict()) == cfg


# --- checkpoints ---------------------------------------------------------------

def trained_small(kind="late_fusion", dtype="float32"):
    model = build_model(reduced_model_config(kind, 0, dtype))
    opt = Adam(model.parameters(), lr=0.01)
    x = {k: v.astype(dtype) for k, v in small_inputs(np.random.default_rng(7), 4).items()}
    for _ in range(2):
        opt.zero_grad()
        T.cross_entropy(model(**x), np.array([0, 1, 2, 0])).backward()
        opt.step()
    return model.eval(), opt, x


def make_ckpt(model, opt=None):
    stats = {"mel": F.NormalizationStats(np.arange(12.0), np.ones(12), "mel")}
    return Checkpoint(model, ["a", "b", "c"], stats, F.FeatureConfig(), opt.state if opt else None,
                      {"epoch": 2})


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model, opt, x = trained_small()
    path = tmp_path / "m.tfck"
    save_checkpoint(make_ckpt(model, opt), path)
    back = load_checkpoint(path)
    np.testing.assert_array_equal(back.model(**x).data, model(**x).data)
    for (na, a), (nb, b) in zip(model.named_parameters(), back.model.named_parameters()):
        assert na == nb and a.data.tobytes() == b.data.tobytes()
    assert back.class_names == ["a", "b", "c"] and back.meta == {"epoch": 2}
    assert back.optimizer.t == 2
    np.testing.assert_array_equal(back.stats["mel"].mean, np.arange(12.0))
    save_checkpoint(back, tmp_path / "again.tfck")
    assert (tmp_path / "again.tfck").read_bytes() == path.read_bytes()


def test_checkpoint_without_optimizer(tmp_path):
    model = build_model(reduced_model_config("ftg_only", dtype="float32"))
    save_checkpoint(make_ckpt(model), tmp_path / "m.tfck")
    assert load_checkpoint(tmp_path / "m.tfck").optimizer is None


def test_checkpoint_tampering_and_errors(tmp_path):
    path = tmp_path / "m.tfck"
    save_checkpoint(make_ckpt(build_model(reduced_model_config("actg_only", dtype="float32"))), path)
    data = bytearray(path.read_bytes())
    data[len(data) // 2] ^= 0x01
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.tfck")
    with pytest.raises(CheckpointError):
        save_checkpoint(Checkpoint(build_model(reduced_model_config("actg_only", dtype="float32")),
                                   ["only-one"]), path)
    with pytest.raises(CheckpointError, match="float32"):
        save_checkpoint(make_ckpt(small("actg_only")), path)


def test_checkpoint_version_and_shape_mismatch(tmp_path, monkeypatch):
    import tempofuse.models as M

    path = tmp_path / "m.tfck"
    monkeypatch.setattr(M, "CKPT_VERSION", 99)
    save_checkpoint(make_ckpt(build_model(reduced_model_config("mel_only", dtype="float32"))), path)
    monkeypatch.setattr(M, "CKPT_VERSION", 1)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)

    model = build_model(reduced_model_config("mel_only", dtype="float32"))
    save_checkpoint(make_ckpt(model), path)
    # Rebuild with a different hidden width but keep the stored header.
    orig = M.build_model

    def wider(cfg):
        cfg.backbone.hidden = 9
        return orig(cfg)

    monkeypatch.setattr(M, "build_model", wider)
    with pytest.raises(CheckpointError, match="does not fit"):
        load_checkpoint(path)
