import numpy as np
import pytest

from csap import tensor as T
from csap.cost_model import (
    CATEGORIES,
    compare_variants,
    count_attention_matmul_flops,
    count_params,
    flop_ratio,
    format_report,
)
from csap.decoder import (
    PRESETS,
    DecoderConfig,
    SegmentationModel,
    StageFeatures,
    build_decoder,
    decoder_parameter_groups,
    forward_csap,
    forward_standard,
    predict,
    stub_encoder,
)
from csap.errors import ConfigError, ShapeError
from csap.harness import decoder_grad_check
from csap.tensor import Tensor

TINY = PRESETS["tiny"]


def _features(cfg, batch=1, seed=0):
    image = Tensor(np.random.default_rng(seed).random((batch, 3, cfg.input_size, cfg.input_size), dtype=np.float32))
    with T.no_grad():
        return stub_encoder(image, cfg, seed)


# -- config ---------------------------------------------------------------
def test_default_config_matches_published_hyperparameters():
    cfg = DecoderConfig()
    assert (cfg.d, cfg.n_heads, cfg.r, cfg.s, cfg.ffn_expansion) == (128, 4, 2, 8, 4)
    assert cfg.key_grid() == (8, 8) and cfg.n_keys == 64
    assert cfg.with_(variant="standard").pool_ratios() == {2: 8, 3: 4, 4: 2}


@pytest.mark.parametrize("changes, key", [
    ({"n_heads": 3}, "n_heads"),
    ({"input_size": 48}, "input_size"),
    ({"source_stage": 1}, "source_stage"),
    ({"variant": "other"}, "variant"),
    ({"r": 3}, "r"),
    ({"stage_channels": (1, 2, 3)}, "stage_channels"),
])
def test_config_validation_names_key(changes, key):
    with pytest.raises(ConfigError) as info:
        DecoderConfig(**changes)
    assert info.value.key == key


# -- encoder and features -------------------------------------------------
def test_stub_encoder_extents():
    feats = _features(DecoderConfig(input_size=512).with_(stage_channels=(2, 2, 2, 2)))
    assert feats.sizes[4] == (16, 16)
    small = _features(TINY)
    assert [small.sizes[k] for k in (2, 3, 4)] == [(8, 8), (4, 4), (2, 2)]
    assert small.tokens[3].shape == (1, 16, TINY.channels(3))


def test_stub_encoder_is_deterministic():
    a, b = _features(TINY, seed=3), _features(TINY, seed=3)
    for k in (2, 3, 4):
        np.testing.assert_array_equal(a.tokens[k].data, b.tokens[k].data)


def test_stage_features_validate_extents():
    t = Tensor(np.zeros((1, 4, 2)))
    with pytest.raises(ShapeError):
        StageFeatures({2: Tensor(np.zeros((1, 5, 2))), 3: t, 4: t}, {2: (2, 2), 3: (2, 2), 4: (2, 2)})


# -- forward passes -------------------------------------------------------
def test_forward_csap_shapes_and_diagnostics():
    cfg = TINY
    logits, diag = forward_csap(_features(cfg), build_decoder(cfg, 0))
    assert logits.shape == (1, 3, 8, 8)
    assert diag.source_maps.is_row_stochastic()
    assert diag.pooled.shape == (1, cfg.n_heads, cfg.s**2, cfg.n_keys)
    assert set(diag.propagated) == {2, 3}
    assert all(p.is_row_stochastic() for p in diag.propagated.values())


def test_forward_standard_matches_csap_contract():
    feats = _features(TINY, batch=2)
    logits_c, _ = forward_csap(feats, build_decoder(TINY, 0))
    logits_s = forward_standard(feats, build_decoder(TINY.with_(variant="standard"), 0))
    assert logits_s.shape == logits_c.shape == (2, 3, 8, 8)


def test_forward_is_bit_identical_on_recomputation():
    feats = _features(TINY)
    dec = build_decoder(TINY, 5)
    a, da = dec(feats)
    b, db = build_decoder(TINY, 5)(feats)
    np.testing.assert_array_equal(a.data, b.data)
    np.testing.assert_array_equal(da.source_maps.weights.data, db.source_maps.weights.data)
    for k in da.propagated:
        np.testing.assert_array_equal(da.propagated[k].weights.data, db.propagated[k].weights.data)


def test_forward_rejects_mismatched_resolution_and_variant():
    with pytest.raises(ShapeError):
        build_decoder(TINY, 0)(_features(TINY.with_(input_size=128)))
    with pytest.raises(ConfigError):
        forward_standard(_features(TINY), build_decoder(TINY, 0))


def test_qk_bypass_is_structural():
    csap = [n for n, _ in build_decoder(PRESETS["paper"], 0).named_parameters()]
    targets = [n for n in csap if n.startswith("refine.")]
    assert targets and not any("q_proj" in n or "k_proj" in n for n in targets)
    std = [n for n, _ in build_decoder(PRESETS["paper"].with_(variant="standard"), 0).named_parameters()]
    for k in (2, 3, 4):
        assert f"blocks.{k}.q_proj.weight" in std and f"blocks.{k}.k_proj.weight" in std


def test_propagation_params_default_8192():
    groups = decoder_parameter_groups(build_decoder(DecoderConfig(), 0))
    assert groups["propagation"] == 8192


@pytest.mark.parametrize("src", [2, 3, 4])
def test_source_stage_variants_build_and_count(src):
    cfg = TINY.with_(source_stage=src)
    dec = build_decoder(cfg, 0)
    logits, diag = dec(_features(cfg))
    assert logits.shape == (1, 3, 8, 8)
    assert decoder_parameter_groups(dec)["propagation"] == 2 * cfg.n_keys**2
    assert set(diag.propagated) == {2, 3, 4} - {src}


@pytest.mark.parametrize("variant, src", [("csap", 4), ("csap", 2), ("standard", 4)])
def test_decoder_gradients_tiny(variant, src):
    report = decoder_grad_check(TINY.with_(variant=variant, source_stage=src), seed=42)
    assert report.passed(1e-4), report.errors


def test_segmentation_model_output_stage2():
    model = SegmentationModel(PRESETS["toy"], 0)
    logits, _ = model(np.zeros((2, 3, 64, 64), np.float32))
    assert logits.shape == (2, 4, 8, 8)


# -- predict --------------------------------------------------------------
def test_predict_single_class_is_zero():
    out = predict(Tensor(np.random.default_rng(0).standard_normal((2, 1, 4, 4))), 8, 8)
    assert out.shape == (2, 8, 8) and not out.any()


def test_predict_one_hot_at_full_resolution():
    labels = np.random.default_rng(1).integers(0, 3, (1, 5, 5))
    onehot = np.eye(3)[labels].transpose(0, 3, 1, 2)
    np.testing.assert_array_equal(predict(onehot, 5, 5), labels)


def test_predict_2x2_to_4x4_vs_per_pixel_interpolation():
    logits = np.array([[[[0.0, 1.0], [2.0, 3.0]], [[1.5, 1.5], [1.5, 1.5]]]])
    expected = np.zeros((1, 4, 4), dtype=np.int64)
    m = T.interpolation_matrix(2, 4)
    for i in range(4):
        for j in range(4):
            c0 = sum(m[i, a] * m[j, b] * logits[0, 0, a, b] for a in range(2) for b in range(2))
            expected[0, i, j] = 0 if c0 >= 1.5 else 1
    np.testing.assert_array_equal(predict(logits, 4, 4), expected)


# -- cost model -----------------------------------------------------------
def test_standard_attention_flops_512():
    rep = count_attention_matmul_flops(DecoderConfig(), "standard", 512, 512)
    closed = 2 * (2 * 4096 * 64 * 128 + 2 * 1024 * 64 * 128 + 2 * 256 * 64 * 128)
    assert rep.attention_matmul == closed == 176_160_768


def test_csap_attention_flops_512():
    rep = count_attention_matmul_flops(DecoderConfig(), "csap", 512, 512)
    src = 2 * (2 * 256 * 64 * 128)
    proj = 2 * (2 * 4 * 64 * 64 * 64)
    av_targets = 2 * (2 * 64 * 64 * 128)
    assert rep.attention_matmul == src + proj + av_targets == 14_680_064 <= 1.5e7
    assert rep.stage(2)["qk_matmul"] == rep.stage(3)["qk_matmul"] == 0


def test_compare_variants_ratio_and_params():
    table = compare_variants(DecoderConfig(), 512, 512)
    assert table["csap"]["ratio"] == 12.0 >= 10
    assert table["standard"]["ratio"] == 1.0
    assert table["csap"]["params"] < table["standard"]["params"]
    same = count_attention_matmul_flops(DecoderConfig(), "csap")
    assert flop_ratio(same, same) == 1.0


@pytest.mark.parametrize("variant", ["csap", "standard"])
def test_minimal_input_counts_are_positive(variant):
    rep = count_attention_matmul_flops(DecoderConfig(r=1), variant, 32, 32)
    for part, bucket in rep.by_part.items():
        for cat, n in bucket.items():
            assert n >= 0
    cats = rep.categories
    assert cats["qk_matmul"] > 0 and cats["av_matmul"] > 0 and cats["conv"] > 0
    if variant == "csap":
        assert rep.stage(2)["qk_matmul"] == rep.stage(3)["qk_matmul"] == 0
        assert cats["attn_projection_matmul"] > 0
    assert rep.total == sum(cats.values())


def test_csap_qk_zero_at_targets_for_all_resolutions_and_sources():
    for size in (64, 128, 256, 512):
        for src in (2, 3, 4):
            cfg = DecoderConfig(r=1, input_size=size, source_stage=src)
            rep = count_attention_matmul_flops(cfg, "csap", size, size)
            for k in cfg.propagation.target_stages:
                assert rep.stage(k)["qk_matmul"] == 0


def test_flops_scale_with_batch_and_tokens():
    cfg = DecoderConfig()
    one = count_attention_matmul_flops(cfg, "standard", 512, 512)
    two = count_attention_matmul_flops(cfg, "standard", 512, 512, batch=2)
    assert two.total == 2 * one.total
    # 4x the query tokens with r doubled keeps M = 64 at every stage
    big = count_attention_matmul_flops(cfg.with_(r=4, input_size=1024), "standard", 1024, 1024)
    for k in (2, 3, 4):
        assert big.stage(k)["qk_matmul"] == 4 * one.stage(k)["qk_matmul"]
        assert big.stage(k)["av_matmul"] == 4 * one.stage(k)["av_matmul"]
    c1 = count_attention_matmul_flops(cfg, "csap", 512, 512)
    c4 = count_attention_matmul_flops(cfg.with_(r=4, input_size=1024), "csap", 1024, 1024)
    assert c4.stage(4)["qk_matmul"] == 4 * c1.stage(4)["qk_matmul"]
    # propagated stages work on the fixed s x s grid
    assert c4.stage(2)["av_matmul"] == c1.stage(2)["av_matmul"]


@pytest.mark.parametrize("preset", ["paper", "toy", "tiny"])
@pytest.mark.parametrize("variant", ["csap", "standard"])
def test_analytic_params_equal_enumerated(preset, variant):
    cfg = PRESETS[preset].with_(variant=variant)
    assert count_params(cfg) == decoder_parameter_groups(build_decoder(cfg, 0))


def test_format_report_kv_and_text():
    rep = count_attention_matmul_flops(DecoderConfig(), "standard", 512, 512)
    kv = dict(line.split("=", 1) for line in format_report(rep, "kv").splitlines())
    assert kv["attention_matmul"] == "176160768"
    assert "2 FLOPs" in kv["convention"]
    assert set(CATEGORIES) <= {k.split(".")[1] for k in kv if k.startswith("total.")}
    assert "176,160,768" in format_report(rep, "text")
    with pytest.raises(ValueError):
        format_report(rep, "json")
