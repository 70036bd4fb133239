import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from biomx.exceptions import FormatError
from biomx.quantize import (
    QuantCheckpoint,
    QuantSpec,
    WeightQuantizer,
    activation_stats,
    awq_quantize,
    awq_scales,
    dequantize,
    dequantize_matrix,
    footprint_report,
    quantize_matrix,
    rtn_quantize,
)
from biomx.tensor_store import Checkpoint, Tensor, from_bytes, to_bytes

from conftest import random_checkpoint


def rel_output_error(w, w_hat, x):
    return np.linalg.norm(x @ (w_hat - w).T) / np.linalg.norm(x @ w.T)


def synthetic_layer(rng, n=16, samples=256):
    """16x16 layer whose inputs have per-channel magnitudes drawn from {1, 100}."""
    w = rng.standard_normal((n, n))
    mags = rng.choice([1.0, 100.0], size=n)
    x = rng.standard_normal((samples, n)) * mags
    return w, x


def roundtrip(w, spec):
    q = rtn_quantize(Checkpoint.from_arrays({"w": w}, dtype="float32"), spec)
    return q, dequantize(q)["w"].numpy().astype(np.float64)


# -- hand examples -----------------------------------------------------------------


def test_all_zero_tensor():
    q, back = roundtrip(np.zeros((3, 5)), QuantSpec(4, 4))
    assert not np.any(q.qtensors["w"].codes.numpy())
    assert np.all(q.qtensors["w"].scales == 1.0)
    assert not np.any(back)


def test_eight_bit_hand_example():
    q, back = roundtrip(np.array([0.5, -1.0]), QuantSpec(8, 128))
    assert q.qtensors["w"].codes.numpy().tolist() == [64, -127]
    assert q.qtensors["w"].scales[0, 0] == np.float32(1 / 127)
    np.testing.assert_allclose(back, [0.503937, -1.0], atol=1e-6)


def test_four_bit_max_element_exact():
    q, back = roundtrip(np.array([1.0]), QuantSpec(4, 128))
    assert q.qtensors["w"].codes.numpy().tolist() == [7]
    assert back.tolist() == [1.0]


def test_round_half_away_from_zero():
    # scale 1 exactly: w/scale lands on .5 boundaries
    codes, scales, _ = quantize_matrix(np.array([[7.0, 2.5, -2.5, 0.5, -0.5]]), QuantSpec(4, 8))
    assert scales[0, 0] == 1.0
    assert codes.tolist() == [[7, 3, -3, 1, -1]]


def test_group_partition_and_padding():
    w = np.arange(1.0, 11.0).reshape(2, 5)
    codes, scales, _ = quantize_matrix(w, QuantSpec(8, 2))
    assert scales.shape == (2, 3)
    np.testing.assert_allclose(scales[0], np.float32([2, 4, 5]) / 127)


def test_asymmetric_hand_example():
    # range [0, 15] over 4 bits: scale 1, zero at code -8
    w = np.array([[0.0, 5.0, 15.0]])
    codes, scales, zeros = quantize_matrix(w, QuantSpec(4, 3, symmetric=False))
    assert scales.tolist() == [[1.0]]
    assert codes.tolist() == [[-8, -3, 7]]
    assert zeros.tolist() == [[8.0]]
    np.testing.assert_array_equal(dequantize_matrix(codes, scales, zeros, 3), w)


def test_asymmetric_all_negative_group():
    w = np.array([[-3.0, -1.0, -2.0, -0.5]])
    q, back = roundtrip(w, QuantSpec(8, 4, symmetric=False))
    s = q.qtensors["w"].scales[0, 0]
    assert np.max(np.abs(back - w)) <= s / 2 + 1e-7


def test_unsupported_dtype():
    ckpt = Checkpoint.from_tensors([Tensor.from_array("c", np.array([1, 2], dtype=np.int8), "int8")])
    with pytest.raises(FormatError):
        rtn_quantize(ckpt, QuantSpec())


@pytest.mark.parametrize("fields", [{"bits": 3}, {"group_size": 0}, {"awq_alpha": 1.5}])
def test_bad_spec(fields):
    with pytest.raises(ValueError):
        QuantSpec(**fields)


def test_rtn_rejects_alpha():
    with pytest.raises(ValueError):
        rtn_quantize(Checkpoint.from_arrays({"w": [1.0]}), QuantSpec(awq_alpha=0.5))


# -- bounds and monotonicity --------------------------------------------------------


@settings(max_examples=100, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    bits=st.sampled_from([4, 8]),
    group=st.sampled_from([1, 3, 8, 32]),
    symmetric=st.booleans(),
)
def test_error_bound(seed, bits, group, symmetric):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((3, 20)) * rng.uniform(0.01, 100)
    spec = QuantSpec(bits, group, symmetric)
    codes, scales, zeros = quantize_matrix(w, spec)
    back = dequantize_matrix(codes, scales, zeros, group)
    limit = np.repeat(scales.astype(np.float64), group, axis=1)[:, :20] / 2
    assert np.all(np.abs(back - w) <= limit * (1 + 1e-6))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), group=st.sampled_from([4, 16, 128]))
def test_eight_bit_never_worse(seed, group):
    w = np.random.default_rng(seed).standard_normal((4, 64))
    err = {}
    for bits in (4, 8):
        codes, scales, _ = quantize_matrix(w, QuantSpec(bits, group))
        err[bits] = np.max(np.abs(dequantize_matrix(codes, scales, None, group) - w))
    assert err[8] <= err[4]


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_quantization_is_pure(seed):
    ckpt = random_checkpoint(np.random.default_rng(seed), dtype="float32")
    spec = QuantSpec(4, 4)
    assert to_bytes(rtn_quantize(ckpt, spec).to_checkpoint()) == to_bytes(rtn_quantize(ckpt, spec).to_checkpoint())


# -- activation-aware ----------------------------------------------------------------


def test_awq_scales_hand_example():
    np.testing.assert_allclose(awq_scales([1.0, 4.0], 0.5), [1 / math.sqrt(2), math.sqrt(2)], rtol=1e-12)


def test_awq_scales_alpha_zero():
    assert awq_scales([0.0, 3.0, 100.0], 0.0).tolist() == [1.0, 1.0, 1.0]


def test_awq_scales_reject_negative():
    with pytest.raises(ValueError):
        awq_scales([1.0, -1.0], 0.5)


@settings(max_examples=100, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    c=st.floats(1e-3, 1e3),
    alpha=st.floats(0.0, 1.0),
)
def test_awq_scales_scale_invariant(seed, c, alpha):
    stats = np.random.default_rng(seed).uniform(0.01, 50, size=8)
    np.testing.assert_allclose(awq_scales(c * stats, alpha), awq_scales(stats, alpha), rtol=1e-6)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), alpha=st.floats(0.01, 1.0))
def test_awq_scales_unit_geometric_mean(seed, alpha):
    s = awq_scales(np.random.default_rng(seed).uniform(0, 10, size=6), alpha)
    assert abs(np.exp(np.mean(np.log(s))) - 1.0) < 1e-9


def test_awq_column_scaling_is_identity_before_quantization(rng):
    w = rng.standard_normal((5, 6))
    x = rng.standard_normal((10, 6))
    s = awq_scales(rng.uniform(0.1, 10, size=6), 0.5)
    np.testing.assert_allclose((x / s) @ (w * s).T, x @ w.T, rtol=1e-10, atol=1e-12)


def test_awq_alpha_to_zero_matches_rtn(rng):
    w = rng.standard_normal((4, 16))
    ckpt = Checkpoint.from_arrays({"w": w}, dtype="float32")
    stats = {"w": rng.uniform(0.1, 10, size=16)}
    rtn = dequantize(rtn_quantize(ckpt, QuantSpec(4, 8)))["w"].numpy()
    awq = dequantize(awq_quantize(ckpt, stats, QuantSpec(4, 8, awq_alpha=1e-9)))["w"].numpy()
    np.testing.assert_allclose(awq, rtn, atol=1e-6)


def test_awq_missing_stats(rng):
    ckpt = Checkpoint.from_arrays({"w": rng.standard_normal((2, 4)), "v": [1.0]})
    with pytest.raises(ValueError):
        awq_quantize(ckpt, {"w": np.ones(4)}, QuantSpec(awq_alpha=0.5))


def test_awq_wrong_channel_count(rng):
    ckpt = Checkpoint.from_arrays({"w": rng.standard_normal((2, 4))})
    with pytest.raises(ValueError):
        awq_quantize(ckpt, {"w": np.ones(3)}, QuantSpec(awq_alpha=0.5))


def test_awq_beats_rtn_with_one_hot_channel():
    rng = np.random.default_rng(3)
    w = rng.standard_normal((16, 16))
    mags = np.ones(16)
    mags[5] = 100.0
    x = rng.standard_normal((256, 16)) * mags
    ckpt = Checkpoint.from_arrays({"w": w}, dtype="float32")
    w32 = ckpt["w"].numpy().astype(np.float64)
    stats = {"w": activation_stats(x)}
    err = {}
    for alpha in (0.0, 0.5):
        spec = QuantSpec(4, 128, awq_alpha=alpha)
        q = rtn_quantize(ckpt, spec) if alpha == 0 else awq_quantize(ckpt, stats, spec)
        err[alpha] = rel_output_error(w32, dequantize(q)["w"].numpy().astype(np.float64), x)
    assert err[0.5] < err[0.0]


def test_activation_stats_mean_abs():
    x = np.array([[1.0, -2.0], [-3.0, 4.0]])
    assert activation_stats(x).tolist() == [2.0, 3.0]


# -- container, corruption, footprint --------------------------------------------------


@pytest.mark.parametrize("spec", [QuantSpec(4, 4), QuantSpec(8, 3, symmetric=False), QuantSpec(4, 5, awq_alpha=0.5)])
def test_container_round_trip(rng, spec):
    ckpt = Checkpoint.from_arrays({"a.w": rng.standard_normal((3, 10)), "b": rng.standard_normal(7)}, dtype="float32")
    if spec.awq_alpha:
        q = awq_quantize(ckpt, {"a.w": rng.uniform(0, 5, 10), "b": rng.uniform(0, 5, 7)}, spec)
    else:
        q = rtn_quantize(ckpt, spec)
    restored = QuantCheckpoint.from_checkpoint(from_bytes(to_bytes(q.to_checkpoint())))
    assert restored.spec == spec
    assert dequantize(restored) == dequantize(q)


def test_aux_entry_names(rng):
    q = rtn_quantize(Checkpoint.from_arrays({"w": rng.standard_normal((2, 4))}), QuantSpec(8, 2, symmetric=False))
    assert q.to_checkpoint().names() == ["w", "w.scales", "w.zeros"]


def test_scale_count_mismatch():
    q = rtn_quantize(Checkpoint.from_arrays({"w": np.ones((2, 4))}), QuantSpec(8, 4))
    q.qtensors["w"].scales = q.qtensors["w"].scales[:, :0]
    with pytest.raises(FormatError):
        dequantize(q)


def test_truncated_codes_in_container():
    q = rtn_quantize(Checkpoint.from_arrays({"w": np.ones((2, 4))}), QuantSpec(4, 4))
    ckpt = q.to_checkpoint()
    codes = ckpt.tensors["w"]
    # one row of codes lost; the scales still describe two rows
    ckpt.tensors["w"] = Tensor.from_array("w", codes.numpy()[:1], "int4")
    with pytest.raises(FormatError):
        dequantize(QuantCheckpoint.from_checkpoint(ckpt))


def test_missing_scales_entry():
    ckpt = rtn_quantize(Checkpoint.from_arrays({"w": np.ones(4)}), QuantSpec()).to_checkpoint()
    del ckpt.tensors["w.scales"]
    with pytest.raises(FormatError):
        QuantCheckpoint.from_checkpoint(ckpt)


def test_footprint_float16():
    rep = footprint_report(Checkpoint.from_arrays({"w": np.zeros(1024)}, dtype="float16"))
    assert (rep.bytes_total, rep.ratio_vs_float16) == (2048, 1.0)


def test_footprint_four_bit_hand_count():
    q = rtn_quantize(Checkpoint.from_arrays({"w": np.ones(1024)}), QuantSpec(4, 128))
    rep = footprint_report(q)
    assert rep.bytes_total == 544
    assert rep.ratio_vs_float16 == pytest.approx(0.265625)
    assert footprint_report(q.to_checkpoint()).bytes_total == 544


def test_footprint_counts_zero_points_and_channel_scales(rng):
    ckpt = Checkpoint.from_arrays({"w": rng.standard_normal((2, 8))})
    q = awq_quantize(ckpt, {"w": np.ones(8)}, QuantSpec(8, 4, symmetric=False, awq_alpha=0.5))
    # 16 code bytes + 4 scales + 4 zeros + 8 channel scales
    assert footprint_report(q).bytes_total == 16 + 4 * (4 + 4 + 8)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_footprint_ordering(seed):
    rng = np.random.default_rng(seed)
    ckpt = Checkpoint.from_arrays(
        {f"t{i}": rng.standard_normal((int(rng.integers(1, 4)), int(rng.integers(17, 80)))) for i in range(3)},
        dtype="float16",
    )
    sizes = [footprint_report(rtn_quantize(ckpt, QuantSpec(b, 16))).bytes_total for b in (4, 8)]
    assert sizes[0] < sizes[1] < footprint_report(ckpt).bytes_total


# -- estimator -------------------------------------------------------------------------


def test_weight_quantizer_pipeline(rng):
    ckpt = Checkpoint.from_arrays({"w": rng.standard_normal((4, 8))}, dtype="float32")
    stats = {"w": rng.uniform(0, 3, 8)}
    wq = WeightQuantizer(bits=8, group_size=4, awq_alpha=0.5)
    q = wq.fit_transform(ckpt, act_stats=stats)
    assert dequantize(q) == dequantize(awq_quantize(ckpt, stats, QuantSpec(8, 4, True, 0.5)))
    back = wq.inverse_transform(q)
    assert back.names() == ["w"]
    assert wq.get_params() == {"awq_alpha": 0.5, "bits": 8, "group_size": 4, "symmetric": True}


def test_weight_quantizer_needs_stats_for_awq(rng):
    with pytest.raises(ValueError):
        WeightQuantizer(awq_alpha=0.5).fit(Checkpoint.from_arrays({"w": [1.0]}))


def test_awq_wins_most_synthetic_trials():
    rng = np.random.default_rng(0)
    wins = 0
    for _ in range(100):
        w, x = synthetic_layer(rng)
        ckpt = Checkpoint.from_arrays({"w": w}, dtype="float32")
        w32 = ckpt["w"].numpy().astype(np.float64)
        plain = dequantize(rtn_quantize(ckpt, QuantSpec(4, 128)))["w"].numpy().astype(np.float64)
        aware = awq_quantize(ckpt, {"w": activation_stats(x)}, QuantSpec(4, 128, awq_alpha=0.5))
        aware = dequantize(aware)["w"].numpy().astype(np.float64)
        wins += rel_output_error(w32, aware, x) < rel_output_error(w32, plain, x)
    assert wins >= 95
