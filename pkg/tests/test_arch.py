from fractions import Fraction

import mpmath
import pytest
from hypothesis import given, strategies as st

from trainplan.arch import (
    MODEL_PRESETS,
    NOMINAL_SIZES,
    ModelSpec,
    get_model,
    model_flops_per_iteration,
    param_count,
    training_budget,
)

# Goldens evaluated by hand (big-integer arithmetic), not by the library.
FLOPS_22B_B1_CKPT = 379_898_447_265_792
FLOPS_22B_B1_NOCKPT = 284_923_835_449_344


def mp_flops(L, d, V, s, B, c):
    mpmath.mp.dps = 60
    L, d, V, s, B = (mpmath.mpf(x) for x in (L, d, V, s, B))
    return 24 * c * B * s * L * d**2 * (1 + s / (6 * d) + V / (16 * L * d))


def test_presets_match_nominal_shapes():
    assert get_model("22B") == ModelSpec(48, 6144, 48)
    assert get_model("175B") == ModelSpec(96, 12288, 96)
    assert get_model("1T") == ModelSpec(128, 25600, 128)
    assert get_model("1.4B").hidden_size == 2114
    assert get_model("1.4B").num_layers == 24


def test_unknown_preset():
    with pytest.raises(KeyError):
        get_model("7B")


@pytest.mark.parametrize("kwargs", [
    dict(num_layers=0, hidden_size=64, num_heads=8),
    dict(num_layers=2, hidden_size=64, num_heads=0),
    dict(num_layers=2, hidden_size=66, num_heads=4),
    dict(num_layers=2, hidden_size=64, num_heads=8, vocab_size=0),
])
def test_model_spec_rejects_bad_shapes(kwargs):
    with pytest.raises(ValueError):
        ModelSpec(**kwargs)


def test_model_spec_round_trip():
    spec = ModelSpec(4, 128, 8, vocab_size=1000, seq_length=64)
    assert ModelSpec.from_dict(spec.to_dict()) == spec
    assert spec.head_dim == 16


@pytest.mark.parametrize("name,expected", [
    ("22B", 21_743_271_936),
    ("175B", 173_946_175_488),
    ("1T", 1_006_632_960_000),
    ("1.4B", 1_287_070_848),
])
def test_twelve_l_d_squared(name, expected):
    assert param_count(get_model(name)).total_approx == expected


@pytest.mark.parametrize("name", ["1.4B", "22B", "175B", "1T"])
def test_within_ten_percent_of_nominal(name):
    n = param_count(get_model(name)).total_approx
    assert abs(n - NOMINAL_SIZES[name]) / NOMINAL_SIZES[name] <= 0.10


def test_unit_dimensions():
    pc = param_count(ModelSpec(1, 1, 1, vocab_size=1, seq_length=1))
    assert (pc.attention_params, pc.ffn_params, pc.total_approx, pc.total_exact) == (3, 8, 12, 13)


@given(st.integers(1, 64), st.integers(1, 64), st.integers(1, 5000), st.integers(1, 4096))
def test_param_invariants(L, heads, V, s):
    d = heads * 8
    pc = param_count(ModelSpec(L, d, heads, vocab_size=V, seq_length=s))
    assert pc.attention_params + pc.ffn_params == 11 * L * d * d
    assert pc.total_exact == 11 * L * d * d + V * d + s * d
    assert pc.total_approx == 12 * L * d * d


def test_flops_22b_golden():
    spec = get_model("22B")
    assert model_flops_per_iteration(spec, 1, True, exact=True) == FLOPS_22B_B1_CKPT
    assert model_flops_per_iteration(spec, 1, False, exact=True) == FLOPS_22B_B1_NOCKPT
    assert model_flops_per_iteration(spec, 1, True) == pytest.approx(3.80e14, rel=1e-3)


def test_flops_agrees_with_arbitrary_precision():
    for name in ("22B", "175B", "1T"):
        spec = get_model(name)
        for B in (1, 640, 1600):
            ref = mp_flops(spec.num_layers, spec.hidden_size, spec.vocab_size, spec.seq_length, B, 4)
            got = model_flops_per_iteration(spec, B, True)
            assert abs(got - float(ref)) <= 1e-15 * float(ref)


def test_zero_batch():
    assert model_flops_per_iteration(get_model("1T"), 0, True) == 0


def test_negative_batch_rejected():
    with pytest.raises(ValueError):
        model_flops_per_iteration(get_model("22B"), -1, True)


def test_checkpoint_ratio_is_four_thirds():
    spec = get_model("175B")
    on = model_flops_per_iteration(spec, 8, True, exact=True)
    off = model_flops_per_iteration(spec, 8, False, exact=True)
    assert Fraction(on) / Fraction(off) == Fraction(4, 3)


@given(st.sampled_from(sorted(MODEL_PRESETS)), st.integers(0, 10**6), st.booleans())
def test_flops_linear_in_batch(name, B, ckpt):
    spec = get_model(name)
    assert model_flops_per_iteration(spec, 2 * B, ckpt, exact=True) == 2 * model_flops_per_iteration(spec, B, ckpt, exact=True)


def test_flops_overflow_is_explicit():
    with pytest.raises(OverflowError):
        model_flops_per_iteration(get_model("1T"), 10**300, True)


def test_huge_batch_stays_exact():
    # past 2**63 the exact path must not wrap around
    spec = get_model("1T")
    big = model_flops_per_iteration(spec, 10**6, True, exact=True)
    assert big > 2**63
    assert big == 10**6 * model_flops_per_iteration(spec, 1, True, exact=True)


def test_training_budget_range():
    assert training_budget(10**12, 10**12) == 6e24
    assert training_budget(10**12, 30 * 10**12) == 1.8e26
    assert training_budget(10**12, 0) == 0


def test_training_budget_from_spec_uses_approx_count():
    spec = get_model("22B")
    assert training_budget(spec, 1000) == 6 * 21_743_271_936 * 1000


def test_training_budget_rejects_negative_tokens():
    with pytest.raises(ValueError):
        training_budget(10**9, -1)
