import numpy as np
import pytest

from plex import tensor as T
from plex.errors import ContractError, PositionRangeError
from plex.tensor import Tape, Tensor, backward, grad_check
from plex.transformer import (
    CausalTransformer,
    GlobalPositionTable,
    RelativeAttentionParams,
    TransformerConfig,
    absolute_positional_encoding,
    relative_attention_scores,
    transformer_param_count,
)

from oracles import four_term_attention_scores, sinusoid_entry


def make_stack(pos_mode, seed=0, n_layers=2, n_heads=2, h=16, max_tokens=8, t_max=32, dropout=0.0, dtype=np.float32):
    cfg = TransformerConfig(n_layers, n_heads, h, context_size=max_tokens, pos_mode=pos_mode, t_max=t_max, dropout=dropout)
    ss = np.random.SeedSequence(seed)
    base, pos = [np.random.default_rng(s) for s in ss.spawn(2)]
    return CausalTransformer(cfg, max_tokens, base, pos, dtype=dtype)


# ---------------------------------------------------------------------------
# positional encodings
# ---------------------------------------------------------------------------


def test_absolute_table_row_zero():
    table = absolute_positional_encoding(4, 6)
    assert np.allclose(table[0], [0, 1, 0, 1, 0, 1])


def test_absolute_table_closed_form():
    table = absolute_positional_encoding(5, 8)
    assert table[1, 0] == pytest.approx(np.sin(1.0))
    for pos in range(5):
        for dim in range(8):
            assert table[pos, dim] == pytest.approx(sinusoid_entry(pos, dim, 8), abs=1e-12)


def test_absolute_table_shape_and_even_dim():
    assert absolute_positional_encoding(7, 10).shape == (7, 10)
    with pytest.raises(ContractError):
        absolute_positional_encoding(4, 5)


def test_global_table_lookup_and_range():
    rng = np.random.default_rng(0)
    table = GlobalPositionTable(6, 8, rng)
    a = table(3).data
    b = table(3).data
    assert np.array_equal(a, b)
    with pytest.raises(PositionRangeError):
        table(6)
    with pytest.raises(PositionRangeError):
        table.lookup(np.array([[0, 7]]), np.array([[True, True]]))
    # distinct rows differ after random init
    assert np.abs(table(1).data - table(2).data).max() > 0


# ---------------------------------------------------------------------------
# relative attention
# ---------------------------------------------------------------------------


def test_relative_scores_match_four_term_oracle():
    rng = np.random.default_rng(1)
    heads, t, dh = 2, 3, 4
    q = rng.standard_normal((heads, t, dh))
    k = rng.standard_normal((heads, t, dh))
    rel = RelativeAttentionParams(5, heads * dh, heads, rng, dtype=np.float64)
    got = relative_attention_scores(Tensor(q, dtype=np.float64), Tensor(k, dtype=np.float64), rel).data
    r3 = rel.rel_embeddings.data.reshape(5, heads, dh)
    for hd in range(heads):
        want = four_term_attention_scores(q[hd], k[hd], r3[:, hd], rel.content_bias.data[hd], rel.position_bias.data[hd])
        lower = np.tril_indices(t)
        assert np.allclose(got[hd][lower], want[lower], atol=1e-6)


def test_relative_scores_reduce_to_plain_attention_when_zeroed():
    rng = np.random.default_rng(2)
    heads, t, dh = 2, 4, 4
    q = rng.standard_normal((heads, t, dh))
    k = rng.standard_normal((heads, t, dh))
    rel = RelativeAttentionParams(6, heads * dh, heads, rng, dtype=np.float64)
    rel.rel_embeddings.data[:] = 0
    rel.content_bias.data[:] = 0
    rel.position_bias.data[:] = 0
    got = relative_attention_scores(Tensor(q, dtype=np.float64), Tensor(k, dtype=np.float64), rel).data
    plain = np.matmul(q, k.swapaxes(-1, -2)) / np.sqrt(dh)
    lower = np.tril_indices(t)
    for hd in range(heads):
        assert np.allclose(got[hd][lower], plain[hd][lower], atol=1e-12)


def test_single_token_attends_itself():
    stack = make_stack("relative", max_tokens=4)
    x = Tensor(np.random.default_rng(3).standard_normal((1, 1, 16)).astype(np.float32))
    out = stack(x)
    assert out.data.shape == (1, 1, 16)
    assert np.all(np.isfinite(out.data))


def test_relative_params_grad_flows():
    stack = make_stack("relative", h=8, n_heads=1, n_layers=1, max_tokens=4, dtype=np.float64)
    x = Tensor(np.random.default_rng(4).standard_normal((1, 3, 8)), dtype=np.float64)
    rel = stack.blocks[0].attn.rel
    with Tape() as tape:
        backward(T.sum_(stack(x)), tape)
    assert np.abs(rel.rel_embeddings.grad).max() > 0
    assert np.abs(rel.content_bias.grad).max() > 0
    assert np.abs(rel.position_bias.grad).max() > 0


# ---------------------------------------------------------------------------
# block / stack contracts
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("mode", ["absolute", "global", "relative"])
def test_shape_preserved_and_deterministic(mode):
    stack = make_stack(mode)
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((2, 6, 16)).astype(np.float32))
    ts = np.tile(np.arange(6), (2, 1))
    a = stack(x, timesteps=ts).data
    b = stack(x, timesteps=ts).data
    assert a.shape == (2, 6, 16)
    assert np.array_equal(a, b)


@pytest.mark.parametrize("mode", ["absolute", "global", "relative"])
def test_causality_perturbation_exact(mode):
    stack = make_stack(mode, max_tokens=8)
    rng = np.random.default_rng(6)
    x = rng.standard_normal((1, 6, 16)).astype(np.float32)
    ts = np.arange(6)[None, :]
    base = stack(Tensor(x), timesteps=ts).data
    for j in [2, 4, 5]:
        pert = x.copy()
        pert[0, j] += rng.standard_normal(16).astype(np.float32)
        out = stack(Tensor(pert), timesteps=ts).data
        assert np.array_equal(out[0, :j], base[0, :j]), f"mode={mode} leaked at j={j}"
        assert np.abs(out[0, j:] - base[0, j:]).max() > 0


def test_relative_mode_shift_invariant_bitwise():
    stack = make_stack("relative", t_max=64)
    rng = np.random.default_rng(7)
    x = Tensor(rng.standard_normal((1, 5, 16)).astype(np.float32))
    a = stack(x, timesteps=np.arange(5)[None, :]).data
    b = stack(x, timesteps=(np.arange(5) + 17)[None, :]).data
    assert np.array_equal(a, b)


def test_global_mode_not_shift_invariant():
    stack = make_stack("global", t_max=64)
    rng = np.random.default_rng(8)
    x = Tensor(rng.standard_normal((1, 5, 16)).astype(np.float32))
    a = stack(x, timesteps=np.arange(5)[None, :]).data
    b = stack(x, timesteps=(np.arange(5) + 17)[None, :]).data
    assert np.abs(a - b).max() > 0


def test_global_mode_requires_timesteps():
    stack = make_stack("global")
    x = Tensor(np.zeros((1, 3, 16), dtype=np.float32))
    with pytest.raises(ContractError):
        stack(x)


def test_padding_keys_are_ignored():
    stack = make_stack("relative")
    rng = np.random.default_rng(9)
    x = rng.standard_normal((1, 6, 16)).astype(np.float32)
    valid = np.array([[False, False, True, True, True, True]])
    base = stack(Tensor(x), valid=valid).data
    x2 = x.copy()
    x2[0, :2] += 5.0  # perturb padding content only
    out = stack(Tensor(x2), valid=valid).data
    assert np.array_equal(out[0, 2:], base[0, 2:])


def test_table5_scale_instantiates_and_runs():
    cfg = TransformerConfig(3, 4, 256, context_size=30, pos_mode="relative", dropout=0.0)
    ss = np.random.SeedSequence(0)
    base, pos = [np.random.default_rng(s) for s in ss.spawn(2)]
    stack = CausalTransformer(cfg, 31, base, pos)
    x = Tensor(np.random.default_rng(1).standard_normal((1, 31, 256)).astype(np.float32))
    assert stack(x).data.shape == (1, 31, 256)


# ---------------------------------------------------------------------------
# parameter audits and mode equivalence
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("mode", ["absolute", "global", "relative"])
def test_param_count_matches_analytic_formula(mode):
    stack = make_stack(mode, n_layers=3, n_heads=4, h=32, max_tokens=12, t_max=50)
    assert stack.num_parameters() == transformer_param_count(stack.cfg, 12)


def test_relative_adds_table_and_biases_removes_global():
    rel = make_stack("relative", max_tokens=10, t_max=40)
    glo = make_stack("global", max_tokens=10, t_max=40)
    names_rel = {n for n, _ in rel.named_parameters()}
    names_glo = {n for n, _ in glo.named_parameters()}
    assert any("rel_embeddings" in n for n in names_rel)
    assert not any("global_table" in n for n in names_rel)
    assert any("global_table" in n for n in names_glo)
    assert not any("rel_embeddings" in n for n in names_glo)


def test_modes_agree_when_positional_params_zeroed():
    stacks = {m: make_stack(m, seed=11, t_max=64) for m in ["absolute", "global", "relative"]}
    # zero out positional contributions
    stacks["absolute"]._abs_table[:] = 0
    stacks["global"].global_table.table.data[:] = 0
    for blk in stacks["relative"].blocks:
        blk.attn.rel.rel_embeddings.data[:] = 0
        blk.attn.rel.content_bias.data[:] = 0
        blk.attn.rel.position_bias.data[:] = 0
    rng = np.random.default_rng(12)
    x = Tensor(rng.standard_normal((2, 5, 16)).astype(np.float32))
    ts = np.tile(np.arange(5), (2, 1))
    outs = [stacks[m](x, timesteps=ts).data for m in ["absolute", "global", "relative"]]
    assert np.allclose(outs[0], outs[1], atol=1e-6)
    assert np.allclose(outs[0], outs[2], atol=1e-6)


@pytest.mark.parametrize("mode", ["absolute", "global", "relative"])
def test_stack_grad_check(mode):
    stack = make_stack(mode, n_layers=1, n_heads=2, h=8, max_tokens=4, t_max=10, dtype=np.float64)
    rng = np.random.default_rng(13)
    x = Tensor(rng.standard_normal((1, 3, 8)), dtype=np.float64)
    ts = np.arange(3)[None, :]
    probe = Tensor(rng.standard_normal((1, 3, 8)))

    def f(params):
        return T.sum_(T.mul(stack(x, timesteps=ts), probe))

    err = grad_check(f, stack.parameters(), sample=6, rng=np.random.default_rng(0))
    assert err <= 1e-4
