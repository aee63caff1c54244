import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cgp_tuning.alignment import (
    CgpAligner,
    EmptyGraph,
    EmptyText,
    GnpAligner,
    ProjectorAligner,
    ScoreCounter,
    WidthMismatch,
    cgp_align,
    count_alignment_cost,
    gnp_align,
    multi_head_attention,
    projector_align,
)
from cgp_tuning.config import AlignConfig


def np_w(lin):
    return lin.weight.detach().numpy().T


def np_b(lin):
    return lin.bias.detach().numpy()


def np_gelu(x):
    erf = np.vectorize(math.erf)
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def np_mha(q, k, v, heads):
    """Per-head loops with an explicit row softmax."""
    nq, d = q.shape
    hd = d // heads
    out = np.zeros((nq, d))
    for h in range(heads):
        cols = slice(h * hd, (h + 1) * hd)
        scores = q[:, cols] @ k[:, cols].T / math.sqrt(hd)
        for i in range(nq):
            w = np.exp(scores[i] - scores[i].max())
            out[i, cols] = (w / w.sum()) @ v[:, cols]
    return out


def np_ffn(ffn, x):
    return np_gelu(x @ np_w(ffn.fc1) + np_b(ffn.fc1)) @ np_w(ffn.fc2) + np_b(ffn.fc2)


def np_cgp(al, x_s, x_t, h3):
    wq, wk, wv = np_w(al.w_q), np_w(al.w_k), np_w(al.w_v)
    h4 = np_mha(x_s @ wq, x_t @ wk, x_t @ wv, al.heads) @ np_w(al.merge_text) + np_b(al.merge_text)
    h5 = np_mha(h4 @ wq, h3 @ wk, h3 @ wv, al.heads) @ np_w(al.merge_graph) + np_b(al.merge_graph)
    return np_ffn(al.ffn, h5)


def _inputs(gen, n_s, n_t, n_v, d, dtype=torch.float64):
    return (torch.randn(n_s, d, generator=gen, dtype=dtype), torch.randn(n_t, d, generator=gen, dtype=dtype),
            torch.randn(n_v, d, generator=gen, dtype=dtype))


@pytest.mark.parametrize("heads", [1, 4])
def test_cgp_matches_numpy_oracle(heads):
    torch.manual_seed(0)
    al = CgpAligner(16, AlignConfig(heads=heads, dropout=0.0)).double().eval()
    x_s, x_t, h3 = _inputs(torch.Generator().manual_seed(1), 5, 7, 4, 16)
    got = cgp_align(al, x_s, x_t, h3).detach().numpy()
    np.testing.assert_allclose(got, np_cgp(al, x_s.numpy(), x_t.numpy(), h3.numpy()), atol=1e-10)


def test_cgp_shares_projection_weights():
    al = CgpAligner(8, AlignConfig(heads=2))
    names = {n for n, _ in al.named_parameters()}
    assert {"w_q.weight", "w_k.weight", "w_v.weight"} <= names
    assert not any(n.startswith(("w_q2", "w_k2")) for n in names)


def test_cgp_shape_independent_of_inputs():
    al = CgpAligner(8, AlignConfig(heads=2)).eval()
    gen = torch.Generator().manual_seed(0)
    x_s = torch.randn(3, 8, generator=gen)
    for n_t, n_v in [(1, 1), (20, 3), (5, 50)]:
        assert al(x_s, torch.randn(n_t, 8), torch.randn(n_v, 8)).shape == (3, 8)


def test_cgp_duplicate_token_equals_single_token():
    al = CgpAligner(8, AlignConfig(heads=2, dropout=0.0)).eval()
    x_s, x_t, _ = _inputs(torch.Generator().manual_seed(3), 4, 1, 1, 8, torch.float32)
    once = al._mha(x_s, x_t, al.merge_text, "text")
    twice = al._mha(x_s, torch.cat([x_t, x_t]), al.merge_text, "text")
    torch.testing.assert_close(once, twice)


def test_cgp_graph_change_moves_z():
    al = CgpAligner(8, AlignConfig(heads=2, dropout=0.0)).eval()
    x_s, x_t, h3 = _inputs(torch.Generator().manual_seed(4), 4, 6, 5, 8, torch.float32)
    other = h3.clone()
    other[2] += 1.0
    assert not torch.allclose(al(x_s, x_t, h3), al(x_s, x_t, other))


def test_cgp_toggles():
    al = CgpAligner(8, AlignConfig(heads=2, dropout=0.0)).eval()
    x_s, x_t, h3 = _inputs(torch.Generator().manual_seed(5), 4, 6, 5, 8, torch.float32)
    torch.testing.assert_close(al(x_s, x_t, h3, use_mha=False), al.ffn(x_s))
    torch.testing.assert_close(al(x_s, x_t, h3, use_projector=False), al.attend(x_s, x_t, h3))
    torch.testing.assert_close(al(x_s, x_t, h3, use_mha=False, use_projector=False), x_s)


def test_cgp_errors():
    al = CgpAligner(8, AlignConfig(heads=2))
    x_s = torch.randn(4, 8)
    with pytest.raises(EmptyText):
        al(x_s, torch.zeros(0, 8), torch.randn(2, 8))
    with pytest.raises(EmptyGraph):
        al(x_s, torch.randn(2, 8), torch.zeros(0, 8))
    with pytest.raises(WidthMismatch):
        al(x_s, torch.randn(2, 6), torch.randn(2, 8))
    with pytest.raises(ValueError):
        CgpAligner(10, AlignConfig(heads=4))


def test_projector_oracle_and_single_row():
    al = ProjectorAligner(8).double()
    h3 = torch.randn(6, 8, dtype=torch.float64)
    out = projector_align(al, h3)
    assert out.shape == (1, 8)
    np.testing.assert_allclose(out.detach().numpy(), np_ffn(al.projector, h3.numpy().mean(0, keepdims=True)), atol=1e-12)
    with pytest.raises(EmptyGraph):
        al(torch.zeros(0, 8))


def test_gnp_oracle():
    torch.manual_seed(2)
    al = GnpAligner(8, AlignConfig(heads=2, dropout=0.0)).double().eval()
    gen = torch.Generator().manual_seed(6)
    h3 = torch.randn(5, 8, generator=gen, dtype=torch.float64)
    x_t = torch.randn(7, 8, generator=gen, dtype=torch.float64)
    hn, tn = h3.numpy(), x_t.numpy()
    sig = np_mha(hn @ np_w(al.self_q), hn @ np_w(al.self_k), hn @ np_w(al.self_v), 2) @ np_w(al.self_merge) + np_b(al.self_merge)
    cross = np_mha(sig @ np_w(al.cross_q), tn @ np_w(al.cross_k), tn @ np_w(al.cross_v), 2)
    cross = cross @ np_w(al.cross_merge) + np_b(al.cross_merge)
    expected = np_ffn(al.projector, cross.mean(0, keepdims=True))
    np.testing.assert_allclose(gnp_align(al, h3, x_t).detach().numpy(), expected, atol=1e-10)
    with pytest.raises(EmptyText):
        al(h3, torch.zeros(0, 8, dtype=torch.float64))


def test_multi_head_attention_single_key_is_value():
    v = torch.randn(1, 4)
    out = multi_head_attention(torch.randn(3, 4), torch.randn(1, 4), v, heads=2)
    torch.testing.assert_close(out, v.expand(3, 4))


# -- score counting -------------------------------------------------------------


@pytest.mark.parametrize("n_s, n_t, n_v, expected", [(32, 512, 100, 19_584), (32, 1, 1, 64), (1, 10, 7, 17)])
def test_cgp_cost_examples(n_s, n_t, n_v, expected):
    assert count_alignment_cost("cgp", n_v, n_t, n_s).score_entries == expected


def test_gnp_and_projector_cost_examples():
    assert count_alignment_cost("gnp", 100, 512).score_entries == 100 * 100 + 100 * 512
    assert count_alignment_cost("projector", 100, 512).score_entries == 0
    with pytest.raises(ValueError):
        count_alignment_cost("lora", 1, 1)
    with pytest.raises(ValueError):
        count_alignment_cost("cgp", -1, 1)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 12), st.integers(1, 30), st.integers(1, 30))
def test_counter_matches_formula(n_s, n_t, n_v):
    cgp = CgpAligner(8, AlignConfig(heads=2, dropout=0.0)).eval()
    gnp = GnpAligner(8, AlignConfig(heads=2, dropout=0.0)).eval()
    x_s, x_t, h3 = torch.randn(n_s, 8), torch.randn(n_t, 8), torch.randn(n_v, 8)
    with ScoreCounter() as c:
        z = cgp(x_s, x_t, h3)
    assert z.shape == (n_s, 8)
    assert c.total == count_alignment_cost("cgp", n_v, n_t, n_s).score_entries
    assert c.stages == {"text": n_s * n_t, "graph": n_s * n_v}
    with ScoreCounter() as c:
        gnp(h3, x_t)
    assert c.total == n_v * n_v + n_v * n_t
    with ScoreCounter() as c:
        ProjectorAligner(8)(h3)
    assert c.total == 0


def test_counters_nest_and_detach():
    al = CgpAligner(8, AlignConfig(heads=2)).eval()
    args = torch.randn(2, 8), torch.randn(3, 8), torch.randn(4, 8)
    with ScoreCounter() as outer:
        al(*args)
        with ScoreCounter() as inner:
            al(*args)
    al(*args)
    assert inner.total == 2 * 3 + 2 * 4
    assert outer.total == 2 * inner.total
