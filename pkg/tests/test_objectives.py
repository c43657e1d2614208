import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import info_nce
from umt.objectives import (
    LossReport,
    alignment_targets,
    hard_negative_probs,
    l2_normalize,
    mask_text,
    mine_hard_negatives,
    mlm_loss,
    pool_text,
    pool_video,
    uta_loss,
    vtc_loss,
    vtm_loss,
    weighted_total,
)
from umt.errors import InvalidInputError
from umt.teacher import Teacher, TeacherConfig

f64 = torch.float64


def _unit(*shape, seed=0):
    return l2_normalize(torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=f64))


# --- UTA

def test_uta_zero_on_identical():
    t = _unit(10, 8)
    assert uta_loss([3.0 * t], [t]).item() == pytest.approx(0.0, abs=1e-12)


def test_uta_orthogonal_pair():
    u = torch.tensor([[1.0, 0, 0, 0]], dtype=f64)
    v = torch.tensor([[0, 1.0, 0, 0]], dtype=f64)
    assert uta_loss([u], [v]).item() == pytest.approx(0.5, abs=1e-12)


def test_uta_layer_mean():
    def pair(c):  # unit vectors with cosine c in D=4
        return torch.tensor([[1.0, 0, 0, 0]], dtype=f64), torch.tensor([[c, math.sqrt(1 - c * c), 0, 0]], dtype=f64)

    (s1, t1), (s2, t2) = pair(0.6), pair(0.2)
    assert uta_loss([s1], [t1]).item() == pytest.approx(0.2)
    assert uta_loss([s2], [t2]).item() == pytest.approx(0.4)
    assert uta_loss([s1, s2], [t1, t2]).item() == pytest.approx(0.3)


@settings(max_examples=50, deadline=None)
@given(D=st.integers(2, 64), seed=st.integers(0, 10_000))
def test_uta_elementwise_identity(D, seed):
    u, v = _unit(1, D, seed=seed), _unit(1, D, seed=seed + 1)
    loss = uta_loss([u], [v]).item()
    assert loss == pytest.approx((2 - 2 * (u * v).sum().item()) / D, abs=1e-6)
    assert 0.0 <= loss <= 4.0


def test_uta_zero_norm_token_is_finite():
    loss = uta_loss([torch.zeros(2, 4, dtype=f64)], [_unit(2, 4)])
    assert torch.isfinite(loss)


def test_uta_shape_errors():
    with pytest.raises(InvalidInputError):
        uta_loss([_unit(2, 4)], [_unit(2, 4), _unit(2, 4)])
    with pytest.raises(InvalidInputError):
        uta_loss([_unit(2, 4)], [_unit(3, 4)])


def test_alignment_targets_unit_norm():
    teacher = Teacher(TeacherConfig())
    tokens = torch.randn(2, 3, 16, 64)
    out = teacher(tokens, num_layers=2)
    prov = torch.tensor([[[0, 1], [2, 15]], [[1, 0], [1, 3]]])
    targets = alignment_targets(teacher, out, prov)
    assert [t.shape for t in targets] == [(2, 2, 64), (2, 2, 32)]
    for t in targets:
        assert torch.allclose(t.norm(dim=-1), torch.ones(2, 2), atol=1e-6)
    expected = l2_normalize(teacher.visual_project(out.layer_tokens[-1][1, 1, 3]))
    assert torch.allclose(targets[-1][1, 1], expected, atol=1e-6)


# --- VTC

def test_vtc_identical_embeddings_is_log_b():
    v = _unit(1, 8).repeat(4, 1)
    assert vtc_loss(v, v, 0.07).item() == pytest.approx(math.log(4), abs=1e-5)


def test_vtc_two_by_two_closed_form():
    eye = torch.eye(2, dtype=f64)
    assert vtc_loss(eye, eye, 1.0).item() == pytest.approx(0.31326, abs=1e-5)
    assert vtc_loss(eye, eye, 1.0).item() == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)


def test_vtc_vanishing_temperature():
    eye = torch.eye(4, dtype=f64)
    assert vtc_loss(eye, eye, 1e-3).item() < 1e-12


def test_vtc_matches_numpy_reference():
    v, t = _unit(6, 5, seed=1), _unit(6, 5, seed=2)
    assert vtc_loss(v, t, 0.1).item() == pytest.approx(info_nce(v.numpy(), t.numpy(), 0.1), abs=1e-10)


def test_vtc_rotation_invariant_and_symmetric():
    v, t = _unit(5, 6, seed=3), _unit(5, 6, seed=4)
    Q, _ = torch.linalg.qr(torch.randn(6, 6, dtype=f64, generator=torch.Generator().manual_seed(0)))
    base = vtc_loss(v, t, 0.07)
    assert vtc_loss(v @ Q, t @ Q, 0.07).item() == pytest.approx(base.item(), abs=1e-5)
    assert vtc_loss(t, v, 0.07).item() == pytest.approx(base.item(), abs=1e-12)


def test_vtc_temperature_must_be_positive():
    with pytest.raises(InvalidInputError):
        vtc_loss(_unit(2, 3), _unit(2, 3), 0.0)


# --- VTM and mining

def test_vtm_values():
    labels = torch.tensor([1.0, 0.0, 0.0])
    assert vtm_loss(torch.tensor([100.0, -100.0, -100.0], dtype=f64), labels).item() < 1e-40
    assert vtm_loss(torch.zeros(3, dtype=f64), labels).item() == pytest.approx(math.log(2), abs=1e-12)


def test_hard_negative_probability():
    sim = torch.tensor([[5.0, 2.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    p = hard_negative_probs(sim)
    target = math.exp(2) / (math.exp(2) + 1)
    assert p[0, 0] == 0.0
    assert p[0, 1].item() == pytest.approx(0.8808, abs=1e-4)
    assert p[0, 1].item() == pytest.approx(target, abs=1e-12)
    rng = np.random.default_rng(0)
    draws = np.array([mine_hard_negatives(sim, rng)[0][0] for _ in range(10_000)])
    assert not (draws == 0).any()
    sigma = math.sqrt(target * (1 - target) / 10_000)
    assert abs((draws == 1).mean() - target) < 3 * sigma


def test_mining_never_returns_positive():
    rng = np.random.default_rng(1)
    sim = torch.randn(5, 5)
    for _ in range(50):
        neg_t, neg_v = mine_hard_negatives(sim, rng)
        assert (neg_t != np.arange(5)).all() and (neg_v != np.arange(5)).all()


def test_mining_batch_of_one_skips():
    with pytest.warns(UserWarning):
        assert mine_hard_negatives(torch.zeros(1, 1), np.random.default_rng(0)) is None


# --- text masking and MLM

def test_mask_text_ten_tokens():
    ids = [1] + list(range(4, 14)) + [3]
    masked, targets, positions = mask_text(ids, np.random.default_rng(0))
    assert len(positions) == 5
    assert all(ids[p] not in (0, 1, 2, 3) for p in positions)
    assert targets == [ids[p] for p in positions]
    untouched = set(range(len(ids))) - set(positions)
    assert all(masked[i] == ids[i] for i in untouched)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(2, 14), seed=st.integers(0, 10_000))
def test_mask_text_count_is_floor_half(n, seed):
    rng = np.random.default_rng(seed)
    ids = [1] + rng.integers(4, 64, size=n).tolist() + [3, 0, 0]
    _, _, positions = mask_text(ids, rng)
    assert len(positions) == n // 2
    assert all(1 <= p <= n for p in positions)


def test_mask_text_all_special_rejected():
    with pytest.raises(InvalidInputError):
        mask_text([1, 3, 0], np.random.default_rng(0))


def test_mask_text_replacement_categories():
    # vocab 64, 4 special ids: a random replacement equals the original with prob 1/60
    rng = np.random.default_rng(7)
    n_seq, V = 10_000, 64
    counts = np.zeros(3)
    for _ in range(n_seq):
        ids = [1] + rng.integers(4, V, size=20).tolist() + [3]
        masked, _, positions = mask_text(ids, rng, vocab_size=V)
        for p in positions:
            if masked[p] == 2:
                counts[0] += 1
            elif masked[p] != ids[p]:
                counts[1] += 1
            else:
                counts[2] += 1
    n = counts.sum()
    assert n == n_seq * 10
    expected = np.array([0.8, 0.1 * (1 - 1 / 60), 0.1 + 0.1 / 60])
    sigma = np.sqrt(expected * (1 - expected) / n)
    assert np.all(np.abs(counts / n - expected) < 3 * sigma)


def test_mlm_uniform_logits():
    logits = torch.zeros(2, 5, 64, dtype=f64)
    targets = torch.randint(0, 64, (2, 5))
    masked = torch.tensor([[True, False, True, False, False], [False, False, False, False, True]])
    assert mlm_loss(logits, targets, masked).item() == pytest.approx(math.log(64), abs=1e-5)


def test_mlm_ignores_unmasked_positions():
    logits = torch.randn(1, 4, 10, dtype=f64)
    targets = torch.tensor([[1, 2, 3, 4]])
    masked = torch.tensor([[True, False, True, False]])
    other = logits.clone()
    other[0, 1] = 50.0 * torch.randn(10, dtype=f64)
    assert mlm_loss(logits, targets, masked).item() == mlm_loss(other, targets, masked).item()


def test_mlm_confident_correct_logits():
    targets = torch.tensor([[3, 7]])
    logits = 100.0 * torch.nn.functional.one_hot(targets, 10).to(f64)
    assert mlm_loss(logits, targets, torch.ones(1, 2, dtype=torch.bool)).item() < 1e-30


def test_mlm_nothing_masked_skips():
    with pytest.warns(UserWarning):
        assert mlm_loss(torch.zeros(1, 3, 5), torch.zeros(1, 3, dtype=torch.long),
                        torch.zeros(1, 3, dtype=torch.bool)) is None


# --- pooling and reports

def test_pool_video():
    proj = torch.nn.Linear(6, 4).double()
    tok = torch.randn(1, 6, dtype=f64)
    single = pool_video(tok, proj)
    assert torch.allclose(single, l2_normalize(proj(tok[0])), atol=1e-12)
    assert torch.allclose(pool_video(tok.repeat(5, 1), proj), single, atol=1e-12)
    many = pool_video(torch.randn(3, 7, 6, dtype=f64), proj)
    assert torch.allclose(many.norm(dim=-1), torch.ones(3, dtype=f64), atol=1e-6)
    with pytest.raises(InvalidInputError):
        pool_video(torch.zeros(0, 6, dtype=f64), proj)


def test_pool_text_uses_first_token():
    proj = torch.nn.Linear(6, 4).double()
    tok = torch.randn(2, 5, 6, dtype=f64)
    changed = tok.clone()
    changed[:, 1:] = 0.0
    assert torch.equal(pool_text(tok, proj), pool_text(changed, proj))


def test_loss_report_total():
    report = LossReport({"uta": 0.5, "vtc": 2.0, "vtm": None}, {"uta": 1.0, "vtc": 0.5})
    assert report.total == pytest.approx(1.5)
    assert math.isnan(report.get("vtm"))
    total = weighted_total({"uta": torch.tensor(0.5), "mlm": torch.tensor(3.0)}, {"uta": 2.0, "mlm": 1.0})
    assert total.item() == pytest.approx(4.0)
    with warnings.catch_warnings():
        with pytest.raises(InvalidInputError):
            weighted_total({"vtm": None}, {})
