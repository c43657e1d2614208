import math
import warnings

import pytest
import torch

from oracles import head_average_attention
from umt.errors import CheckpointError, ConfigError, InvalidInputError
from umt.layers import param_checksum
from umt.pipeline.checkpoint import load_tensors, save_tensors
from umt.teacher import Teacher, TeacherConfig, attention_scores, load_teacher, save_teacher


@pytest.fixture(scope="module")
def teacher():
    return Teacher(TeacherConfig())


def _tokens(T=3, seed=0, cfg=TeacherConfig()):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(T, cfg.tokens_per_frame, cfg.width, generator=g)


def test_output_shapes(teacher):
    out = teacher(_tokens(3), num_layers=2)
    assert len(out.layer_tokens) == 2
    assert all(t.shape == (3, 16, 64) for t in out.layer_tokens)
    assert out.class_tokens.shape == (3, 64)
    assert out.attention.scores.shape == (3, 16)


def test_attention_rows_are_distributions(teacher):
    A = teacher(_tokens(5, seed=3)).attention.scores
    assert (A >= 0).all()
    assert torch.allclose(A.sum(-1), torch.ones(5), atol=1e-6)


def test_identical_frames_identical_outputs(teacher):
    x = _tokens(1).repeat(2, 1, 1)
    out = teacher(x)
    assert torch.allclose(out.layer_tokens[0][0], out.layer_tokens[0][1], atol=1e-6)
    assert torch.allclose(out.attention.scores[0], out.attention.scores[1], atol=1e-7)


def test_frames_processed_independently(teacher):
    x = _tokens(4, seed=1)
    perm = torch.tensor([2, 0, 3, 1])
    a, b = teacher(x), teacher(x[perm])
    assert torch.allclose(a.layer_tokens[-1][perm], b.layer_tokens[-1], atol=1e-6)
    assert torch.allclose(a.attention.scores[perm], b.attention.scores, atol=1e-7)


def test_repeat_calls_bitwise_identical(teacher):
    x = _tokens(2, seed=4)
    a, b = teacher(x, num_layers=2), teacher(x, num_layers=2)
    assert all(torch.equal(u, v) for u, v in zip(a.layer_tokens, b.layer_tokens))
    assert torch.equal(a.attention.scores, b.attention.scores)


def test_frozen(teacher):
    before = param_checksum(teacher)
    assert not any(p.requires_grad for p in teacher.parameters())
    teacher.train()
    assert not teacher.training
    teacher(_tokens(2))
    assert param_checksum(teacher) == before


def test_shape_and_layer_errors(teacher):
    with pytest.raises(InvalidInputError):
        teacher(torch.zeros(2, 15, 64))
    with pytest.raises(ConfigError):
        teacher(_tokens(1), num_layers=5)


def test_attention_uniform_keys():
    z = torch.randn(8, dtype=torch.float64)
    Z = torch.randn(1, 8, dtype=torch.float64).repeat(5, 1)
    w = torch.randn(8, 8, dtype=torch.float64)
    A = attention_scores(z, Z, w, w, 2)
    assert torch.equal(A, torch.full((5,), 0.2, dtype=torch.float64))


def test_attention_single_head_closed_form():
    z = torch.tensor([math.log(3.0)], dtype=torch.float64)
    Z = torch.tensor([[1.0], [0.0]], dtype=torch.float64)
    eye = torch.eye(1, dtype=torch.float64)
    A = attention_scores(z, Z, eye, eye, 1)
    assert torch.allclose(A, torch.tensor([0.75, 0.25], dtype=torch.float64), atol=1e-12)


def test_attention_two_heads_average():
    # head 1 logits (ln 3, 0) -> (3/4, 1/4); head 2 logits (0, ln 3) -> (1/4, 3/4)
    z = torch.tensor([math.log(3.0), math.log(3.0)], dtype=torch.float64)
    Z = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    eye = torch.eye(2, dtype=torch.float64)
    A = attention_scores(z, Z, eye, eye, 2)
    assert torch.allclose(A, torch.tensor([0.5, 0.5], dtype=torch.float64), atol=1e-12)


def test_attention_matches_loop_oracle():
    g = torch.Generator().manual_seed(11)
    z = torch.randn(12, generator=g, dtype=torch.float64)
    Z = torch.randn(7, 12, generator=g, dtype=torch.float64)
    wq = torch.randn(12, 12, generator=g, dtype=torch.float64)
    wk = torch.randn(12, 12, generator=g, dtype=torch.float64)
    A = attention_scores(z, Z, wq, wk, 3)
    ref = head_average_attention(z.tolist(), Z.tolist(), wq.tolist(), wk.tolist(), 3)
    assert torch.allclose(A, torch.tensor(ref, dtype=torch.float64), atol=1e-12)


def test_attention_heads_must_divide():
    with pytest.raises(ConfigError):
        attention_scores(torch.zeros(6), torch.zeros(2, 6), torch.eye(6), torch.eye(6), 4)


def test_visual_projection_linear():
    t = Teacher(TeacherConfig(width=768, heads=12, proj_dim=512, depth=1))
    assert t.proj.weight.shape == (512, 768)
    assert torch.count_nonzero(t.visual_project(torch.zeros(3, 768))) == 0
    u, v = torch.randn(768), torch.randn(768)
    assert torch.allclose(t.visual_project(u + v), t.visual_project(u) + t.visual_project(v), atol=1e-5)


def test_save_load_roundtrip(tmp_path, teacher):
    save_teacher(tmp_path / "t.umtk", teacher)
    other = load_teacher(tmp_path / "t.umtk", TeacherConfig())
    x = _tokens(2, seed=9)
    assert torch.equal(teacher(x).layer_tokens[0], other(x).layer_tokens[0])
    assert not any(p.requires_grad for p in other.parameters())


def test_load_missing_tensor_names_it(tmp_path, teacher):
    save_teacher(tmp_path / "t.umtk", teacher)
    tensors = load_tensors(tmp_path / "t.umtk")
    del tensors["teacher.proj.bias"]
    save_tensors(tmp_path / "t.umtk", tensors)
    with pytest.raises(CheckpointError, match="teacher.proj.bias|proj.bias"):
        load_teacher(tmp_path / "t.umtk", TeacherConfig())


def test_load_extra_tensor_warns(tmp_path, teacher):
    save_teacher(tmp_path / "t.umtk", teacher)
    tensors = load_tensors(tmp_path / "t.umtk")
    tensors["teacher.unused"] = torch.zeros(2)
    save_tensors(tmp_path / "t.umtk", tensors)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        load_teacher(tmp_path / "t.umtk", TeacherConfig())
    assert any("unused" in str(w.message) for w in caught)
