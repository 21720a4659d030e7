import logging

import numpy as np
import pytest
import torch

from uniflow.data import toy_dataset
from uniflow.encoder import (LatentProjection, build_encoder, encode_layers, freeze, make_teacher,
                             project_latent)
from uniflow.model import build_model
from uniflow.trainer import fit, init_state

from conftest import tiny_config


def test_layer_stack_shapes(torch_seed):
    cfg = tiny_config(image_size=28, patch_size=4, encoder_layers=2, hidden_dim=8)
    stack = encode_layers(torch.randn(3, 3, 28, 28), build_encoder(cfg))
    assert len(stack) == 2 and stack.source == "student"
    assert all(h.shape == (3, 49, 8) for h in stack.per_layer)


def test_frozen_teacher_is_deterministic(torch_seed):
    cfg = tiny_config()
    teacher = freeze(build_encoder(cfg))
    x = torch.randn(4, 3, 8, 8)
    a, b = encode_layers(x, teacher), encode_layers(x, teacher)
    assert a.source == "teacher"
    assert all(torch.equal(u, v) for u, v in zip(a.per_layer, b.per_layer))
    assert not any(h.requires_grad for h in a.per_layer)


def test_copy_teacher_matches_student_bitwise():
    model = build_model(tiny_config(), dtype=torch.float64)
    for (ns, ps), (nt, pt) in zip(model.student.named_parameters(), model.teacher.named_parameters()):
        assert ns == nt and torch.equal(ps, pt)
    x = torch.randn(2, 3, 8, 8, dtype=torch.float64)
    s, t = model.features(x)
    assert all(torch.equal(u, v) for u, v in zip(s.per_layer, t.per_layer))


def test_parameter_names_follow_layout():
    names = set(build_model(tiny_config()).state_dict())
    for who in ("student", "teacher"):
        for part in ("attn", "ffn", "norm"):
            assert any(n.startswith(f"encoder.{who}.block1.{part}.") for n in names)
    assert {"encoder.p_down.weight", "encoder.p_down.bias"} <= names


def test_identity_projection_and_zero_input():
    p = LatentProjection(8, 8)
    with torch.no_grad():
        p.weight.copy_(torch.eye(8))
        p.bias.zero_()
    h = torch.randn(2, 49, 8)
    z = project_latent(h, p)
    assert z.shape == (2, 7, 7, 8)
    assert torch.equal(z, h.reshape(2, 7, 7, 8))
    q = LatentProjection(8, 4)
    zero = project_latent(torch.zeros(1, 4, 8), q)
    assert torch.equal(zero, q.bias.detach().expand(1, 2, 2, 4))


def test_expanding_projection_warns(caplog):
    with caplog.at_level(logging.WARNING):
        LatentProjection(4, 8)
    assert "expands" in caplog.text


def test_non_finite_activation_names_layer():
    enc = build_encoder(tiny_config(encoder_layers=3))
    with torch.no_grad():
        enc.block2.ffn.fc2.bias.fill_(float("nan"))
    with pytest.raises(FloatingPointError, match="layer 2"):
        encode_layers(torch.zeros(1, 3, 8, 8), enc)


def test_wrong_image_shape():
    with pytest.raises(ValueError):
        encode_layers(torch.zeros(1, 3, 12, 12), build_encoder(tiny_config()))


def test_tap_consistency():
    model = build_model(tiny_config(), dtype=torch.float64)
    x = torch.randn(2, 3, 8, 8, dtype=torch.float64)
    s, _ = model.features(x)
    z = model.latent(s)
    assert torch.equal(z, project_latent(s.per_layer[-1], model.encoder.p_down))
    assert torch.equal(model.conditions(x), model.decoder.gtb(
        model.decoder.p_up(z.reshape(2, 16, -1)) + model.decoder.pos.double()).reshape(2, 4, 4, -1))


def test_batch_permutation_equivariance():
    model = build_model(tiny_config(), dtype=torch.float64)
    x = torch.randn(5, 3, 8, 8, dtype=torch.float64)
    perm = torch.tensor([3, 0, 4, 1, 2])
    s, _ = model.features(x)
    sp, _ = model.features(x[perm])
    for a, b in zip(s.per_layer, sp.per_layer):
        torch.testing.assert_close(a[perm], b, rtol=0, atol=1e-12)
    torch.testing.assert_close(model.conditions(x)[perm], model.conditions(x[perm]), rtol=0, atol=1e-12)


def test_probe_teacher_beats_chance():
    cfg = tiny_config(teacher_source="pretrained_probe_teacher", teacher_pretrain_steps=300,
                      batch_size=64, image_size=16, patch_size=4, hidden_dim=32)
    ds = toy_dataset(512, 16, seed=0)
    batch = ds.all_images()
    student = build_encoder(cfg)
    teacher, acc = make_teacher(cfg, student, batch.data, batch.labels)
    # chance is 1/4; 0.1 is about 5 binomial sigmas at n=512
    assert acc > 0.25 + 0.1
    assert all(torch.equal(a, b) for a, b in zip(student.parameters(), teacher.parameters()))
    with pytest.raises(ValueError):
        make_teacher(cfg, build_encoder(cfg))


def test_teacher_frozen_through_training():
    cfg = tiny_config(max_steps=100, epochs=100, batch_size=4)
    state = init_state(cfg)
    before = {n: t.clone() for n, t in state.model.state_dict().items() if n.startswith("encoder.teacher.")}
    student_before = state.model.student.block1.attn.qkv.weight.clone()
    fit(cfg, state=state)
    assert state.step == 100
    after = state.model.state_dict()
    assert all(torch.equal(v, after[n]) for n, v in before.items())
    assert not torch.equal(student_before, state.model.student.block1.attn.qkv.weight)
    assert not np.isclose(state.records[-1].loss_dist, 0.0, atol=0)
