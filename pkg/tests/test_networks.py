import numpy as np
import pytest
import torch

from telereg import tgeometry as tg
from telereg.geometry import compose as np_compose
from telereg.geometry import quat_multiply as np_quat_multiply
from telereg.geometry import quat_to_matrix as np_quat_to_matrix
from telereg.geometry import random_transform
from telereg.networks import NetConfig, ShapeError, build_model

CFG = NetConfig.preset("tiny", 64)


@pytest.fixture(scope="module")
def model():
    return build_model(CFG, seed=0)


def _cloud(b, n=64, seed=0):
    return torch.as_tensor(np.random.default_rng(seed).uniform(-0.5, 0.5, (b, n, 3)), dtype=torch.float32)


def test_config_levels_and_widths():
    assert NetConfig().levels == (128, 512, 2048)
    assert CFG.levels == (4, 16, 64)
    assert NetConfig.preset("tiny").reg_widths == (4, 8, 16, 32)
    assert NetConfig.preset("full").comp_widths[-1] == 1920
    with pytest.raises(ValueError):
        NetConfig(width_scale=3)
    with pytest.raises(ValueError):
        NetConfig(num_points=100)


def test_output_shapes(model):
    p1, p2 = _cloud(2), _cloud(2, seed=1)
    q12, t12, q21, t21 = model.registration(p1, p2)
    assert q12.shape == (2, 4) and t12.shape == (2, 3) and q21.shape == (2, 4)
    comp = model.completion(p1)
    assert [lv.shape for lv in comp.levels] == [(2, 4, 3), (2, 16, 3), (2, 64, 3)]
    assert comp.s.shape == (2, 128, 3)


def test_unit_quaternions(model):
    q12, _, q21, _ = model.registration(_cloud(3), _cloud(3, seed=2))
    comp = model.completion(_cloud(3, seed=3))
    for q in (q12, q21, comp.q_o):
        np.testing.assert_allclose(torch.linalg.vector_norm(q, dim=-1).detach(), 1.0, atol=1e-6)


def test_completion_contains_input_verbatim(model):
    p = _cloud(2, seed=4)
    comp = model.completion(p)
    assert torch.equal(comp.s[:, 64:], p)


def test_permutation_invariance(model):
    p1, p2 = _cloud(1, seed=5), _cloud(1, seed=6)
    perm = torch.as_tensor(np.random.default_rng(0).permutation(64))
    with torch.no_grad():
        a = model.registration(p1, p2)
        b = model.registration(p1[:, perm], p2[:, perm])
        for x, y in zip(a, b):
            assert (x - y).abs().max() < 1e-5
        ca, cb = model.completion(p1), model.completion(p1[:, perm])
        for x, y in zip(ca.levels, cb.levels):
            assert (x - y).abs().max() < 1e-5


def test_register_matches_batched_forward(model):
    p1, p2 = _cloud(2, seed=7), _cloud(2, seed=8)
    with torch.no_grad():
        q12, t12, q21, t21 = model.registration(p1, p2)
        q, t, extra = model.registration.register(p2, p1)
    assert torch.allclose(q, q21, atol=1e-6) and torch.allclose(t, t21, atol=1e-6)
    assert extra["p1R"].shape == p2.shape


def test_zero_cloud_is_finite(model):
    z = torch.zeros(1, 64, 3)
    outs = list(model.registration(z, z)) + model.completion(z).levels
    assert all(torch.isfinite(o).all() for o in outs)


def test_wrong_point_count_raises(model):
    with pytest.raises(ShapeError):
        model.completion(torch.zeros(1, 32, 3))
    with pytest.raises(ShapeError):
        model.registration(torch.zeros(64, 3), torch.zeros(64, 3))


def test_build_model_is_seeded_and_leaves_rng():
    torch.manual_seed(123)
    before = torch.rand(1)
    torch.manual_seed(123)
    a = build_model(CFG, seed=4)
    after = torch.rand(1)
    b = build_model(CFG, seed=4)
    assert torch.equal(before, after)
    for x, y in zip(a.parameters(), b.parameters()):
        assert torch.equal(x, y)


def test_fresh_quaternion_heads_start_near_identity(model):
    q12, _, _, _ = model.registration(_cloud(1), _cloud(1, seed=1))
    assert float(q12[0, 0].detach()) > 0.9


def test_torch_geometry_matches_numpy():
    rng = np.random.default_rng(0)
    a, b = random_transform(rng, 0.5), random_transform(rng, 0.5)
    ta = [torch.as_tensor(x, dtype=torch.float64) for x in (a.q, a.t, b.q, b.t)]
    np.testing.assert_allclose(tg.quat_to_matrix(ta[0]).numpy(), np_quat_to_matrix(a.q), atol=1e-12)
    np.testing.assert_allclose(tg.quat_multiply(ta[0], ta[2]).numpy(), np_quat_multiply(a.q, b.q), atol=1e-12)
    q, t = tg.compose(*ta)
    ref = np_compose(a, b)
    np.testing.assert_allclose(tg.quat_to_matrix(q).numpy(), ref.rotation_matrix, atol=1e-12)
    np.testing.assert_allclose(t.numpy(), ref.t, atol=1e-12)
    pts = rng.normal(size=(10, 3))
    np.testing.assert_allclose(tg.transform(ta[0], ta[1], torch.as_tensor(pts)).numpy(), a.apply(pts), atol=1e-12)
    assert float(tg.dist_q(ta[0], -ta[0])) == 0.0
