import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

import oracles
from dsmfilter import objectives as obj
from dsmfilter.raster import HeightMap, surface_normals


@pytest.fixture(autouse=True)
def _float64():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)


def t(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def fd_grad(f, x, eps=1e-6):
    """Central finite differences of scalar ``f`` at tensor ``x``."""
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + eps
        hi = f(x).item()
        flat[i] = old - eps
        lo = f(x).item()
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def assert_grad_matches(f, x, rtol=1e-4):
    x = x.clone().requires_grad_(True)
    (auto,) = torch.autograd.grad(f(x), x)
    with torch.no_grad():
        ref = fd_grad(f, x.detach().clone())
    scale = max(ref.abs().max().item(), 1e-8)
    assert (auto - ref).abs().max().item() <= rtol * scale


# ---------------------------------------------------------------------------
# individual losses
# ---------------------------------------------------------------------------


def test_l1_examples():
    a = t(np.random.default_rng(0).normal(size=(4, 4)))
    assert obj.l1_loss(a, a).item() == 0.0
    assert obj.l1_loss(a + 2, a).item() == pytest.approx(2.0, abs=1e-12)
    b = t(np.random.default_rng(1).normal(size=(4, 4)))
    assert obj.l1_loss(a, b).item() == pytest.approx(oracles.mae(a.numpy(), b.numpy()), abs=1e-9)
    with pytest.raises(ValueError):
        obj.l1_loss(a, a[:2])


def test_normal_loss_identity_and_steep_plane():
    x = t(np.random.default_rng(2).normal(size=(5, 6)))
    assert obj.normal_loss(x, x).item() == pytest.approx(0.0, abs=1e-12)
    flat = torch.zeros(6, 6)
    steep = t(np.tile(np.arange(6.0), (6, 1)) * 1e8)
    # a height field cannot hold a vertical normal; a very steep plane approaches the orthogonal case
    assert obj.normal_loss(flat, steep).item() == pytest.approx(1.0, abs=1e-7)


def test_cosine_loss_attains_one_and_two():
    up = torch.zeros(4, 4, 3)
    up[..., 2] = 1
    east = torch.zeros(4, 4, 3)
    east[..., 0] = 1
    assert obj.cosine_normal_loss(up, up).item() == pytest.approx(0.0, abs=1e-12)
    assert obj.cosine_normal_loss(up, east).item() == pytest.approx(1.0, abs=1e-12)
    assert obj.cosine_normal_loss(up, -up).item() == pytest.approx(2.0, abs=1e-12)


def test_normal_loss_matches_dot_product_oracle():
    rng = np.random.default_rng(3)
    for gsd in (1.0, 0.5):
        a, b = rng.normal(size=(6, 7)) * 2, rng.normal(size=(6, 7)) * 2
        na, nb = oracles.normals(a, gsd), oracles.normals(b, gsd)
        expected = 1.0 - float(np.mean(np.sum(na * nb, axis=-1)))
        assert obj.normal_loss(t(a), t(b), gsd=gsd).item() == pytest.approx(expected, abs=1e-7)


def test_height_normals_agree_with_raster_normals():
    h = np.random.default_rng(4).normal(size=(5, 5))
    n = obj.height_normals(t(h), gsd=0.5).numpy()
    n = n / np.linalg.norm(n, axis=-1, keepdims=True)
    assert np.allclose(n, surface_normals(HeightMap(h, 0.5)).normals, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_normal_loss_range(seed, amp):
    rng = np.random.default_rng(seed)
    v = obj.normal_loss(t(rng.normal(size=(4, 5)) * amp), t(rng.normal(size=(4, 5)) * amp)).item()
    assert 0.0 <= v <= 2.0


def test_gan_losses_by_hand():
    assert obj.gan_generator_loss(torch.ones(3, 3)).item() == 0.0
    assert obj.gan_generator_loss(torch.zeros(3, 3)).item() == 1.0
    assert obj.gan_generator_loss(t([0.0, 0.5, 1.0, 1.0])).item() == pytest.approx(0.3125, abs=1e-15)
    assert obj.discriminator_loss(torch.ones(4), torch.zeros(4)).item() == 0.0
    assert obj.discriminator_loss(torch.zeros(4), torch.ones(4)).item() == 1.0
    assert obj.discriminator_loss(torch.full((4,), 0.5), torch.full((4,), 0.5)).item() == pytest.approx(0.25)


def test_seg_loss_examples():
    labels = torch.tensor([[0, 1, 2], [2, 1, 0]])
    strong = torch.zeros(1, 3, 2, 3)
    strong[0].scatter_(0, labels[None], 20.0)
    assert obj.seg_loss(strong, labels[None]).item() < 1e-6
    assert abs(obj.seg_loss(torch.zeros(1, 3, 2, 3), labels[None]).item() - math.log(3)) <= 1e-9
    rng = np.random.default_rng(5)
    logits, lab = rng.normal(size=(3, 3, 3)) * 3, rng.integers(0, 3, (3, 3))
    assert obj.seg_loss(t(logits), torch.as_tensor(lab)).item() == pytest.approx(
        oracles.log_softmax_ce(logits, lab), abs=1e-7)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_losses_non_negative(seed):
    rng = np.random.default_rng(seed)
    a, b = t(rng.normal(size=(4, 4))), t(rng.normal(size=(4, 4)))
    assert obj.l1_loss(a, b).item() >= 0
    assert obj.gan_generator_loss(a).item() >= 0
    assert obj.discriminator_loss(a, b).item() >= 0
    assert obj.seg_loss(t(rng.normal(size=(1, 3, 4, 4))), torch.as_tensor(rng.integers(0, 3, (1, 4, 4)))).item() >= 0


# ---------------------------------------------------------------------------
# weighting
# ---------------------------------------------------------------------------


def test_effective_weight_examples():
    assert obj.effective_weight(0.0, "regression") == (0.5, 0.0)
    assert obj.effective_weight(0.0, "classification") == (1.0, 0.0)
    w, r = obj.effective_weight(math.log(4), "regression")
    assert w == pytest.approx(0.125) and r == pytest.approx(math.log(2))
    assert obj.effective_weight(1.0, "adversarial") == (1.0, 0.0)
    with pytest.raises(ValueError):
        obj.effective_weight(0.0, "ranking")


def raw_losses(seed=0):
    rng = np.random.default_rng(seed)
    return {k: torch.tensor(float(v)) for k, v in zip(("l1", "normal", "seg", "gan"), rng.uniform(0.1, 3, 4))}


def test_combine_at_zero_is_literal_form():
    raw = raw_losses()
    rep = obj.combine_multitask(raw, obj.WeightState(), ("l1", "normal", "gan", "seg"))
    expected = 0.5 * raw["l1"] + 0.5 * raw["normal"] + raw["seg"] + 1.0 * raw["gan"]
    assert rep.total.item() == expected.item()
    only = obj.combine_multitask(raw, obj.WeightState(), ("l1",))
    assert only.total.item() == 0.5 * raw["l1"].item()
    assert set(only.raw) == {"l1"}


def test_combine_missing_loss():
    with pytest.raises(KeyError):
        obj.combine_multitask({"l1": torch.tensor(1.0)}, obj.WeightState(), ("l1", "seg"))


def test_combine_is_linear_in_each_loss():
    ws = obj.WeightState(0.3, -0.2, 0.7, 1.5)
    active = ("l1", "normal", "gan", "seg")
    raw = raw_losses(1)
    base = obj.combine_multitask(raw, ws, active).total.item()
    for name in active:
        bumped = dict(raw)
        bumped[name] = raw[name] * 3
        w = obj.combine_multitask(raw, ws, active).weights[name].item()
        got = obj.combine_multitask(bumped, ws, active).total.item()
        assert got == pytest.approx(base + 2 * raw[name].item() * w, rel=1e-12)


def test_s_gan_receives_no_gradient():
    ws = obj.WeightState()
    rep = obj.combine_multitask(raw_losses(), ws, ("l1", "normal", "gan", "seg"))
    rep.total.backward()
    assert not ws.s_gan.requires_grad
    assert all(ws.s[k].grad is not None for k in ("l1", "normal", "seg"))
    frozen = obj.WeightState(learnable=False)
    assert not any(p.requires_grad for p in frozen.parameters())


def test_weight_state_roundtrip():
    ws = obj.WeightState(0.1, 0.2, 0.3, 0.9)
    assert obj.WeightState.from_dict(ws.to_dict()).values() == ws.values()


def test_report_row_has_every_part():
    rep = obj.combine_multitask(raw_losses(), obj.WeightState(), ("l1", "normal", "gan", "seg"))
    row = rep.as_row()
    total = sum(row[f"loss_{k}"] * row[f"w_{k}"] + row[f"r_{k}"] for k in ("l1", "normal", "seg", "gan"))
    assert row["total"] == pytest.approx(total, rel=1e-12)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_prediction_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    target = t(rng.normal(size=(4, 4)))
    pred = t(rng.normal(size=(4, 4)))
    labels = torch.as_tensor(rng.integers(0, 3, (1, 4, 4)))
    assert_grad_matches(lambda p: obj.l1_loss(p, target), pred)
    assert_grad_matches(lambda p: obj.normal_loss(p, target, gsd=0.5, height_scale=3.0), pred)
    assert_grad_matches(obj.gan_generator_loss, pred)
    assert_grad_matches(lambda p: obj.discriminator_loss(target, p), pred)
    assert_grad_matches(lambda p: obj.discriminator_loss(p, target), pred)
    assert_grad_matches(lambda z: obj.seg_loss(z, labels), t(rng.normal(size=(1, 3, 4, 4))))


@pytest.mark.parametrize("seed", range(5))
def test_weight_gradients_match_finite_differences(seed):
    raw = raw_losses(seed)
    active = ("l1", "normal", "gan", "seg")
    s0 = dict(zip(("l1", "normal", "seg"), np.random.default_rng(seed + 100).normal(size=3)))

    def total(**override):
        v = {**s0, **override}
        return obj.combine_multitask(raw, obj.WeightState(v["l1"], v["normal"], v["seg"], 1.0), active).total

    ws = obj.WeightState(s0["l1"], s0["normal"], s0["seg"], 1.0)
    obj.combine_multitask(raw, ws, active).total.backward()
    eps = 1e-6
    for name in ("l1", "normal", "seg"):
        fd = (total(**{name: s0[name] + eps}).item() - total(**{name: s0[name] - eps}).item()) / (2 * eps)
        assert ws.s[name].grad.item() == pytest.approx(fd, rel=1e-4)
    # analytic form from the regression weighting
    ws = obj.WeightState(s0["l1"], 0.0, 0.0)
    obj.combine_multitask(raw, ws, ("l1",)).total.backward()
    assert ws.s["l1"].grad.item() == pytest.approx(0.5 - 0.5 * math.exp(-s0["l1"]) * raw["l1"].item(), rel=1e-12)


@pytest.mark.parametrize("loss", [0.05, 0.7, 1.0, 4.2, 30.0])
def test_regression_weight_stationary_point(loss):
    def dtotal(s):
        ws = obj.WeightState(s, 0.0, 0.0)
        obj.combine_multitask({"l1": torch.tensor(loss)}, ws, ("l1",)).total.backward()
        return ws.s["l1"].grad.item()

    root = brentq(dtotal, -20, 20, xtol=1e-14)
    assert abs(root - math.log(loss)) <= 1e-6
    eps = 1e-4
    f = lambda s: obj.combine_multitask({"l1": torch.tensor(loss)}, obj.WeightState(s), ("l1",)).total.item()
    assert abs((f(math.log(loss) + eps) - f(math.log(loss) - eps)) / (2 * eps)) <= 1e-6
