import math

import numpy as np
import pytest

from discondvae import objective as O
from discondvae import tensor as T
from discondvae.models import EncoderOutput
from discondvae.tensor import Tensor, backward


def _weights(bz=1.0, bw=1.0, bc=1.0, cz=0.0, cw=0.0, cc=0.0, ramp=100):
    return O.LossWeights(
        beta_z=bz, beta_w=bw, beta_c=bc,
        c_z=O.CapacitySchedule(cz, ramp),
        c_w=O.CapacitySchedule(cw, ramp),
        c_c=O.CapacitySchedule(cc, ramp),
    )


def _fake_encoder_output(rs, b=4, pb=3, d=3, pr=2, grad=False):
    logits = rs.randn(b, d)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    alpha = e / e.sum(axis=1, keepdims=True)
    return EncoderOutput(
        z_mu=Tensor(rs.randn(b, pb), requires_grad=grad),
        z_logvar=Tensor(rs.randn(b, pb) * 0.3, requires_grad=grad),
        logits=Tensor(logits),
        alpha=Tensor(alpha),
        w_mu=Tensor(rs.randn(b, d, pr)),
        w_logvar=Tensor(rs.randn(b, d, pr) * 0.3),
    )


# -- capacity schedule ----------------------------------------------------

def test_capacity_linear_ramp_then_clamp():
    s = O.CapacitySchedule(target=25.0, ramp_iters=100)
    assert O.capacity_at(s, 0) == 0.0
    assert O.capacity_at(s, 50) == pytest.approx(12.5)
    assert O.capacity_at(s, 100) == pytest.approx(25.0)
    assert O.capacity_at(s, 100_000) == pytest.approx(25.0)


def test_capacity_monotone_nondecreasing():
    s = O.CapacitySchedule(target=7.0, ramp_iters=13)
    vals = [O.capacity_at(s, i) for i in range(40)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_capacity_negative_iteration_rejected():
    with pytest.raises(ValueError, match="iteration"):
        O.capacity_at(O.CapacitySchedule(1.0, 10), -1)


def test_capacity_schedule_validation():
    with pytest.raises(ValueError, match="target"):
        O.CapacitySchedule(-1.0, 10)
    with pytest.raises(ValueError, match="ramp_iters"):
        O.CapacitySchedule(1.0, 0)


def test_loss_weights_validation():
    with pytest.raises(ValueError, match="beta_w"):
        _weights(bw=-0.5)
    with pytest.raises(ValueError, match="beta_z"):
        _weights(bz=float("nan"))


# -- reconstruction -------------------------------------------------------

def test_reconstruction_zero_logits_is_log2_per_pixel():
    x = np.random.RandomState(0).randint(0, 2, (3, 1, 4, 4)).astype(np.float32)
    logits = Tensor(np.zeros((3, 1, 4, 4), dtype=np.float32))
    got = O.reconstruction_loss(x, logits).item()
    assert got == pytest.approx(16 * math.log(2), rel=1e-6)


def test_reconstruction_matches_numpy_oracle():
    rs = np.random.RandomState(1)
    x = rs.rand(5, 1, 3, 3).astype(np.float32)
    l = rs.randn(5, 1, 3, 3).astype(np.float32)
    # stable BCE: max(l, 0) - l*x + log(1 + exp(-|l|)), summed per example
    per_pixel = np.maximum(l, 0) - l * x + np.log1p(np.exp(-np.abs(l)))
    want = per_pixel.reshape(5, -1).sum(axis=1).mean()
    got = O.reconstruction_loss(x, Tensor(l)).item()
    assert got == pytest.approx(want, rel=1e-5)


def test_reconstruction_perfect_logits_near_zero():
    x = np.random.RandomState(2).randint(0, 2, (2, 1, 4, 4)).astype(np.float32)
    logits = Tensor((x * 2 - 1) * 30.0)  # saturate the right way
    assert O.reconstruction_loss(x, logits).item() < 1e-6


# -- full objectives ------------------------------------------------------

def test_discond_loss_term_by_term_audit():
    rs = np.random.RandomState(3)
    out = _fake_encoder_output(rs, b=4, pb=3, d=3, pr=2)
    prior_mu = rs.randn(3, 2)
    x = rs.randint(0, 2, (4, 1, 2, 2)).astype(np.float64)
    logits = Tensor(rs.randn(4, 1, 2, 2))
    w = _weights(bz=4.0, bw=3.0, bc=20.0, cz=25.0, cw=10.0, cc=5.0, ramp=100)
    it = 40

    br = O.discond_loss(x, out, logits, prior_mu, w, it)

    l = logits.data
    recon = (np.maximum(l, 0) - l * x + np.log1p(np.exp(-np.abs(l)))).reshape(4, -1).sum(1).mean()
    kl_z = (0.5 * (out.z_mu.data ** 2 + np.exp(out.z_logvar.data)
                   - out.z_logvar.data - 1).sum(1)).mean()
    per_mode = 0.5 * ((out.w_mu.data - prior_mu) ** 2 + np.exp(out.w_logvar.data)
                      - out.w_logvar.data - 1).sum(-1)
    kl_w = (out.alpha.data * per_mode).sum(1).mean()
    kl_c = (out.alpha.data * np.log(out.alpha.data * 3)).sum(1).mean()

    assert br.recon == pytest.approx(recon, rel=1e-6)
    assert br.kl_z == pytest.approx(kl_z, rel=1e-6)
    assert br.kl_w == pytest.approx(kl_w, rel=1e-6)
    assert br.kl_c == pytest.approx(kl_c, rel=1e-6)
    assert br.cap_z == pytest.approx(25.0 * 0.4)
    assert br.cap_w == pytest.approx(10.0 * 0.4)
    assert br.cap_c == pytest.approx(5.0 * 0.4)
    want_total = (recon + 4.0 * abs(kl_z - 10.0) + 3.0 * abs(kl_w - 4.0)
                  + 20.0 * abs(kl_c - 2.0))
    assert br.total.item() == pytest.approx(want_total, rel=1e-6)


def test_breakdown_identity_holds():
    rs = np.random.RandomState(4)
    out = _fake_encoder_output(rs)
    x = rs.randint(0, 2, (4, 1, 2, 2)).astype(np.float64)
    w = _weights(bz=2.0, bw=1.5, bc=8.0, cz=3.0, cw=1.0, cc=0.5, ramp=10)
    br = O.discond_loss(x, out, Tensor(rs.randn(4, 1, 2, 2)), rs.randn(3, 2), w, 7)
    want = (br.recon + 2.0 * abs(br.kl_z - br.cap_z)
            + 1.5 * abs(br.kl_w - br.cap_w) + 8.0 * abs(br.kl_c - br.cap_c))
    assert br.total.item() == pytest.approx(want, rel=1e-6)


def test_joint_loss_drops_private_term():
    rs = np.random.RandomState(5)
    out = _fake_encoder_output(rs)
    x = rs.randint(0, 2, (4, 1, 2, 2)).astype(np.float64)
    logits = Tensor(rs.randn(4, 1, 2, 2))
    w = _weights(bz=2.0, bw=100.0, bc=8.0)  # beta_w must not matter
    br = O.jointvae_loss(x, out, logits, w, 0)
    assert br.kl_w == 0.0 and br.cap_w == 0.0
    want = br.recon + 2.0 * abs(br.kl_z - br.cap_z) + 8.0 * abs(br.kl_c - br.cap_c)
    assert br.total.item() == pytest.approx(want, rel=1e-6)


def test_penalty_gradient_sign_tracks_capacity_side():
    # |KL - C| pushes KL down when above capacity and up when below
    def grad_of_mu(cap_target):
        out = _fake_encoder_output(np.random.RandomState(6), grad=True)
        x = np.zeros((4, 1, 2, 2))
        w = _weights(bz=1.0, bw=0.0, bc=0.0, cz=cap_target, ramp=1)
        br = O.discond_loss(x, out, Tensor(np.zeros((4, 1, 2, 2))), np.zeros((3, 2)), w, 5)
        backward(br.total)
        return out.z_mu.grad, out.z_mu.data

    g_above, mu = grad_of_mu(cap_target=0.0)      # KL > 0 = C
    np.testing.assert_allclose(np.sign(g_above), np.sign(mu / 4))
    g_below, mu = grad_of_mu(cap_target=1e6)      # KL < C
    np.testing.assert_allclose(np.sign(g_below), -np.sign(mu / 4))


def test_total_is_differentiable_graph_node():
    out = _fake_encoder_output(np.random.RandomState(7), grad=True)
    x = np.zeros((4, 1, 2, 2))
    br = O.discond_loss(x, out, Tensor(np.zeros((4, 1, 2, 2))), np.zeros((3, 2)),
                        _weights(), 3)
    backward(br.total)
    assert out.z_mu.grad is not None and np.isfinite(out.z_mu.grad).all()


# -- logging --------------------------------------------------------------

def test_csv_row_formatting():
    out = _fake_encoder_output(np.random.RandomState(8))
    x = np.zeros((4, 1, 2, 2))
    br = O.discond_loss(x, out, Tensor(np.zeros((4, 1, 2, 2))), np.zeros((3, 2)),
                        _weights(), 12)
    row = br.csv_row(12)
    fields = row.split(",")
    assert len(fields) == len(O.CSV_HEADER.split(","))
    assert fields[0] == "12"
    for f in fields[1:]:
        assert len(f.split(".")[1]) == 6  # %.6f
    assert float(fields[-1]) == pytest.approx(br.total.item(), abs=1e-6)
