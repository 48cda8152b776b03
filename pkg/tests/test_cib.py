import math

import numpy as np
import pytest
import torch

from cate.cib import (
    CalibratedSample,
    PimConfig,
    StochasticEncoder,
    encode,
    infonce_estimate,
    infonce_from_logits,
    kl_to_standard_normal,
    pim_loss,
    sim_loss,
)
from cate.concepts import ConceptBank
from cate.errors import NumericError, ValidationError
from cate.synth import GaussianPair, gaussian_mi_oracle, linear_gaussian_channel_mi

from oracles import max_relative_error


def sample_of(mu, logvar):
    mu = torch.as_tensor(mu, dtype=torch.float64)
    logvar = torch.as_tensor(logvar, dtype=torch.float64)
    return CalibratedSample(mu, logvar, mu, torch.zeros_like(mu))


def random_bank(rng, dim, per_class=(2, 3), agnostic=4):
    cs = {}
    for label, count in enumerate(per_class):
        for j in range(count):
            v = rng.standard_normal(dim)
            cs[f"c{label}_{j}"] = (label, v / np.linalg.norm(v))
    ca = {}
    for j in range(agnostic):
        v = rng.standard_normal(dim)
        ca[f"bg{j}"] = v / np.linalg.norm(v)
    return ConceptBank.from_anchors(cs, ca)


def bank_tensors(bank, label):
    return (
        torch.tensor(bank.all_vectors),
        torch.tensor(bank.positive_anchor(label)),
        torch.tensor(bank.anchors_for(label)),
    )


# -- SIM ----------------------------------------------------------------------
def test_sim_zero_at_prior():
    assert sim_loss(sample_of(np.zeros((5, 4)), np.zeros((5, 4)))).item() == 0.0


def test_sim_closed_form_values():
    assert sim_loss(sample_of([[1.0]], [[0.0]])).item() == 0.5
    assert sim_loss(sample_of([[0.0]], [[math.log(2.0)]])).item() == pytest.approx(0.15343, abs=1e-5)
    assert sim_loss(sample_of([[0.0]], [[math.log(2.0)]])).item() == pytest.approx(0.5 * (1 - math.log(2)), abs=1e-15)


def test_sim_averages_over_all_patches():
    mu = np.array([[1.0], [0.0], [0.0], [0.0]])
    assert sim_loss(sample_of(mu, np.zeros_like(mu))).item() == pytest.approx(0.125)


def test_sim_nonnegative_and_zero_only_at_prior(rng):
    for _ in range(200):
        mu = rng.standard_normal((3, 5)) * rng.random()
        logvar = rng.standard_normal((3, 5)) * rng.random()
        val = sim_loss(sample_of(mu, logvar)).item()
        assert val >= 0.0
        if val == 0.0:
            assert np.all(mu == 0) and np.all(logvar == 0)


def test_kl_matches_monte_carlo(rng):
    # KL(q||p) = E_q[log q - log p] by sampling
    mu, logvar = np.array([0.7, -0.3]), np.array([0.4, -1.1])
    std = np.exp(0.5 * logvar)
    z = mu + std * rng.standard_normal((400_000, 2))
    log_q = -0.5 * (((z - mu) / std) ** 2 + logvar + math.log(2 * math.pi))
    log_p = -0.5 * (z**2 + math.log(2 * math.pi))
    mc = float((log_q - log_p).sum(1).mean())
    exact = kl_to_standard_normal(torch.tensor(mu), torch.tensor(logvar)).item()
    assert exact == pytest.approx(mc, abs=5e-3)


def test_sim_upper_bounds_linear_gaussian_mi(rng):
    for _ in range(3):
        d_in, d_out = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        w = rng.standard_normal((d_out, d_in))
        sigma = float(rng.uniform(0.3, 1.5))
        x = rng.standard_normal((50_000, d_in))
        mu = x @ w.T
        bound = sim_loss(sample_of(mu, np.full_like(mu, 2 * math.log(sigma)))).item()
        assert bound >= linear_gaussian_channel_mi(w, sigma) - 0.02


# -- encoder ------------------------------------------------------------------
def test_encode_eval_mode_returns_mean():
    torch.manual_seed(0)
    enc = StochasticEncoder(6).double()
    x = torch.randn(5, 6, dtype=torch.float64)
    out = encode(enc, x, train_mode=False)
    assert torch.equal(out.alpha, out.mu)
    assert torch.count_nonzero(out.epsilon) == 0


def test_encode_zero_epsilon_gives_mean():
    torch.manual_seed(0)
    enc = StochasticEncoder(6).double()
    x = torch.randn(5, 6, dtype=torch.float64)
    out = encode(enc, x, train_mode=True, epsilon=torch.zeros(5, 6, dtype=torch.float64))
    assert torch.equal(out.alpha, out.mu)


def test_reparameterization_identity_exact():
    torch.manual_seed(1)
    enc = StochasticEncoder(8)
    gen = torch.Generator().manual_seed(3)
    out = encode(enc, torch.randn(7, 8), generator=gen)
    assert torch.equal(out.alpha, out.mu + torch.exp(0.5 * out.logvar) * out.epsilon)


def test_output_width_matches_input():
    enc = StochasticEncoder(12, hidden=[5])
    mu, logvar = enc(torch.randn(3, 12))
    assert mu.shape == logvar.shape == (3, 12)


def test_logvar_is_clamped():
    enc = StochasticEncoder(4, init_logvar=50.0)
    _, logvar = enc(torch.zeros(2, 4))
    assert logvar.max().item() <= 10.0


def test_encode_reports_non_finite_layer():
    enc = StochasticEncoder(4)
    with torch.no_grad():
        enc.mu_net[-1].bias.fill_(float("inf"))
    with pytest.raises(NumericError, match="mu_net"):
        encode(enc, torch.zeros(2, 4))


def test_encode_rejects_non_finite_input():
    with pytest.raises(ValidationError):
        encode(StochasticEncoder(2), torch.tensor([[float("nan"), 0.0]]))


def test_reparameterization_moments():
    enc = StochasticEncoder(3).double()
    with torch.no_grad():
        for net, bias in ((enc.mu_net, [0.5, -1.0, 2.0]), (enc.logvar_net, [0.0, -1.5, 0.8])):
            net[-1].weight.zero_()
            net[-1].bias.copy_(torch.tensor(bias))
    n = 100_000
    out = encode(enc, torch.zeros(n, 3, dtype=torch.float64), generator=torch.Generator().manual_seed(11))
    mu = out.mu[0].detach().numpy()
    var = np.exp(out.logvar[0].detach().numpy())
    draws = out.alpha.detach().numpy()
    assert np.all(np.abs(draws.mean(0) - mu) < 4 * np.sqrt(var / n))
    assert np.all(np.abs(draws.var(0) / var - 1) < 0.05)


# -- PIM ----------------------------------------------------------------------
def test_infonce_uniform_logits():
    logits = torch.zeros(3, 24, dtype=torch.float64)
    out = infonce_from_logits(torch.zeros(3, dtype=torch.float64), logits, 1.0)
    torch.testing.assert_close(out, torch.full((3,), math.log(24), dtype=torch.float64))


def test_infonce_single_positive_formula():
    logits = torch.zeros(1, 24, dtype=torch.float64)
    logits[0, 0] = 1.0
    out = infonce_from_logits(torch.tensor([1.0], dtype=torch.float64), logits, 1.0).item()
    assert out == pytest.approx(-1 + math.log(math.e + 23), abs=1e-12)
    assert out == pytest.approx(2.2472, abs=1e-4)


def test_infonce_decreases_with_positive_similarity():
    prev = math.inf
    for s in np.linspace(-1, 1, 21):
        logits = torch.zeros(1, 10, dtype=torch.float64)
        logits[0, 0] = s
        val = infonce_from_logits(torch.tensor([s], dtype=torch.float64), logits, 0.5).item()
        assert val < prev
        prev = val


def test_pim_loss_orthogonal_features_give_log_m_plus_n():
    # one anchor per class, so the class mean equals the anchor; features orthogonal to every anchor
    eye = np.eye(6)
    bank = ConceptBank.from_anchors({"a": (0, eye[0]), "b": (1, eye[1])}, {"c": eye[2], "d": eye[3]})
    alpha = torch.tensor(np.stack([eye[4], eye[5], eye[4] + eye[5]]))
    anchors, pos, own = bank_tensors(bank, 0)
    loss = pim_loss(alpha, anchors, pos, [0, 1, 2], PimConfig(tau=0.3))
    assert loss.item() == pytest.approx(math.log(4), abs=1e-12)


def test_pim_loss_matches_direct_formula(rng):
    bank = random_bank(rng, 5)
    anchors, pos, own = bank_tensors(bank, 1)
    alpha = torch.tensor(rng.standard_normal((6, 5)))
    sel = [4, 1, 2]
    tau = 0.2
    expected = []
    for i in sel:
        a = alpha[i].numpy() / np.linalg.norm(alpha[i].numpy())
        s_pos = a @ bank.positive_anchor(1)
        denom = sum(math.exp(a @ c / tau) for c in bank.all_vectors)
        expected.append(-s_pos / tau + math.log(denom))
    got = pim_loss(alpha, anchors, pos, sel, PimConfig(tau=tau)).item()
    assert got == pytest.approx(np.mean(expected), rel=1e-12)


def test_pim_loss_max_positive(rng):
    bank = random_bank(rng, 5)
    anchors, pos, own = bank_tensors(bank, 0)
    alpha = torch.tensor(rng.standard_normal((3, 5)))
    loss_max = pim_loss(alpha, anchors, pos, [0, 1], PimConfig(tau=0.5, positive="max"), own)
    a = torch.nn.functional.normalize(alpha[[0, 1]], dim=-1)
    expected = (-(a @ own.T).max(1).values / 0.5 + torch.logsumexp(a @ anchors.T / 0.5, 1)).mean()
    torch.testing.assert_close(loss_max, expected)


def test_pim_loss_rotation_invariant(rng):
    bank = random_bank(rng, 6)
    anchors, pos, _ = bank_tensors(bank, 0)
    alpha = torch.tensor(rng.standard_normal((5, 6)))
    q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    rot = torch.tensor(q)
    for normalize in (True, False):
        cfg = PimConfig(tau=0.1, normalize=normalize)
        base = pim_loss(alpha, anchors, pos, [0, 2, 4], cfg)
        turned = pim_loss(alpha @ rot, anchors @ rot, pos @ rot, [0, 2, 4], cfg)
        assert turned.item() == pytest.approx(base.item(), rel=1e-10)


def test_pim_loss_rejects_empty_selection(rng):
    bank = random_bank(rng, 4)
    anchors, pos, _ = bank_tensors(bank, 0)
    with pytest.raises(ValidationError):
        pim_loss(torch.ones(3, 4, dtype=torch.float64), anchors, pos, [], PimConfig())
    with pytest.raises(ValidationError):
        pim_loss(torch.ones(3, 4, dtype=torch.float64), anchors, pos, [5], PimConfig())


def test_pim_config_validation():
    with pytest.raises(ValidationError):
        PimConfig(tau=0.0)
    with pytest.raises(ValidationError):
        PimConfig(positive="median")


# -- gradients ------------------------------------------------------------------
@pytest.mark.parametrize("trial", range(4))
def test_pim_and_sim_gradients_match_finite_differences(trial):
    rng = np.random.default_rng(100 + trial)
    n, c = int(rng.integers(2, 9)), int(rng.integers(2, 9))
    torch.manual_seed(trial)
    enc = StochasticEncoder(c, hidden=[c]).double()
    bank = random_bank(rng, c)
    anchors, pos, _ = bank_tensors(bank, 1)
    x = torch.tensor(rng.standard_normal((n, c)))
    eps = torch.tensor(rng.standard_normal((n, c)))
    sel = sorted(set(rng.integers(0, n, 3).tolist()))
    params = list(enc.parameters())
    pim = lambda: pim_loss(encode(enc, x, epsilon=eps), anchors, pos, sel, PimConfig(tau=0.5))
    sim = lambda: sim_loss(encode(enc, x, epsilon=eps))
    assert max_relative_error(pim, params) < 1e-4
    assert max_relative_error(sim, params) < 1e-4


# -- InfoNCE estimator ------------------------------------------------------------
def test_infonce_estimate_ceiling_and_saturation(rng):
    a = 5.0 * rng.standard_normal((128, 8))
    est = infonce_estimate(a, a, tau=0.01)
    assert est <= math.log(128)
    assert est == pytest.approx(math.log(128), abs=1e-3)


def independent_estimates(tau, seed=5):
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(20):
        a = rng.standard_normal((256, 1))
        b = rng.permutation(rng.standard_normal((256, 1)))
        vals.append(infonce_estimate(a, b, tau=tau))
    return np.mean(vals), np.std(vals, ddof=1) / math.sqrt(len(vals))


def test_infonce_estimate_independent_pairs_near_zero():
    # a fixed critic is biased below zero by Jensen; a flat critic makes the bias negligible
    mean, se = independent_estimates(100.0)
    assert abs(mean) <= 3 * se


def test_infonce_estimate_independent_pairs_never_above_zero():
    for tau in (1.0, 20.0):
        mean, se = independent_estimates(tau)
        assert mean <= 3 * se


def test_infonce_estimate_lower_bounds_gaussian_mi():
    rng = np.random.default_rng(6)
    pair = GaussianPair(0.9, 1)
    vals = [infonce_estimate(*pair.sample(256, rng), tau=1.0) for _ in range(20)]
    se = np.std(vals, ddof=1) / math.sqrt(len(vals))
    assert np.mean(vals) <= gaussian_mi_oracle(pair) + 3 * se
    assert max(vals) <= math.log(256)
    assert np.mean(vals) > 0.3  # the estimator does pick up the dependence


def test_infonce_estimate_validation():
    with pytest.raises(ValidationError):
        infonce_estimate(np.zeros((1, 2)), np.zeros((1, 2)))
    with pytest.raises(ValidationError):
        infonce_estimate(np.zeros((3, 2)), np.zeros((4, 2)))
