import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from mumis.modelzoo import build_model
from mumis.sensitivity import (
    NumericalError,
    all_class_norms,
    draw_irrelevant,
    jacobian_norms,
    logit_input_grad_norms,
    mean_irrelevant_norm,
    mumis_loss,
    mumis_objective,
    mumis_param_grad,
    pairwise_grad_similarity,
    read_records_csv,
    sensitivity_record,
    write_records_csv,
)


def toy_batch(n=6, classes=3, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(n, 1, 2, 4, generator=g, dtype=torch.float64)
    y = torch.randint(0, classes, (n,), generator=g)
    return x, y, draw_irrelevant(y, classes, g)


def fd_input_grad(model, x, cls, h=1e-6):
    """Central differences of f_cls(x_i) w.r.t. every input coordinate."""
    flat = x.flatten(1).clone()
    grads = torch.zeros_like(flat)
    for i in range(len(flat)):
        for j in range(flat.shape[1]):
            up, dn = flat[i].clone(), flat[i].clone()
            up[j] += h
            dn[j] -= h
            fu = model(up.view(1, *x.shape[1:]))[0, cls[i]]
            fd = model(dn.view(1, *x.shape[1:]))[0, cls[i]]
            grads[i, j] = (fu - fd) / (2 * h)
    return grads


def fd_param_grad(model, loss_fn, h=1e-5):
    params = list(model.parameters())
    theta = parameters_to_vector(params).detach().clone()
    out = torch.zeros_like(theta)
    for k in range(len(theta)):
        for sign in (1, -1):
            t = theta.clone()
            t[k] += sign * h
            vector_to_parameters(t, params)
            out[k] += sign * loss_fn()
    vector_to_parameters(theta, params)
    return out / (2 * h)


def test_input_grad_norms_match_finite_differences(mlp64):
    x, y, _ = toy_batch()
    with torch.no_grad():
        g = fd_input_grad(mlp64, x, y)
    got = logit_input_grad_norms(mlp64, x, y)
    torch.testing.assert_close(got, g.norm(dim=1), rtol=1e-7, atol=1e-9)
    torch.testing.assert_close(logit_input_grad_norms(mlp64, x, y, squared=True), got**2)


def test_param_grad_matches_finite_differences(mlp64):
    x, y, yo = toy_batch()
    analytic = torch.cat([g.flatten() for g in mumis_param_grad(mlp64, x, y, yo).values()])
    numeric = fd_param_grad(mlp64, lambda: mumis_loss(mlp64, x, y, yo).total)
    rel = (analytic - numeric).norm() / numeric.norm()
    assert rel < 1e-6


@pytest.mark.parametrize("kappa", [1.0, 2.5])
def test_reweighted_param_grad_matches_finite_differences(mlp64, kappa):
    x, y, yo = toy_batch(seed=3)
    analytic = torch.cat([g.flatten() for g in mumis_param_grad(mlp64, x, y, yo, kappa).values()])
    numeric = fd_param_grad(mlp64, lambda: mumis_loss(mlp64, x, y, yo, kappa).total)
    assert (analytic - numeric).norm() / numeric.norm() < 1e-6


def test_linear_model_closed_form():
    torch.manual_seed(1)
    model = build_model("linear", (1, 2, 4), 4).double()
    x = torch.randn(10, 1, 2, 4, dtype=torch.float64)
    y = torch.tensor([0, 1, 2, 3, 0, 1, 2, 3, 0, 0])
    yo = torch.tensor([1, 2, 3, 0, 2, 3, 0, 1, 3, 1])
    W = model.fc.weight.detach()
    # the input gradient of logit c is the row W_c, independent of x
    expected_norms = W.norm(dim=1)
    torch.testing.assert_close(all_class_norms(model, x), expected_norms.expand(10, 4), rtol=0, atol=1e-12)
    counts = torch.bincount(y, minlength=4).double() - torch.bincount(yo, minlength=4).double()
    expected = 2.0 / len(x) * counts[:, None] * W
    grads = mumis_param_grad(model, x, y, yo)
    assert (grads["fc.weight"] - expected).abs().max() < 1e-10
    assert grads["fc.bias"].abs().max() == 0
    value = mumis_loss(model, x, y, yo)
    assert value.total == pytest.approx(float((W.pow(2).sum(1) * counts).sum() / len(x)), abs=1e-10)


def test_kappa_one_is_bitwise_plain_loss(mlp64):
    x, y, yo = toy_batch()
    plain, _ = mumis_objective(mlp64, x, y, yo, None)
    one, _ = mumis_objective(mlp64, x, y, yo, 1.0)
    assert torch.equal(plain, one)
    g0 = mumis_param_grad(mlp64, x, y, yo, None)
    g1 = mumis_param_grad(mlp64, x, y, yo, 1.0)
    assert all(torch.equal(g0[k], g1[k]) for k in g0)


@settings(max_examples=30, deadline=None)
@given(kappa=st.floats(1.0, 8.0), seed=st.integers(0, 1000), per_sample=st.booleans())
def test_loss_decomposition(kappa, seed, per_sample):
    torch.manual_seed(0)
    model = build_model("mlp", (1, 2, 4), 3, hidden=12).double()
    x, y, yo = toy_batch(seed=seed)
    v = mumis_loss(model, x, y, yo, kappa, per_sample_tau=per_sample)
    if per_sample:
        tc = logit_input_grad_norms(model, x, y, squared=True)
        oc = logit_input_grad_norms(model, x, yo, squared=True)
        tau = (tc >= oc).double()
        expected = ((kappa - 1) * tau + 1) * tc - ((1 - kappa) * tau + kappa) * oc
        assert v.total == pytest.approx(float(expected.mean()), abs=1e-9)
    else:
        assert v.total == pytest.approx(v.alpha_c * v.tc_term - v.alpha_cprime * v.oc_term, abs=1e-9)
        assert {v.alpha_c, v.alpha_cprime} == ({1.0, kappa} if kappa != 1.0 else {1.0})
        # the larger term is the one that receives kappa
        big = v.alpha_c if v.tc_term >= v.oc_term else v.alpha_cprime
        assert big == kappa


def test_variants(mlp64):
    x, y, yo = toy_batch()
    full = mumis_loss(mlp64, x, y, yo)
    assert mumis_loss(mlp64, x, y, yo, variant="tc_only").total == pytest.approx(full.tc_term)
    assert mumis_loss(mlp64, x, y, yo, variant="oc_only").total == pytest.approx(-full.oc_term)
    assert full.total == pytest.approx(full.tc_term - full.oc_term)
    with pytest.raises(ValueError):
        mumis_loss(mlp64, x, y, yo, variant="both")


def test_objective_rejects_bad_input(mlp64):
    x, y, _ = toy_batch()
    with pytest.raises(ValueError, match="differ"):
        mumis_loss(mlp64, x, y, y)
    with pytest.raises(ValueError, match="kappa"):
        mumis_loss(mlp64, x, y, (y + 1) % 3, kappa=0.5)
    with pytest.raises(IndexError):
        logit_input_grad_norms(mlp64, x, torch.full((6,), 3))


def test_non_finite_gradient_raises(mlp64):
    x, y, yo = toy_batch()
    with torch.no_grad():
        mlp64.net[1].weight[0, 0] = float("inf")
    with pytest.raises(NumericalError):
        mumis_param_grad(mlp64, x, y, yo)


@settings(max_examples=50, deadline=None)
@given(C=st.integers(2, 12), n=st.integers(1, 64), seed=st.integers(0, 2**31 - 1))
def test_draw_irrelevant_never_returns_label(C, n, seed):
    g = torch.Generator().manual_seed(seed)
    y = torch.randint(0, C, (n,), generator=g)
    yo = draw_irrelevant(y, C, g)
    assert bool((yo != y).all())
    assert int(yo.min()) >= 0 and int(yo.max()) < C


def test_draw_irrelevant_is_uniform():
    g = torch.Generator().manual_seed(0)
    y = torch.full((20000,), 4)
    counts = np.bincount(draw_irrelevant(y, 10, g).numpy(), minlength=10)
    assert counts[4] == 0
    assert stats.chisquare(np.delete(counts, 4)).pvalue > 1e-3
    with pytest.raises(ValueError):
        draw_irrelevant(torch.zeros(3, dtype=torch.long), 1)


def test_norms_are_batch_invariant():
    torch.manual_seed(0)
    model = build_model("convnet", (1, 8, 8), 10, width=4).eval()
    x = torch.randn(9, 1, 8, 8)
    y = torch.arange(9)
    whole = logit_input_grad_norms(model, x, y)
    single = logit_input_grad_norms(model, x, y, batch_size=1)
    torch.testing.assert_close(whole, single, rtol=1e-5, atol=1e-6)


def test_sensitivity_record_identities(mlp64, tmp_path):
    x, y, _ = toy_batch(n=8)
    norms = all_class_norms(mlp64, x)
    torch.testing.assert_close(jacobian_norms(mlp64, x), norms.pow(2).sum(1).sqrt())
    recs = sensitivity_record(mlp64, x, y, sample_ids=range(100, 108))
    for i, r in enumerate(recs):
        assert r.sample_id == 100 + i
        assert r.target_norm == pytest.approx(float(norms[i, y[i]]))
        others = [float(norms[i, c]) for c in range(3) if c != int(y[i])]
        assert r.irrelevant_mean_norm == pytest.approx(np.mean(others))
        assert r.gap == pytest.approx(r.target_norm - r.irrelevant_mean_norm)
    assert mean_irrelevant_norm(mlp64, x, y) == pytest.approx(np.mean([r.irrelevant_mean_norm for r in recs]))
    path = write_records_csv(recs, tmp_path / "recs.csv")
    assert read_records_csv(path) == recs


@pytest.mark.parametrize("metric", ["ce_loss", "logit", "tc_sens", "oc_sens"])
def test_similarity_matrix_shape(mlp64, metric):
    x, y, _ = toy_batch(n=5)
    m = pairwise_grad_similarity(mlp64, x, y, metric)
    assert m.values.shape == (5, 5)
    np.testing.assert_allclose(m.values, m.values.T)
    np.testing.assert_allclose(np.diag(m.values), 1.0)
    assert np.all(np.abs(m.values) <= 1.0)
    intra, inter = m.block_means()
    assert -1 <= intra <= 1 and 0 <= inter <= 1


def test_similarity_flags_zero_gradients():
    model = build_model("linear", (1, 2, 2), 3).double()
    with torch.no_grad():
        model.fc.weight.zero_()
        model.fc.bias.zero_()
    x = torch.randn(4, 1, 2, 2, dtype=torch.float64)
    m = pairwise_grad_similarity(model, x, torch.tensor([0, 1, 2, 0]), "tc_sens")
    assert m.flagged.all()
    assert np.isnan(m.values).all()
    with pytest.raises(ValueError):
        pairwise_grad_similarity(model, x[:1], torch.tensor([0]), "logit")
    with pytest.raises(ValueError):
        pairwise_grad_similarity(model, x, torch.tensor([0, 1, 2, 0]), "hinge")


def test_logit_similarity_matches_manual_gradient():
    torch.manual_seed(2)
    model = build_model("linear", (1, 1, 3), 2).double()
    x = torch.randn(3, 1, 1, 3, dtype=torch.float64)
    y = torch.tensor([0, 0, 1])
    m = pairwise_grad_similarity(model, x, y, "logit")
    # d f_c / d (W, b) is (x, 1) placed in row c, so cross-class pairs are orthogonal
    xi = torch.cat([x.flatten(1), torch.ones(3, 1, dtype=torch.float64)], 1)
    cos01 = float(torch.nn.functional.cosine_similarity(xi[0], xi[1], dim=0))
    assert m.values[0, 1] == pytest.approx(cos01, abs=1e-12)
    assert m.values[0, 2] == pytest.approx(0.0, abs=1e-12)
