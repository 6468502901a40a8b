import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fimaq import fim, ops
from fimaq.autodiff import Tape, finite_diff_hessian
from fimaq.zoo import ToyViT, ToyViTConfig

SMALL = ToyViTConfig(blocks=2, tokens=3, dim=8, heads=2, mlp_ratio=2.0, classes=4, patch_dim=4)


def vit_tail(seed):
    model = ToyViT.init(SMALL, seed)
    rng = np.random.default_rng(seed + 100)
    for k in model.params:
        model.params[k] = model.params[k] + 0.2 * rng.normal(size=model.params[k].shape)
    return model.tail(0), rng.normal(size=(SMALL.tokens, SMALL.dim))


def analytic_fim(z):
    p = np.exp(z - z.max())
    p /= p.sum()
    return np.diag(p) - np.outer(p, p)


# -- exact oracle ------------------------------------------------------------

def test_exact_fim_identity_tail_at_origin():
    np.testing.assert_allclose(fim.exact_fim(fim.identity_tail, np.zeros(2)), [[0.25, -0.25], [-0.25, 0.25]],
                               atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(2, 8), elements=st.floats(-5, 5)))
def test_exact_fim_identity_tail_matches_closed_form(z):
    f = fim.exact_fim(fim.identity_tail, z)
    np.testing.assert_allclose(f, analytic_fim(z), atol=1e-12)
    np.testing.assert_allclose(f.sum(axis=1), 0.0, atol=1e-12)


def test_exact_fim_saturated_is_zero():
    assert np.abs(fim.exact_fim(fim.identity_tail, np.array([20.0, -20.0]))).max() <= 1e-7


def test_exact_fim_rejects_nonfinite_logits():
    with pytest.raises(FloatingPointError):
        fim.exact_fim(fim.identity_tail, np.array([np.inf, 0.0]))


def test_class_weights_sum_to_one():
    tail, z = vit_tail(0)
    assert sum(s.weight for s in fim.class_scores(tail, z)) == pytest.approx(1.0, abs=1e-10)


def test_exact_fim_symmetric_psd_on_vit_tails():
    for seed in range(20):
        tail, z = vit_tail(seed)
        f = fim.exact_fim(tail, z)
        assert np.abs(f - f.T).max() <= 1e-10
        assert np.linalg.eigvalsh(f).min() >= -1e-8


def test_score_expectation_vanishes():
    assert np.abs(fim.score_expectation(fim.identity_tail, np.zeros(2))).max() <= 1e-12
    z = np.random.default_rng(0).normal(size=10)
    assert np.abs(fim.score_expectation(fim.identity_tail, z)).max() <= 1e-10
    tail, zv = vit_tail(1)
    assert np.abs(fim.score_expectation(tail, zv)).max() <= 1e-8


def test_exact_fim_equals_expected_negative_hessian():
    z = np.random.default_rng(2).normal(size=5)
    probs = ops.softmax(z).data
    neg_h = -sum(
        probs[y] * finite_diff_hessian(lambda v, y=y: float(ops.log_softmax(v).data[y]), z, 1e-4)
        for y in range(5)
    )
    f = fim.exact_fim(fim.identity_tail, z)
    assert np.all(np.abs(f - neg_h) <= np.maximum(1e-5, 0.01 * np.abs(f)))


# -- probes ------------------------------------------------------------------

def test_collect_perturbation_examples():
    z = np.zeros(2)
    d, g = fim.collect_perturbation(fim.identity_tail, z, np.zeros((3, 2)))
    np.testing.assert_array_equal(g, 0.0)
    eps = 1e-3
    _, g = fim.collect_perturbation(fim.identity_tail, z, np.array([[eps, -eps]]))
    np.testing.assert_allclose(g, [0.5 * eps, -0.5 * eps], atol=10 * eps**2)
    d, _ = fim.collect_perturbation(fim.identity_tail, z, np.eye(2))
    np.testing.assert_array_equal(d, [0.5, 0.5])
    with pytest.raises(ValueError):
        fim.collect_perturbation(fim.identity_tail, z, np.zeros((0, 2)))


def test_kl_grads_are_per_sample():
    rng = np.random.default_rng(3)
    z, dz = rng.normal(size=(4, 6)), 0.1 * rng.normal(size=(4, 6))
    kl, g = fim.kl_grads(fim.identity_tail, z, dz)
    for i in range(4):
        kl_i, g_i = fim.kl_grads(fim.identity_tail, z[i:i + 1], dz[i:i + 1])
        assert kl[i] == pytest.approx(kl_i[0], rel=1e-13)
        np.testing.assert_allclose(g[i], g_i[0], rtol=1e-12, atol=1e-16)


# -- estimators --------------------------------------------------------------

def test_estimate_diag_examples():
    np.testing.assert_array_equal(fim.estimate_diag([1, 2], [2, 6]).diag, [2, 3])
    np.testing.assert_array_equal(fim.estimate_diag([0, 1], [1, 1]).diag, [0, 1])
    est = fim.estimate_diag([1, 1], [-1, 2])
    np.testing.assert_array_equal(est.diag, [0, 2])
    assert est.clamp_fraction == 0.5


def test_rank1_examples():
    u = fim.rank1_factor([1, 0], [2, 0])
    np.testing.assert_allclose(u, [np.sqrt(2), 0])
    np.testing.assert_allclose(np.outer(u, u) @ [1, 0], [2, 0])
    np.testing.assert_allclose(fim.rank1_factor([1, 1], [3, 3]), np.array([3, 3]) / np.sqrt(6))
    with pytest.raises(fim.FallbackToDiag):
        fim.rank1_factor([1, 0], [0, 1])


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-3, 3)), arrays(np.float64, 6, elements=st.floats(-3, 3)))
def test_rank1_reproduces_gradient(dz, g):
    if g @ dz <= 1e-6:
        return
    u = fim.rank1_factor(dz, g)
    np.testing.assert_allclose(np.outer(u, u) @ dz, g, rtol=1e-10, atol=1e-10 * np.abs(g).max())


def test_loss_examples():
    u = fim.rank1_factor([1, 0], [2, 0])
    assert float(fim.loss_rank1(np.array([1.0, 0.0]), u).data) == pytest.approx(2.0)
    assert float(fim.loss_rank1(np.array([0.0, 1.0]), u).data) == 0.0
    assert float(fim.loss_diag(np.array([1.0, 1.0]), np.array([2.0, 3.0])).data) == 5.0
    diag = fim.estimate_diag([1, 2], [2, 6]).diag
    assert float(fim.loss_diag(np.array([1.0, 2.0]), diag).data) == 14.0
    assert float(fim.loss_brecq(np.array([1.0, 1.0]), np.array([2.0, 3.0])).data) == 13.0
    assert float(fim.loss_brecq(np.array([1.0, 1.0]), np.zeros(2)).data) == 0.0


def test_brecq_diag_far_from_true_diag():
    eps = 1e-2
    dz = np.array([eps, -eps])
    _, g = fim.kl_grads(fim.identity_tail, np.zeros((1, 2)), dz[None])
    brecq = float(fim.loss_brecq(dz, g[0]).data)
    true = float(dz @ np.diag(np.diag(analytic_fim(np.zeros(2)))) @ dz)
    assert max(brecq, true) / min(brecq, true) > 2.0


# -- perturbation bank -------------------------------------------------------

def test_bank_append_examples():
    bank = fim.PerturbationBank(2, 3)
    assert bank.append([1, 0], [2, 0])
    assert bank.rank == 1
    np.testing.assert_allclose(bank.gram_inv, [[1.0]])
    res = bank.append([1 + 1e-9, 0], [5, 5])
    assert not res and res.reason == "near-dependence" and bank.rank == 1
    assert bank.append([0, 1], [0, 1])
    np.testing.assert_allclose(bank.gram_inv, np.eye(2))
    assert bank.append([3, 4], [1, 1]).reason == "near-dependence"
    full = fim.PerturbationBank(2, 1)
    full.append([1, 0], [1, 0])
    assert full.append([0, 1], [0, 1]).reason == "full"


def test_bank_rejects_ill_conditioned_and_leaves_state():
    bank = fim.PerturbationBank(3, 3)
    bank.append([1, 0, 0], [1, 0, 0])
    before = bank.snapshot()
    res = bank.append([1, 1e-5, 0], [0, 1, 0])  # residual 1e-5 passes, Gram cond ~ 4e10
    assert res.reason == "ill-conditioned"
    assert bank.snapshot() == before


def test_loss_rankk_examples():
    bank = fim.PerturbationBank(2, 2)
    bank.append([1, 0], [2, 0])
    assert float(fim.loss_rankk(np.array([1.0, 0.0]), bank).data) == 2.0
    assert float(fim.loss_rankk(np.array([0.0, 1.0]), bank).data) == 0.0


def seeded_bank(seed, k, a=12):
    rng = np.random.default_rng(seed)
    bank = fim.PerturbationBank(a, k)
    while bank.rank < k:
        bank.append(rng.normal(size=a), rng.normal(size=a))
    return bank


@pytest.mark.parametrize("k", [1, 3, 5])
def test_rankk_interpolates_bank_columns(k):
    for seed in range(5):
        bank = seeded_bank(seed, k)
        f = bank.matrix()
        for j in range(k):
            got, want = f @ bank.dz[:, j], bank.grad[:, j]
            assert np.linalg.norm(got - want) <= 1e-8 * np.linalg.norm(want)


def test_rankk_loss_matches_dense_form():
    bank = seeded_bank(7, 4)
    x = np.random.default_rng(8).normal(size=(3, 12))
    dense = np.einsum("ni,ij,nj->n", x, bank.matrix().T, x)
    np.testing.assert_allclose(fim.loss_rankk(x, bank).data, dense, rtol=1e-12)


def test_asymmetry_witness_on_k2_banks():
    hits = sum(seeded_bank(s, 2).asymmetry() > 1e-6 for s in range(10))
    assert hits >= 9


def test_dplr_endpoints_and_affinity():
    bank = seeded_bank(3, 3)
    diag = np.abs(np.random.default_rng(4).normal(size=12))
    x = np.random.default_rng(5).normal(size=12)
    at = lambda a: float(fim.loss_dplr(x, bank, diag, a).data)
    assert at(0.0) == float(fim.loss_diag(x, diag).data)
    assert at(1.0) == float(fim.loss_rankk(x, bank).data)
    mid = at(0.5)
    assert abs(mid - 0.5 * (at(0.0) + at(1.0))) <= 1e-12 * max(1.0, abs(mid))


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.integers(0, 1000))
def test_dplr_is_affine_in_alpha(a0, a1, t, seed):
    bank = seeded_bank(seed, 2, a=6)
    rng = np.random.default_rng(seed)
    diag, x = np.abs(rng.normal(size=6)), rng.normal(size=6)
    f = lambda a: float(fim.loss_dplr(x, bank, diag, a).data)
    mid = (1 - t) * a0 + t * a1
    scale = max(1.0, abs(f(a0)), abs(f(a1)))
    assert abs(f(mid) - ((1 - t) * f(a0) + t * f(a1))) <= 1e-12 * scale


def test_all_losses_zero_at_zero_perturbation():
    bank = seeded_bank(1, 2, a=4)
    z = np.zeros(4)
    d, g = np.ones(4), np.ones(4)
    vals = [
        fim.loss_mse(z), fim.loss_diag(z, d), fim.loss_rank1(z, g), fim.loss_rankk(z, bank),
        fim.loss_dplr(z, bank, d, 0.5), fim.loss_brecq(z, g),
    ]
    assert all(float(v.data) == 0.0 for v in vals)


def test_loss_gradients_wrt_sample_dz():
    bank = seeded_bank(2, 3, a=6)
    rng = np.random.default_rng(9)
    diag, u, g = np.abs(rng.normal(size=6)), rng.normal(size=6), rng.normal(size=(2, 6))
    x0 = rng.normal(size=(2, 6))
    fns = {
        "diag": lambda x: fim.loss_diag(x, diag),
        "rank1": lambda x: fim.loss_rank1(x, u),
        "rankk": lambda x: fim.loss_rankk(x, bank),
        "dplr": lambda x: fim.loss_dplr(x, bank, diag, 0.3),
        "brecq": lambda x: fim.loss_brecq(x, g),
        "mse": fim.loss_mse,
    }
    for name, fn in fns.items():
        tape = Tape()
        x = tape.variable(x0)
        grad = tape.backward(ops.sum(fn(x)))[x]
        fd = np.zeros_like(x0)
        for i in np.ndindex(x0.shape):
            e = np.zeros_like(x0)
            e[i] = 1e-6
            fd[i] = (np.sum(fn(x0 + e).data) - np.sum(fn(x0 - e).data)) / 2e-6
        np.testing.assert_allclose(grad, fd, rtol=1e-6, atol=1e-8, err_msg=name)


# -- heatmaps ----------------------------------------------------------------

def test_heatmap_examples(tmp_path):
    m = np.random.default_rng(0).normal(size=(4, 4))
    np.testing.assert_array_equal(fim.class_token_fim_heatmap(m, tokens=1, dim=4), m)
    est = fim.FimEstimate("diag", diag=np.arange(12.0))
    hm = fim.class_token_fim_heatmap(est, tokens=3, dim=4)
    np.testing.assert_array_equal(hm, np.diag([0.0, 1.0, 2.0, 3.0]))
    sym = m + m.T
    big = np.kron(np.eye(2), sym)
    sub = fim.class_token_fim_heatmap(big, tokens=2, dim=4)
    np.testing.assert_array_equal(sub, sub.T)
    with pytest.raises(ValueError):
        fim.class_token_fim_heatmap(m, tokens=1, dim=4, class_token=None)
    with pytest.raises(ValueError):
        fim.class_token_fim_heatmap(m, tokens=2, dim=4)


def test_heatmap_csv_round_trip(tmp_path):
    m = np.random.default_rng(1).normal(size=(5, 5))
    path = tmp_path / "h.csv"
    fim.write_heatmap_csv(path, m)
    assert path.read_text().splitlines()[0] == "# rows=5 cols=5 token=class"
    np.testing.assert_array_equal(fim.read_heatmap_csv(path), m)
