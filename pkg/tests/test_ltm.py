import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lsta import ltm
from lsta import tensor as T
from lsta.gradcheck import check_gradients
from lsta.rng import Rng
from lsta.tensor import ShapeError, Tensor


def rand(rng, shape, scale=1.0):
    return ((rng.uniform(shape) * 2 - 1) * scale).astype(np.float32)


def make_ltm_params(rng, c0, c):
    lim = np.sqrt(6.0 / (c0 + c))
    def w():
        return Tensor(rand(rng, (1, 1, c0, c), lim), requires_grad=True)
    def b():
        return Tensor(np.zeros(c, dtype=np.float32), requires_grad=True)
    return ltm.LtmParams(phi_w=w(), phi_b=b(), psi_w=w(), psi_b=b())


# --- feature memory ----------------------------------------------------------

def test_build_memory_single_frame_is_identity():
    a = Tensor(rand(Rng(0), (4, 3)))
    mem = ltm.build_memory([a])
    assert np.array_equal(mem.matrix.data, a.data)
    assert mem.frames == 1


def test_build_memory_stacks_in_order():
    a = Tensor([[1.0, 2, 3], [4, 5, 6]])
    b = Tensor([[7.0, 8, 9], [10, 11, 12]])
    mem = ltm.build_memory([a, b])
    assert mem.matrix.shape == (4, 3)
    assert np.array_equal(mem.matrix.data[:2], a.data)
    assert np.array_equal(mem.matrix.data[2:], b.data)


def test_build_memory_paper_scale_shape():
    # five past frames, 4 pixels each, 128 channels
    frames = [Tensor(np.zeros((4, 128), dtype=np.float32)) for _ in range(5)]
    assert ltm.build_memory(frames).matrix.shape == (20, 128)


def test_build_memory_rejects_mismatch():
    with pytest.raises(ShapeError):
        ltm.build_memory([Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4)))])
    with pytest.raises(ValueError):
        ltm.build_memory([])


# --- projection basis --------------------------------------------------------

def test_basis_c2_has_single_row():
    basis = ltm.make_projection_basis(2, seed=1)
    assert basis.vectors.shape == (1, 2)
    assert np.linalg.norm(basis.vectors) > 0


def test_basis_rows_pairwise_orthogonal():
    basis = ltm.make_projection_basis(4, seed=7)
    v = basis.vectors.astype(np.float64)
    unit = v / np.linalg.norm(v, axis=1, keepdims=True)
    gram = unit @ unit.T
    off = gram - np.diag(np.diag(gram))
    assert np.abs(off).max() < 1e-5


def test_basis_paper_scale_shape():
    assert ltm.make_projection_basis(128, seed=0).vectors.shape == (64, 128)


def test_basis_deterministic_per_seed():
    a = ltm.make_projection_basis(16, seed=9).vectors
    b = ltm.make_projection_basis(16, seed=9).vectors
    c = ltm.make_projection_basis(16, seed=10).vectors
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_basis_rows_keep_gaussian_norms():
    # pre-orthogonalization norms are chi(c); check the first row, which
    # Gram-Schmidt leaves directionally untouched
    rng = Rng(4)
    c = 8
    bases = ltm.sample_orthogonal_gaussian(c, 200, rng)
    sq = (np.linalg.norm(bases, axis=2) ** 2).mean()
    assert abs(sq - c) < 1.0  # E|g|^2 = c


def test_basis_rejects_tiny_c():
    with pytest.raises(ValueError):
        ltm.make_projection_basis(1, seed=0)


# --- feature projection --------------------------------------------------------

def test_project_zero_vector_gives_inv_sqrt_r():
    basis = ltm.make_projection_basis(8, seed=3)
    out = ltm.project_features(Tensor(np.zeros((3, 8))), basis, stabilizer="none")
    assert np.allclose(out.matrix.data, 1.0 / np.sqrt(4), atol=1e-7)


def test_project_hand_value_c2():
    basis = ltm.ProjectionBasis(np.array([[1.0, 0.0]], dtype=np.float32), seed=0)
    out = ltm.project_features(Tensor([[1.0, 0.0]]), basis, stabilizer="none")
    # exp(u.x - |x|^2/2) / sqrt(1) = exp(0.5)
    assert abs(out.matrix.data[0, 0] - 1.64872) < 1e-4


def test_projection_is_positive():
    rng = Rng(12)
    basis = ltm.make_projection_basis(8, seed=5)
    for stab in ("none", "shared", "per_row"):
        out = ltm.project_features(Tensor(rand(rng, (10, 8), 2.0)), basis, stab)
        assert (out.matrix.data > 0).all()


def test_project_consistent_with_batched_feature_map():
    rng = Rng(3)
    x = rand(rng, (8,), 0.9)
    bases = ltm.sample_orthogonal_gaussian(8, 4, Rng(77))
    single = ltm.project_features(
        Tensor(x[None, :]), ltm.ProjectionBasis(bases[0], 0), stabilizer="none"
    ).matrix.data[0]
    batched = ltm.positive_feature_scores(x, bases)[0]
    assert np.abs(single - batched).max() < 1e-6


def test_project_shape_mismatch():
    basis = ltm.make_projection_basis(8, seed=0)
    with pytest.raises(ShapeError):
        ltm.project_features(Tensor(np.zeros((3, 6))), basis)


def test_kernel_monte_carlo_small():
    # mean of phi(q).phi(m) over independent bases estimates exp(q.m)
    rng = Rng(2024)
    c = 8
    q = rand(rng, (c,), 0.3)
    m = rand(rng, (c,), 0.3)
    bases = ltm.sample_orthogonal_gaussian(c, 30000, rng.split("bases"))
    est = ltm.kernel_estimates(q, m, bases)
    mean, se = est.mean(), est.std(ddof=1) / np.sqrt(est.size)
    target = np.exp(float(q.astype(np.float64) @ m.astype(np.float64)))
    assert abs(mean - target) < 3 * se + 1e-12


# --- similarity / global feature / normalization -----------------------------

def test_channel_similarity_column_sums():
    mp = ltm.ProjectedFeatures(Tensor(np.ones((2, 1))))
    mem = ltm.FeatureMemory(Tensor(np.eye(2)), frames=1)
    got = ltm.channel_similarity(mp, mem)
    assert np.array_equal(got.data, [[1.0, 1.0]])


def test_channel_similarity_vs_transpose_matmul():
    rng = Rng(8)
    mp_data, m_data = rand(rng, (6, 3)), rand(rng, (6, 4))
    mp = ltm.ProjectedFeatures(Tensor(np.abs(mp_data) + 0.1))
    mem = ltm.FeatureMemory(Tensor(m_data), frames=1)
    got = ltm.channel_similarity(mp, mem).data
    want = (np.abs(mp_data) + 0.1).astype(np.float64).T @ m_data.astype(np.float64)
    assert np.abs(got - want).max() < 1e-6
    assert got.shape == (3, 4)


def test_channel_similarity_paper_scale_shape():
    mp = ltm.ProjectedFeatures(Tensor(np.ones((20, 64))))
    mem = ltm.FeatureMemory(Tensor(np.ones((20, 128))), frames=5)
    assert ltm.channel_similarity(mp, mem).data.shape == (64, 128)


def test_channel_similarity_row_mismatch():
    mp = ltm.ProjectedFeatures(Tensor(np.ones((3, 2))))
    mem = ltm.FeatureMemory(Tensor(np.ones((4, 5))), frames=1)
    with pytest.raises(ShapeError):
        ltm.channel_similarity(mp, mem)


def test_global_feature_orderings_agree():
    # Q'(M'^T M) versus (Q'M'^T)M
    rng = Rng(21)
    qp = np.abs(rand(rng, (5, 3))) + 0.05
    mp = np.abs(rand(rng, (7, 3))) + 0.05
    m = rand(rng, (7, 4))
    fast = ltm.global_feature(
        ltm.ProjectedFeatures(Tensor(qp)),
        ltm.channel_similarity(ltm.ProjectedFeatures(Tensor(mp)), ltm.FeatureMemory(Tensor(m), 1)),
    ).data
    slow = (qp.astype(np.float64) @ mp.astype(np.float64).T) @ m.astype(np.float64)
    denom = np.abs(slow).max()
    assert np.abs(fast - slow).max() / denom < 1e-5


def test_global_feature_single_pair():
    qp = ltm.ProjectedFeatures(Tensor([[2.0]]))
    mp = ltm.ProjectedFeatures(Tensor([[3.0]]))
    m = ltm.FeatureMemory(Tensor([[1.0, -2.0, 0.5]]), 1)
    g = ltm.global_feature(qp, ltm.channel_similarity(mp, m)).data
    assert np.allclose(g, 6.0 * m.matrix.data)


def test_normalize_single_memory_row_returns_it():
    rng = Rng(31)
    m_row = rand(rng, (1, 5))
    qp = ltm.ProjectedFeatures(Tensor([[0.7, 1.3]]))
    mp = ltm.ProjectedFeatures(Tensor([[0.2, 2.0]]))
    g = ltm.global_feature(qp, ltm.channel_similarity(mp, ltm.FeatureMemory(Tensor(m_row), 1)))
    out = ltm.normalize_global(g, qp, mp).data
    assert np.allclose(out, m_row, atol=1e-6)


def test_normalize_equal_weights_gives_mean():
    m = Tensor([[1.0, 3.0], [5.0, -1.0]])
    qp = ltm.ProjectedFeatures(Tensor(np.ones((1, 3))))
    mp = ltm.ProjectedFeatures(Tensor(np.ones((2, 3))))
    g = ltm.global_feature(qp, ltm.channel_similarity(mp, ltm.FeatureMemory(m, 1)))
    out = ltm.normalize_global(g, qp, mp).data
    assert np.allclose(out, [[3.0, 1.0]], atol=1e-6)


def _random_attend_instance(seed, hw=6, nhw=10, c=6):
    rng = Rng(seed)
    mem = ltm.FeatureMemory(Tensor(rand(rng, (nhw, c), 1.5)), frames=1)
    q = Tensor(rand(rng, (hw, c), 1.5))
    basis = ltm.make_projection_basis(c, seed=seed + 1)
    return mem, q, basis


@settings(max_examples=30, derandomize=True)
@given(st.integers(0, 10_000))
def test_convex_combination_bound(seed):
    mem, q, basis = _random_attend_instance(seed)
    out = ltm.attend(mem, q, basis).data
    lo = mem.matrix.data.min(axis=0) - 1e-5
    hi = mem.matrix.data.max(axis=0) + 1e-5
    assert (out >= lo).all() and (out <= hi).all()


@settings(max_examples=30, derandomize=True)
@given(st.integers(0, 10_000))
def test_rescaling_invariance(seed):
    # one shared positive scalar on M', an independent positive scalar per row
    # of Q': exactly the rescalings the exponent stabilizer applies
    mem, q, basis = _random_attend_instance(seed)
    mp = ltm.project_features(mem.matrix, basis, stabilizer="shared")
    qp = ltm.project_features(q, basis, stabilizer="per_row")

    def compose(qp_mat, mp_mat):
        qpx = ltm.ProjectedFeatures(Tensor(qp_mat))
        mpx = ltm.ProjectedFeatures(Tensor(mp_mat))
        g = ltm.global_feature(qpx, ltm.channel_similarity(mpx, mem))
        return ltm.normalize_global(g, qpx, mpx).data

    base = compose(qp.matrix.data, mp.matrix.data)
    rng = Rng(seed).split("scales")
    shared = np.float32(0.25 + 4.0 * rng.uniform())
    per_row = (0.25 + 4.0 * rng.uniform((qp.rows, 1))).astype(np.float32)
    scaled = compose(qp.matrix.data * per_row, mp.matrix.data * shared)
    # near-zero entries make elementwise relative error ill-posed; anchor the
    # absolute floor to the output scale
    assert np.allclose(scaled, base, rtol=1e-5, atol=1e-5 * np.abs(base).max())


def test_stabilization_matches_unstabilized_on_safe_inputs():
    mem, q, basis = _random_attend_instance(99, hw=4, nhw=8, c=6)
    stabilized = ltm.attend(mem, q, basis).data

    mp = ltm.project_features(mem.matrix, basis, stabilizer="none")
    qp = ltm.project_features(q, basis, stabilizer="none")
    g = ltm.global_feature(qp, ltm.channel_similarity(mp, mem))
    raw = ltm.normalize_global(g, qp, mp).data
    assert np.abs(stabilized - raw).max() / np.abs(raw).max() < 1e-5


def test_stabilization_survives_huge_norms():
    # raw exponents here would overflow float32
    rng = Rng(17)
    mem = ltm.FeatureMemory(Tensor(rand(rng, (6, 4), 20.0)), frames=1)
    q = Tensor(rand(rng, (3, 4), 20.0))
    out = ltm.attend(mem, q, ltm.make_projection_basis(4, 0)).data
    assert np.isfinite(out).all()


# --- full block and oracle ----------------------------------------------------

def test_ltm_forward_single_row_memory():
    rng = Rng(41)
    params = make_ltm_params(rng, c0=6, c=4)
    past = [Tensor(rand(rng, (1, 1, 6)))]
    current = Tensor(rand(rng, (1, 1, 6)))
    out = ltm.ltm_forward(past, current, params, Rng(5))
    want = ltm.embed_past(past[0], params).data  # convex combination of one row
    assert np.allclose(out.data.reshape(1, 4), want, atol=1e-5)


def test_ltm_forward_paper_scale_channels():
    rng = Rng(42)
    params = make_ltm_params(rng, c0=256, c=128)
    past = [Tensor(rand(rng, (2, 2, 256))) for _ in range(2)]
    current = Tensor(rand(rng, (2, 2, 256)))
    out = ltm.ltm_forward(past, current, params, Rng(5))
    assert out.data.shape == (2, 2, 128)


def test_ltm_forward_matches_exact_oracle():
    rng = Rng(43)
    params = make_ltm_params(rng, c0=5, c=6)
    past = [Tensor(rand(rng, (3, 4, 5))) for _ in range(3)]
    current = Tensor(rand(rng, (3, 4, 5)))
    seed_stream = Rng(9)
    out = ltm.ltm_forward(past, current, params, seed_stream).data.reshape(12, 6)

    basis = ltm.make_projection_basis(6, Rng(9).u64_scalar())  # same draw sequence
    mem = np.concatenate([ltm.embed_past(f, params).data for f in past], axis=0)
    q = ltm.embed_query(current, params).data
    want = ltm.exact_attention_oracle(q, mem, basis)
    assert np.abs(out - want).max() / np.abs(want).max() < 1e-5


def test_exact_oracle_single_pair_returns_memory_row():
    basis = ltm.make_projection_basis(4, 3)
    m = rand(Rng(1), (1, 4))
    q = rand(Rng(2), (1, 4))
    out = ltm.exact_attention_oracle(q, m, basis)
    assert np.allclose(out, m, atol=1e-6)


def test_exact_oracle_row_cap():
    basis = ltm.make_projection_basis(2, 0)
    big = np.zeros((ltm.MAX_ORACLE_ROWS + 1, 2), dtype=np.float32)
    with pytest.raises(ValueError):
        ltm.exact_attention_oracle(big[:1], big, basis)


def test_attend_gradients_match_finite_differences():
    rng = Rng(50)
    mem_leaf = Tensor(rand(rng, (6, 4), 0.8), requires_grad=True)
    q_leaf = Tensor(rand(rng, (3, 4), 0.8), requires_grad=True)
    basis = ltm.make_projection_basis(4, 11)
    w = Tensor(rand(rng, (3, 4), 0.3))

    def fn():
        out = ltm.attend(ltm.FeatureMemory(mem_leaf, 1), q_leaf, basis)
        return T.tsum(T.mul(out, w))

    check_gradients(fn, [mem_leaf, q_leaf], step=1e-3, rtol=1e-4)


def test_ltm_forward_deterministic():
    rng = Rng(60)
    params = make_ltm_params(rng, c0=4, c=4)
    past = [Tensor(rand(rng, (2, 2, 4)))]
    current = Tensor(rand(rng, (2, 2, 4)))
    a = ltm.ltm_forward(past, current, params, Rng(3)).data
    b = ltm.ltm_forward(past, current, params, Rng(3)).data
    assert np.array_equal(a, b)
