import numpy as np
import pytest

from pqpim.channelsort import ChannelPermutation, absorb_permutation, sort_channels
from pqpim.attention import exact_attention
from util import block_correlated_samples


def test_duplicated_pairs_group_together():
    rng = np.random.default_rng(0)
    d = 12
    base = rng.normal(size=(40, d // 2)).astype(np.float32)
    x = np.empty((40, d), dtype=np.float32)
    x[:, 0::2] = base
    x[:, 1::2] = base  # col 2i == col 2i+1
    perm = sort_channels(x, m=d // 2, rng_seed=5)
    for g in range(d // 2):
        a, b = perm.order[2 * g], perm.order[2 * g + 1]
        np.testing.assert_array_equal(x[:, a], x[:, b])


def test_single_group_is_permutation():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(20, 8)).astype(np.float32)
    perm = sort_channels(x, m=1, rng_seed=0)
    assert sorted(perm.order) == list(range(8))
    assert perm.n_subvectors == 1


def test_sort_deterministic():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(30, 16)).astype(np.float32)
    assert sort_channels(x, 4, 77).order == sort_channels(x, 4, 77).order


def test_zero_column_warns_not_fails():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(10, 6)).astype(np.float32)
    x[:, 2] = 0.0
    with pytest.warns(RuntimeWarning):
        perm = sort_channels(x, 3, 1)
    assert sorted(perm.order) == list(range(6))


def test_json_roundtrip():
    perm = ChannelPermutation(order=(2, 0, 1, 3), n_subvectors=2)
    assert ChannelPermutation.from_json(perm.to_json()) == perm


def test_identity_absorb_is_noop():
    rng = np.random.default_rng(4)
    d_model, d = 10, 8
    wq = rng.normal(size=(d_model, d)).astype(np.float32)
    wk = rng.normal(size=(d_model, d)).astype(np.float32)
    wv = rng.normal(size=(d_model, d)).astype(np.float32)
    wo = rng.normal(size=(d, d_model)).astype(np.float32)
    ident = ChannelPermutation.identity(d, 4)
    for a, b in zip(absorb_permutation(wq, wk, wv, wo, ident, ident),
                    (wq, wk, wv, wo)):
        np.testing.assert_array_equal(a, b)


def test_inner_products_invariant_under_shared_permutation():
    rng = np.random.default_rng(5)
    d = 32
    order = tuple(rng.permutation(d))
    perm = ChannelPermutation(order=order, n_subvectors=8)
    for _ in range(100):
        q = rng.normal(size=d).astype(np.float32)
        k = rng.normal(size=d).astype(np.float32)
        ref = float(q @ k)
        got = float(perm.apply(q) @ perm.apply(k))
        assert got == pytest.approx(ref, rel=1e-6, abs=1e-6)


def test_permuted_pipeline_matches_unpermuted():
    rng = np.random.default_rng(6)
    d_model, d, n = 24, 16, 12
    s = 1.0 / np.sqrt(d_model)
    x = rng.normal(size=(n, d_model)).astype(np.float32)
    xq = rng.normal(size=(1, d_model)).astype(np.float32)
    wq = (s * rng.normal(size=(d_model, d))).astype(np.float32)
    wk = (s * rng.normal(size=(d_model, d))).astype(np.float32)
    wv = (s * rng.normal(size=(d_model, d))).astype(np.float32)
    wo = (s * rng.normal(size=(d, d_model))).astype(np.float32)
    pk = ChannelPermutation(order=tuple(rng.permutation(d)), n_subvectors=4)
    pv = ChannelPermutation(order=tuple(rng.permutation(d)), n_subvectors=4)

    def run(wq_, wk_, wv_, wo_):
        q = (xq @ wq_)[0]
        out = exact_attention(q, x @ wk_, x @ wv_).out
        return out @ wo_

    ref = run(wq, wk, wv, wo)
    got = run(*absorb_permutation(wq, wk, wv, wo, pk, pv))
    np.testing.assert_allclose(got, ref, rtol=1e-5, atol=1e-5)


def test_sorting_not_worse_than_contiguous_split():
    from pqpim.quantizer import PqConfig, build_compressed_kv, quantization_error
    from pqpim.kvstore import KvDump
    from pqpim.channelsort import ChannelPermutation

    d, m = 32, 16
    sorted_mse, contig_mse = [], []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x = block_correlated_samples(rng, 256, d)
        dump = KvDump(
            keys=x[None, None], values=x[None, None],
            weights=np.ones((1, 1, 256), dtype=np.float32),
        )
        cfg = PqConfig(m=m, k=16, iters=4, sink_tokens=0, recent_tokens=0,
                       rng_seed=seed)
        perm = sort_channels(x, m, rng_seed=seed)
        ckv_sorted = build_compressed_kv(dump, 0, 0, cfg, perm_k=perm, perm_v=perm)
        ckv_contig = build_compressed_kv(dump, 0, 0, cfg)
        sorted_mse.append(quantization_error(x, ckv_sorted, "key", perm=perm)[0])
        contig_mse.append(quantization_error(x, ckv_contig, "key")[0])
    assert np.mean(sorted_mse) <= np.mean(contig_mse)
