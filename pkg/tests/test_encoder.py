"""Attention blocks and the hierarchical set encoder: shapes, permutation
invariance, batching consistency, gradients."""

import numpy as np

from adavi import tensor as T
from adavi.encoder import (AttentionBlock, HierarchicalEncoder, SetTransformer,
                           _merge_heads, _split_heads)
from adavi.rng import Stream, stream
from adavi.tensor import Tensor


def rngs(seed=0):
    return stream(seed, Stream.INIT)


class TestBlocks:
    def test_split_merge_roundtrip(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 5, 8)))
        h = _split_heads(x, 2)
        assert h.data.shape == (2, 2, 5, 4)
        np.testing.assert_array_equal(h.data[:, 0], x.data[..., :4])
        np.testing.assert_array_equal(h.data[:, 1], x.data[..., 4:])
        back = _merge_heads(h)
        np.testing.assert_array_equal(back.data, x.data)

    def test_attention_block_shapes(self):
        rng = rngs()
        blk = AttentionBlock(3, 5, 8, 2, rng)
        q = Tensor(np.random.default_rng(1).normal(size=(4, 6, 3)))
        k = Tensor(np.random.default_rng(2).normal(size=(4, 9, 5)))
        out = blk(q, k)
        assert out.data.shape == (4, 6, 8)

    def test_block_broadcasts_fixed_queries(self):
        # a plain (I, d_q) query set rides along any batch of key sets
        rng = rngs()
        blk = AttentionBlock(8, 5, 8, 2, rng)
        q = Tensor(np.random.default_rng(3).normal(size=(2, 8)))
        k = Tensor(np.random.default_rng(4).normal(size=(7, 4, 9, 5)))
        assert blk(q, k).data.shape == (7, 4, 2, 8)

    def test_block_param_gradients(self):
        rng = rngs()
        blk = AttentionBlock(2, 2, 4, 2, rng)
        q = np.random.default_rng(5).normal(size=(3, 2))
        k = np.random.default_rng(6).normal(size=(4, 2))
        names, params = zip(*blk.named_params())

        def fn(*ps):
            out = blk(Tensor(q), Tensor(k))
            return T.reduce_sum(out * out)

        err = T.gradcheck(fn, list(params))
        assert err < 1e-5


class TestSetTransformer:
    def test_shape(self):
        st = SetTransformer(2, 8, rngs())
        x = Tensor(np.random.default_rng(0).normal(size=(7, 5, 2)))
        assert st(x).data.shape == (7, 8)

    def test_permutation_invariance(self):
        st = SetTransformer(2, 8, rngs())
        rng = np.random.default_rng(1)
        for trial in range(5):
            x = rng.normal(size=(11, 2))
            out = st(Tensor(x)).data
            perm = rng.permutation(11)
            out_p = st(Tensor(x[perm])).data
            assert np.max(np.abs(out - out_p)) < 1e-9

    def test_batched_matches_loop(self):
        st = SetTransformer(2, 8, rngs())
        x = np.random.default_rng(2).normal(size=(4, 6, 2))
        batched = st(Tensor(x)).data
        for i in range(4):
            single = st(Tensor(x[i])).data
            np.testing.assert_allclose(batched[i], single, atol=1e-12)

    def test_any_set_size_same_module(self):
        st = SetTransformer(2, 8, rngs())
        n = st.num_params()
        for s in (3, 50, 300):
            out = st(Tensor(np.random.default_rng(s).normal(size=(s, 2))))
            assert out.data.shape == (8,)
        assert st.num_params() == n

    def test_input_gradient(self):
        st = SetTransformer(2, 4, rngs(), n_heads=2, n_inducing=2)
        x = Tensor(np.random.default_rng(3).normal(size=(3, 2)), requires_grad=True)

        def fn(x_):
            out = st(x_)
            return T.reduce_sum(out * out)

        assert T.gradcheck(fn, [x]) < 1e-5

    def test_deterministic_build(self):
        a = SetTransformer(2, 8, rngs(9))
        b = SetTransformer(2, 8, rngs(9))
        x = Tensor(np.random.default_rng(4).normal(size=(5, 2)))
        np.testing.assert_array_equal(a(x).data, b(x).data)


class TestHierarchicalEncoder:
    def test_two_level_shapes(self):
        enc = HierarchicalEncoder(n_plates=2, d_obs=2, d_enc=8, rng=rngs())
        x = np.random.default_rng(0).normal(size=(3, 50, 2))
        out = enc.encode(x)
        assert sorted(out) == [1, 2]
        assert out[1].data.shape == (3, 8)
        assert out[2].data.shape == (8,)

    def test_leading_batch(self):
        enc = HierarchicalEncoder(n_plates=2, d_obs=2, d_enc=8, rng=rngs())
        x = np.random.default_rng(1).normal(size=(4, 3, 10, 2))
        out = enc.encode(x)
        assert out[1].data.shape == (4, 3, 8)
        assert out[2].data.shape == (4, 8)
        solo = enc.encode(x[2])
        np.testing.assert_allclose(out[1].data[2], solo[1].data, atol=1e-12)
        np.testing.assert_allclose(out[2].data[2], solo[2].data, atol=1e-12)

    def test_inner_permutation_leaves_both_levels(self):
        enc = HierarchicalEncoder(n_plates=2, d_obs=2, d_enc=8, rng=rngs())
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 20, 2))
        base = enc.encode(x)
        shuffled = np.stack([x[g][rng.permutation(20)] for g in range(3)])
        out = enc.encode(shuffled)
        assert np.max(np.abs(out[1].data - base[1].data)) < 1e-9
        assert np.max(np.abs(out[2].data - base[2].data)) < 1e-9

    def test_group_permutation_equivariant_then_invariant(self):
        enc = HierarchicalEncoder(n_plates=2, d_obs=2, d_enc=8, rng=rngs())
        rng = np.random.default_rng(3)
        x = rng.normal(size=(5, 20, 2))
        base = enc.encode(x)
        perm = rng.permutation(5)
        out = enc.encode(x[perm])
        assert np.max(np.abs(out[1].data - base[1].data[perm])) < 1e-9
        assert np.max(np.abs(out[2].data - base[2].data)) < 1e-9

    def test_single_plate(self):
        enc = HierarchicalEncoder(n_plates=1, d_obs=2, d_enc=8, rng=rngs())
        out = enc.encode(np.random.default_rng(4).normal(size=(10, 2)))
        assert sorted(out) == [1]
        assert out[1].data.shape == (8,)
