import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gacr.corpus import CLS, PAD, SEP
from gacr.encoder import (
    MASK_TYPES,
    EncoderConfig,
    FusedInput,
    Segment,
    assemble_multi,
    assemble_segment,
    assemble_single,
    assemble_target,
    backward,
    backward_batch,
    build_mask,
    extract_query,
    extract_target,
    forward,
    forward_batch,
    init_params,
    param_shapes,
    stack_inputs,
    with_mask_type,
)
from gacr.errors import ConfigError, ContractError, NumericFault
from gacr.gradcheck import grad_check

TINY = EncoderConfig(vocab_size=30, num_layers=2, num_heads=2, model_dim=8, ffn_dim=16, max_seq_len=16)

ids_list = st.lists(st.integers(4, 29), max_size=12)


def _rand_ids(rng, n, vocab=30):
    return rng.integers(4, vocab, n).tolist()


class TestAssembleSingle:
    def test_untruncated_layout(self):
        inp = assemble_single([5, 6], [7, 8, 9], 16)
        assert inp.ids[:9].tolist() == [2, 5, 6, 3, 2, 7, 8, 9, 3]
        assert inp.true_len == 9 and inp.cls_positions == (0, 4)
        assert (inp.ids[9:] == PAD).all()

    def test_empty_segments(self):
        inp = assemble_single([], [], 16)
        assert inp.ids[:4].tolist() == [2, 3, 2, 3]
        assert inp.true_len == 4 and inp.cls_positions == (0, 2)

    def test_gen_truncated_first(self):
        # one position over budget: only the last generated token goes
        inp = assemble_single([5, 6], [7, 8, 9], 8)
        assert inp.ids.tolist() == [2, 5, 6, 3, 2, 7, 8, 3]
        assert inp.true_len == 8 and inp.cls_positions == (0, 4)

    def test_doc_truncated_after_gen_exhausted(self):
        inp = assemble_single([5, 6, 7, 8, 9], [10, 11], 6)
        assert inp.ids.tolist() == [2, 5, 6, 3, 2, 3]
        assert inp.cls_positions == (0, 4)

    def test_length_floor(self):
        with pytest.raises(ConfigError):
            assemble_single([5], [6], 3)

    @given(ids_list, ids_list, st.integers(4, 40))
    def test_layout_laws(self, doc, gen, L):
        inp = assemble_single(doc, gen, L)
        m, p = inp.cls_positions[1] - 2, inp.true_len - inp.cls_positions[1] - 2
        assert inp.length == L and inp.true_len <= L
        assert inp.true_len == m + p + 4
        assert (m, p) == (len(doc), len(gen)) if len(doc) + len(gen) + 4 <= L else inp.true_len == L
        assert p == 0 or m == len(doc)  # doc is only cut once gen is gone
        assert [inp.ids[c] for c in inp.cls_positions] == [CLS, CLS]
        assert inp.ids[m + 1] == SEP and inp.ids[inp.true_len - 1] == SEP
        assert (inp.ids[inp.true_len:] == PAD).all()
        assert (inp.segments[inp.true_len:] == Segment.PAD).all()


class TestAssembleMulti:
    def test_hand_enumerated(self):
        inp = assemble_multi([5], [[7, 8], [9]], 64, 32)
        assert inp.ids[:10].tolist() == [2, 5, 3, 2, 7, 8, 3, 2, 9, 3]
        assert inp.cls_positions == (0, 3, 7)
        assert inp.true_len == 10

    @given(ids_list, ids_list, st.integers(1, 8), st.integers(8, 40))
    def test_single_snippet_matches_single(self, doc, gen, cap, L):
        multi = assemble_multi(doc, [gen], cap, L)
        single = assemble_single(doc, gen[:cap], L)
        assert multi.ids.tolist() == single.ids.tolist()
        assert multi.cls_positions == single.cls_positions

    def test_cap_applied_per_snippet(self):
        inp = assemble_multi([5], [[7, 8], [9, 10]], 1, 32)
        assert inp.ids[:9].tolist() == [2, 5, 3, 2, 7, 3, 2, 9, 3]

    def test_trailing_blocks_dropped_whole(self):
        inp = assemble_multi([5], [[7, 8], [9, 10, 11]], 64, 10)
        assert inp.ids.tolist() == [2, 5, 3, 2, 7, 8, 3, 0, 0, 0]
        assert inp.cls_positions == (0, 3)

    def test_needs_a_snippet(self):
        with pytest.raises(ContractError):
            assemble_multi([5], [], 4, 16)

    @given(ids_list, st.lists(ids_list, min_size=1, max_size=4), st.integers(1, 6), st.integers(6, 40))
    def test_block_structure(self, doc, snippets, cap, L):
        inp = assemble_multi(doc, snippets, cap, L)
        assert inp.true_len <= L
        assert all(inp.ids[c] == CLS for c in inp.cls_positions)
        assert len(inp.cls_positions) >= 2
        for i, c in enumerate(inp.cls_positions[2:], start=1):
            assert inp.ids[c + 1:c + 1 + len(snippets[i][:cap])].tolist() == snippets[i][:cap]


class TestAssembleTarget:
    def test_layout(self):
        inp = assemble_target([9, 9], 8)
        assert inp.ids.tolist() == [2, 9, 9, 3, 0, 0, 0, 0]
        assert inp.true_len == 4 and inp.cls_positions == (0,)

    def test_tail_truncation(self):
        inp = assemble_target(list(range(10, 20)), 8)
        assert inp.ids.tolist() == [2, 10, 11, 12, 13, 14, 15, 3]

    def test_empty(self):
        inp = assemble_target([], 8)
        assert inp.ids[:2].tolist() == [2, 3] and inp.true_len == 2

    def test_full_mask_over_real(self):
        mask = build_mask(assemble_target([9, 9], 8))
        assert mask[:4, :4].all() and not mask[4:].any() and not mask[:, 4:].any()


class TestMasks:
    def test_type_a_full(self):
        inp = assemble_single([5], [6], 6, "A")
        assert build_mask(inp).sum() == 36

    def test_type_d_block_diagonal(self):
        inp = assemble_single([5], [6], 6, "D")
        block = np.array([0, 0, 0, 1, 1, 1])
        assert (build_mask(inp) == (block[:, None] == block[None, :])).all()

    def test_types_b_and_c(self):
        inp = assemble_single([5], [6], 6)
        doc = np.array([1, 1, 1, 0, 0, 0], bool)
        b = build_mask(with_mask_type(inp, "B"))
        assert (b[doc] == doc).all() and b[~doc].all()
        c = build_mask(with_mask_type(inp, "C"))
        assert c[doc].all() and (c[~doc] == ~doc).all()

    @pytest.mark.parametrize("t", MASK_TYPES)
    def test_pad_columns_false(self, t):
        mask = build_mask(assemble_single([5], [], 8, t))
        assert not mask[:, 5:].any() and not mask[5:].any()

    @given(ids_list, st.lists(ids_list, min_size=1, max_size=3), st.integers(6, 30))
    def test_mask_invariants(self, doc, snippets, L):
        base = assemble_multi(doc, snippets, 8, L)
        real = base.segments != Segment.PAD
        masks = {t: build_mask(with_mask_type(base, t)) for t in MASK_TYPES}
        for t, m in masks.items():
            assert m.diagonal()[real].all()
            assert m[real].any(axis=1).all()
            assert not m[~real].any() and not m[:, ~real].any()
            assert (masks["A"] | m == masks["A"]).all()


class TestParams:
    def test_seeded_init_bitwise(self):
        a, b = init_params(TINY), init_params(TINY)
        assert all(np.array_equal(a[n], b[n]) for n in a.names())
        c = init_params(EncoderConfig(**{**TINY.__dict__, "seed": 1}))
        assert not np.array_equal(a["tok_emb"], c["tok_emb"])

    def test_shapes_and_init_values(self):
        p = init_params(TINY)
        for name, shape in param_shapes(TINY):
            assert p[name].shape == shape and p[name].dtype == np.float64
        assert (p["layers.0.bq"] == 0).all() and (p["layers.1.ln2_g"] == 1).all()
        limit = np.sqrt(6 / (8 + 16))
        assert np.abs(p["layers.0.w1"]).max() <= limit

    @pytest.mark.parametrize("kw", [{"num_heads": 3}, {"max_seq_len": 3}, {"num_layers": 0},
                                    {"mask_type": "E"}, {"vocab_size": 0}])
    def test_config_validation(self, kw):
        with pytest.raises(ConfigError):
            EncoderConfig(**{**TINY.__dict__, **kw})


class TestForward:
    params = init_params(TINY)

    def test_shape_and_determinism(self):
        inp = assemble_single([5, 6], [7], 16)
        h1, _ = forward(self.params, inp)
        h2, _ = forward(self.params, inp)
        assert h1.shape == (16, 8)
        assert np.array_equal(h1, h2)

    def test_type_d_isolation(self):
        rng = np.random.default_rng(0)
        doc, gen = _rand_ids(rng, 4), _rand_ids(rng, 5)
        ref, _ = forward(self.params, assemble_single(doc, gen, 16, "D"))
        for _ in range(20):
            other, _ = forward(self.params, assemble_single(doc, _rand_ids(rng, 5), 16, "D"))
            assert np.array_equal(ref[:6], other[:6])

    def test_type_a_lets_gen_reach_doc(self):
        a, _ = forward(self.params, assemble_single([5, 6], [7, 8], 16, "A"))
        b, _ = forward(self.params, assemble_single([5, 6], [9, 8], 16, "A"))
        assert not np.array_equal(a[0], b[0])

    def test_trim_matches_full(self):
        rng = np.random.default_rng(1)
        inputs = [assemble_single(_rand_ids(rng, 3), _rand_ids(rng, int(rng.integers(0, 6))), 16)
                  for _ in range(4)]
        ids, masks = stack_inputs(inputs)
        full, _ = forward_batch(self.params, ids, masks)
        trimmed, _ = forward_batch(self.params, ids, masks, trim=True)
        np.testing.assert_allclose(trimmed, full, rtol=0, atol=1e-13)

    def test_batch_matches_single(self):
        inputs = [assemble_single([5, 6], [7], 16), assemble_target([9, 10, 11], 16)]
        hidden, _ = forward_batch(self.params, *stack_inputs(inputs))
        for row, inp in zip(hidden, inputs):
            np.testing.assert_allclose(row, forward(self.params, inp)[0], rtol=0, atol=1e-13)

    def test_out_of_vocab_id(self):
        inp = FusedInput([2, 30, 3], [0, 0, 0], (0,), 3)
        with pytest.raises(ContractError):
            forward(self.params, inp)

    def test_too_long(self):
        with pytest.raises(ContractError):
            forward(self.params, assemble_target([5], 32))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_fault_names_layer(self):
        bad = self.params.copy()
        bad.arrays["layers.1.w1"][:] = np.inf
        with pytest.raises(NumericFault, match="layer 1"):
            forward(bad, assemble_target([5, 6], 16))


class TestExtraction:
    params = init_params(TINY)

    def test_query_rows(self):
        h = np.arange(16 * 8, dtype=float).reshape(16, 8)
        q = extract_query(h, assemble_single([5, 6], [7, 8, 9], 16).cls_positions)
        assert np.array_equal(q.v_doc, h[0]) and np.array_equal(q.v_gen, h[4])
        q = extract_query(h, assemble_single([], [], 16).cls_positions)
        assert np.array_equal(q.v_gen, h[2])
        q = extract_query(h, assemble_multi([5], [[6], [7], [8]], 4, 16).cls_positions)
        assert np.array_equal(q.v_gen, h[3])

    def test_needs_two_cls(self):
        with pytest.raises(ContractError):
            extract_query(np.zeros((4, 2)), (0,))

    def test_score_decomposition(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            hq, _ = forward(self.params, assemble_single(_rand_ids(rng, 3), _rand_ids(rng, 4), 16))
            ht, _ = forward(self.params, assemble_target(_rand_ids(rng, 6), 16))
            q, t = extract_query(hq, (0, 5)), extract_target(ht)
            assert np.array_equal(t.v, ht[0])
            assert abs(q.concat() @ t.replicated() - q.summed @ t.v) < 1e-12

    def test_doc_only_replication(self):
        h = np.random.default_rng(3).normal(size=(4, 8))
        q = extract_query(h, (0, 0))
        v = np.ones(8)
        assert np.isclose(q.concat() @ np.concatenate([v, v]), 2 * (q.v_doc @ v), rtol=0, atol=1e-12)


class TestBackward:
    params = init_params(TINY)

    def test_zero_upstream_zero_grads(self):
        h, trace = forward(self.params, assemble_single([5], [6, 7], 16))
        grads = backward(self.params, trace, np.zeros_like(h))
        assert all(not g.any() for g in grads.values())

    def test_shape_mismatch(self):
        h, trace = forward(self.params, assemble_single([5], [6, 7], 16))
        with pytest.raises(ContractError):
            backward(self.params, trace, np.zeros((16, 3)))

    def test_grad_shapes(self):
        h, trace = forward(self.params, assemble_single([5], [6, 7], 16))
        grads = backward(self.params, trace, np.ones_like(h))
        assert {n: g.shape for n, g in grads.items()} == dict(param_shapes(TINY))

    @pytest.mark.parametrize("mask", MASK_TYPES)
    def test_finite_difference(self, mask):
        rng = np.random.default_rng(4)
        params = init_params(TINY)
        for arr in params.arrays.values():
            arr += rng.normal(0, 0.1, arr.shape)
        inputs = [assemble_single(_rand_ids(rng, 3), _rand_ids(rng, 4), 16, mask),
                  assemble_target(_rand_ids(rng, 7), 16)]
        ids, masks = stack_inputs(inputs)
        probe = rng.normal(size=(2, 16, 8))

        def objective():
            return float((forward_batch(params, ids, masks)[0] * probe).sum())

        _, trace = forward_batch(params, ids, masks, trim=True)
        grads = backward_batch(params, trace, probe)
        for name in ("tok_emb", "pos_emb", "layers.0.wq", "layers.0.bv", "layers.1.w2", "layers.1.ln1_g"):
            arr = params.arrays[name]
            for flat in rng.choice(arr.size, 4, replace=False):
                idx = np.unravel_index(flat, arr.shape)
                orig = arr[idx]
                arr[idx] = orig + 1e-5
                up = objective()
                arr[idx] = orig - 1e-5
                down = objective()
                arr[idx] = orig
                num = (up - down) / 2e-5
                assert abs(num - grads[name][idx]) <= 1e-6 * max(1.0, abs(num))

    def test_pad_position_grads_zero_under_cls_loss(self):
        from gacr.training import loss_and_grads
        rng = np.random.default_rng(5)
        queries = [assemble_single(_rand_ids(rng, 2), _rand_ids(rng, 3), 16) for _ in range(3)]
        targets = [assemble_target(_rand_ids(rng, 4), 16) for _ in range(3)]
        _, grads = loss_and_grads(self.params, queries, targets)
        assert not grads["pos_emb"][9:].any()
        assert grads["pos_emb"][:9].any()


class TestGradCheck:
    @settings(max_examples=3, deadline=None)
    @given(st.integers(0, 1000))
    def test_small_config_passes(self, seed):
        assert grad_check(seed=seed, num_probes=40) < 1e-4

    def test_zero_probes(self):
        assert grad_check(num_probes=0) == 0.0

    def test_repeatable(self):
        assert grad_check(seed=7, num_probes=20) == grad_check(seed=7, num_probes=20)
