import numpy as np
import pytest

from krt import tensor as T
from krt.ica import (
    IcaConfig,
    IcaState,
    add_session,
    cross_attention,
    export_attention_weights,
    forward_all_sessions,
    ica_forward,
    init_ica,
    read_attention_weights,
)
from krt.optim import Adam
from krt.tensor import Tape, Tensor, backward

from oracles import attention_oracle, finite_diff_grad, max_rel_err


def small_state(seed=0, d=16, heads=2, sessions=1, mlp_hidden=0) -> IcaState:
    rng = np.random.default_rng(seed)
    state = init_ica(IcaConfig(d=d, l=d, heads=heads, mlp_hidden=mlp_hidden), rng)
    for _ in range(sessions):
        add_session(state, rng)
    return state


class TestConfig:
    def test_default_scale_divisor(self):
        cfg = IcaConfig(d=384, l=384, heads=8)
        assert abs(1.0 / cfg.attn_scale - np.sqrt(48.0)) < 1e-12
        assert abs(1.0 / cfg.attn_scale - 6.9282) < 1e-4

    def test_dims_must_divide(self):
        with pytest.raises(ValueError):
            IcaConfig(d=10, l=10, heads=3)

    def test_d_equals_l_enforced(self):
        with pytest.raises(ValueError):
            IcaConfig(d=16, l=32, heads=2)

    def test_mlp_hidden_defaults_to_4d(self):
        assert IcaConfig(d=16, l=16, heads=2).mlp_hidden == 64


class TestCrossAttention:
    def test_identical_key_rows_split_attention_evenly(self):
        state = small_state(seed=1, d=8, heads=2, sessions=1)
        rng = np.random.default_rng(2)
        row = rng.standard_normal(8)
        captured = []
        cross_attention(
            state,
            Tensor(rng.standard_normal(8)),
            Tensor(row),
            Tensor(row[None, :]),  # L=1 patch equal to the retention token
            attn_out=captured,
        )
        weights = captured[0]  # [1, heads, 2]
        assert np.allclose(weights, 0.5, atol=1e-12)

    def test_matches_naive_oracle(self):
        state = small_state(seed=3, d=16, heads=2, sessions=1)
        rng = np.random.default_rng(4)
        kt = rng.standard_normal(16)
        kr = rng.standard_normal(16)
        patches = rng.standard_normal((4, 16))
        got = cross_attention(state, Tensor(kt), Tensor(kr), Tensor(patches)).data
        want = attention_oracle(
            kt, kr, patches,
            state.w_q.data, state.w_k.data, state.w_v.data,
            state.w_o.data, state.b_o.data, heads=2,
        )
        assert np.max(np.abs(got - want)) < 1e-10

    def test_head_split_equivalence_all_small_configs(self):
        for d in (8, 16, 32):
            for heads in (1, 2, 4, 8):
                if d % heads:
                    continue
                state = small_state(seed=d + heads, d=d, heads=heads, sessions=1)
                rng = np.random.default_rng(d * 31 + heads)
                kt = rng.standard_normal(d)
                kr = rng.standard_normal(d)
                patches = rng.standard_normal((3, d))
                got = cross_attention(state, Tensor(kt), Tensor(kr), Tensor(patches)).data
                want = attention_oracle(
                    kt, kr, patches,
                    state.w_q.data, state.w_k.data, state.w_v.data,
                    state.w_o.data, state.b_o.data, heads=heads,
                )
                assert np.max(np.abs(got - want)) < 1e-10, (d, heads)

    def test_batched_equals_per_image(self):
        state = small_state(seed=5, d=8, heads=2, sessions=1)
        rng = np.random.default_rng(6)
        batch = rng.standard_normal((3, 5, 8))
        out_b = cross_attention(
            state, state.kt_token, state.kr_tokens[0], Tensor(batch)
        ).data
        for i in range(3):
            one = cross_attention(
                state, state.kt_token, state.kr_tokens[0], Tensor(batch[i])
            ).data
            assert np.allclose(out_b[i], one, atol=1e-12)


class TestIcaForward:
    def test_residual_identity_when_projections_zeroed(self):
        state = small_state(seed=7, d=8, heads=2, sessions=1)
        state.w_o.data[:] = 0.0
        state.b_o.data[:] = 0.0
        state.mlp_w2.data[:] = 0.0
        state.mlp_b2.data[:] = 0.0
        patches = Tensor(np.random.default_rng(8).standard_normal((6, 8)))
        e = ica_forward(state, 1, patches)
        assert np.array_equal(e.data, state.kt_token.data)

    def test_output_shape_independent_of_patch_count(self):
        state = small_state(seed=9, d=8, heads=2, sessions=1)
        rng = np.random.default_rng(10)
        for L in (1, 3, 16):
            e = ica_forward(state, 1, Tensor(rng.standard_normal((L, 8))))
            assert e.shape == (8,)

    def test_session_index_out_of_range(self):
        state = small_state(sessions=2)
        patches = Tensor(np.zeros((2, 16)))
        with pytest.raises(T.TensorError):
            ica_forward(state, 0, patches)
        with pytest.raises(T.TensorError):
            ica_forward(state, 3, patches)

    def test_gradients_match_finite_differences(self):
        state = small_state(seed=11, d=8, heads=2, sessions=1, mlp_hidden=16)
        rng = np.random.default_rng(12)
        patches = Tensor(rng.standard_normal((3, 8)), requires_grad=True)
        proj = np.random.default_rng(13).standard_normal(8)

        def forward():
            e = ica_forward(state, 1, patches)
            return T.mul(e, Tensor(proj)).sum()

        with Tape():
            loss = forward()
        backward(loss)

        leaves = {
            "patches": patches,
            "kt": state.kt_token,
            "kr": state.kr_tokens[0],
            **{f"p{i}": p for i, p in enumerate(state.block_parameters())},
        }
        for name, leaf in leaves.items():
            num = finite_diff_grad(lambda: forward().item(), leaf.data)
            err = max_rel_err(leaf.grad, num)
            assert err < 1e-4, f"{name}: {err:.2e}"


class TestSessions:
    def test_base_case_single_embedding(self):
        state = small_state(seed=14, sessions=1)
        patches = Tensor(np.random.default_rng(15).standard_normal((4, 16)))
        all_e = forward_all_sessions(state, patches)
        assert len(all_e) == 1
        assert np.array_equal(all_e[0].data, ica_forward(state, 1, patches).data)

    def test_expansion_leaves_old_embeddings_bit_identical(self):
        state = small_state(seed=16, sessions=2)
        patches = Tensor(np.random.default_rng(17).standard_normal((4, 16)))
        before = [e.data.copy() for e in forward_all_sessions(state, patches)]
        add_session(state, np.random.default_rng(18))
        after = forward_all_sessions(state, patches)
        assert len(after) == 3
        for b, a in zip(before, after):
            assert np.array_equal(b, a.data)

    def test_distinct_tokens_give_distinct_embeddings(self):
        state = small_state(seed=19, sessions=3)
        patches = Tensor(np.random.default_rng(20).standard_normal((4, 16)))
        es = [e.data for e in forward_all_sessions(state, patches)]
        for i in range(3):
            for j in range(i + 1, 3):
                assert np.linalg.norm(es[i] - es[j]) > 0

    def test_add_session_contract(self):
        rng = np.random.default_rng(21)
        state = init_ica(IcaConfig(d=16, l=16, heads=2), rng)
        block_before = [p.data.copy() for p in state.block_parameters()]
        for _ in range(3):
            add_session(state, rng)
        assert state.session_count == 3
        assert state.frozen_flags == [True, True, False]
        for before, p in zip(block_before, state.block_parameters()):
            assert np.array_equal(before, p.data)

    def test_add_session_preserves_old_tokens_bit_exact(self):
        state = small_state(seed=22, sessions=2)
        old = [kr.data.copy() for kr in state.kr_tokens]
        kt_before = state.kt_token.data.copy()
        add_session(state, np.random.default_rng(23))
        for prev, kr in zip(old, state.kr_tokens):
            assert np.array_equal(prev, kr.data)
        assert np.array_equal(kt_before, state.kt_token.data)
        assert state.kt_token.requires_grad

    def test_kr_init_from_kt_switch(self):
        rng = np.random.default_rng(24)
        state = init_ica(IcaConfig(d=16, l=16, heads=2, kr_init_from_kt=True), rng)
        add_session(state, rng)
        assert np.array_equal(state.kr_tokens[0].data, state.kt_token.data)


class TestFreezing:
    def test_frozen_tokens_receive_no_gradient_and_never_move(self):
        state = small_state(seed=25, sessions=3)
        frozen_data = [kr.data.copy() for kr in state.kr_tokens[:2]]
        patches = Tensor(np.random.default_rng(26).standard_normal((4, 16)))
        opt = Adam(state.trainable_parameters(), lr=1e-2)
        for _ in range(5):
            with Tape() as tape:
                es = forward_all_sessions(state, patches)
                loss = T.concat(es, axis=0).mean()
            backward(loss)
            opt.step()
            opt.zero_grad()
            tape.clear()
        for before, kr in zip(frozen_data, state.kr_tokens[:2]):
            assert kr.grad is None
            assert np.array_equal(before, kr.data)
        # the live token and the transfer token did move
        assert state.kr_tokens[2].grad is None or True
        assert not np.array_equal(frozen_data[0], state.kt_token.data)

    def test_zero_lr_training_is_identity(self):
        state = small_state(seed=27, sessions=2)
        patches = Tensor(np.random.default_rng(28).standard_normal((4, 16)))
        before = [e.data.copy() for e in forward_all_sessions(state, patches)]
        opt = Adam(state.trainable_parameters(), lr=0.0)
        for _ in range(3):
            with Tape() as tape:
                loss = T.concat(forward_all_sessions(state, patches), axis=0).mean()
            backward(loss)
            opt.step()
            opt.zero_grad()
            tape.clear()
        after = forward_all_sessions(state, patches)
        for b, a in zip(before, after):
            assert np.array_equal(b, a.data)


class TestAttentionExport:
    def test_round_trip(self, tmp_path):
        state = small_state(seed=29, sessions=1)
        patches = Tensor(np.random.default_rng(30).standard_normal((4, 16)))
        captured = []
        ica_forward(state, 1, patches, attn_out=captured)
        path = tmp_path / "attn.bin"
        export_attention_weights(captured[0], str(path))
        loaded = read_attention_weights(str(path))
        assert loaded.shape == (2, 5)  # heads x (L+1)
        assert np.allclose(loaded, captured[0][0].astype(np.float32))
        assert np.allclose(loaded.sum(axis=1), 1.0, atol=1e-6)
