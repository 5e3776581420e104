"""Incremental cross-attention with knowledge tokens.

One shared attention block serves every session. A single transfer token
(the query) is trained throughout; each session contributes one retention
token that joins the patch sequence as key/value and is frozen once its
session ends. Pairing the transfer token with session s's retention token
yields that session's embedding, so a model that has seen t sessions emits
t embeddings per image.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor, TensorError


@dataclass
class IcaConfig:
    d: int = 384  # token dimension
    l: int = 384  # attention embedding dimension (kept equal to d)
    heads: int = 8
    mlp_hidden: int = 0  # 0 -> 4*d
    eps_norm: float = 1e-5
    kr_init_from_kt: bool = False  # fresh random init by default

    def __post_init__(self):
        if self.mlp_hidden == 0:
            self.mlp_hidden = 4 * self.d
        if self.d != self.l:
            raise ValueError(f"token dim {self.d} must equal embedding dim {self.l}")
        if self.l % self.heads != 0:
            raise ValueError(f"embedding dim {self.l} not divisible by {self.heads} heads")

    @property
    def head_dim(self) -> int:
        return self.l // self.heads

    @property
    def attn_scale(self) -> float:
        return 1.0 / np.sqrt(self.l / self.heads)


@dataclass
class IcaState:
    """Shared attention block plus the token bank.

    kr_tokens[0..t-2] are frozen while session t runs; only the newest
    retention token and the transfer token keep training. Exclusively
    owned by one trainer; frozen snapshots may be read concurrently.
    """

    config: IcaConfig
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    b_o: Tensor
    norm1_gain: Tensor
    norm1_bias: Tensor
    norm2_gain: Tensor
    norm2_bias: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    kt_token: Tensor = None
    kr_tokens: list = field(default_factory=list)

    @property
    def session_count(self) -> int:
        return len(self.kr_tokens)

    @property
    def frozen_flags(self) -> list:
        return [not kr.requires_grad for kr in self.kr_tokens]

    def block_parameters(self) -> list:
        """Shared-block weights, excluding tokens."""
        return [
            self.w_q, self.w_k, self.w_v, self.w_o, self.b_o,
            self.norm1_gain, self.norm1_bias, self.norm2_gain, self.norm2_bias,
            self.mlp_w1, self.mlp_b1, self.mlp_w2, self.mlp_b2,
        ]

    def trainable_parameters(self) -> list:
        params = self.block_parameters() + [self.kt_token]
        params += [kr for kr in self.kr_tokens if kr.requires_grad]
        return params


def init_ica(config: IcaConfig, rng: np.random.Generator, dtype=np.float64) -> IcaState:
    """Fresh block with the transfer token but no sessions yet."""
    d, l, hid = config.d, config.l, config.mlp_hidden
    state = IcaState(
        config=config,
        w_q=T.uniform_param(rng, (d, l), dtype=dtype),
        w_k=T.uniform_param(rng, (d, l), dtype=dtype),
        w_v=T.uniform_param(rng, (d, l), dtype=dtype),
        w_o=T.uniform_param(rng, (l, d), dtype=dtype),
        b_o=T.uniform_param(rng, (d,), fan_in=l, dtype=dtype),
        norm1_gain=Tensor(np.ones(d, dtype=dtype), requires_grad=True),
        norm1_bias=Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
        norm2_gain=Tensor(np.ones(d, dtype=dtype), requires_grad=True),
        norm2_bias=Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
        mlp_w1=T.uniform_param(rng, (d, hid), dtype=dtype),
        mlp_b1=T.uniform_param(rng, (hid,), fan_in=d, dtype=dtype),
        mlp_w2=T.uniform_param(rng, (hid, d), dtype=dtype),
        mlp_b2=T.uniform_param(rng, (d,), fan_in=hid, dtype=dtype),
    )
    state.kt_token = T.uniform_param(rng, (d,), fan_in=d, dtype=dtype)
    return state


def add_session(state: IcaState, rng: np.random.Generator) -> None:
    """Start a session: freeze existing retention tokens, append a new one."""
    for kr in state.kr_tokens:
        kr.requires_grad = False
    cfg = state.config
    if cfg.kr_init_from_kt:
        new = Tensor(state.kt_token.data.copy(), requires_grad=True)
    else:
        new = T.uniform_param(rng, (cfg.d,), fan_in=cfg.d, dtype=state.kt_token.dtype)
    state.kr_tokens.append(new)


def _as_batch(patches: Tensor):
    """Accept [L,d] or [B,L,d]; return ([B,L,d] tensor, had_batch flag)."""
    if patches.ndim == 2:
        return patches.reshape(1, *patches.shape), False
    if patches.ndim == 3:
        return patches, True
    raise TensorError(f"patches must be [L,d] or [B,L,d], got {patches.shape}")


def cross_attention(
    state: IcaState,
    kt: Tensor,
    kr: Tensor,
    patches: Tensor,
    attn_out: list = None,
) -> Tensor:
    """Single-query multi-head cross-attention.

    `kt` is the query row; keys/values are the retention token prepended to
    the patch rows. Inputs are expected pre-normalised by the caller.
    Returns [d] for [L,d] patches, [B,d] for [B,L,d]. When `attn_out` is a
    list, the softmax weights are appended to it as a [B, heads, L+1] array.
    """
    cfg = state.config
    d, l, nh, dh = cfg.d, cfg.l, cfg.heads, cfg.head_dim
    if kt.shape != (d,) or kr.shape != (d,):
        raise TensorError(f"token shapes {kt.shape}/{kr.shape} do not match d={d}")
    p3, batched = _as_batch(patches)
    bsz, seq_len, pd = p3.shape
    if pd != d:
        raise TensorError(f"patch dim {pd} does not match d={d}")
    n = seq_len + 1

    q = T.matmul(kt.reshape(1, d), state.w_q)  # [1, l]
    kr_row = kr.reshape(1, 1, d)
    seq = T.concat([T.repeat_rows(kr_row, bsz), p3], axis=1)  # [B, n, d]
    seq2 = seq.reshape(bsz * n, d)
    keys = T.matmul(seq2, state.w_k)  # [B*n, l]
    vals = T.matmul(seq2, state.w_v).reshape(bsz, n, l)

    contexts = []
    weights = [] if attn_out is not None else None
    for h in range(nh):
        lo, hi = h * dh, (h + 1) * dh
        q_h = q.slice(1, lo, hi)  # [1, dh]
        scores = T.matmul(keys.slice(1, lo, hi), T.transpose(q_h))  # [B*n, 1]
        scores = T.scale(scores.reshape(bsz, n), cfg.attn_scale)
        attn = T.softmax_rows(scores)  # [B, n]
        if weights is not None:
            weights.append(attn.data.copy())
        contexts.append(T.weighted_rows_sum(attn, vals.slice(2, lo, hi)))  # [B, dh]
    z = T.concat(contexts, axis=1)  # [B, l]
    out = T.affine(z, state.w_o, state.b_o)  # [B, d]
    if weights is not None:
        attn_out.append(np.stack(weights, axis=1))
    return out if batched else out.reshape(d)


def ica_forward(
    state: IcaState,
    session_index: int,
    patches: Tensor,
    attn_out: list = None,
) -> Tensor:
    """Session-specific embedding: pre-norm attention plus MLP, both residual."""
    if not 1 <= session_index <= state.session_count:
        raise TensorError(
            f"session index {session_index} out of range 1..{state.session_count}"
        )
    cfg = state.config
    p3, batched = _as_batch(patches)
    bsz = p3.shape[0]

    def norm1(t):
        return T.layer_norm(t, state.norm1_gain, state.norm1_bias, cfg.eps_norm)

    kt_row = state.kt_token.reshape(1, cfg.d)
    kr = state.kr_tokens[session_index - 1]
    ca = cross_attention(
        state,
        norm1(state.kt_token),
        norm1(kr),
        norm1(p3),
        attn_out=attn_out,
    )  # [B, d]
    e1 = T.add(T.repeat_rows(kt_row, bsz), ca)
    h = T.layer_norm(e1, state.norm2_gain, state.norm2_bias, cfg.eps_norm)
    h = T.affine(h, state.mlp_w1, state.mlp_b1)
    h = T.gelu(h)
    h = T.affine(h, state.mlp_w2, state.mlp_b2)
    e = T.add(e1, h)
    return e if batched else e.reshape(cfg.d)


def forward_all_sessions(state: IcaState, patches: Tensor, attn_out: list = None) -> list:
    """Embeddings for every session seen so far, in session order."""
    return [
        ica_forward(state, s, patches, attn_out=attn_out)
        for s in range(1, state.session_count + 1)
    ]


def export_attention_weights(attn: np.ndarray, path: str) -> None:
    """Write one forward pass's attention weights for offline visualisation.

    Format: a one-line text header "<heads> <L+1>\\n" followed by the
    row-major weights as little-endian 32-bit floats.
    """
    arr = np.asarray(attn)
    if arr.ndim == 3:  # [B, heads, n] -> first item
        arr = arr[0]
    heads, n = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"{heads} {n}\n".encode())
        fh.write(struct.pack(f"<{heads * n}f", *arr.astype(np.float32).reshape(-1)))


def read_attention_weights(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().decode().split()
        heads, n = int(header[0]), int(header[1])
        payload = fh.read(4 * heads * n)
    return np.array(struct.unpack(f"<{heads * n}f", payload), dtype=np.float32).reshape(heads, n)
