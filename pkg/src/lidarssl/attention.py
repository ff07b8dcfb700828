"""Masked-attention patch refinement and its cosine reconstruction loss.

One patch token per proposal is masked; its query is built from the
positional encoding alone (the content is withheld), and it attends over
the remaining tokens with scaled dot-product attention.  The loss drives
the reconstruction toward the original token.  The refined output feeds
only this loss; downstream projections consume the unrefined embeddings.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .encoders import EmbeddingSet
from .rng import make_rng
from .tensor import Tensor

_MASK_FILL = -1e30  # additive score mask; exp underflows to exactly 0.0


def masked_attention_reconstruct(
    params: dict[str, Tensor], tokens: Tensor, positional: Tensor, mask_index: int
) -> Tensor:
    """Reconstruct one masked token from its m-1 siblings; returns (1, C).

    ``tokens`` are positional encodings added to patch embeddings; only
    the masked row of ``positional`` is consumed (it forms the query), so
    the masked token's content cannot influence the output.
    """
    m, c = tokens.shape
    if m < 2:
        raise ValueError(f"masked attention needs at least 2 tokens, got {m}")
    if not 0 <= mask_index < m:
        raise ValueError(f"mask_index {mask_index} out of range for {m} tokens")
    unmasked = np.array([j for j in range(m) if j != mask_index], dtype=np.int64)
    q = T.matmul(T.gather_rows(positional, [mask_index]), params["attn.wq"])
    keys = T.matmul(T.gather_rows(tokens, unmasked), params["attn.wk"])
    vals = T.matmul(T.gather_rows(tokens, unmasked), params["attn.wv"])
    scores = T.scale(T.matmul(q, T.transpose(keys)), 1.0 / np.sqrt(c))
    weights = T.softmax_row(scores)
    return T.matmul(T.matmul(weights, vals), params["attn.wo"])


def reconstruction_loss(u: Tensor, u_hat: Tensor) -> Tensor:
    """1 - cosine(u, u_hat), eps-guarded; 0 when aligned, 2 when opposed."""
    un = T.l2_normalize(u)
    hn = T.l2_normalize(u_hat)
    cos = T.sum_rows(T.mul(un, hn))
    return T.mean_all(T.add_const(T.scale(cos, -1.0), 1.0))


def _batched_view_loss(params, tokens: Tensor, positional: Tensor, mask_slots, m: int) -> Tensor:
    """Cosine rows for all proposals of one view in a single attention chain.

    Scores outside a proposal's own unmasked tokens get an additive -1e30,
    which underflows to an exact zero weight after the softmax, so the
    batched result matches the per-proposal computation.
    """
    n_tokens, c = tokens.shape
    n_props = n_tokens // m
    masked_rows = np.arange(n_props, dtype=np.int64) * m + np.asarray(mask_slots, dtype=np.int64)
    q = T.matmul(T.gather_rows(positional, masked_rows), params["attn.wq"])
    keys = T.matmul(tokens, params["attn.wk"])
    vals = T.matmul(tokens, params["attn.wv"])
    scores = T.scale(T.matmul(q, T.transpose(keys)), 1.0 / np.sqrt(c))
    blocked = np.full((n_props, n_tokens), _MASK_FILL)
    for p in range(n_props):
        blocked[p, p * m : (p + 1) * m] = 0.0
    blocked[np.arange(n_props), masked_rows] = _MASK_FILL
    weights = T.softmax_row(T.add(scores, Tensor(blocked)))
    u_hat = T.matmul(T.matmul(weights, vals), params["attn.wo"])
    u = T.gather_rows(tokens, masked_rows)
    return T.sum_rows(T.mul(T.l2_normalize(u), T.l2_normalize(u_hat)))


def refinement_loss_batch(params: dict[str, Tensor], emb: EmbeddingSet, seed: int) -> Tensor:
    """Mean reconstruction loss over all proposals of both views.

    Masks one uniformly seeded slot per proposal; deterministic per seed.
    """
    if emb.m < 2:
        raise ValueError(f"refinement needs m >= 2 patches, got {emb.m}")
    cos_rows = []
    for view_id, patch_embed, pos in ((1, emb.patch_embed_1, emb.pos_1), (2, emb.patch_embed_2, emb.pos_2)):
        slots = make_rng(seed, "mask-slot", view_id).integers(emb.m, size=emb.n_pairs)
        tokens = T.add(pos, patch_embed)
        cos_rows.append(_batched_view_loss(params, tokens, pos, slots, emb.m))
    cos = T.concat(cos_rows, axis=0)
    return T.mean_all(T.add_const(T.scale(cos, -1.0), 1.0))
