"""Contrastive losses over projected region embeddings.

The NT-Xent term for an anchor i with positive j is

    -log( exp(sim(i,j)/tau) / sum_{k != i} exp(sim(i,k)/tau) )

with cosine similarity; rows are l2-normalised internally, so every loss
here is invariant to a common positive rescaling of the embeddings.
Logits are max-subtracted per row before exponentiation; the forbidden
self column carries an additive -1e30, which underflows to an exact zero
term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

_FORBID = -1e30


@dataclass
class LossWeights:
    lambda_proposal: float = 1.0
    lambda_p2p: float = 1.0
    lambda_rec: float = 0.05
    temperature: float = 0.1

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        for name in ("lambda_proposal", "lambda_p2p", "lambda_rec"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def _logits(embeddings: Tensor, tau: float) -> Tensor:
    """Pairwise cosine similarities over rows, divided by the temperature."""
    e = T.l2_normalize(embeddings)
    return T.scale(T.matmul(e, T.transpose(e)), 1.0 / tau)


def _row_lse(logits: Tensor, forbid: np.ndarray) -> Tensor:
    """Row-wise log-sum-exp with an additive mask, max-subtracted for stability."""
    masked = T.add(logits, Tensor(forbid))
    m = T.rowmax(masked)
    z = T.exp(T.sub_colvec(masked, m))
    return T.add(T.log(T.sum_rows(z)), m)


def _pos_terms(logits: Tensor, pos_cols: np.ndarray) -> Tensor:
    n = logits.shape[0]
    onehot = np.zeros(logits.shape)
    onehot[np.arange(n), pos_cols] = 1.0
    return T.sum_rows(T.mul(logits, Tensor(onehot)))


def nt_xent(embeddings: Tensor, i: int, j: int, tau: float) -> Tensor:
    """Directed NT-Xent term for anchor row i and positive row j."""
    n = embeddings.shape[0]
    if n < 2:
        raise ValueError(f"nt_xent needs at least 2 rows, got {n}")
    if i == j:
        raise ValueError("anchor and positive must differ")
    logits = _logits(embeddings, tau)
    row = T.gather_rows(logits, [i])
    forbid = np.zeros((1, n))
    forbid[0, i] = _FORBID
    lse = _row_lse(row, forbid)
    pos = _pos_terms(row, np.array([j]))
    return T.sub(lse, pos)


def proposal_loss(proj_prop: Tensor, tau: float) -> Tensor:
    """Cross-view proposal term: mean directed NT-Xent over consecutive-row pairs."""
    n = proj_prop.shape[0]
    if n % 2 != 0:
        raise ValueError(f"proposal projections must pair up, got {n} rows")
    logits = _logits(proj_prop, tau)
    forbid = np.full((n, n), 0.0)
    np.fill_diagonal(forbid, _FORBID)
    lse = _row_lse(logits, forbid)
    partners = np.arange(n, dtype=np.int64) ^ 1  # 2k <-> 2k+1
    pos = _pos_terms(logits, partners)
    return T.mean_all(T.sub(lse, pos))


def proposal_to_patch_loss(
    proj_prop: Tensor, proj_patch: Tensor, tau: float, negative_pool: str = "mixed"
) -> Tensor:
    """Proposal-to-aggregated-patch term, both directions, averaged.

    ``mixed`` (default) draws negatives from the concatenation of both
    projection sets, excluding only the anchor itself; ``cross`` restricts
    each anchor's denominator to the opposing set.
    """
    if proj_prop.shape != proj_patch.shape:
        raise ValueError(f"shape mismatch: {proj_prop.shape} vs {proj_patch.shape}")
    n = proj_prop.shape[0]
    if negative_pool == "mixed":
        both = T.concat([proj_prop, proj_patch], axis=0)
        logits = _logits(both, tau)
        forbid = np.full((2 * n, 2 * n), 0.0)
        np.fill_diagonal(forbid, _FORBID)
        lse = _row_lse(logits, forbid)
        partners = np.concatenate([np.arange(n) + n, np.arange(n)]).astype(np.int64)
        pos = _pos_terms(logits, partners)
        return T.mean_all(T.sub(lse, pos))
    if negative_pool == "cross":
        p = T.l2_normalize(proj_prop)
        q = T.l2_normalize(proj_patch)
        logits = T.scale(T.matmul(p, T.transpose(q)), 1.0 / tau)
        no_mask = np.zeros((n, n))
        diag = np.arange(n, dtype=np.int64)
        fwd = T.sub(_row_lse(logits, no_mask), _pos_terms(logits, diag))
        logits_t = T.transpose(logits)
        bwd = T.sub(_row_lse(logits_t, no_mask), _pos_terms(logits_t, diag))
        return T.mean_all(T.concat([fwd, bwd], axis=0))
    raise ValueError(f"unknown negative pool {negative_pool!r}")


def total_loss(
    loss_p: Tensor | None,
    loss_p2p: Tensor | None,
    loss_rec: Tensor | None,
    weights: LossWeights,
) -> Tensor:
    """Weighted sum of the three terms; missing terms count as zero."""
    total = None
    for term, lam in (
        (loss_p, weights.lambda_proposal),
        (loss_p2p, weights.lambda_p2p),
        (loss_rec, weights.lambda_rec),
    ):
        if term is None:
            continue
        piece = T.scale(term, lam)
        total = piece if total is None else T.add(total, piece)
    if total is None:
        raise ValueError("total_loss needs at least one term")
    return total
