"""Activation-weighted low-rank factorization of attention matrices and
the budget allocation that decides each matrix's rank.

A matrix W is replaced by L @ R where L = U_r Sigma_r and
R = V_r^T D^{-1}, obtained from the SVD of W D with D = diag(x_din);
this pair minimizes ||(W - LR) D||_F over all rank-r pairs.  The MHA
budget is split between the (q, k) and (v, o) groups (default 1:3, v/o
getting more because they are less low-rank), with a dense passthrough
whenever a group's share would exceed its dense size.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import floor

import numpy as np

from .errors import AllocationError, CalibrationError, ShapeMismatchError
from .linalg import as_matrix, svd, truncate, weighted_frobenius_error
from .util import round_half_up

# Floor applied to x_din before forming D; dead input features would
# otherwise make D^{-1} undefined.
XDIN_EPS = 1e-8


@dataclass(frozen=True)
class FactorPair:
    """The (L, R) low-rank replacement of one weight matrix.

    A pair only saves parameters while rank * (d_out + d_in) < d_out * d_in;
    the allocator keeps matrices dense past that point, but full-rank
    pairs are still legal values (used by equivalence tests).
    """

    l: np.ndarray       # (d_out, r)
    r: np.ndarray       # (r, d_in)
    rank: int
    source: str
    weighted_error: float

    @property
    def d_out(self) -> int:
        return self.l.shape[0]

    @property
    def d_in(self) -> int:
        return self.r.shape[1]

    @property
    def n_params(self) -> int:
        return self.rank * (self.d_out + self.d_in)

    @property
    def saves_params(self) -> bool:
        return self.n_params < self.d_out * self.d_in


def floored_weights(x_din, d_in: int, eps: float = XDIN_EPS) -> np.ndarray:
    x = np.asarray(x_din, dtype=np.float64)
    if x.shape != (d_in,):
        raise ShapeMismatchError(f"x_din has shape {x.shape}, expected ({d_in},)")
    if np.any(x < 0.0) or not np.all(np.isfinite(x)):
        raise ValueError("x_din entries must be finite and non-negative")
    return np.maximum(x, eps)


def awsvd_factor(w, x_din, rank: int, name: str = "matrix", eps: float = XDIN_EPS) -> FactorPair:
    """Best rank-r pair under the diagonal activation weighting.

    All-zero x_din entries are floored to eps, never an error: the
    weighting then degenerates toward plain truncated SVD for those
    columns.
    """
    w = as_matrix(w, name)
    d = floored_weights(x_din, w.shape[1], eps)
    decomp = svd(w * d[None, :], name=name)
    left, right = truncate(decomp, rank)
    r_mat = right / d[None, :]
    err = weighted_frobenius_error(w, left, r_mat, d)
    return FactorPair(l=left, r=r_mat, rank=rank, source=name, weighted_error=err)


def plain_factor(w, rank: int, name: str = "matrix") -> FactorPair:
    """Unweighted truncated SVD, kept around as the baseline factorizer."""
    w = as_matrix(w, name)
    left, right = truncate(svd(w, name=name), rank)
    err = weighted_frobenius_error(w, left, right, np.ones(w.shape[1]))
    return FactorPair(l=left, r=right, rank=rank, source=name, weighted_error=err)


# ---------------------------------------------------------------------------
# Budget allocation


@dataclass(frozen=True)
class MatrixScheme:
    kind: str            # "dense" | "factored"
    rank: int | None
    n_params: int


@dataclass(frozen=True)
class MhaAllocation:
    """Resolved parameter budget for the four attention matrices.

    qk_budget/vo_budget are the post-overflow group shares: when a
    group's share exceeds its dense size the group stays dense and the
    surplus moves to the other group.  slack is the budget left over by
    flooring ranks (always < d_out + d_in per factored matrix, never
    redistributed).
    """

    budget: int
    qk_budget: int
    vo_budget: int
    alloc_ratio: tuple[float, float]
    schemes: dict[str, MatrixScheme]
    slack: int

    @property
    def n_params(self) -> int:
        return sum(s.n_params for s in self.schemes.values())


def parse_alloc_ratio(text: str) -> tuple[float, float]:
    """Parse "1:3" style qk:vo ratios."""
    try:
        qk, vo = (float(part) for part in text.split(":"))
    except ValueError as exc:
        raise ValueError(f"allocation ratio must look like '1:3', got {text!r}") from exc
    if qk <= 0 or vo <= 0:
        raise ValueError("allocation ratio parts must be positive")
    return qk, vo


def allocate_mha(
    dims: dict[str, tuple[int, int]],
    layer_ratio: float,
    alloc_ratio: tuple[float, float] = (1.0, 3.0),
) -> MhaAllocation:
    """Split round(total * layer_ratio) parameters across q/k/v/o.

    The group split follows alloc_ratio; inside a group the two matrices
    split equally and each gets rank floor(share / (d_out + d_in)),
    minimum 1.  Groups whose share covers their dense size pass through
    dense and push the surplus to the other group.
    """
    if not 0.0 < layer_ratio <= 1.0:
        raise ValueError(f"layer_ratio must lie in (0, 1], got {layer_ratio}")
    if set(dims) != {"q_proj", "k_proj", "v_proj", "o_proj"}:
        raise ValueError("dims must cover exactly q_proj, k_proj, v_proj, o_proj")
    size = {m: d_out * d_in for m, (d_out, d_in) in dims.items()}
    total = sum(size.values())
    budget = round_half_up(total * layer_ratio)
    qk_w, vo_w = alloc_ratio
    if qk_w <= 0 or vo_w <= 0:
        raise ValueError("allocation ratio parts must be positive")
    vo_budget = round_half_up(budget * vo_w / (qk_w + vo_w))
    qk_budget = budget - vo_budget

    dense_qk = size["q_proj"] + size["k_proj"]
    dense_vo = size["v_proj"] + size["o_proj"]
    qk_dense = vo_dense = False
    if vo_budget >= dense_vo:
        vo_dense = True
        vo_budget = dense_vo
        qk_budget = budget - dense_vo
    if qk_budget >= dense_qk:
        qk_dense = True
        qk_budget = dense_qk
        if not vo_dense:
            vo_budget = budget - dense_qk
            if vo_budget >= dense_vo:
                vo_dense = True
                vo_budget = dense_vo

    schemes: dict[str, MatrixScheme] = {}
    for group, group_budget, is_dense in (
        (("q_proj", "k_proj"), qk_budget, qk_dense),
        (("v_proj", "o_proj"), vo_budget, vo_dense),
    ):
        for m in group:
            if is_dense:
                schemes[m] = MatrixScheme(kind="dense", rank=None, n_params=size[m])
            else:
                d_out, d_in = dims[m]
                rank = max(1, floor((group_budget / 2.0) / (d_out + d_in)))
                schemes[m] = MatrixScheme(kind="factored", rank=rank, n_params=rank * (d_out + d_in))

    realized = sum(s.n_params for s in schemes.values())
    if realized > budget:
        raise AllocationError(
            f"MHA budget {budget} is too small: even rank-1 factors need {realized} parameters"
        )
    return MhaAllocation(
        budget=budget,
        qk_budget=qk_budget,
        vo_budget=vo_budget,
        alloc_ratio=tuple(alloc_ratio),
        schemes=schemes,
        slack=budget - realized,
    )


def compress_mha(
    weights: dict[str, np.ndarray],
    x_din_by_matrix: dict[str, np.ndarray],
    alloc: MhaAllocation,
    use_activation_weights: bool = True,
) -> dict[str, FactorPair | None]:
    """Apply the resolved schemes: FactorPair per factored matrix, None
    for dense passthrough.  x_din entries must be present for every
    matrix that gets factored with activation weighting."""
    out: dict[str, FactorPair | None] = {}
    for m, scheme in alloc.schemes.items():
        if scheme.kind == "dense":
            out[m] = None
            continue
        if use_activation_weights:
            if m not in x_din_by_matrix:
                raise CalibrationError(f"no activation statistics for {m}")
            out[m] = awsvd_factor(weights[m], x_din_by_matrix[m], scheme.rank, name=m)
        else:
            out[m] = plain_factor(weights[m], scheme.rank, name=m)
    return out
