"""Weight reprojection that restores the stability certificate after updates."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .dynamics import ConvBlockParams, FcBlock, FcBlockParams, assemble_A
from .numerics import as_matrix

__all__ = [
    "ProjectionOutcome",
    "assemble_A",
    "fc_bound",
    "project_fc",
    "project_fc_params",
    "project_block",
    "project_conv",
]


@dataclass(frozen=True)
class ProjectionOutcome:
    modified: bool
    pre_norm: float
    post_norm: float
    scale_factor: float = 1.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def fc_bound(eps: float, relaxed: bool = False) -> float:
    """Bound on ``||R^T R||_F``: ``1 - 2 eps``, or ``2 (1 - eps)`` when relaxed."""
    if not 0.0 < eps < 0.5:
        raise ValueError(f"eps must lie in (0, 0.5), got {eps}")
    return 2.0 * (1.0 - eps) if relaxed else 1.0 - 2.0 * eps


def _gram_fro(R: np.ndarray) -> float:
    G = R.T @ R
    return float(np.sqrt(np.sum(G * G)))


def project_fc(R, eps: float, relaxed: bool = False) -> tuple[np.ndarray, ProjectionOutcome]:
    """Rescale ``R`` so that ``||R^T R||_F <= delta``.

    Feasible inputs are returned untouched (same values, new array). The
    rescaled result is nudged down by ulps until the recomputed norm is within
    the bound, which makes the map idempotent bit for bit.
    """
    delta = fc_bound(eps, relaxed)
    R = as_matrix(R)
    if R.shape[0] != R.shape[1]:
        raise ValueError(f"R must be square, got {R.shape}")
    pre = _gram_fro(R)
    if pre <= delta:
        return R.copy(), ProjectionOutcome(False, pre, pre, 1.0)
    scale = np.sqrt(delta) / np.sqrt(pre)
    out = R * scale
    post = _gram_fro(out)
    while post > delta:
        scale = np.nextafter(scale, 0.0)
        out = R * scale
        post = _gram_fro(out)
    return out, ProjectionOutcome(True, pre, post, float(scale))


def project_fc_params(p: FcBlockParams, relaxed: bool = False) -> tuple[FcBlockParams, ProjectionOutcome]:
    if p.A_direct is not None:
        raise ValueError("blocks with an explicit state matrix cannot be reprojected")
    R, outcome = project_fc(p.R, p.eps, relaxed)
    return dataclasses.replace(p, R=R), outcome


def _bank_offcentre_sum(bank: np.ndarray, c: int, centre: int) -> float:
    mask = np.ones(bank.shape, dtype=bool)
    mask[c, centre, centre] = False
    return float(np.sum(np.abs(bank[mask])))


def project_conv(p: ConvBlockParams) -> tuple[ConvBlockParams, list[ProjectionOutcome]]:
    """Clamp ``delta``, pin the central self-weights and shrink each filter bank.

    For every output channel ``c`` the absolute sum over all weights feeding
    that channel, except the central self-weight, is capped at
    ``1 - eps - |delta_c|``, scaling those weights uniformly when it is
    exceeded.
    """
    if not 0.0 < p.eps < p.eta < 1.0:
        raise ValueError(f"need 0 < eps < eta < 1, got eps={p.eps}, eta={p.eta}")
    C = p.C.copy()
    centre = p.filter_size // 2
    delta = np.clip(p.delta, -1.0 + p.eta, 1.0 - p.eta)
    outcomes = []
    for c in range(p.channels):
        C[c, c, centre, centre] = -1.0 - delta[c]
        budget = 1.0 - p.eps - abs(delta[c])
        bank = C[c]
        pre = _bank_offcentre_sum(bank, c, centre)
        if pre <= budget:
            outcomes.append(ProjectionOutcome(False, pre, pre, 1.0))
            continue
        pinned = bank[c, centre, centre]
        scale = budget / pre
        while True:
            scaled = bank * scale
            scaled[c, centre, centre] = pinned
            post = _bank_offcentre_sum(scaled, c, centre)
            if post <= budget:
                break
            scale = np.nextafter(scale, 0.0)
        C[c] = scaled
        outcomes.append(ProjectionOutcome(True, pre, post, float(scale)))
    return dataclasses.replace(p, C=C, delta=delta), outcomes


def project_block(block, relaxed: bool = False):
    """Reproject every layer of a block; returns ``(new_block, outcomes)``."""
    if isinstance(block, FcBlockParams):
        q, o = project_fc_params(block, relaxed)
        return q, [o]
    if isinstance(block, FcBlock):
        pairs = [project_fc_params(p, relaxed) for p in block.layers]
        return dataclasses.replace(block, layers=[q for q, _ in pairs]), [o for _, o in pairs]
    if isinstance(block, ConvBlockParams):
        return project_conv(block)
    raise TypeError(f"unsupported block type {type(block).__name__}")
