"""Stability verification for non-autonomous residual blocks.

The sup of the Jacobian spectral radius over the non-saturated set only depends
on the admissible activation slopes once the weights are fixed, so
``check_condition1`` samples slope diagonals in ``[sigma_floor, 1]`` directly.
Fully connected blocks are measured in the 2-norm, convolutional blocks in the
infinity norm, matching the respective certificates.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    Activation,
    ConvBlockParams,
    FcBlock,
    FcBlockParams,
    unroll_adaptive,
)
from .numerics import (
    GershgorinDisk,
    as_matrix,
    as_vector,
    gershgorin_disks,
    infinity_norm,
    spectral_radius,
)
from .projection import fc_bound

DEFAULT_SIGMA_FLOOR = 1e-3
DEFAULT_SAMPLES = 500


@dataclass
class StabilityReport:
    rho_bar: float
    passed: bool
    io_gain_coeff: float | None = None
    rpi_radius: float | None = None
    mu: float | None = None
    fro_margin: float | None = None
    inf_norm_IplusA: float | None = None
    analytic_bound: float | None = None
    zeta: float | None = None
    disks: list[GershgorinDisk] = field(default_factory=list)
    kind: str = "fc"
    layer_rho: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["disks"] = [[disk.center, disk.radius] for disk in self.disks]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        rows = [
            ("kind", self.kind),
            ("rho_bar (sampled)", self.rho_bar),
            ("analytic bound", self.analytic_bound),
            ("||R^T R||_F margin", self.fro_margin),
            ("||I + A||_inf", self.inf_norm_IplusA),
            ("IO gain coefficient", self.io_gain_coeff),
            ("RPI radius", self.rpi_radius),
            ("zeta", self.zeta),
            ("passed", self.passed),
        ]
        width = max(len(r[0]) for r in rows)
        lines = []
        for name, value in rows:
            if value is None:
                continue
            text = f"{value:.6g}" if isinstance(value, float) else str(value)
            lines.append(f"{name:<{width}}  {text}")
        return "\n".join(lines)


def jacobian(A, h: float, sigma_prime) -> np.ndarray:
    """State-transfer Jacobian ``I + h diag(sigma') A``."""
    A = as_matrix(A)
    n = A.shape[0]
    if A.shape[1] != n:
        raise ValueError("A must be square")
    s = as_vector(sigma_prime, n)
    return np.eye(n) + h * (s[:, None] * A)


def fc_rho_bound(h: float, eps: float, sigma_floor: float = 1.0) -> float:
    """Analytic Jacobian radius bound for projected FC blocks.

    Eigenvalues of ``I + h S A`` with slopes in ``[sigma_floor, 1]`` lie in
    ``[1 - h(1 - eps), 1 - h sigma_floor eps]``.
    """
    return max(abs(1.0 - h * sigma_floor * eps), abs(1.0 - h * (1.0 - eps)))


def io_gain(block, rho_bar: float) -> float:
    """Coefficient ``h ||B|| / (1 - rho_bar)`` of the input-output gain."""
    if rho_bar >= 1.0:
        raise ValueError(f"rho_bar must be < 1, got {rho_bar}")
    if isinstance(block, ConvBlockParams):
        return block.h * infinity_norm(vectorize_input_conv(block)) / (1.0 - rho_bar)
    if isinstance(block, FcBlock):
        return max(p.h * float(np.linalg.norm(p.B, 2)) for p in block.layers) / (1.0 - rho_bar)
    return block.h * float(np.linalg.norm(block.B, 2)) / (1.0 - rho_bar)


def rpi_radius(block, mu: float, rho_bar: float) -> float:
    """Radius ``gamma(mu)`` of the robustly positively invariant ball."""
    if mu < 0:
        raise ValueError("mu must be non-negative")
    return io_gain(block, rho_bar) * mu


def vectorize_filters(filters: np.ndarray, n: int) -> np.ndarray:
    """Dense matrix of a same-padded, stride-1 multi-channel cross-correlation.

    Vectors stack channels first, then rows, then columns, so entry
    ``c*n*n + r*n + s`` is pixel ``(r, s)`` of channel ``c``.
    """
    filters = np.asarray(filters, dtype=np.float64)
    c_out, c_in, k, k2 = filters.shape
    if k != k2 or k % 2 == 0:
        raise ValueError("filters must be square with odd size")
    pad = k // 2
    nn = n * n
    M = np.zeros((c_out * nn, c_in * nn))
    for c in range(c_out):
        for r in range(n):
            for s in range(n):
                row = c * nn + r * n + s
                for i in range(c_in):
                    for a in range(k):
                        rr = r + a - pad
                        if not 0 <= rr < n:
                            continue
                        for b in range(k):
                            ss = s + b - pad
                            if 0 <= ss < n:
                                M[row, i * nn + rr * n + ss] += filters[c, i, a, b]
    return M


def vectorize_conv(p: ConvBlockParams) -> np.ndarray:
    """State matrix ``A`` of the equivalent fully connected recursion."""
    return vectorize_filters(p.C, p.n_X)


def vectorize_input_conv(p: ConvBlockParams) -> np.ndarray:
    return vectorize_filters(p.D, p.n_U)


def vectorize_bias(p: ConvBlockParams) -> np.ndarray:
    return np.repeat(p.E, p.n_X * p.n_X)


def dense_equivalent(p: ConvBlockParams) -> FcBlockParams:
    """FC parameters whose step map equals the convolutional step on vec(X)."""
    A = vectorize_conv(p)
    n = A.shape[0]
    return FcBlockParams(R=np.zeros((n, n)), B=vectorize_input_conv(p), b=vectorize_bias(p),
                         h=p.h, activation=p.activation, A_direct=A)


def _sampled_rho(A: np.ndarray, h: float, sample_count: int, sigma_floor: float,
                 rng: np.random.Generator) -> float:
    n = A.shape[0]
    worst = 0.0
    for _ in range(sample_count):
        s = rng.uniform(sigma_floor, 1.0, size=n)
        worst = max(worst, spectral_radius(jacobian(A, h, s)))
    # The slope extremes are the most informative corners; always include them.
    for s in (np.ones(n), np.full(n, sigma_floor)):
        worst = max(worst, spectral_radius(jacobian(A, h, s)))
    return worst


def check_condition1(block, sample_count: int = DEFAULT_SAMPLES,
                     sigma_floor: float = DEFAULT_SIGMA_FLOOR, seed: int = 0,
                     mu: float = 1.0, u=None, relaxed: bool = False) -> StabilityReport:
    """Estimate the worst Jacobian spectral radius and fill the margin report.

    Passing ``u`` additionally measures ``zeta`` as the distance from the zero
    initial state to the equilibrium reached by an adaptive unroll.
    """
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    if not 0.0 < sigma_floor <= 1.0:
        raise ValueError("sigma_floor must lie in (0, 1]")
    rng = np.random.default_rng(seed)

    if isinstance(block, ConvBlockParams):
        A = vectorize_conv(block)
        rho = _sampled_rho(A, block.h, sample_count, sigma_floor, rng)
        report = StabilityReport(
            rho_bar=rho, passed=rho < 1.0, kind="conv",
            inf_norm_IplusA=infinity_norm(np.eye(A.shape[0]) + A),
            disks=gershgorin_disks(A), layer_rho=[rho],
        )
    else:
        layers = block.layers if isinstance(block, FcBlock) else [block]
        layer_rho = [_sampled_rho(p.A, p.h, sample_count, sigma_floor, rng) for p in layers]
        rho = max(layer_rho)
        first = layers[0]
        report = StabilityReport(rho_bar=rho, passed=rho < 1.0, kind="fc", layer_rho=layer_rho)
        report.inf_norm_IplusA = max(infinity_norm(np.eye(p.n) + p.A) for p in layers)
        report.disks = gershgorin_disks(first.A)
        if all(p.A_direct is None for p in layers):
            report.fro_margin = min(
                fc_bound(p.eps, relaxed) - float(np.linalg.norm(p.R.T @ p.R, "fro")) for p in layers
            )
            if report.fro_margin >= 0.0:
                report.analytic_bound = max(fc_rho_bound(p.h, p.eps, sigma_floor) for p in layers)

    if report.passed:
        report.mu = mu
        report.io_gain_coeff = io_gain(block, report.rho_bar)
        report.rpi_radius = report.io_gain_coeff * mu
    if u is not None:
        traj = unroll_adaptive(block, u)
        report.zeta = float(np.linalg.norm(traj.states[0] - traj.final))
    return report


def tanh_slope_floor(block: FcBlockParams, states, u) -> float:
    """Smallest activation slope met along a trajectory (1 for ReLU-active units)."""
    if block.activation is not Activation.TANH:
        raise ValueError("slope floor along a trajectory is defined for tanh blocks")
    A, drive = block.A, block.B @ as_vector(u, block.m) + block.b
    return float(min(np.min(block.activation.derivative(A @ x + drive)) for x in states))
