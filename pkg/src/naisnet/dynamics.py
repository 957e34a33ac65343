"""Step maps and unrolling for non-autonomous residual blocks.

A fully connected block iterates

    x(k+1) = x(k) + h * sigma(A x(k) + B u + b),     x(0) = 0,

with ``A = -R^T R - eps*I`` unless an explicit state matrix is supplied.
Convolutional blocks use the same recursion with the matrix products replaced
by stride-1, same-padding cross-correlations.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from typing import Callable, TextIO, Union

import numpy as np

from .numerics import as_matrix, as_vector, solve_linear

DEFAULT_THRESHOLD = 1e-4
DEFAULT_K_MAX = 500


class Activation(str, enum.Enum):
    TANH = "tanh"
    RELU = "relu"

    def __call__(self, z: np.ndarray) -> np.ndarray:
        if self is Activation.TANH:
            return np.tanh(z)
        return np.maximum(z, 0.0)

    def derivative(self, z: np.ndarray) -> np.ndarray:
        """Pointwise slope; the ReLU slope at exactly 0 is taken as 0."""
        if self is Activation.TANH:
            t = np.tanh(z)
            return 1.0 - t * t
        return (np.asarray(z) > 0.0).astype(np.float64)


def assemble_A(p: "FcBlockParams") -> np.ndarray:
    """State matrix ``-R^T R - eps*I``, symmetric by construction."""
    G = p.R.T @ p.R
    G = 0.5 * (G + G.T)
    return -G - p.eps * np.eye(p.R.shape[1])


@dataclass
class FcBlockParams:
    R: np.ndarray
    B: np.ndarray
    b: np.ndarray
    h: float = 1.0
    eps: float = 0.05
    activation: Activation = Activation.TANH
    # Bypasses the -R^T R - eps*I parametrization (scalar studies, counterexamples).
    A_direct: np.ndarray | None = None

    def __post_init__(self):
        self.R = as_matrix(self.R)
        if self.R.shape[0] != self.R.shape[1]:
            raise ValueError(f"R must be square, got {self.R.shape}")
        n = self.R.shape[0]
        self.B = as_matrix(self.B, rows=n)
        self.b = as_vector(self.b, n)
        self.activation = Activation(self.activation)
        if not 0.0 < self.h <= 1.0:
            raise ValueError(f"step size h must lie in (0, 1], got {self.h}")
        if not 0.0 < self.eps < 0.5:
            raise ValueError(f"eps must lie in (0, 0.5), got {self.eps}")
        if self.A_direct is not None:
            self.A_direct = as_matrix(self.A_direct, rows=n, cols=n)

    @property
    def n(self) -> int:
        return self.R.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def A(self) -> np.ndarray:
        if self.A_direct is not None:
            return self.A_direct
        return assemble_A(self)

    @classmethod
    def scalar(cls, A: float, B: float = 1.0, b: float = 0.0, h: float = 1.0,
               activation: Activation | str = Activation.TANH, eps: float = 0.05) -> "FcBlockParams":
        """One-neuron block with the state coefficient given directly."""
        return cls(R=[[0.0]], B=[[B]], b=[b], h=h, eps=eps,
                   activation=Activation(activation), A_direct=[[A]])


@dataclass
class FcBlock:
    """A fully connected block with optional per-step weights.

    ``layers`` holds one parameter set when weights are tied across the unroll,
    or one per unroll step when they are not. With ``non_autonomous`` off, the
    input term ``B u`` is only injected at step 0.
    """

    layers: list[FcBlockParams]
    non_autonomous: bool = True

    def __post_init__(self):
        if isinstance(self.layers, FcBlockParams):
            self.layers = [self.layers]
        self.layers = list(self.layers)
        if not self.layers:
            raise ValueError("a block needs at least one layer")
        n, m = self.layers[0].n, self.layers[0].m
        for p in self.layers[1:]:
            if (p.n, p.m) != (n, m):
                raise ValueError("untied layers must share dimensions")

    @property
    def tied(self) -> bool:
        return len(self.layers) == 1

    @property
    def n(self) -> int:
        return self.layers[0].n

    @property
    def m(self) -> int:
        return self.layers[0].m

    def params_at(self, k: int) -> FcBlockParams:
        if self.tied:
            return self.layers[0]
        if k >= len(self.layers):
            raise IndexError(f"untied block has {len(self.layers)} layers, step {k} requested")
        return self.layers[k]

    def injects_input(self, k: int) -> bool:
        return self.non_autonomous or k == 0


@dataclass
class ConvBlockParams:
    """Convolutional block parameters.

    ``C[c, i]`` is the filter from state channel ``i`` into state channel
    ``c``; ``D[c, j]`` maps input channel ``j`` into state channel ``c``.
    Both are applied with stride 1 and zero padding ``(size - 1) // 2``.
    """

    C: np.ndarray
    D: np.ndarray
    E: np.ndarray
    delta: np.ndarray
    n_X: int
    n_U: int
    h: float = 1.0
    eps: float = 0.01
    eta: float = 0.1
    activation: Activation = Activation.RELU

    def __post_init__(self):
        self.C = np.array(self.C, dtype=np.float64)
        self.D = np.array(self.D, dtype=np.float64)
        if self.C.ndim != 4 or self.C.shape[0] != self.C.shape[1] or self.C.shape[2] != self.C.shape[3]:
            raise ValueError(f"C must have shape (N_C, N_C, n_C, n_C), got {self.C.shape}")
        if self.D.ndim != 4 or self.D.shape[0] != self.C.shape[0] or self.D.shape[2] != self.D.shape[3]:
            raise ValueError(f"D must have shape (N_C, N_U, n_D, n_D), got {self.D.shape}")
        if self.C.shape[2] % 2 == 0 or self.D.shape[2] % 2 == 0:
            raise ValueError("filter sizes must be odd (n_C = 2p + 1)")
        if not (np.all(np.isfinite(self.C)) and np.all(np.isfinite(self.D))):
            raise ValueError("filters contain NaN or Inf")
        self.E = as_vector(self.E, self.C.shape[0])
        self.delta = as_vector(self.delta, self.C.shape[0])
        self.n_X, self.n_U = int(self.n_X), int(self.n_U)
        if self.n_U != self.n_X:
            raise ValueError("same-padding input filters need n_U == n_X")
        if not 0.0 < self.h <= 1.0:
            raise ValueError(f"step size h must lie in (0, 1], got {self.h}")
        self.activation = Activation(self.activation)

    @property
    def channels(self) -> int:
        return self.C.shape[0]

    @property
    def input_channels(self) -> int:
        return self.D.shape[1]

    @property
    def filter_size(self) -> int:
        return self.C.shape[2]

    @property
    def n(self) -> int:
        return self.channels * self.n_X * self.n_X

    @property
    def m(self) -> int:
        return self.input_channels * self.n_U * self.n_U


Block = Union[FcBlockParams, FcBlock, ConvBlockParams]


def fc_step(p: FcBlockParams, x, u) -> np.ndarray:
    x = as_vector(x, p.n)
    u = as_vector(u, p.m)
    return x + p.h * p.activation(p.A @ x + p.B @ u + p.b)


def correlate_same(filters: np.ndarray, maps: np.ndarray) -> np.ndarray:
    """Multi-channel stride-1 cross-correlation with zero 'same' padding.

    ``filters`` has shape (C_out, C_in, k, k) and ``maps`` (C_in, n, n).
    """
    c_out, c_in, k, _ = filters.shape
    if maps.ndim != 3 or maps.shape[0] != c_in or maps.shape[1] != maps.shape[2]:
        raise ValueError(f"maps of shape {maps.shape} do not match filters {filters.shape}")
    n = maps.shape[1]
    pad = k // 2
    padded = np.pad(maps, ((0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((c_out, n, n))
    for a in range(k):
        for b in range(k):
            out += np.einsum("oi,ijk->ojk", filters[:, :, a, b], padded[:, a:a + n, b:b + n])
    return out


def conv_step(p: ConvBlockParams, X, U) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    U = np.asarray(U, dtype=np.float64)
    if X.shape != (p.channels, p.n_X, p.n_X):
        raise ValueError(f"state maps must have shape {(p.channels, p.n_X, p.n_X)}, got {X.shape}")
    if U.shape != (p.input_channels, p.n_U, p.n_U):
        raise ValueError(f"input maps must have shape {(p.input_channels, p.n_U, p.n_U)}, got {U.shape}")
    Z = correlate_same(p.C, X) + correlate_same(p.D, U) + p.E[:, None, None]
    return X + p.h * p.activation(Z)


# -- unrolling --------------------------------------------------------------

@dataclass
class Trajectory:
    states: list[np.ndarray]
    depth: int
    converged: bool = False
    residuals: list[float] = field(default_factory=list)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def write_csv(self, fh: TextIO) -> None:
        n = self.states[0].shape[0]
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "residual"] + [f"x_{i}" for i in range(n)])
        for k, x in enumerate(self.states):
            res = "" if k == 0 else repr(float(self.residuals[k - 1]))
            w.writerow([k, res] + [repr(float(v)) for v in x])


def _stepper(block: Block, u) -> tuple[Callable[[np.ndarray, int], np.ndarray], int]:
    """Return ``(step(x, k), state_dim)`` with input-dependent terms precomputed."""
    if isinstance(block, FcBlockParams):
        block = FcBlock([block])
    if isinstance(block, FcBlock):
        u = as_vector(u, block.m)
        if block.tied:
            p = block.layers[0]
            A, drive = p.A, p.B @ u + p.b
            act, h = p.activation, p.h

            if block.non_autonomous:
                def step(x, k):
                    return x + h * act(A @ x + drive)
            else:
                bias = p.b

                def step(x, k):
                    return x + h * act(A @ x + (drive if k == 0 else bias))
            return step, block.n

        mats = [p.A for p in block.layers]
        drives = [p.B @ u + p.b for p in block.layers]

        def step(x, k):
            p = block.params_at(k)
            inject = drives[k] if block.injects_input(k) else p.b
            return x + p.h * p.activation(mats[k] @ x + inject)
        return step, block.n

    if isinstance(block, ConvBlockParams):
        p = block
        U = as_vector(u, p.m).reshape(p.input_channels, p.n_U, p.n_U)
        drive = correlate_same(p.D, U) + p.E[:, None, None]
        shape = (p.channels, p.n_X, p.n_X)

        def step(x, k):
            X = x.reshape(shape)
            return (X + p.h * p.activation(correlate_same(p.C, X) + drive)).reshape(-1)
        return step, p.n

    raise TypeError(f"unsupported block type {type(block).__name__}")


def _initial(x0, n: int) -> np.ndarray:
    return np.zeros(n) if x0 is None else as_vector(x0, n).copy()


def unroll_fixed(block: Block, u, K: int, x0=None) -> Trajectory:
    if K < 1:
        raise ValueError("K must be >= 1")
    step, n = _stepper(block, u)
    x = _initial(x0, n)
    states, residuals = [x], []
    for k in range(K):
        x_next = step(x, k)
        residuals.append(float(np.max(np.abs(x_next - x), initial=0.0)))
        states.append(x_next)
        x = x_next
    return Trajectory(states, depth=K, converged=False, residuals=residuals)


def unroll_adaptive(block: Block, u, threshold: float = DEFAULT_THRESHOLD,
                    k_max: int = DEFAULT_K_MAX, x0=None) -> Trajectory:
    """Unroll until the infinity-norm step size drops below ``threshold``."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    step, n = _stepper(block, u)
    x = _initial(x0, n)
    states, residuals = [x], []
    converged = False
    for k in range(k_max):
        x_next = step(x, k)
        r = float(np.max(np.abs(x_next - x), initial=0.0))
        states.append(x_next)
        residuals.append(r)
        x = x_next
        if r < threshold:
            converged = True
            break
    return Trajectory(states, depth=len(residuals), converged=converged, residuals=residuals)


def steady_state_tanh(p: FcBlockParams, u) -> np.ndarray:
    """Input-dependent equilibrium ``-A^{-1}(B u + b)`` of a tanh block."""
    if p.activation is not Activation.TANH:
        raise ValueError("closed-form steady state only exists for tanh blocks")
    u = as_vector(u, p.m)
    return -solve_linear(p.A, p.B @ u + p.b)


# -- cascades -----------------------------------------------------------------

@dataclass(frozen=True)
class FixedUnroll:
    K: int = 30


@dataclass(frozen=True)
class AdaptiveUnroll:
    threshold: float = DEFAULT_THRESHOLD
    k_max: int = DEFAULT_K_MAX


UnrollPolicy = Union[FixedUnroll, AdaptiveUnroll]


@dataclass
class Affine:
    W: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        self.W = as_matrix(self.W)
        self.c = as_vector(self.c, self.W.shape[0])

    def __call__(self, x) -> np.ndarray:
        return self.W @ as_vector(x, self.W.shape[1]) + self.c

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]


def block_dims(block: Block) -> tuple[int, int]:
    """(input dimension, state dimension)."""
    return block.m, block.n


@dataclass
class BlockChain:
    blocks: list[Block]
    policies: list[UnrollPolicy]
    transitions: list[Affine | None] = field(default_factory=list)

    def __post_init__(self):
        if len(self.policies) != len(self.blocks):
            raise ValueError("one unroll policy per block is required")
        if not self.transitions:
            self.transitions = [None] * (len(self.blocks) - 1)
        if len(self.transitions) != len(self.blocks) - 1:
            raise ValueError("need exactly one transition slot between consecutive blocks")
        self.check_dims()

    def check_dims(self) -> None:
        for i, T in enumerate(self.transitions):
            n_prev = block_dims(self.blocks[i])[1]
            m_next = block_dims(self.blocks[i + 1])[0]
            if T is None:
                if n_prev != m_next:
                    raise ValueError(f"block {i} state dim {n_prev} != block {i + 1} input dim {m_next}")
            elif (T.in_dim, T.out_dim) != (n_prev, m_next):
                raise ValueError(f"transition {i} maps {T.in_dim}->{T.out_dim}, need {n_prev}->{m_next}")


def unroll(block: Block, u, policy: UnrollPolicy, x0=None) -> Trajectory:
    if isinstance(policy, AdaptiveUnroll):
        return unroll_adaptive(block, u, policy.threshold, policy.k_max, x0=x0)
    return unroll_fixed(block, u, policy.K, x0=x0)


def cascade_forward(chain: BlockChain, u0) -> tuple[np.ndarray, list[Trajectory]]:
    u = as_vector(u0, block_dims(chain.blocks[0])[0])
    trajectories: list[Trajectory] = []
    for i, (block, policy) in enumerate(zip(chain.blocks, chain.policies)):
        traj = unroll(block, u, policy)
        trajectories.append(traj)
        if i < len(chain.transitions):
            T = chain.transitions[i]
            u = traj.final if T is None else T(traj.final)
    return trajectories[-1].final, trajectories
