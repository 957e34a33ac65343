"""Classifier built from non-autonomous residual blocks, with exact reverse-mode gradients.

The forward pass runs a whole minibatch through every block at once. In
adaptive mode each sample keeps its own active flag: once its step size drops
below the threshold its state is frozen and it stops contributing gradient.
Gradients are taken at the realized depth; the stopping rule itself is not
differentiated.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..dynamics import (
    AdaptiveUnroll,
    Affine,
    BlockChain,
    FcBlock,
    FcBlockParams,
    FixedUnroll,
    UnrollPolicy,
)
from ..projection import ProjectionOutcome, project_fc


@dataclass
class Model:
    chain: BlockChain
    head: Affine
    stable: bool = True
    relaxed: bool = False

    def __post_init__(self):
        for blk in self.chain.blocks:
            if not isinstance(blk, FcBlock):
                raise TypeError("trainable models are built from FcBlock instances")
            if any(p.A_direct is not None for p in blk.layers):
                raise ValueError("blocks with an explicit state matrix are not trainable")
        n_last = self.chain.blocks[-1].n
        if self.head.in_dim != n_last:
            raise ValueError(f"head expects {self.head.in_dim} inputs, final state has {n_last}")

    @property
    def blocks(self) -> list[FcBlock]:
        return self.chain.blocks

    @property
    def classes(self) -> int:
        return self.head.out_dim

    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable arrays keyed by name; updating them in place updates the model."""
        params: dict[str, np.ndarray] = {}
        for i, blk in enumerate(self.blocks):
            for j, p in enumerate(blk.layers):
                params[f"block{i}.layer{j}.R"] = p.R
                params[f"block{i}.layer{j}.B"] = p.B
                params[f"block{i}.layer{j}.b"] = p.b
        for i, T in enumerate(self.chain.transitions):
            if T is not None:
                params[f"transition{i}.W"] = T.W
                params[f"transition{i}.c"] = T.c
        params["head.W"] = self.head.W
        params["head.c"] = self.head.c
        return params

    def project(self) -> list[tuple[str, ProjectionOutcome]]:
        """Reproject every state parametrization in place."""
        outcomes = []
        for i, blk in enumerate(self.blocks):
            for j, p in enumerate(blk.layers):
                R, outcome = project_fc(p.R, p.eps, self.relaxed)
                if outcome.modified:
                    p.R[...] = R
                outcomes.append((f"block{i}.layer{j}.R", outcome))
        return outcomes


def init_model(input_dim: int, hidden: int, classes: int, *, blocks: int = 1,
               K: int = 30, adaptive: AdaptiveUnroll | None = None,
               activation: str = "tanh", h: float = 1.0, eps: float = 0.05,
               shared: bool = True, non_autonomous: bool = True, stable: bool = True,
               relaxed: bool = False, seed: int = 0) -> Model:
    """Gaussian initialization (R ~ N(0, 1/n), B ~ N(0, 1/m), b = 0), projected if stable."""
    rng = np.random.default_rng(seed)
    policy: UnrollPolicy = adaptive if adaptive is not None else FixedUnroll(K)
    n_layers = 1 if shared else (policy.k_max if isinstance(policy, AdaptiveUnroll) else policy.K)
    chain_blocks, transitions = [], []
    m = input_dim
    for i in range(blocks):
        layers = [
            FcBlockParams(
                R=rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, hidden)),
                B=rng.normal(0.0, 1.0 / np.sqrt(m), (hidden, m)),
                b=np.zeros(hidden), h=h, eps=eps, activation=activation,
            )
            for _ in range(n_layers)
        ]
        chain_blocks.append(FcBlock(layers, non_autonomous=non_autonomous))
        if i > 0:
            transitions.append(None)
        m = hidden
    head = Affine(rng.normal(0.0, 1.0 / np.sqrt(hidden), (classes, hidden)), np.zeros(classes))
    chain = BlockChain(chain_blocks, [policy] * blocks, transitions)
    model = Model(chain, head, stable=stable, relaxed=relaxed)
    if stable:
        model.project()
    return model


# -- forward ------------------------------------------------------------------

@dataclass
class BlockCache:
    U: np.ndarray
    states: list[np.ndarray]
    pre: list[np.ndarray]
    masks: list[np.ndarray | None]
    depth: np.ndarray
    converged: np.ndarray


@dataclass
class ForwardCache:
    blocks: list[BlockCache] = field(default_factory=list)
    transition_inputs: list[np.ndarray] = field(default_factory=list)
    features: np.ndarray | None = None
    probs: np.ndarray | None = None
    labels: np.ndarray | None = None
    model_id: int = 0


def _block_forward(blk: FcBlock, U: np.ndarray, policy: UnrollPolicy) -> BlockCache:
    batch = U.shape[0]
    mats = [p.A for p in blk.layers]
    drives = [U @ p.B.T + p.b for p in blk.layers]
    x = np.zeros((batch, blk.n))
    states, pre, masks = [x], [], []
    adaptive = isinstance(policy, AdaptiveUnroll)
    steps = policy.k_max if adaptive else policy.K
    active = np.ones(batch, dtype=bool)
    depth = np.zeros(batch, dtype=int)
    converged = np.zeros(batch, dtype=bool)
    for k in range(steps):
        j = 0 if blk.tied else k
        p = blk.params_at(k)
        z = x @ mats[j].T + (drives[j] if blk.injects_input(k) else p.b)
        dx = p.h * p.activation(z)
        if adaptive:
            mask = active.copy()
            dx = dx * mask[:, None]
            depth += mask
            r = np.max(np.abs(dx), axis=1)
            done = mask & (r < policy.threshold)
            converged |= done
            active = mask & ~done
        else:
            mask = None
            depth += 1
        x = x + dx
        states.append(x)
        pre.append(z)
        masks.append(mask)
        if adaptive and not active.any():
            break
    return BlockCache(U, states, pre, masks, depth, converged)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))


def predict_features(model: Model, X: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    cache = ForwardCache(model_id=id(model))
    U = X
    for i, (blk, policy) in enumerate(zip(model.blocks, model.chain.policies)):
        if U.shape[1] != blk.m:
            raise ValueError(f"block {i} expects inputs of size {blk.m}, got {U.shape[1]}")
        bc = _block_forward(blk, U, policy)
        cache.blocks.append(bc)
        if i < len(model.chain.transitions):
            out = bc.states[-1]
            cache.transition_inputs.append(out)
            T = model.chain.transitions[i]
            U = out if T is None else out @ T.W.T + T.c
    cache.features = cache.blocks[-1].states[-1]
    return cache.features, cache


def logits(model: Model, X: np.ndarray) -> np.ndarray:
    H, _ = predict_features(model, X)
    return H @ model.head.W.T + model.head.c


def forward_loss(model: Model, X: np.ndarray, y: np.ndarray) -> tuple[float, ForwardCache]:
    """Mean softmax cross-entropy over the batch, with everything backward needs."""
    y = np.asarray(y, dtype=int).reshape(-1)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    if X.shape[0] != y.shape[0]:
        raise ValueError("inputs and labels differ in length")
    if y.min() < 0 or y.max() >= model.classes:
        raise ValueError(f"labels must lie in [0, {model.classes})")
    H, cache = predict_features(model, X)
    logp = log_softmax(H @ model.head.W.T + model.head.c)
    cache.probs = np.exp(logp)
    cache.labels = y
    loss = -float(np.mean(logp[np.arange(y.shape[0]), y]))
    return loss, cache


# -- backward -----------------------------------------------------------------

def _block_backward(blk: FcBlock, bc: BlockCache, g_x: np.ndarray,
                    grads: dict[str, np.ndarray], prefix: str) -> np.ndarray:
    """Backpropagate through one unroll; returns the gradient w.r.t. the block input."""
    n_layers = len(blk.layers)
    g_A = [np.zeros((blk.n, blk.n)) for _ in range(n_layers)]
    g_B = [np.zeros((blk.n, blk.m)) for _ in range(n_layers)]
    g_b = [np.zeros(blk.n) for _ in range(n_layers)]
    mats = [p.A for p in blk.layers]
    g_U = np.zeros_like(bc.U)
    for k in range(len(bc.pre) - 1, -1, -1):
        j = 0 if blk.tied else k
        p = blk.params_at(k)
        g_z = p.h * g_x * p.activation.derivative(bc.pre[k])
        if bc.masks[k] is not None:
            g_z = g_z * bc.masks[k][:, None]
        g_A[j] += g_z.T @ bc.states[k]
        g_b[j] += g_z.sum(axis=0)
        if blk.injects_input(k):
            g_B[j] += g_z.T @ bc.U
            g_U += g_z @ p.B
        g_x = g_x + g_z @ mats[j]
    for j, p in enumerate(blk.layers):
        # A = -R^T R - eps*I  =>  dL/dR = -R (G + G^T)
        grads[f"{prefix}.layer{j}.R"] = -p.R @ (g_A[j] + g_A[j].T)
        grads[f"{prefix}.layer{j}.B"] = g_B[j]
        grads[f"{prefix}.layer{j}.b"] = g_b[j]
    return g_U


def backward(model: Model, cache: ForwardCache, labels=None) -> dict[str, np.ndarray]:
    """Exact gradients of the mean cross-entropy for every array in ``parameters()``."""
    if cache.model_id != id(model) or len(cache.blocks) != len(model.blocks):
        raise ValueError("cache was produced by a different model")
    y = cache.labels if labels is None else np.asarray(labels, dtype=int).reshape(-1)
    if y is None or cache.probs is None or y.shape[0] != cache.probs.shape[0]:
        raise ValueError("cache and labels do not match")
    N = y.shape[0]
    g_logits = cache.probs.copy()
    g_logits[np.arange(N), y] -= 1.0
    g_logits /= N
    grads: dict[str, np.ndarray] = {
        "head.W": g_logits.T @ cache.features,
        "head.c": g_logits.sum(axis=0),
    }
    g_x = g_logits @ model.head.W
    for i in range(len(model.blocks) - 1, -1, -1):
        g_U = _block_backward(model.blocks[i], cache.blocks[i], g_x, grads, f"block{i}")
        if i > 0:
            T = model.chain.transitions[i - 1]
            if T is None:
                g_x = g_U
            else:
                grads[f"transition{i - 1}.W"] = g_U.T @ cache.transition_inputs[i - 1]
                grads[f"transition{i - 1}.c"] = g_U.sum(axis=0)
                g_x = g_U @ T.W
    return grads


def loss_per_depth(model: Model, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Cross-entropy of the head applied to every intermediate state of the last block."""
    _, cache = predict_features(model, X)
    y = np.asarray(y, dtype=int)
    out = []
    for H in cache.blocks[-1].states:
        logp = log_softmax(H @ model.head.W.T + model.head.c)
        out.append(-float(np.mean(logp[np.arange(y.shape[0]), y])))
    return np.array(out)
