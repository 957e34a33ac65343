"""Experiment drivers: scalar input-output maps, depth statistics and ablations."""
from __future__ import annotations

import csv
import dataclasses
import itertools
from dataclasses import dataclass, field
from typing import Iterable, Sequence, TextIO

import numpy as np
from scipy import stats as _stats

from .dynamics import Activation, AdaptiveUnroll, BlockChain, FcBlockParams, unroll_adaptive, unroll_fixed
from .numerics import chi_square_sf
from .training.data import Dataset
from .training.loop import EpochStats, TrainConfig, train
from .training.model import Model, init_model, loss_per_depth, predict_features

SCALAR_DEMO_THRESHOLD = 0.95
SURVEY_THRESHOLD = 1e-4


# -- scalar maps ----------------------------------------------------------------

@dataclass
class ScalarMapSpec:
    A: float
    B: float = 1.0
    b: float = 0.0
    h: float = 1.0
    activation: Activation = Activation.TANH
    unroll_lengths: Sequence[int] = (1, 5, 10, 30, 100)
    u_grid: tuple[float, float, int] = (-2.0, 2.0, 201)
    stop_threshold: float | None = None

    def __post_init__(self):
        self.activation = Activation(self.activation)
        self.unroll_lengths = tuple(int(k) for k in self.unroll_lengths)
        lo, hi, points = self.u_grid
        self.u_grid = (float(lo), float(hi), int(points))
        if self.u_grid[2] < 2:
            raise ValueError("u_grid needs at least 2 points")
        if not self.unroll_lengths or min(self.unroll_lengths) < 1:
            raise ValueError("unroll lengths must be >= 1")

    def inputs(self) -> np.ndarray:
        lo, hi, points = self.u_grid
        return np.linspace(lo, hi, points)

    def block(self) -> FcBlockParams:
        return FcBlockParams.scalar(self.A, self.B, self.b, h=self.h, activation=self.activation)


@dataclass(frozen=True)
class ScalarMapRow:
    u: float
    K: int
    x: float
    depth: int
    converged: bool


def scalar_map(spec: ScalarMapSpec) -> list[ScalarMapRow]:
    """Unrolled output of a one-neuron block for every grid input and unroll length.

    With ``stop_threshold`` set, each unroll length acts as the cap of an
    adaptive unroll.
    """
    block = spec.block()
    rows = []
    k_longest = max(spec.unroll_lengths)
    for u in spec.inputs():
        if spec.stop_threshold is None:
            traj = unroll_fixed(block, [u], k_longest)
            for K in spec.unroll_lengths:
                rows.append(ScalarMapRow(float(u), K, float(traj.states[K][0]), K, False))
        else:
            for K in spec.unroll_lengths:
                traj = unroll_adaptive(block, [u], spec.stop_threshold, K)
                rows.append(ScalarMapRow(float(u), K, float(traj.final[0]), traj.depth, traj.converged))
    return rows


def write_scalar_map_csv(rows: Iterable[ScalarMapRow], fh: TextIO) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["u", "K", "x_K", "depth", "converged"])
    for r in rows:
        w.writerow([repr(r.u), r.K, repr(r.x), r.depth, int(r.converged)])


def map_slopes(rows: Sequence[ScalarMapRow], K: int) -> np.ndarray:
    """Finite-difference slopes of the map at unroll length ``K``."""
    sel = sorted((r.u, r.x) for r in rows if r.K == K)
    u = np.array([s[0] for s in sel])
    x = np.array([s[1] for s in sel])
    return np.diff(x) / np.diff(u)


# -- Kruskal-Wallis ---------------------------------------------------------------

def kruskal_wallis(groups: Sequence[Sequence[float]]) -> tuple[float, float]:
    """H statistic with tie correction and its chi-square p-value.

    Pooled data that are all tied carry no rank information; that case
    returns ``(0.0, 1.0)``.
    """
    if len(groups) < 2:
        raise ValueError("need at least two groups")
    arrays = [np.asarray(g, dtype=np.float64).reshape(-1) for g in groups]
    if any(a.size == 0 for a in arrays):
        raise ValueError("every group must be non-empty")
    pooled = np.concatenate(arrays)
    N = pooled.size
    ranks = _stats.rankdata(pooled)
    mean_rank = (N + 1) / 2.0
    H, start = 0.0, 0
    for a in arrays:
        r = ranks[start:start + a.size]
        start += a.size
        H += a.size * (r.mean() - mean_rank) ** 2
    H *= 12.0 / (N * (N + 1))
    _, counts = np.unique(pooled, return_counts=True)
    correction = 1.0 - float(np.sum(counts ** 3 - counts)) / (N ** 3 - N)
    if correction <= 0.0:
        return 0.0, 1.0
    H /= correction
    return float(H), chi_square_sf(H, len(arrays) - 1)


# -- depth survey -------------------------------------------------------------------

@dataclass(frozen=True)
class DepthRecord:
    sample_id: int
    class_label: int
    depth: tuple[int, ...]
    converged: bool


def with_policy(model: Model, policy) -> Model:
    """Shallow copy of ``model`` sharing parameters but unrolled under ``policy``."""
    chain = BlockChain(list(model.chain.blocks), [policy] * len(model.chain.blocks),
                       list(model.chain.transitions))
    return Model(chain, model.head, stable=model.stable, relaxed=model.relaxed)


def depth_survey(model: Model, X: np.ndarray, y: np.ndarray, threshold: float = SURVEY_THRESHOLD,
                 k_max: int = 500, batch_size: int = 1000) -> list[DepthRecord]:
    """Adaptive unroll of every sample; records realized depth per block."""
    probe = with_policy(model, AdaptiveUnroll(threshold, k_max))
    records = []
    for start in range(0, len(y), batch_size):
        _, cache = predict_features(probe, X[start:start + batch_size])
        depths = np.stack([bc.depth for bc in cache.blocks], axis=1)
        conv = np.all(np.stack([bc.converged for bc in cache.blocks], axis=1), axis=1)
        for i in range(depths.shape[0]):
            records.append(DepthRecord(start + i, int(y[start + i]), tuple(int(d) for d in depths[i]),
                                       bool(conv[i])))
    return records


def write_depth_csv(records: Sequence[DepthRecord], fh: TextIO) -> None:
    w = csv.writer(fh, lineterminator="\n")
    n_blocks = len(records[0].depth) if records else 0
    w.writerow(["sample_id", "class_label"] + [f"depth_{i}" for i in range(n_blocks)] + ["converged"])
    for r in records:
        w.writerow([r.sample_id, r.class_label, *r.depth, int(r.converged)])


@dataclass
class DepthStatistics:
    H: float
    p: float
    pairwise: dict[tuple[int, int], tuple[float, float]] = field(default_factory=dict)
    alpha: float = 0.05

    @property
    def fraction_different(self) -> float:
        if not self.pairwise:
            return 0.0
        return sum(p < self.alpha for _, p in self.pairwise.values()) / len(self.pairwise)

    def to_dict(self) -> dict:
        return {
            "H": self.H, "p": self.p, "alpha": self.alpha,
            "fraction_pairs_different": self.fraction_different,
            "pairwise": [{"a": a, "b": b, "H": H, "p": p} for (a, b), (H, p) in sorted(self.pairwise.items())],
        }


def depth_statistics(records: Sequence[DepthRecord], block: int = -1, alpha: float = 0.05) -> DepthStatistics:
    """Omnibus and pairwise Kruskal-Wallis tests of depth across classes."""
    by_class: dict[int, list[int]] = {}
    for r in records:
        by_class.setdefault(r.class_label, []).append(r.depth[block])
    labels = sorted(by_class)
    if len(labels) < 2:
        raise ValueError("need samples from at least two classes")
    H, p = kruskal_wallis([by_class[c] for c in labels])
    pairwise = {(a, b): kruskal_wallis([by_class[a], by_class[b]]) for a, b in itertools.combinations(labels, 2)}
    return DepthStatistics(H, p, pairwise, alpha)


# -- ablations -------------------------------------------------------------------------

FLAGS = ("SH", "NA", "Stable")


def variant_name(flags: Iterable[str]) -> str:
    flags = set(flags)
    unknown = flags - set(FLAGS)
    if unknown:
        raise ValueError(f"unknown variant flags: {sorted(unknown)}")
    parts = [f for f in FLAGS if f in flags]
    return "-".join(parts) if parts else "plain"


def parse_variant(name: str) -> frozenset[str]:
    name = name.strip()
    if name.lower() in ("plain", "resnet", ""):
        return frozenset()
    if name.lower().startswith("resnet-"):
        name = name[len("resnet-"):]
    flags = frozenset(name.split("-"))
    variant_name(flags)
    return flags


ALL_VARIANTS = tuple(frozenset(c) for r in range(len(FLAGS) + 1) for c in itertools.combinations(FLAGS, r))


@dataclass
class ModelSettings:
    hidden: int = 128
    blocks: int = 1
    K: int = 30
    activation: str = "tanh"
    h: float = 0.05
    eps: float = 0.05
    relaxed: bool = False
    adaptive_threshold: float | None = None
    k_max: int = 500

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSettings":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown model fields: {', '.join(unknown)}")
        return cls(**d)

    def build(self, input_dim: int, classes: int, seed: int, *, shared: bool = True,
              non_autonomous: bool = True, stable: bool = True) -> Model:
        adaptive = None
        if self.adaptive_threshold is not None:
            adaptive = AdaptiveUnroll(self.adaptive_threshold, self.k_max)
        return init_model(input_dim, self.hidden, classes, blocks=self.blocks, K=self.K, adaptive=adaptive,
                          activation=self.activation, h=self.h, eps=self.eps, shared=shared,
                          non_autonomous=non_autonomous, stable=stable, relaxed=self.relaxed, seed=seed)


@dataclass
class AblationResult:
    variant: str
    history: list[EpochStats]
    loss_by_depth: np.ndarray
    mean_final_norm: float

    @property
    def final(self) -> EpochStats:
        return self.history[-1]


def ablation_grid(dataset: Dataset, variants: Iterable[Iterable[str]], cfg: TrainConfig,
                  settings: ModelSettings | None = None) -> dict[str, AblationResult]:
    """Train each variant from the same seed and config.

    SH off unties the weights across the unroll, NA off injects the input at
    step 0 only, Stable switches reprojection on.
    """
    settings = settings or ModelSettings()
    results: dict[str, AblationResult] = {}
    for flags in variants:
        flags = frozenset(flags)
        name = variant_name(flags)
        model = settings.build(dataset.input_dim, dataset.classes, cfg.seed, shared="SH" in flags,
                               non_autonomous="NA" in flags, stable="Stable" in flags)
        history = train(model, dataset, cfg)
        curve = loss_per_depth(model, dataset.x_test, dataset.y_test)
        H, _ = predict_features(model, dataset.x_test)
        results[name] = AblationResult(name, history, curve, float(np.mean(np.linalg.norm(H, axis=1))))
    return results


def write_ablation_table(results: dict[str, AblationResult], fh: TextIO) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["variant", "train_loss", "train_acc", "test_loss", "test_acc", "mean_final_state_norm"])
    for name, r in results.items():
        s = r.final
        w.writerow([name, repr(s.train_loss), repr(s.train_acc), repr(s.test_loss), repr(s.test_acc),
                    repr(r.mean_final_norm)])


def write_loss_by_depth(results: dict[str, AblationResult], fh: TextIO) -> None:
    names = list(results)
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["k"] + names)
    depth = max(len(results[n].loss_by_depth) for n in names)
    for k in range(depth):
        row = [k]
        for n in names:
            curve = results[n].loss_by_depth
            row.append(repr(float(curve[k])) if k < len(curve) else "")
        w.writerow(row)
