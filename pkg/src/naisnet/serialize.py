"""JSON documents for blocks, unroll policies and models.

Matrices are embedded as strings in the plain-text matrix format; tensors
of higher rank are stored as a row-major 2-D reshape plus a ``shape`` field.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dynamics import (
    AdaptiveUnroll,
    Affine,
    Block,
    BlockChain,
    ConvBlockParams,
    FcBlock,
    FcBlockParams,
    FixedUnroll,
    UnrollPolicy,
)
from .numerics import format_matrix, parse_matrix

FORMAT = "naisnet-model"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    pass


def _mat(M) -> str:
    return format_matrix(np.atleast_2d(np.asarray(M, dtype=np.float64)))


def _vec(v) -> str:
    return format_matrix(np.asarray(v, dtype=np.float64).reshape(-1, 1))


def _tensor(T: np.ndarray) -> dict:
    T = np.asarray(T, dtype=np.float64)
    return {"shape": list(T.shape), "data": format_matrix(T.reshape(-1, T.shape[-1]))}


def _read_mat(d: dict, key: str) -> np.ndarray:
    if key not in d:
        raise ModelFormatError(f"missing field '{key}'")
    return parse_matrix(d[key])


def _read_vec(d: dict, key: str) -> np.ndarray:
    return _read_mat(d, key).reshape(-1)


def _read_tensor(d: dict, key: str) -> np.ndarray:
    if key not in d:
        raise ModelFormatError(f"missing field '{key}'")
    shape = tuple(int(s) for s in d[key]["shape"])
    flat = parse_matrix(d[key]["data"])
    if flat.size != int(np.prod(shape)):
        raise ModelFormatError(f"'{key}' holds {flat.size} values, shape {shape} needs {int(np.prod(shape))}")
    return flat.reshape(shape)


# -- blocks ------------------------------------------------------------------------

def fc_params_to_dict(p: FcBlockParams) -> dict:
    d = {"R": _mat(p.R), "B": _mat(p.B), "b": _vec(p.b), "h": p.h, "eps": p.eps,
         "activation": p.activation.value}
    if p.A_direct is not None:
        d["A"] = _mat(p.A_direct)
    return d


def fc_params_from_dict(d: dict) -> FcBlockParams:
    A = _read_mat(d, "A") if d.get("A") is not None else None
    return FcBlockParams(R=_read_mat(d, "R"), B=_read_mat(d, "B"), b=_read_vec(d, "b"),
                         h=float(d.get("h", 1.0)), eps=float(d.get("eps", 0.05)),
                         activation=d.get("activation", "tanh"), A_direct=A)


def block_to_dict(block: Block) -> dict:
    if isinstance(block, FcBlockParams):
        return {"kind": "fc", **fc_params_to_dict(block)}
    if isinstance(block, FcBlock):
        return {"kind": "fc_block", "non_autonomous": block.non_autonomous,
                "layers": [fc_params_to_dict(p) for p in block.layers]}
    if isinstance(block, ConvBlockParams):
        return {"kind": "conv", "C": _tensor(block.C), "D": _tensor(block.D), "E": _vec(block.E),
                "delta": _vec(block.delta), "n_X": block.n_X, "n_U": block.n_U, "h": block.h,
                "eps": block.eps, "eta": block.eta, "activation": block.activation.value}
    raise TypeError(f"cannot serialize {type(block).__name__}")


def block_from_dict(d: dict) -> Block:
    kind = d.get("kind")
    if kind == "fc":
        return fc_params_from_dict(d)
    if kind == "fc_block":
        return FcBlock([fc_params_from_dict(p) for p in d["layers"]],
                       non_autonomous=bool(d.get("non_autonomous", True)))
    if kind == "conv":
        return ConvBlockParams(C=_read_tensor(d, "C"), D=_read_tensor(d, "D"), E=_read_vec(d, "E"),
                               delta=_read_vec(d, "delta"), n_X=int(d["n_X"]), n_U=int(d["n_U"]),
                               h=float(d.get("h", 1.0)), eps=float(d.get("eps", 0.01)),
                               eta=float(d.get("eta", 0.1)), activation=d.get("activation", "relu"))
    raise ModelFormatError(f"unknown block kind {kind!r}")


def policy_to_dict(policy: UnrollPolicy) -> dict:
    if isinstance(policy, AdaptiveUnroll):
        return {"mode": "adaptive", "threshold": policy.threshold, "k_max": policy.k_max}
    return {"mode": "fixed", "K": policy.K}


def policy_from_dict(d: dict) -> UnrollPolicy:
    mode = d.get("mode")
    if mode == "fixed":
        return FixedUnroll(int(d["K"]))
    if mode == "adaptive":
        return AdaptiveUnroll(float(d["threshold"]), int(d["k_max"]))
    raise ModelFormatError(f"unknown unroll mode {mode!r}")


def _affine_to_dict(T: Affine | None) -> dict | None:
    return None if T is None else {"W": _mat(T.W), "c": _vec(T.c)}


def _affine_from_dict(d: dict | None) -> Affine | None:
    return None if d is None else Affine(_read_mat(d, "W"), _read_vec(d, "c"))


# -- model documents ------------------------------------------------------------------

@dataclass
class ModelDocument:
    """A block chain with an optional linear readout."""

    chain: BlockChain
    head: Affine | None = None
    stable: bool = True
    relaxed: bool = False

    def to_model(self):
        from .training.model import Model

        if self.head is None:
            raise ModelFormatError("model file has no readout head")
        return Model(self.chain, self.head, stable=self.stable, relaxed=self.relaxed)

    @classmethod
    def from_model(cls, model) -> "ModelDocument":
        return cls(model.chain, model.head, model.stable, model.relaxed)

    @classmethod
    def single(cls, block: Block, policy: UnrollPolicy | None = None) -> "ModelDocument":
        return cls(BlockChain([block], [policy or FixedUnroll()]))

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "version": FORMAT_VERSION,
            "stable": self.stable,
            "relaxed": self.relaxed,
            "blocks": [block_to_dict(b) for b in self.chain.blocks],
            "policies": [policy_to_dict(p) for p in self.chain.policies],
            "transitions": [_affine_to_dict(T) for T in self.chain.transitions],
            "head": _affine_to_dict(self.head),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelDocument":
        if not isinstance(d, dict):
            raise ModelFormatError("model document must be a JSON object")
        if d.get("format") != FORMAT:
            raise ModelFormatError(f"not a {FORMAT} document")
        if d.get("version") != FORMAT_VERSION:
            raise ModelFormatError(f"unsupported version {d.get('version')!r}")
        blocks = [block_from_dict(b) for b in d.get("blocks", [])]
        if not blocks:
            raise ModelFormatError("model has no blocks")
        policies = [policy_from_dict(p) for p in d.get("policies", [{"mode": "fixed", "K": 30}] * len(blocks))]
        transitions = [_affine_from_dict(T) for T in d.get("transitions", [None] * (len(blocks) - 1))]
        chain = BlockChain(blocks, policies, transitions)
        return cls(chain, _affine_from_dict(d.get("head")), bool(d.get("stable", True)),
                   bool(d.get("relaxed", False)))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def atomic_write_text(path, text: str) -> Path:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def save_model(path, doc) -> Path:
    if not isinstance(doc, ModelDocument):
        doc = ModelDocument.from_model(doc)
    return atomic_write_text(path, doc.dumps())


def load_model(path) -> ModelDocument:
    """Read a model document; malformed content raises ModelFormatError."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: invalid JSON ({exc})") from exc
    try:
        return ModelDocument.from_dict(data)
    except (KeyError, TypeError, AttributeError) as exc:
        raise ModelFormatError(f"{path}: malformed model ({exc})") from exc
