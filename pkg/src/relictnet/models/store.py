"""Parameter snapshots, checkpoints and encoder weight transfer."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn

from .heads import ModelSpec, build_model

ENCODER_PREFIX = "encoder."


class TransferError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def tensor_checksum(state: dict, keys=None) -> str:
    h = hashlib.sha256()
    for key in sorted(state if keys is None else keys):
        t = state[key].detach().cpu().contiguous()
        h.update(key.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes() if t.dtype != torch.bfloat16 else t.float().numpy().tobytes())
    return h.hexdigest()


@dataclass
class ParameterStore:
    """Named tensors (parameters and buffers) plus provenance metadata."""

    state: dict
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_module(cls, module: nn.Module, meta: dict | None = None) -> "ParameterStore":
        state = {k: v.detach().cpu().clone() for k, v in module.state_dict().items()}
        meta = dict(meta or {})
        spec = getattr(module, "spec", None)
        if isinstance(spec, ModelSpec):
            meta.setdefault("model_spec", spec.to_dict())
            meta.setdefault("fingerprint", spec.fingerprint())
        return cls(state, meta)

    def shapes(self) -> dict:
        return {k: tuple(v.shape) for k, v in self.state.items()}

    def encoder_keys(self) -> list[str]:
        return sorted(k for k in self.state if k.startswith(ENCODER_PREFIX))

    def checksum(self) -> str:
        return tensor_checksum(self.state)

    def encoder_checksum(self) -> str:
        return tensor_checksum(self.state, self.encoder_keys())

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = dict(self.meta, checksum=self.checksum())
        torch.save({"state": self.state, "meta": meta}, path)
        return path

    @classmethod
    def load(cls, path) -> "ParameterStore":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        blob = torch.load(path, map_location="cpu", weights_only=True)
        store = cls(blob["state"], blob["meta"])
        expected = store.meta.pop("checksum", None)
        if expected is not None and expected != store.checksum():
            raise CheckpointError(f"{path}: parameter checksum mismatch")
        return store

    def build(self) -> nn.Module:
        """Instantiate the model described by ``meta['model_spec']`` and load weights."""
        if "model_spec" not in self.meta:
            raise CheckpointError("checkpoint carries no model spec")
        spec = ModelSpec.from_dict(self.meta["model_spec"])
        if spec.fingerprint() != self.meta.get("fingerprint"):
            raise CheckpointError("checkpoint spec fingerprint mismatch")
        model = build_model(spec)
        try:
            model.load_state_dict(self.state)
        except RuntimeError as exc:
            raise CheckpointError(f"checkpoint does not fit its spec: {exc}") from exc
        return model


def transfer_encoder(source: ParameterStore, target: nn.Module) -> nn.Module:
    """Copy encoder tensors (weights, BN statistics, input normalization) from
    ``source`` into ``target.encoder``; the decoder is left untouched."""
    src = {k[len(ENCODER_PREFIX):]: v for k, v in source.state.items() if k.startswith(ENCODER_PREFIX)}
    tgt = target.encoder.state_dict()
    for key in sorted(set(src) | set(tgt)):
        if key not in src:
            raise TransferError(f"source lacks encoder key {ENCODER_PREFIX}{key}")
        if key not in tgt:
            raise TransferError(f"target lacks encoder key {ENCODER_PREFIX}{key}")
        if tuple(src[key].shape) != tuple(tgt[key].shape):
            raise TransferError(
                f"shape mismatch for {ENCODER_PREFIX}{key}: "
                f"{tuple(src[key].shape)} vs {tuple(tgt[key].shape)}"
            )
    target.encoder.load_state_dict({k: v.clone() for k, v in src.items()})
    return target


def encoder_state_equal(a: nn.Module, b: nn.Module) -> bool:
    sa, sb = a.encoder.state_dict(), b.encoder.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)

