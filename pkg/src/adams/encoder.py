"""Two-view feed-forward encoders with manual forward/backward passes.

Each view computes ``normalize(W2 tanh(W1 v + b1) + b2)``.  The acoustic
view mean-pools a variable-length frame sequence into ``v`` first; the text
view takes the class feature vector as is and its output is the class proxy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import ZERO_NORM, ZeroNormError

CHECKPOINT_FORMAT = "adams-checkpoint"
CHECKPOINT_VERSION = 1
PARAM_KEYS = ("W1", "b1", "W2", "b2")


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = 16
    text_dim: int = 16
    hidden_dim: int = 32
    embed_dim: int = 24
    seed: int = 0


class View:
    """One embedding network with a forward cache and gradient buffers."""

    def __init__(self, input_dim: int, hidden_dim: int, embed_dim: int, rng: np.random.Generator):
        s1 = 1.0 / np.sqrt(input_dim)
        s2 = 1.0 / np.sqrt(hidden_dim)
        self.params = {
            "W1": rng.uniform(-s1, s1, size=(hidden_dim, input_dim)),
            "b1": rng.uniform(-s1, s1, size=hidden_dim),
            "W2": rng.uniform(-s2, s2, size=(embed_dim, hidden_dim)),
            "b2": rng.uniform(-s2, s2, size=embed_dim),
        }
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._cache = None

    @property
    def input_dim(self) -> int:
        return self.params["W1"].shape[1]

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def forward(self, v: np.ndarray) -> np.ndarray:
        """Embed the rows of ``v`` (batch x input_dim); returns unit rows."""
        p = self.params
        v = np.atleast_2d(np.asarray(v, dtype=np.float64))
        if v.shape[1] != self.input_dim:
            raise ValueError(f"expected input dim {self.input_dim}, got {v.shape[1]}")
        h = np.tanh(v @ p["W1"].T + p["b1"])
        z = h @ p["W2"].T + p["b2"]
        norms = np.linalg.norm(z, axis=1)
        if np.any(norms < ZERO_NORM):
            raise ZeroNormError("encoder output has zero norm")
        u = z / norms[:, None]
        self._cache = (v, h, norms, u)
        return u

    def backward(self, d_u: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients for upstream ``d_u``; returns d/d input."""
        if self._cache is None:
            raise RuntimeError("backward called without a cached forward pass")
        v, h, norms, u = self._cache
        d_u = np.atleast_2d(d_u)
        if d_u.shape != u.shape:
            raise ValueError(f"upstream gradient shape {d_u.shape} != output shape {u.shape}")
        p = self.params
        # d(z/|z|)/dz = (I - u u^T) / |z|
        d_z = (d_u - u * np.sum(d_u * u, axis=1, keepdims=True)) / norms[:, None]
        self.grads["W2"] += d_z.T @ h
        self.grads["b2"] += d_z.sum(axis=0)
        d_a = (d_z @ p["W2"]) * (1.0 - h * h)
        self.grads["W1"] += d_a.T @ v
        self.grads["b1"] += d_a.sum(axis=0)
        return d_a @ p["W1"]


class TwoViewEncoder:
    def __init__(self, config: EncoderConfig | None = None):
        self.config = config or EncoderConfig()
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        self.acoustic = View(cfg.input_dim, cfg.hidden_dim, cfg.embed_dim, rng)
        self.text = View(cfg.text_dim, cfg.hidden_dim, cfg.embed_dim, rng)
        self._seq_lens = None

    @property
    def views(self) -> dict[str, View]:
        return {"acoustic": self.acoustic, "text": self.text}

    def named_params(self) -> dict[str, np.ndarray]:
        return {f"{name}.{k}": v for name, view in self.views.items() for k, v in view.params.items()}

    def named_grads(self) -> dict[str, np.ndarray]:
        return {f"{name}.{k}": v for name, view in self.views.items() for k, v in view.grads.items()}

    def zero_grad(self):
        self.acoustic.zero_grad()
        self.text.zero_grad()

    def encode_acoustic_batch(self, sequences) -> np.ndarray:
        pooled = []
        for frames in sequences:
            frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
            if frames.shape[0] == 0:
                raise ValueError("empty frame sequence")
            pooled.append(frames.mean(axis=0))
        self._seq_lens = [np.atleast_2d(f).shape[0] for f in sequences]
        return self.acoustic.forward(np.stack(pooled))

    def encode_acoustic(self, frames) -> np.ndarray:
        return self.encode_acoustic_batch([frames])[0]

    def encode_text_batch(self, features) -> np.ndarray:
        return self.text.forward(np.atleast_2d(np.asarray(features, dtype=np.float64)))

    def encode_text(self, class_features) -> np.ndarray:
        return self.encode_text_batch([class_features])[0]

    def backward(self, d_acoustic: np.ndarray | None = None, d_text: np.ndarray | None = None):
        """Backpropagate gradients w.r.t. the last produced embeddings.

        Returns (per-sequence frame gradients, text-feature gradients); each
        frame of a sequence receives 1/len of the pooled-input gradient.
        """
        d_frames = d_feat = None
        if d_acoustic is not None:
            d_pooled = self.acoustic.backward(d_acoustic)
            d_frames = [np.tile(g / n, (n, 1)) for g, n in zip(d_pooled, self._seq_lens)]
        if d_text is not None:
            d_feat = self.text.backward(d_text)
        return d_frames, d_feat

    # -- persistence ---------------------------------------------------------

    def to_dict(self) -> dict:
        cfg = self.config
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "dims": {"input_dim": cfg.input_dim, "text_dim": cfg.text_dim,
                     "hidden_dim": cfg.hidden_dim, "embed_dim": cfg.embed_dim},
            "seed": cfg.seed,
            "weights": {name: {k: v.ravel().tolist() for k, v in view.params.items()}
                        for name, view in self.views.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TwoViewEncoder":
        if d.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError("not an encoder checkpoint")
        if d.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {d.get('version')}")
        enc = cls(EncoderConfig(**d["dims"], seed=d["seed"]))
        for name, view in enc.views.items():
            for k, v in view.params.items():
                flat = np.asarray(d["weights"][name][k], dtype=np.float64)
                if flat.size != v.size:
                    raise CheckpointError(f"{name}.{k}: expected {v.size} values, got {flat.size}")
                view.params[k] = flat.reshape(v.shape)
        return enc


def save_checkpoint(path: str | Path, encoder: TwoViewEncoder, extra: dict | None = None):
    d = encoder.to_dict()
    if extra:
        d.update(extra)
    Path(path).write_text(json.dumps(d))


def load_checkpoint(path: str | Path) -> tuple[TwoViewEncoder, dict]:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt checkpoint: {e}") from e
    return TwoViewEncoder.from_dict(d), d
