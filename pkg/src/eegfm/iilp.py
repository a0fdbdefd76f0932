"""Lobe-pooled fine-tuning head.

Per encoder layer: mean-pool over time, mean over the channels of each lobe,
concatenate lobes; concatenating the layers gives one flat feature vector
(layer-major, lobe-minor block order) that an MLP classifier consumes.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .geometry import LobePartition


def temporal_pool(z: torch.Tensor) -> torch.Tensor:
    """Mean over the time axis: (..., T, D, d) -> (..., D, d)."""
    if z.shape[-3] < 1:
        raise ValueError("need at least one time step")
    return z.mean(dim=-3)


def intra_lobe_pool(vt: torch.Tensor, partition: LobePartition) -> torch.Tensor:
    """Mean over each lobe's channels: (..., D, d) -> (..., n_lobes, d)."""
    if vt.shape[-2] != len(partition.assignment):
        raise ValueError(
            f"partition covers {len(partition.assignment)} channels, got {vt.shape[-2]}"
        )
    pooled = [
        vt[..., partition.members(k), :].mean(dim=-2) for k in range(partition.n_lobes)
    ]
    return torch.stack(pooled, dim=-2)


def iilp_vector(enc_outputs: list[torch.Tensor], partition: LobePartition) -> torch.Tensor:
    """Concatenated lobe embeddings across all encoder layers.

    Output length is n_lobes * n_layers * d_model; layer blocks come first,
    lobes within a layer second (layer-major order).
    """
    per_layer = []
    for z in enc_outputs:
        v = intra_lobe_pool(temporal_pool(z), partition)
        per_layer.append(v.flatten(start_dim=-2))
    return torch.cat(per_layer, dim=-1)


def iilp_length(partition: LobePartition, n_layers: int, d_model: int) -> int:
    return partition.n_lobes * n_layers * d_model


class ClassifierHead(nn.Module):
    """MLP over the pooled feature vector; argmax of the logits predicts."""

    def __init__(
        self,
        in_features: int,
        n_classes: int,
        hidden: list[int] | None = None,
        activation: str = "gelu",
    ):
        super().__init__()
        if n_classes < 2:
            raise ValueError("need at least two classes")
        widths = [in_features] + list(hidden or []) + [n_classes]
        if any(w < 1 for w in widths):
            raise ValueError("layer widths must be positive")
        self.n_classes = n_classes
        acts = {"relu": nn.ReLU, "gelu": nn.GELU, "swiglu": nn.SiLU}
        layers: list[nn.Module] = []
        for i in range(len(widths) - 1):
            layers.append(nn.Linear(widths[i], widths[i + 1]))
            if i < len(widths) - 2:
                layers.append(acts[activation]())
        self.mlp = nn.Sequential(*layers)

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        if v.shape[-1] != self.mlp[0].in_features:
            raise ValueError(
                f"feature width {v.shape[-1]} does not match head input {self.mlp[0].in_features}"
            )
        return self.mlp(v)


def classify(v: torch.Tensor, head: ClassifierHead) -> torch.Tensor:
    return head(v)


def default_head(partition: LobePartition, n_layers: int, d_model: int, n_classes: int,
                 activation: str = "gelu", n_hidden_layers: int = 1) -> ClassifierHead:
    """One hidden layer of width 4*d_model unless configured otherwise."""
    return ClassifierHead(
        iilp_length(partition, n_layers, d_model),
        n_classes,
        hidden=[4 * d_model] * n_hidden_layers,
        activation=activation,
    )


def export_probe(path, vectors: np.ndarray, partition: LobePartition, n_layers: int, d_model: int) -> None:
    """Write feature vectors as a flat float32 matrix plus a JSON header."""
    path = Path(path)
    vectors = np.ascontiguousarray(np.asarray(vectors, dtype=np.float32))
    if vectors.ndim != 2:
        raise ValueError("expected a (samples, features) matrix")
    header = {
        "shape": list(vectors.shape),
        "dtype": "float32-le",
        "block_layout": {
            "order": "layer-major",
            "n_layers": n_layers,
            "n_lobes": partition.n_lobes,
            "lobe_names": partition.lobe_names,
            "d_model": d_model,
        },
    }
    path.with_suffix(".json").write_text(json.dumps(header, indent=2, sort_keys=True))
    vectors.astype("<f4").tofile(path)


def load_probe(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    mat = np.fromfile(path, dtype="<f4").reshape(header["shape"])
    return mat, header
