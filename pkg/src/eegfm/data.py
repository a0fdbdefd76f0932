"""On-disk dataset format.

A dataset is a directory of samples: ``<name>.bin`` holds little-endian
float32 row-major (T, D) values, ``<name>.json`` the sidecar (rate, layout,
label, provenance, shape).  ``manifest.json`` lists the split membership.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .pipeline import EEGSample

MANIFEST = "manifest.json"


def save_sample(directory, name: str, sample: EEGSample) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sidecar = {
        "rate": sample.rate,
        "layout": sample.layout_name,
        "label": sample.label,
        "provenance": sample.provenance,
        "shape": list(sample.values.shape),
    }
    (directory / f"{name}.json").write_text(json.dumps(sidecar, sort_keys=True))
    sample.values.astype("<f4").tofile(directory / f"{name}.bin")


def load_sample(directory, name: str) -> EEGSample:
    directory = Path(directory)
    sidecar = json.loads((directory / f"{name}.json").read_text())
    values = np.fromfile(directory / f"{name}.bin", dtype="<f4").reshape(sidecar["shape"])
    return EEGSample(
        values.astype(np.float64),
        sidecar["rate"],
        layout_name=sidecar["layout"],
        label=sidecar["label"],
        provenance=sidecar.get("provenance", ""),
    )


def save_dataset(directory, samples: list[EEGSample], splits: dict[str, list[int]] | None = None) -> None:
    """Write samples and a manifest; ``splits`` maps split name to sample
    indices (default: everything in "train")."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = [f"sample_{i:06d}" for i in range(len(samples))]
    for name, sample in zip(names, samples):
        save_sample(directory, name, sample)
    if splits is None:
        splits = {"train": list(range(len(samples)))}
    manifest = {
        "splits": {split: [names[i] for i in idx] for split, idx in splits.items()},
        "layout": samples[0].layout_name if samples else "",
        "n_samples": len(samples),
    }
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {directory}")
    return json.loads(path.read_text())


def load_split(directory, split: str) -> list[EEGSample]:
    manifest = load_manifest(directory)
    if split not in manifest["splits"]:
        raise KeyError(f"split {split!r} not in manifest (has {sorted(manifest['splits'])})")
    return [load_sample(directory, name) for name in manifest["splits"][split]]
