"""Electrode geometry: layouts on the unit sphere, lobe partitions, and
sinusoidal positional encodings over 3D coordinates and time.

Coordinate convention: x points to the subject's right, y anterior, z
superior; scalp electrodes sit on (or near) the unit sphere.  Bipolar
channels ("FP1-F7") take the midpoint of their electrode pair, re-projected
onto the sphere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Standard 10-20 positions on the unit sphere.
_TEN_TWENTY_COORDS: dict[str, tuple[float, float, float]] = {
    "Fp1": (-0.309, 0.951, 0.0),
    "Fp2": (0.309, 0.951, 0.0),
    "Fpz": (0.0, 1.0, 0.0),
    "F7": (-0.809, 0.588, 0.0),
    "F3": (-0.545, 0.673, 0.5),
    "Fz": (0.0, 0.7071, 0.7071),
    "F4": (0.545, 0.673, 0.5),
    "F8": (0.809, 0.588, 0.0),
    "T3": (-1.0, 0.0, 0.0),
    "C3": (-0.7071, 0.0, 0.7071),
    "Cz": (0.0, 0.0, 1.0),
    "C4": (0.7071, 0.0, 0.7071),
    "T4": (1.0, 0.0, 0.0),
    "T5": (-0.809, -0.588, 0.0),
    "P3": (-0.545, -0.673, 0.5),
    "Pz": (0.0, -0.7071, 0.7071),
    "P4": (0.545, -0.673, 0.5),
    "T6": (0.809, -0.588, 0.0),
    "O1": (-0.309, -0.951, 0.0),
    "O2": (0.309, -0.951, 0.0),
    "Oz": (0.0, -1.0, 0.0),
}

# Modern name aliases accepted on input.
_ALIASES = {"T7": "T3", "T8": "T4", "P7": "T5", "P8": "T6"}

_TEN_TWENTY_19 = [
    "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8",
    "T3", "C3", "Cz", "C4", "T4",
    "T5", "P3", "Pz", "P4", "T6", "O1", "O2",
]

# Longitudinal bipolar chains plus midline; two transverse bridges bring the
# channel count to 20 (their first electrodes stay lobe-assignable).
_DOUBLE_BANANA_20 = [
    "FP1-F7", "F7-T3", "T3-T5", "T5-O1",
    "FP2-F8", "F8-T4", "T4-T6", "T6-O2",
    "FP1-F3", "F3-C3", "C3-P3", "P3-O1",
    "FP2-F4", "F4-C4", "C4-P4", "P4-O2",
    "FZ-CZ", "CZ-PZ", "T3-C3", "C4-T4",
]

_LOBE_TABLE = {
    "frontal": ["Fp1", "Fp2", "F3", "F4", "Fz", "F7", "F8", "Fpz"],
    "central": ["C3", "C4", "Cz"],
    "temporal": ["T3", "T4", "T5", "T6"],
    "parietal": ["P3", "P4", "Pz"],
    "occipital": ["O1", "O2", "Oz"],
}

_LOBE_ORDER = ["frontal", "central", "temporal", "parietal", "occipital"]


class LayoutError(ValueError):
    """Unknown layout, malformed channel, or broken partition."""


def _canonical(name: str) -> str:
    key = name.strip()
    for cand in _TEN_TWENTY_COORDS:
        if cand.upper() == key.upper():
            return cand
    up = key.upper()
    for alias, target in _ALIASES.items():
        if alias.upper() == up:
            return target
    raise LayoutError(f"unknown 10-20 electrode name: {name!r}")


@dataclass
class ElectrodeLayout:
    """Named channels with unit-sphere coordinates."""

    channels: list[tuple[str, float, float, float]]
    montage_kind: str = "monopolar"

    def __post_init__(self):
        names = [c[0] for c in self.channels]
        if len(set(names)) != len(names):
            raise LayoutError("channel names must be unique")
        coords = self.coords()
        if not np.isfinite(coords).all():
            raise LayoutError("channel coordinates must be finite")
        norms = np.linalg.norm(coords, axis=1)
        if ((norms < 0.5) | (norms > 1.5)).any():
            bad = [names[i] for i in np.nonzero((norms < 0.5) | (norms > 1.5))[0]]
            raise LayoutError(f"channel coordinates off the sphere: {bad}")
        if self.montage_kind not in ("monopolar", "bipolar"):
            raise LayoutError(f"montage_kind must be monopolar or bipolar, got {self.montage_kind!r}")

    @property
    def names(self) -> list[str]:
        return [c[0] for c in self.channels]

    def coords(self) -> np.ndarray:
        return np.array([[x, y, z] for _, x, y, z in self.channels], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.channels)


def _bipolar_coord(pair: str) -> tuple[float, float, float]:
    first, second = (part.strip() for part in pair.replace("–", "-").split("-", 1))
    a = np.array(_TEN_TWENTY_COORDS[_canonical(first)])
    b = np.array(_TEN_TWENTY_COORDS[_canonical(second)])
    mid = 0.5 * (a + b)
    mid /= np.linalg.norm(mid)
    return float(mid[0]), float(mid[1]), float(mid[2])


def builtin_layout(name: str) -> ElectrodeLayout:
    """Return one of the packaged layouts.

    Available: ``ten_twenty_19`` (monopolar 10-20), ``ten_twenty_20``
    (10-20 plus Oz), ``double_banana_20`` (bipolar chains, midpoint
    coordinates re-projected to the sphere).
    """
    if name == "ten_twenty_19":
        chans = [(n, *_TEN_TWENTY_COORDS[n]) for n in _TEN_TWENTY_19]
        return ElectrodeLayout(chans, "monopolar")
    if name == "ten_twenty_20":
        chans = [(n, *_TEN_TWENTY_COORDS[n]) for n in _TEN_TWENTY_19 + ["Oz"]]
        return ElectrodeLayout(chans, "monopolar")
    if name == "double_banana_20":
        chans = [(pair, *_bipolar_coord(pair)) for pair in _DOUBLE_BANANA_20]
        return ElectrodeLayout(chans, "bipolar")
    raise LayoutError(
        f"unknown layout {name!r}; available: ten_twenty_19, ten_twenty_20, double_banana_20"
    )


@dataclass
class LobePartition:
    """Assignment of every channel to exactly one named lobe."""

    assignment: np.ndarray  # (D,) int, values in [0, n_lobes)
    lobe_names: list[str]

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        n = len(self.lobe_names)
        if self.assignment.ndim != 1:
            raise LayoutError("assignment must be one index per channel")
        if ((self.assignment < 0) | (self.assignment >= n)).any():
            raise LayoutError("lobe index out of range")
        counts = np.bincount(self.assignment, minlength=n)
        empty = [self.lobe_names[i] for i in np.nonzero(counts == 0)[0]]
        if empty:
            raise LayoutError(f"empty lobes not allowed: {empty}")

    @property
    def n_lobes(self) -> int:
        return len(self.lobe_names)

    def members(self, lobe: int) -> np.ndarray:
        return np.nonzero(self.assignment == lobe)[0]


def _anchor_electrode(channel_name: str) -> str:
    """Electrode that keys lobe assignment (first of a bipolar pair)."""
    name = channel_name.replace("–", "-")
    first = name.split("-", 1)[0] if "-" in name else name
    return _canonical(first)


def default_lobes(layout: ElectrodeLayout) -> LobePartition:
    """Five anatomical lobes (frontal, central, temporal, parietal,
    occipital); bipolar channels keyed on their first electrode."""
    lobe_of = {}
    for lobe, names in _LOBE_TABLE.items():
        for n in names:
            lobe_of[n] = _LOBE_ORDER.index(lobe)
    assignment = []
    for chan in layout.names:
        anchor = _anchor_electrode(chan)
        if anchor not in lobe_of:
            raise LayoutError(f"channel {chan!r} not assignable to a lobe (anchor {anchor})")
        assignment.append(lobe_of[anchor])
    used = sorted(set(assignment))
    names = [_LOBE_ORDER[i] for i in used]
    remap = {old: new for new, old in enumerate(used)}
    return LobePartition(np.array([remap[a] for a in assignment]), names)


def _coordinate_partition(layout: ElectrodeLayout, axis: int, edges, names) -> LobePartition:
    coords = layout.coords()[:, axis]
    assignment = np.digitize(coords, edges)
    used = sorted(set(assignment.tolist()))
    remap = {old: new for new, old in enumerate(used)}
    return LobePartition(
        np.array([remap[a] for a in assignment]),
        [names[i] for i in used],
    )


def hemisphere_partition(layout: ElectrodeLayout) -> LobePartition:
    """Left / midline / right by the sign of x; empty groups dropped."""
    return _coordinate_partition(layout, 0, [-1e-9, 1e-9], ["left", "midline", "right"])


def sagittal_partition(layout: ElectrodeLayout) -> LobePartition:
    """Three sagittal strips: |x| > 0.4 lateral, the rest a central strip."""
    return _coordinate_partition(layout, 0, [-0.4, 0.4], ["left_strip", "central_strip", "right_strip"])


def coronal_partition(layout: ElectrodeLayout) -> LobePartition:
    """Three coronal bands along the anterior-posterior axis."""
    return _coordinate_partition(layout, 1, [-0.2, 0.2], ["posterior", "middle", "anterior"])


def mean_all_partition(layout: ElectrodeLayout) -> LobePartition:
    """Single group over all channels (global mean pooling)."""
    return LobePartition(np.zeros(len(layout), dtype=np.int64), ["all"])


PARTITION_BUILDERS = {
    "lobes": default_lobes,
    "hemispheres": hemisphere_partition,
    "sagittal": sagittal_partition,
    "coronal": coronal_partition,
    "mean": mean_all_partition,
}


def load_layout_file(path) -> tuple[ElectrodeLayout, LobePartition]:
    """Parse an override table: one ``name x y z lobe`` line per channel,
    ``#`` starts a comment."""
    channels = []
    lobe_names: list[str] = []
    assignment = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 5:
                raise LayoutError(f"{path}:{lineno}: expected 'name x y z lobe', got {raw!r}")
            name, xs, ys, zs, lobe = parts
            channels.append((name, float(xs), float(ys), float(zs)))
            if lobe not in lobe_names:
                lobe_names.append(lobe)
            assignment.append(lobe_names.index(lobe))
    if not channels:
        raise LayoutError(f"{path}: no channels defined")
    kind = "bipolar" if any("-" in c[0] for c in channels) else "monopolar"
    layout = ElectrodeLayout(channels, kind)
    return layout, LobePartition(np.array(assignment), lobe_names)


@dataclass
class PositionalEncoding:
    """Sinusoidal encoding table; entries always lie in [-1, 1]."""

    values: np.ndarray  # (positions, d_model)
    kind: str = field(default="temporal")


def _sinusoid_block(pos: np.ndarray, width: int) -> np.ndarray:
    """Interleaved sin/cos block of the given even width for 1D positions."""
    half = width // 2
    j = np.arange(half, dtype=np.float64)
    freq = np.power(10000.0, -2.0 * j / width)
    angles = pos[:, None] * freq[None, :]
    block = np.empty((pos.shape[0], width), dtype=np.float64)
    block[:, 0::2] = np.sin(angles)
    block[:, 1::2] = np.cos(angles)
    return block


# Spatial coordinates are mapped to sinusoid positions as pos = pi * coord,
# i.e. the unit interval [-1, 1] covers a 2*pi-wide range centred at zero.
SPATIAL_POSITION_SCALE = np.pi


def pe_spatial(layout: ElectrodeLayout, d_model: int) -> PositionalEncoding:
    """Per-channel encoding: one sinusoid block per spatial axis, concatenated."""
    if d_model % 6 != 0:
        raise ValueError(f"d_model must be divisible by 6 for the 3-axis encoding, got {d_model}")
    d_axis = d_model // 3
    coords = layout.coords()
    blocks = [
        _sinusoid_block(SPATIAL_POSITION_SCALE * coords[:, axis], d_axis)
        for axis in range(3)
    ]
    return PositionalEncoding(np.concatenate(blocks, axis=1), kind="spatial")


def pe_temporal(T: int, d_model: int) -> PositionalEncoding:
    """Standard full-width sinusoidal encoding over time indices 0..T-1."""
    if d_model % 2 != 0:
        raise ValueError(f"d_model must be even, got {d_model}")
    if T < 1:
        raise ValueError("T must be positive")
    pos = np.arange(T, dtype=np.float64)
    return PositionalEncoding(_sinusoid_block(pos, d_model), kind="temporal")
