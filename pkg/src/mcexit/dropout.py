"""Stochastic layers used at the exits: Monte-Carlo dropout and fixed
pre-generated binary masks, plus the counter-based random streams that
make sampling order-independent and reproducible.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

DROPOUT_KINDS = ("mcd", "masksembles")
GRANULARITIES = ("element", "channel")


def derive_seed(seed: int, *parts: Any) -> int:
    """Mix a base seed with arbitrary labels into a stable 64-bit seed.

    Uses blake2b so the derivation is identical across platforms and
    process restarts (unlike the builtin salted hash()).
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for part in parts:
        h.update(b"|")
        h.update(str(part).encode())
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True)
class DropoutConfig:
    """Configuration for the stochastic exit layers.

    kind "mcd" draws a fresh Bernoulli mask per pass and scales the
    survivors by keep_rate (set inverted=True for 1/keep_rate scaling).
    kind "masksembles" indexes into a fixed deterministic mask table,
    one mask per pass.
    """

    kind: str
    keep_rate: float | None = None
    granularity: str | None = None
    num_masks: int | None = None
    scale: float | None = None
    seed: int = 0
    inverted: bool = False

    def __post_init__(self) -> None:
        if self.kind not in DROPOUT_KINDS:
            raise ValueError(f"unknown dropout kind {self.kind!r}")
        if self.kind == "mcd":
            if self.keep_rate is None:
                raise ValueError("mcd config requires keep_rate")
            if not 0.0 < self.keep_rate <= 1.0:
                raise ValueError(f"keep_rate must be in (0, 1], got {self.keep_rate}")
            if self.granularity is None:
                object.__setattr__(self, "granularity", "channel")
            if self.granularity not in GRANULARITIES:
                raise ValueError(f"unknown granularity {self.granularity!r}")
            if self.num_masks is not None or self.scale is not None:
                raise ValueError("num_masks/scale are masksembles fields, not mcd")
        else:
            if self.num_masks is None or self.scale is None:
                raise ValueError("masksembles config requires num_masks and scale")
            if self.num_masks < 1:
                raise ValueError(f"num_masks must be >= 1, got {self.num_masks}")
            if self.scale < 1.0:
                raise ValueError(f"scale must be >= 1, got {self.scale}")
            if self.keep_rate is not None or self.granularity is not None:
                raise ValueError("keep_rate/granularity are mcd fields, not masksembles")
            if self.inverted:
                raise ValueError("inverted scaling only applies to mcd")

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"kind": self.kind, "seed": self.seed}
        if self.kind == "mcd":
            out.update(
                keep_rate=self.keep_rate,
                granularity=self.granularity,
                inverted=self.inverted,
            )
        else:
            out.update(num_masks=self.num_masks, scale=self.scale)
        return out

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "DropoutConfig":
        allowed = {"kind", "keep_rate", "granularity", "num_masks", "scale", "seed", "inverted"}
        unknown = set(doc) - allowed
        if unknown:
            raise ValueError(f"unknown dropout config keys: {sorted(unknown)}")
        return cls(**dict(doc))


def config_digest(cfg: DropoutConfig) -> str:
    """Stable hex digest of a dropout configuration, for provenance fields."""
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


class RngStream:
    """Counter-based uniform stream keyed by (seed, sample_index, layer_id).

    Each (seed, sample_index, layer_id) triple owns an independent Philox
    stream, so draws for one sample/layer never depend on whether other
    samples were drawn first or in what order. Uniforms take the 53 high
    bits of the generator output into [0, 1).
    """

    def __init__(self, seed: int, sample_index: int, layer_id: str) -> None:
        self.seed = int(seed)
        self.sample_index = int(sample_index)
        self.layer_id = str(layer_id)
        self.counter = 0
        key = hashlib.blake2b(
            f"{self.seed}|{self.sample_index}|{self.layer_id}".encode(),
            digest_size=16,
        ).digest()
        self._gen = np.random.Generator(np.random.Philox(key=int.from_bytes(key, "little")))

    def uniform(self, shape: tuple[int, ...] | int) -> np.ndarray:
        u = self._gen.random(shape)
        self.counter += int(u.size)
        return u

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return (
            f"RngStream(seed={self.seed}, sample_index={self.sample_index}, "
            f"layer_id={self.layer_id!r}, counter={self.counter})"
        )


def mcd_forward(
    x: np.ndarray,
    keep_rate: float,
    granularity: str,
    rng: RngStream,
    inverted: bool = False,
) -> np.ndarray:
    """One Monte-Carlo dropout realization.

    Elements whose uniform draw exceeds keep_rate are zeroed; survivors
    are multiplied by keep_rate (or 1/keep_rate when inverted). Channel
    granularity draws one uniform per leading-axis channel of a rank-3
    tensor so a whole feature map survives or dies together; on rank-1
    tensors it coincides with element granularity.
    """
    if not 0.0 < keep_rate <= 1.0:
        raise ValueError(f"keep_rate must be in (0, 1], got {keep_rate}")
    if granularity not in GRANULARITIES:
        raise ValueError(f"unknown granularity {granularity!r}")
    x = np.asarray(x)
    if granularity == "channel" and x.ndim == 3:
        u = rng.uniform((x.shape[0], 1, 1))
    else:
        u = rng.uniform(x.shape)
    scale = (1.0 / keep_rate) if inverted else keep_rate
    out = np.where(u > keep_rate, x.dtype.type(0), x * scale)
    return out.astype(x.dtype, copy=False)


@dataclass(frozen=True, eq=False)
class MaskSet:
    """A fixed table of binary masks; row index selects the ensemble member."""

    masks: np.ndarray
    feature_count: int
    scale: float

    def __post_init__(self) -> None:
        m = np.asarray(self.masks, dtype=np.uint8)
        if m.ndim != 2:
            raise ValueError("masks must be a 2-d table")
        if m.shape[1] != self.feature_count:
            raise ValueError("mask width must equal feature_count")
        if not np.all((m == 0) | (m == 1)):
            raise ValueError("masks must be binary")
        if np.any(m.sum(axis=1) < 1):
            raise ValueError("every mask needs at least one surviving feature")
        m.flags.writeable = False
        object.__setattr__(self, "masks", m)

    @property
    def num_masks(self) -> int:
        return int(self.masks.shape[0])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MaskSet):
            return NotImplemented
        return (
            self.feature_count == other.feature_count
            and self.scale == other.scale
            and np.array_equal(self.masks, other.masks)
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "feature_count": self.feature_count,
            "num_masks": self.num_masks,
            "scale": self.scale,
            "masks": self.masks.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "MaskSet":
        allowed = {"feature_count", "num_masks", "scale", "masks"}
        unknown = set(doc) - allowed
        if unknown:
            raise ValueError(f"unknown mask set keys: {sorted(unknown)}")
        masks = np.asarray(doc["masks"], dtype=np.uint8)
        if "num_masks" in doc and int(doc["num_masks"]) != masks.shape[0]:
            raise ValueError("num_masks disagrees with mask table height")
        return cls(masks=masks, feature_count=int(doc["feature_count"]), scale=float(doc["scale"]))


def generate_masks(feature_count: int, num_masks: int, scale: float) -> MaskSet:
    """Build the deterministic overlapping-window mask table.

    Every mask keeps k = min(F, round(scale * F / N)) features; mask i is
    the cyclic contiguous window of length k starting at offset
    round(i * F / N). The construction needs no seed, gives every mask an
    equal population count, and overlaps grow with scale until scale >= N
    saturates all masks to all-ones.
    """
    if feature_count < 1 or num_masks < 1:
        raise ValueError("feature_count and num_masks must be >= 1")
    if feature_count < num_masks:
        raise ValueError(
            f"feature_count {feature_count} smaller than num_masks {num_masks}"
        )
    if scale < 1.0:
        raise ValueError(f"scale must be >= 1, got {scale}")
    f, n = int(feature_count), int(num_masks)
    k = min(f, int(round(scale * f / n)))
    table = np.zeros((n, f), dtype=np.uint8)
    for i in range(n):
        start = int(round(i * f / n))
        idx = (start + np.arange(k)) % f
        table[i, idx] = 1
    return MaskSet(masks=table, feature_count=f, scale=float(scale))


def masksembles_forward(x: np.ndarray, mask_index: int, masks: MaskSet) -> np.ndarray:
    """Apply one fixed mask: survivors pass through unscaled, the rest are zero.

    Rank-3 inputs are masked per channel (the mask broadcasts over the
    spatial axes); rank-1 inputs are masked per element.
    """
    if not 0 <= mask_index < masks.num_masks:
        raise ValueError(
            f"mask_index {mask_index} out of range for {masks.num_masks} masks"
        )
    x = np.asarray(x)
    row = masks.masks[mask_index]
    if x.ndim == 3:
        if x.shape[0] != masks.feature_count:
            raise ValueError(
                f"mask width {masks.feature_count} does not match channel count {x.shape[0]}"
            )
        mult = row.reshape(-1, 1, 1)
    elif x.ndim == 1:
        if x.shape[0] != masks.feature_count:
            raise ValueError(
                f"mask width {masks.feature_count} does not match feature count {x.shape[0]}"
            )
        mult = row
    else:
        raise ValueError(f"masksembles expects rank-1 or rank-3 input, got rank {x.ndim}")
    return (x * mult).astype(x.dtype, copy=False)
