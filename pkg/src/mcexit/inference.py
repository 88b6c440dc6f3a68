"""Monte-Carlo execution of a multi-exit network.

The deterministic trunk runs once per input and its activations are
cached at every exit attach point; each exit head then re-runs n_pass
times from its cached feature with fresh dropout realizations. Random
draws come from counter-based streams keyed by (seed, pass, layer id),
so results do not depend on evaluation order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np

from . import netspec, runtime
from .dropout import (
    DropoutConfig,
    MaskSet,
    RngStream,
    config_digest,
    derive_seed,
    generate_masks,
    masksembles_forward,
    mcd_forward,
)
from .netspec import MultiExitSpec
from .runtime import FlopCounter, QFormat, WeightStore

EXIT_MODES = ("per_exit", "ensemble_so_far")

CachedFeatures = dict  # attach-point layer id (or None for the input) -> activation


@dataclass
class PredictionSet:
    """All per-exit, per-pass probability vectors for one input."""

    samples: np.ndarray  # (n_exit, n_pass, class_count) float64
    n_exit: int
    n_pass: int
    class_count: int

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.shape != (self.n_exit, self.n_pass, self.class_count):
            raise ValueError(
                f"samples shape {self.samples.shape} does not match "
                f"({self.n_exit}, {self.n_pass}, {self.class_count})"
            )
        sums = self.samples.sum(axis=2)
        if not np.all(np.abs(sums - 1.0) <= 1e-6):
            raise ValueError("every stored probability vector must sum to 1 within 1e-6")

    @property
    def n_sample(self) -> int:
        return self.n_exit * self.n_pass

    def to_dict(self, seed: int | None = None, config: DropoutConfig | None = None) -> dict:
        out: dict[str, Any] = {
            "n_exit": self.n_exit,
            "n_pass": self.n_pass,
            "class_count": self.class_count,
            "samples": self.samples.reshape(-1).tolist(),  # row-major
        }
        if seed is not None:
            out["seed"] = int(seed)
        if config is not None:
            out["dropout_config_digest"] = config_digest(config)
        return out

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "PredictionSet":
        n_exit, n_pass, classes = int(doc["n_exit"]), int(doc["n_pass"]), int(doc["class_count"])
        samples = np.asarray(doc["samples"], dtype=np.float64).reshape(n_exit, n_pass, classes)
        return cls(samples=samples, n_exit=n_exit, n_pass=n_pass, class_count=classes)

    def to_json(self, seed: int | None = None, config: DropoutConfig | None = None) -> str:
        return json.dumps(self.to_dict(seed=seed, config=config), sort_keys=True)


@dataclass(frozen=True)
class ExitDecision:
    """Outcome of confidence-based early exiting for one input."""

    probs: np.ndarray
    exit_taken: int
    confidence: float
    mode: str


def site_feature_count(me: MultiExitSpec, exit_index: int, site_id: str) -> int:
    """Width of the masked axis at a dropout site (channels for rank-3)."""
    ex = me.exits[exit_index - 1]
    shape = netspec.attach_shape(me, ex.attach_after)
    for layer in ex.head_layers:
        if layer.id == site_id:
            return int(shape[0])
        shape = netspec.output_shape(layer, shape)
    raise ValueError(f"no dropout site {site_id!r} in exit {exit_index}")


def site_mask_sets(me: MultiExitSpec) -> dict[str, MaskSet]:
    """Deterministic mask tables for every masksembles dropout site."""
    cfg = me.dropout
    if cfg is None or cfg.kind != "masksembles":
        return {}
    tables: dict[str, MaskSet] = {}
    for exit_index, site_id in me.dropout_sites:
        f = site_feature_count(me, exit_index, site_id)
        tables[site_id] = generate_masks(f, cfg.num_masks, cfg.scale)
    return tables


def run_trunk(
    me: MultiExitSpec,
    x: np.ndarray,
    weights: WeightStore,
    qformat: QFormat | None = None,
    flop_counter: FlopCounter | None = None,
) -> CachedFeatures:
    """One deterministic pass of the shared trunk, no dropout evaluated.

    Executes only as deep as the deepest attach point and captures the
    activation at every exit attach point.
    """
    wanted = {ex.attach_after for ex in me.exits}
    cached: CachedFeatures = {}
    x = np.asarray(x, dtype=np.float32)
    if None in wanted:
        cached[None] = x
    deepest = netspec.deepest_attach(me)
    for layer in me.trunk.layers[: deepest + 1]:
        x = runtime.forward(layer, x, weights, qformat, flop_counter)
        if layer.id in wanted:
            cached[layer.id] = x
    return cached


def _head_pass(
    me: MultiExitSpec,
    exit_index: int,
    feature: np.ndarray,
    pass_index: int,
    weights: WeightStore,
    seed: int,
    masks: Mapping[str, MaskSet],
    qformat: QFormat | None,
    flop_counter: FlopCounter | None,
) -> np.ndarray:
    cfg = me.dropout
    x = feature
    for layer in me.exits[exit_index - 1].head_layers:
        if layer.kind == "dropout_point":
            if cfg is None:
                raise ValueError("spec has dropout sites but no dropout config")
            if cfg.kind == "mcd":
                stream = RngStream(seed, pass_index, layer.id)
                x = mcd_forward(x, cfg.keep_rate, cfg.granularity, stream, cfg.inverted)
            else:
                x = masksembles_forward(x, pass_index, masks[layer.id])
            if qformat is not None:
                x = runtime.quantize(x, qformat)
        else:
            x = runtime.forward(layer, x, weights, qformat, flop_counter)
    return x


def run_exit_samples(
    cached: CachedFeatures,
    me: MultiExitSpec,
    exit_index: int,
    n_pass: int,
    weights: WeightStore,
    seed: int,
    qformat: QFormat | None = None,
    flop_counter: FlopCounter | None = None,
) -> np.ndarray:
    """n_pass stochastic forward passes of one exit head from its cached
    feature. Returns the float64 probability vectors, one row per pass."""
    if not 1 <= exit_index <= me.n_exit:
        raise ValueError(f"exit_index must be in [1, {me.n_exit}], got {exit_index}")
    if n_pass < 1:
        raise ValueError(f"n_pass must be >= 1, got {n_pass}")
    cfg = me.dropout
    if cfg is not None and cfg.kind == "masksembles" and n_pass > cfg.num_masks:
        raise ValueError(
            f"n_pass {n_pass} exceeds the {cfg.num_masks} available masks; "
            f"each pass consumes one distinct mask"
        )
    ex = me.exits[exit_index - 1]
    if ex.attach_after not in cached:
        raise KeyError(f"no cached feature for attach point {ex.attach_after!r}")
    feature = cached[ex.attach_after]
    masks = {}
    if cfg is not None and cfg.kind == "masksembles":
        for k, site in me.dropout_sites:
            if k == exit_index:
                masks[site] = generate_masks(
                    site_feature_count(me, k, site), cfg.num_masks, cfg.scale
                )
    rows = [
        _head_pass(me, exit_index, feature, p, weights, seed, masks, qformat, flop_counter)
        for p in range(n_pass)
    ]
    return np.asarray(rows, dtype=np.float64)


def predict(
    me: MultiExitSpec,
    x: np.ndarray,
    n_pass: int,
    weights: WeightStore,
    seed: int | None = None,
    qformat: QFormat | None = None,
    flop_counter: FlopCounter | None = None,
) -> PredictionSet:
    """Full Monte-Carlo prediction: one trunk pass, n_pass head passes per
    exit, n_exit * n_pass probability vectors in total."""
    if seed is None:
        seed = me.dropout.seed if me.dropout is not None else 0
    cached = run_trunk(me, x, weights, qformat, flop_counter)
    per_exit = [
        run_exit_samples(cached, me, k, n_pass, weights, seed, qformat, flop_counter)
        for k in range(1, me.n_exit + 1)
    ]
    samples = np.stack(per_exit)
    return PredictionSet(
        samples=samples,
        n_exit=me.n_exit,
        n_pass=n_pass,
        class_count=samples.shape[2],
    )


def ensemble(preds: PredictionSet, upto_exit: int | None = None) -> np.ndarray:
    """Mean probability vector over all passes of exits 1..upto_exit."""
    upto = preds.n_exit if upto_exit is None else upto_exit
    if not 1 <= upto <= preds.n_exit:
        raise ValueError(f"upto_exit must be in [1, {preds.n_exit}], got {upto}")
    return preds.samples[:upto].reshape(-1, preds.class_count).mean(axis=0)


def confidence_exit(
    me: MultiExitSpec,
    x: np.ndarray,
    threshold: float,
    mode: str,
    weights: WeightStore,
    n_pass: int,
    seed: int | None = None,
    qformat: QFormat | None = None,
) -> ExitDecision:
    """Evaluate exits shallow-to-deep and stop at the first whose averaged
    prediction reaches the confidence threshold; the final exit always
    answers. Deeper heads are never executed once an exit fires.

    mode "per_exit" scores each exit's own average; "ensemble_so_far"
    scores the running ensemble of all exits up to the current one.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    if mode not in EXIT_MODES:
        raise ValueError(f"mode must be one of {EXIT_MODES}")
    if seed is None:
        seed = me.dropout.seed if me.dropout is not None else 0
    cached = run_trunk(me, x, weights, qformat)
    rows: list[np.ndarray] = []
    for k in range(1, me.n_exit + 1):
        samples = run_exit_samples(cached, me, k, n_pass, weights, seed, qformat)
        rows.append(samples)
        if mode == "per_exit":
            probs = samples.mean(axis=0)
        else:
            probs = np.concatenate(rows).mean(axis=0)
        confidence = float(probs.max())
        if confidence >= threshold or k == me.n_exit:
            return ExitDecision(probs=probs, exit_taken=k, confidence=confidence, mode=mode)
    raise AssertionError("unreachable: the final exit always answers")


def dataset_seeds(seed: int, count: int) -> list[int]:
    """Independent per-input sampling seeds derived from one base seed."""
    return [derive_seed(seed, "input", i) for i in range(count)]


def ensemble_dataset(
    me: MultiExitSpec,
    weights: WeightStore,
    inputs: np.ndarray,
    n_pass: int,
    seed: int,
    qformat: QFormat | None = None,
) -> np.ndarray:
    """Full-ensemble probabilities for a batch of inputs, one row each."""
    seeds = dataset_seeds(seed, len(inputs))
    rows = [
        ensemble(predict(me, x, n_pass, weights, s, qformat))
        for x, s in zip(inputs, seeds)
    ]
    return np.asarray(rows)
