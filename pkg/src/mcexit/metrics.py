"""Quality and cost metrics for multi-exit Monte-Carlo networks.

Covers the FLOP accounting that separates the one-shot trunk from the
per-sample exit work, the closed-form cost and reduction-rate formulas
built on that split, calibration error, and predictive-entropy scores on
Gaussian noise inputs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import inference, netspec
from .datasets import NoiseSpec, gaussian_inputs
from .dropout import derive_seed
from .netspec import MultiExitSpec
from .runtime import QFormat, WeightStore


@dataclass(frozen=True)
class FlopReport:
    """FLOPs split into the trunk (run once per input) and the exit heads
    (run once per Monte-Carlo sample)."""

    flop_main: int
    per_exit: tuple[int, ...]

    @property
    def flop_exit_total(self) -> int:
        return sum(self.per_exit)

    @property
    def alpha(self) -> float:
        """Exit-to-trunk cost ratio; infinite for a trunkless network."""
        if self.flop_main == 0:
            return float("inf")
        return self.flop_exit_total / self.flop_main


def count_flops(me: MultiExitSpec) -> FlopReport:
    """Static FLOP split of a multi-exit spec.

    The trunk is counted up to the deepest attach point, which is exactly
    how far the single cached pass runs. Each exit head is counted from
    its attach feature, including any trunk layers that were copied into
    the head by deep dropout insertion.
    """
    deepest = netspec.deepest_attach(me)
    shapes = [me.trunk.input_shape] + netspec.infer_shapes(
        me.trunk.layers, me.trunk.input_shape
    )
    flop_main = sum(
        netspec.flops_of(layer, shapes[i]) for i, layer in enumerate(me.trunk.layers[: deepest + 1])
    )
    per_exit = []
    for ex in me.exits:
        cur = netspec.attach_shape(me, ex.attach_after)
        total = 0
        for layer in ex.head_layers:
            total += netspec.flops_of(layer, cur)
            cur = netspec.output_shape(layer, cur)
        per_exit.append(total)
    return FlopReport(flop_main=int(flop_main), per_exit=tuple(per_exit))


def cost_single_exit(report: FlopReport, n_sample: int) -> int:
    """Cost of the naive scheme: every sample re-runs trunk plus exits."""
    if n_sample < 1:
        raise ValueError("n_sample must be >= 1")
    return n_sample * (report.flop_main + report.flop_exit_total)


def cost_multi_exit(
    report: FlopReport, n_sample: int, n_exit: int, allow_fractional: bool = False
) -> float:
    """Cost with trunk caching: one trunk pass plus n_sample/n_exit passes
    of the exit heads. n_exit must divide n_sample unless fractional
    passes are explicitly allowed."""
    if n_sample < 1 or n_exit < 1:
        raise ValueError("n_sample and n_exit must be >= 1")
    if n_sample % n_exit == 0:
        return float(report.flop_main + (n_sample // n_exit) * report.flop_exit_total)
    if not allow_fractional:
        raise ValueError(
            f"n_exit {n_exit} does not divide n_sample {n_sample}; "
            f"pass allow_fractional=True to accept a non-integer pass count"
        )
    return report.flop_main + (n_sample / n_exit) * report.flop_exit_total


def reduction_rate(alpha: float, n_sample: int, n_exit: int) -> float:
    """Ratio of naive to cached cost, (1 + a) / (1/N_sample + a/N_exit).

    Evaluated as N_sample*N_exit*(1+a) / (N_exit + a*N_sample) so the
    a = 0 limit returns exactly n_sample.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if n_sample < 1 or n_exit < 1:
        raise ValueError("n_sample and n_exit must be >= 1")
    if n_exit == n_sample:
        # the ratio collapses algebraically to n_sample; skip the rounding
        return float(n_sample)
    return n_sample * n_exit * (1.0 + alpha) / (n_exit + alpha * n_sample)


# --------------------------------------------------------------------------
# prediction quality


def accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if len(probs) != len(labels):
        raise ValueError("probs and labels must have equal length")
    if len(probs) == 0:
        raise ValueError("need at least one prediction")
    return float((probs.argmax(axis=1) == labels).mean())


def expected_calibration_error(
    probs: np.ndarray, labels: np.ndarray, n_bins: int = 15
) -> float:
    """Equal-width-binned gap between confidence and accuracy.

    Bin b covers [b/n_bins, (b+1)/n_bins) with the top bin closed at 1.
    Empty bins contribute nothing.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if len(probs) != len(labels):
        raise ValueError("probs and labels must have equal length")
    if len(probs) == 0:
        raise ValueError("need at least one prediction")
    conf = probs.max(axis=1)
    correct = probs.argmax(axis=1) == labels
    bins = np.minimum((conf * n_bins).astype(np.int64), n_bins - 1)
    ece = 0.0
    for b in range(n_bins):
        mask = bins == b
        count = int(mask.sum())
        if count == 0:
            continue
        gap = abs(correct[mask].mean() - conf[mask].mean())
        ece += (count / len(probs)) * gap
    return float(ece)


def predictive_entropy(probs: np.ndarray) -> float:
    """Shannon entropy of one probability vector in nats; 0 log 0 is 0."""
    p = np.asarray(probs, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("probabilities must be non-negative")
    if abs(p.sum() - 1.0) > 1e-6:
        raise ValueError(f"probabilities must sum to 1 within 1e-6, got {p.sum()}")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def average_predictive_entropy(
    me: MultiExitSpec,
    weights: WeightStore,
    noise: NoiseSpec,
    n_pass: int,
    qformat: QFormat | None = None,
) -> float:
    """Mean ensembled predictive entropy over Gaussian noise inputs.

    High values mean the network admits uncertainty on inputs that look
    nothing like data; each input gets its own derived sampling seed.
    """
    xs = gaussian_inputs(noise, me.trunk.input_shape)
    total = 0.0
    for i, x in enumerate(xs):
        preds = inference.predict(
            me, x, n_pass, weights, seed=derive_seed(noise.seed, "mc", i), qformat=qformat
        )
        total += predictive_entropy(inference.ensemble(preds))
    return total / len(xs)


@dataclass(frozen=True)
class MetricsReport:
    """One design point's quality and cost summary."""

    accuracy: float
    ece: float
    ape: float
    flops_fraction: float
    n_sample: int
    flops_fraction_early_exit: float | None = None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "accuracy": self.accuracy,
            "ece": self.ece,
            "ape": self.ape,
            "flops_fraction": self.flops_fraction,
            "n_sample": self.n_sample,
        }
        if self.flops_fraction_early_exit is not None:
            out["flops_fraction_early_exit"] = self.flops_fraction_early_exit
        return out


def write_csv(path: str | Path, rows: Sequence[Mapping[str, Any]], fields: Sequence[str]) -> None:
    """Fixed-column CSV emitter for sweep results."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fields), extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in fields})


def write_json(path: str | Path, doc: Any) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
