"""Joint algorithm/hardware design-space exploration.

Enumerates the full Cartesian grid of design knobs (dropout kind and
strength, exit count, passes per exit, datapath bitwidth, channel
fraction, engine count, optional confidence threshold), evaluates every
point end to end on a toy dataset, then filters by constraints and
ranks lexicographically with tie tolerances. Failures are recorded per
point, never aborting a sweep.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Sequence

import numpy as np

from . import inference, mapping, metrics, netspec, runtime, train
from .datasets import Dataset, NoiseSpec, dataset_stats, train_test_split
from .dropout import DropoutConfig, derive_seed
from .mapping import HardwareModel, LatencyEstimate
from .metrics import MetricsReport
from .netspec import NetworkSpec

ALLOWED_BITWIDTHS = (4, 6, 8, 16)
ALLOWED_CHANNEL_FRACTIONS = (1.0, 0.5, 0.25, 0.125)

METRIC_NAMES = ("accuracy", "ece", "ape", "flops", "latency")
_MAXIMIZE = {"accuracy": True, "ece": False, "ape": True, "flops": False, "latency": False}
_DEFAULT_TOLERANCE = {"accuracy": 0.002, "ece": 0.001, "ape": 0.01, "flops": 0.0, "latency": 0.0}


@dataclass(frozen=True)
class DesignPoint:
    """One joint algorithm/hardware configuration.

    dropout_param is the drop rate for mcd (keep_rate = 1 - rate) and the
    mask scale for masksembles, matching how each knob is swept.
    """

    dropout_kind: str
    dropout_param: float
    n_exit: int
    n_pass: int
    bitwidth: int | None
    channel_fraction: float
    mapping_engines: int
    threshold: float | None = None

    def __post_init__(self) -> None:
        if self.dropout_kind not in ("mcd", "masksembles"):
            raise ValueError(f"unknown dropout kind {self.dropout_kind!r}")
        if self.dropout_kind == "mcd" and not 0.0 < self.dropout_param < 1.0:
            raise ValueError(f"mcd drop rate must be in (0, 1), got {self.dropout_param}")
        if self.dropout_kind == "masksembles" and self.dropout_param < 1.0:
            raise ValueError(f"mask scale must be >= 1, got {self.dropout_param}")
        if self.n_exit < 1 or self.n_pass < 1:
            raise ValueError("n_exit and n_pass must be >= 1")
        if self.bitwidth is not None and self.bitwidth not in ALLOWED_BITWIDTHS:
            raise ValueError(f"bitwidth must be one of {ALLOWED_BITWIDTHS} or None")
        if self.channel_fraction not in ALLOWED_CHANNEL_FRACTIONS:
            raise ValueError(f"channel_fraction must be one of {ALLOWED_CHANNEL_FRACTIONS}")
        if self.mapping_engines < 1:
            raise ValueError("mapping_engines must be >= 1")
        if self.threshold is not None and not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must be in (0, 1)")

    @property
    def n_sample(self) -> int:
        return self.n_exit * self.n_pass

    def key(self) -> str:
        """Canonical identity string, stable across runs."""
        return (
            f"{self.dropout_kind}:{self.dropout_param!r}:e{self.n_exit}:p{self.n_pass}"
            f":b{self.bitwidth}:c{self.channel_fraction!r}:g{self.mapping_engines}"
            f":t{self.threshold!r}"
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "dropout_kind": self.dropout_kind,
            "dropout_param": self.dropout_param,
            "n_exit": self.n_exit,
            "n_pass": self.n_pass,
            "bitwidth": self.bitwidth,
            "channel_fraction": self.channel_fraction,
            "mapping_engines": self.mapping_engines,
            "threshold": self.threshold,
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "DesignPoint":
        return cls(**dict(doc))


@dataclass(frozen=True)
class ExplorationGrids:
    """Per-knob value lists; the design space is their Cartesian product.

    MCD points sweep mcd_rates, masksembles points sweep
    masksembles_scales; the two never mix within one point.
    """

    mcd_rates: tuple[float, ...] = (0.125, 0.25, 0.375, 0.5)
    masksembles_scales: tuple[float, ...] = (3.0, 4.0, 5.0, 6.0)
    n_exits: tuple[int, ...] = (1,)
    n_passes: tuple[int, ...] = (4,)
    bitwidths: tuple[int | None, ...] = (None,)
    channel_fractions: tuple[float, ...] = (1.0,)
    engines: tuple[int, ...] = (1,)
    thresholds: tuple[float | None, ...] = (None,)

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "ExplorationGrids":
        allowed = {
            "mcd_rates",
            "masksembles_scales",
            "n_exits",
            "n_passes",
            "bitwidths",
            "channel_fractions",
            "engines",
            "thresholds",
        }
        unknown = set(doc) - allowed
        if unknown:
            raise ValueError(f"unknown grid keys: {sorted(unknown)}")
        kwargs = {k: tuple(v) for k, v in doc.items()}
        return cls(**kwargs)


def enumerate_design_points(grids: ExplorationGrids) -> list[DesignPoint]:
    """Full factorial enumeration in a fixed lexicographic knob order."""
    dropout = [("mcd", r) for r in grids.mcd_rates] + [
        ("masksembles", s) for s in grids.masksembles_scales
    ]
    axes = (
        dropout,
        grids.n_exits,
        grids.n_passes,
        grids.bitwidths,
        grids.channel_fractions,
        grids.engines,
        grids.thresholds,
    )
    names = (
        "mcd_rates/masksembles_scales",
        "n_exits",
        "n_passes",
        "bitwidths",
        "channel_fractions",
        "engines",
        "thresholds",
    )
    for name, axis in zip(names, axes):
        if not axis:
            raise ValueError(f"grid {name} is empty")
    points = []
    for (kind, param), n_exit, n_pass, bits, cf, engines, thr in itertools.product(*axes):
        points.append(
            DesignPoint(
                dropout_kind=kind,
                dropout_param=param,
                n_exit=n_exit,
                n_pass=n_pass,
                bitwidth=bits,
                channel_fraction=cf,
                mapping_engines=engines,
                threshold=thr,
            )
        )
    return points


@dataclass(frozen=True)
class EvaluationSettings:
    """Shared per-sweep knobs that are not part of the design space."""

    depth: int = 1
    integer_bits: int = 3
    lr: float = 0.3
    epochs: int = 120
    batch: int = 32
    test_fraction: float = 0.3
    exit_mode: str = "ensemble_so_far"
    channel_mode: str = "retrain"  # or "slice"
    n_bins: int = 15
    base_weights: runtime.WeightStore | None = None

    def __post_init__(self) -> None:
        if self.channel_mode not in ("retrain", "slice"):
            raise ValueError("channel_mode must be 'retrain' or 'slice'")
        if self.exit_mode not in inference.EXIT_MODES:
            raise ValueError(f"exit_mode must be one of {inference.EXIT_MODES}")


@dataclass(frozen=True)
class Constraints:
    """Feasibility bounds; every field is optional but at least one must
    be active."""

    min_accuracy: float | None = None
    max_ece: float | None = None
    min_ape: float | None = None
    max_flops_fraction: float | None = None
    max_latency_ms: float | None = None
    require_fit: bool = False

    def __post_init__(self) -> None:
        active = [
            self.min_accuracy,
            self.max_ece,
            self.min_ape,
            self.max_flops_fraction,
            self.max_latency_ms,
        ]
        if all(v is None for v in active) and not self.require_fit:
            raise ValueError("at least one constraint must be active")

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "Constraints":
        allowed = {
            "min_accuracy",
            "max_ece",
            "min_ape",
            "max_flops_fraction",
            "max_latency_ms",
            "require_fit",
        }
        unknown = set(doc) - allowed
        if unknown:
            raise ValueError(f"unknown constraint keys: {sorted(unknown)}")
        return cls(**dict(doc))


@dataclass(frozen=True)
class Priority:
    """Ordered metric names compared lexicographically; values within a
    metric's tolerance of each other count as tied and fall through to
    the next metric."""

    metrics: tuple[str, ...]
    tolerances: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.metrics:
            raise ValueError("priority needs at least one metric")
        if len(set(self.metrics)) != len(self.metrics):
            raise ValueError("priority metrics must not repeat")
        unknown = set(self.metrics) - set(METRIC_NAMES)
        if unknown:
            raise ValueError(f"unknown priority metrics: {sorted(unknown)}")
        tol = dict(_DEFAULT_TOLERANCE)
        tol.update(self.tolerances)
        object.__setattr__(self, "tolerances", tol)


@dataclass(frozen=True)
class PointResult:
    """Everything measured (or the failure) for one design point."""

    point: DesignPoint
    report: MetricsReport | None = None
    latency: LatencyEstimate | None = None
    resources: dict[str, float] | None = None
    fits: bool | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def metric(self, name: str) -> float:
        if self.report is None or self.latency is None:
            raise ValueError("metrics unavailable for a failed point")
        if name == "accuracy":
            return self.report.accuracy
        if name == "ece":
            return self.report.ece
        if name == "ape":
            return self.report.ape
        if name == "flops":
            return self.report.flops_fraction
        if name == "latency":
            return self.latency.ms
        raise ValueError(f"unknown metric {name!r}")


def build_point_spec(
    dp: DesignPoint, base_net: NetworkSpec, seed: int, settings: EvaluationSettings
) -> netspec.MultiExitSpec:
    """The dropout-ready multi-exit network a design point denotes."""
    scaled = netspec.scale_channels(base_net, dp.channel_fraction)
    me = netspec.place_exits(scaled)
    me = netspec.keep_exits(me, dp.n_exit)
    if dp.dropout_kind == "mcd":
        cfg = DropoutConfig(
            kind="mcd",
            keep_rate=1.0 - dp.dropout_param,
            seed=derive_seed(seed, "drop", dp.key()),
        )
    else:
        cfg = DropoutConfig(
            kind="masksembles",
            num_masks=dp.n_pass,
            scale=dp.dropout_param,
            seed=derive_seed(seed, "drop", dp.key()),
        )
    return netspec.insert_dropout(me, cfg, settings.depth)


def evaluate_design_point(
    dp: DesignPoint,
    base_net: NetworkSpec,
    data: Dataset,
    noise_count: int,
    hw: HardwareModel,
    settings: EvaluationSettings,
    seed: int,
) -> PointResult:
    """Build, train, and score one design point end to end.

    Any construction or training failure is captured in the result's
    error field so a sweep keeps going.
    """
    try:
        me = build_point_spec(dp, base_net, seed, settings)
        train_data, test_data = train_test_split(data, settings.test_fraction, seed)

        if settings.channel_mode == "slice" and dp.channel_fraction != 1.0:
            if settings.base_weights is None:
                raise ValueError("channel_mode 'slice' needs base_weights for the full network")
            full = build_point_spec(
                replace(dp, channel_fraction=1.0), base_net, seed, settings
            )
            weights = runtime.slice_weights(
                settings.base_weights, netspec.all_layers(full), netspec.all_layers(me)
            )
        else:
            weights = train.train_toy(
                me,
                train_data,
                train.TrainConfig(
                    lr=settings.lr,
                    epochs=settings.epochs,
                    batch=settings.batch,
                    seed=derive_seed(seed, "train", dp.key()),
                ),
            )

        qformat = None
        if dp.bitwidth is not None:
            qformat = runtime.QFormat(
                total_bits=dp.bitwidth,
                integer_bits=min(settings.integer_bits, dp.bitwidth),
            )

        eval_seed = derive_seed(seed, "eval", dp.key())
        flop_report = metrics.count_flops(me)
        baseline_shapes = [base_net.input_shape] + netspec.infer_shapes(
            base_net.layers, base_net.input_shape
        )
        baseline = sum(
            netspec.flops_of(layer, baseline_shapes[i])
            for i, layer in enumerate(base_net.layers)
        )
        flops_fraction = metrics.cost_multi_exit(flop_report, dp.n_sample, dp.n_exit) / baseline

        early_fraction = None
        if dp.threshold is None:
            probs = inference.ensemble_dataset(
                me, weights, test_data.features, dp.n_pass, eval_seed, qformat
            )
        else:
            rows = []
            spent = 0.0
            seeds = inference.dataset_seeds(eval_seed, len(test_data))
            for x, s in zip(test_data.features, seeds):
                decision = inference.confidence_exit(
                    me, x, dp.threshold, settings.exit_mode, weights, dp.n_pass, s, qformat
                )
                rows.append(decision.probs)
                spent += flop_report.flop_main + dp.n_pass * sum(
                    flop_report.per_exit[: decision.exit_taken]
                )
            probs = np.asarray(rows)
            early_fraction = spent / len(test_data) / baseline

        acc = metrics.accuracy(probs, test_data.labels)
        ece = metrics.expected_calibration_error(probs, test_data.labels, settings.n_bins)
        mean, std = dataset_stats(train_data)
        noise = NoiseSpec(
            mean=tuple(float(v) for v in mean),
            std=tuple(float(v) for v in std),
            count=noise_count,
            seed=derive_seed(seed, "noise", dp.key()),
        )
        ape = metrics.average_predictive_entropy(me, weights, noise, dp.n_pass, qformat)

        plan = mapping.build_mapping(dp.n_sample, dp.mapping_engines)
        latency = mapping.estimate_latency(plan, flop_report, hw)
        res = mapping.estimate_resources(plan, me, hw)

        report = MetricsReport(
            accuracy=acc,
            ece=ece,
            ape=ape,
            flops_fraction=flops_fraction,
            n_sample=dp.n_sample,
            flops_fraction_early_exit=early_fraction,
        )
        return PointResult(
            point=dp,
            report=report,
            latency=latency,
            resources=res.usage,
            fits=res.fits,
        )
    except Exception as err:  # recorded, never aborts the sweep
        return PointResult(point=dp, error=f"{type(err).__name__}: {err}")


def _satisfies(result: PointResult, constraints: Constraints) -> bool:
    r, lat = result.report, result.latency
    if r is None or lat is None:
        return False
    if constraints.min_accuracy is not None and r.accuracy < constraints.min_accuracy:
        return False
    if constraints.max_ece is not None and r.ece > constraints.max_ece:
        return False
    if constraints.min_ape is not None and r.ape < constraints.min_ape:
        return False
    if (
        constraints.max_flops_fraction is not None
        and r.flops_fraction > constraints.max_flops_fraction
    ):
        return False
    if constraints.max_latency_ms is not None and lat.ms > constraints.max_latency_ms:
        return False
    if constraints.require_fit and not result.fits:
        return False
    return True


def rank_key(result: PointResult, priority: Priority) -> tuple:
    """Sort key implementing tolerance-aware lexicographic comparison.

    Each metric is quantized to its tolerance bucket first; bucket ties
    fall through to the next metric. Raw values and the design-point key
    break any remaining ties, which keeps the order total and the sort
    deterministic.
    """
    buckets = []
    raws = []
    for name in priority.metrics:
        v = result.metric(name)
        tol = priority.tolerances.get(name, 0.0)
        bucket = round(v / tol) if tol > 0 else v
        sign = -1.0 if _MAXIMIZE[name] else 1.0
        buckets.append(sign * bucket)
        raws.append(sign * v)
    return (tuple(buckets), tuple(raws), result.point.key())


def filter_and_rank(
    results: Sequence[PointResult],
    constraints: Constraints,
    priority: Priority,
) -> tuple[list[PointResult], PointResult | None]:
    """Drop failures and constraint violations, rank the rest.

    Returns (ranked feasible points, best point or None when the feasible
    set is empty).
    """
    feasible = [r for r in results if r.ok and _satisfies(r, constraints)]
    ranked = sorted(feasible, key=lambda r: rank_key(r, priority))
    return ranked, (ranked[0] if ranked else None)


@dataclass(frozen=True)
class ExplorationOutcome:
    results: tuple[PointResult, ...]
    ranked: tuple[PointResult, ...]
    best: PointResult | None


def explore(
    base_net: NetworkSpec,
    grids: ExplorationGrids,
    constraints: Constraints,
    priority: Priority,
    data: Dataset,
    hw: HardwareModel,
    settings: EvaluationSettings,
    seed: int,
    noise_count: int = 64,
    jobs: int = 1,
) -> ExplorationOutcome:
    """Enumerate, evaluate (optionally in a thread pool), filter, rank."""
    points = enumerate_design_points(grids)

    def run(dp: DesignPoint) -> PointResult:
        return evaluate_design_point(dp, base_net, data, noise_count, hw, settings, seed)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, points))
    else:
        results = [run(dp) for dp in points]
    ranked, best = filter_and_rank(results, constraints, priority)
    return ExplorationOutcome(results=tuple(results), ranked=tuple(ranked), best=best)


def select_optima(
    results: Sequence[PointResult],
    constraints: Constraints,
    metric_names: Sequence[str] = ("accuracy", "ece", "ape"),
) -> dict[str, PointResult | None]:
    """Single-metric champions (accuracy-, calibration-, entropy-optimal)
    from an already evaluated sweep."""
    out: dict[str, PointResult | None] = {}
    for name in metric_names:
        _, best = filter_and_rank(results, constraints, Priority(metrics=(name,)))
        out[name] = best
    return out


def results_to_rows(results: Sequence[PointResult]) -> list[dict[str, Any]]:
    """Flat ledger rows, one per design point, failures included."""
    rows = []
    for r in results:
        row: dict[str, Any] = {"status": "ok" if r.ok else "failed", **r.point.to_dict()}
        row["n_sample"] = r.point.n_sample
        if r.report is not None:
            row.update(r.report.to_dict())
        if r.latency is not None:
            row["latency_cycles"] = r.latency.cycles
            row["latency_ms"] = r.latency.ms
        if r.resources is not None:
            for k, v in r.resources.items():
                row[f"resource_{k}"] = v
            row["fits"] = r.fits
        row["error"] = r.error or ""
        rows.append(row)
    return rows


LEDGER_FIELDS = (
    "status",
    "dropout_kind",
    "dropout_param",
    "n_exit",
    "n_pass",
    "n_sample",
    "bitwidth",
    "channel_fraction",
    "mapping_engines",
    "threshold",
    "accuracy",
    "ece",
    "ape",
    "flops_fraction",
    "flops_fraction_early_exit",
    "latency_cycles",
    "latency_ms",
    "resource_dsp",
    "resource_bram",
    "resource_lut",
    "resource_ff",
    "fits",
    "error",
)
