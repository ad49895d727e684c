"""Angular-error evaluation, uncertainty quality analysis and mode ablations."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import trainer
from .geometry import angular_error
from .netcore.network import ConfigError, NetworkConfig
from .synthgen import Dataset, Domain, dataset_bytes

DEFAULT_QUANTILES = (0.0, 0.25, 0.5, 0.75, 1.0)


def dataset_identity(dataset: Dataset) -> str:
    """Short content hash of the serialized dataset."""
    return hashlib.sha256(dataset_bytes(dataset)).hexdigest()[:16]


@dataclass
class EvalReport:
    mode: str
    dataset_id: str
    count: int
    errors: np.ndarray          # per-sample angular error, degrees
    labels: str = "observed"

    @property
    def mean_deg(self) -> float:
        return float(np.mean(self.errors))

    @property
    def median_deg(self) -> float:
        return float(np.median(self.errors))

    def to_text(self) -> str:
        return "\n".join([
            f"mode={self.mode}",
            f"dataset={self.dataset_id}",
            f"count={self.count}",
            f"labels={self.labels}",
            f"mean_angular_deg={self.mean_deg:.6f}",
            f"median_angular_deg={self.median_deg:.6f}",
        ]) + "\n"

    def per_sample_text(self) -> str:
        rows = ["#index\tangular_deg"] + [f"{i}\t{e:.6f}" for i, e in enumerate(self.errors)]
        return "\n".join(rows) + "\n"


def evaluate(params: dict, net: NetworkConfig, dataset: Dataset, mode: str,
             labels: str = "observed", histeq: bool = False, batch_size: int = 128) -> EvalReport:
    """Mean/median angular error of the mode's gaze prediction against the labels.

    ``labels="clean"`` compares against the gaze before any injected label noise,
    which is the meaningful target for real-like test data.
    """
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    if labels not in ("observed", "clean"):
        raise ConfigError(f"unknown label set {labels!r}")
    pred = trainer.predict(params, net, mode, dataset.images(), batch_size, histeq)
    truth = dataset.clean_gazes() if labels == "clean" else dataset.gazes()
    errors = angular_error(truth, pred.gaze)
    return EvalReport(mode, dataset_identity(dataset), len(dataset), np.asarray(errors), labels)


def cross_profile(params: dict, net: NetworkConfig, mode: str, profiles: dict[str, Dataset],
                  labels: str = "clean", histeq: bool = False) -> dict[str, EvalReport]:
    """Evaluate one trained model on several dataset profiles (gaze range / degradation)."""
    return {name: evaluate(params, net, data, mode, labels, histeq) for name, data in profiles.items()}


# ---------------------------------------------------------------------------
# quality

@dataclass
class DomainStats:
    count: int
    mean: float
    std: float

    @property
    def sem(self) -> float:
        return self.std / math.sqrt(self.count) if self.count > 1 else float("nan")


@dataclass
class QualityHistogram:
    """Per-sample quality ``mean(exp(-alpha))`` with its histogram and quantile picks."""
    values: np.ndarray
    domains: np.ndarray
    edges: np.ndarray
    counts: np.ndarray
    per_domain: dict[str, DomainStats]
    quantiles: dict[float, int] = field(default_factory=dict)

    def separation(self, high: str = "SYNTHETIC", low: str = "REALLIKE") -> float:
        """Gap ``mean(high) - mean(low)`` in units of the pooled standard error."""
        a, b = self.per_domain[high], self.per_domain[low]
        se = math.sqrt(a.std ** 2 / a.count + b.std ** 2 / b.count)
        return (a.mean - b.mean) / se if se > 0 else float("inf")

    def histogram_text(self) -> str:
        rows = ["#bin_lo\tbin_hi\tcount"]
        rows += [f"{lo:.6g}\t{hi:.6g}\t{c}" for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts)]
        return "\n".join(rows) + "\n"

    def summary_text(self) -> str:
        lines = [f"count={len(self.values)}", f"mean_quality={self.values.mean():.6g}"]
        for name, st in self.per_domain.items():
            lines.append(f"quality_{name.lower()}_mean={st.mean:.6g}")
            lines.append(f"quality_{name.lower()}_std={st.std:.6g}")
            lines.append(f"quality_{name.lower()}_count={st.count}")
        if {"SYNTHETIC", "REALLIKE"} <= set(self.per_domain):
            lines.append(f"separation_se={self.separation():.4f}")
        return "\n".join(lines) + "\n"

    def manifest_text(self) -> str:
        rows = ["#quantile\tindex\tquality\tdomain"]
        for q, i in self.quantiles.items():
            rows.append(f"{q:g}\t{i}\t{self.values[i]:.6g}\t{Domain(int(self.domains[i])).name}")
        return "\n".join(rows) + "\n"


def quantile_indices(values: np.ndarray, quantiles) -> dict[float, int]:
    """Sample index at each requested quantile of the ascending quality order."""
    order = np.argsort(values, kind="stable")
    n = len(values)
    out = {}
    for q in quantiles:
        if not 0.0 <= q <= 1.0:
            raise ConfigError(f"quantile {q} outside [0, 1]")
        out[float(q)] = int(order[int(round(q * (n - 1)))])
    return out


def build_histogram(values, domains, quantiles=DEFAULT_QUANTILES, bins: int = 20) -> QualityHistogram:
    values = np.asarray(values, dtype=np.float64)
    domains = np.asarray(domains)
    counts, edges = np.histogram(values, bins=bins)
    per_domain = {}
    for d in Domain:
        v = values[domains == d]
        if len(v):
            per_domain[d.name] = DomainStats(len(v), float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0)
    return QualityHistogram(values, domains, edges, counts, per_domain,
                            quantile_indices(values, quantiles))


def quality_report(params: dict, net: NetworkConfig, dataset: Dataset, mode: str = "HGN+UM",
                   quantiles=DEFAULT_QUANTILES, bins: int = 20, histeq: bool = False) -> QualityHistogram:
    if not net.has("alpha"):
        raise ConfigError("checkpoint has no uncertainty head; quality needs an HGN+UM model")
    if len(dataset) == 0:
        raise ConfigError("cannot compute quality on an empty dataset")
    pred = trainer.predict(params, net, mode, dataset.images(), histeq=histeq)
    domains = np.array([int(s.domain) for s in dataset.samples])
    return build_histogram(pred.quality, domains, quantiles, bins)


# ---------------------------------------------------------------------------
# ablation

@dataclass
class AblationRow:
    mode: str
    seed_errors: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.seed_errors))

    @property
    def std(self) -> float:
        return float(np.std(self.seed_errors, ddof=1)) if len(self.seed_errors) > 1 else 0.0


@dataclass
class AblationTable:
    rows: list[AblationRow]

    def row(self, mode: str) -> AblationRow:
        return next(r for r in self.rows if r.mode == mode)

    def to_text(self) -> str:
        lines = ["#mode\tmean_deg\tstd_deg\tseed_errors_deg"]
        for r in self.rows:
            per = ",".join(f"{e:.4f}" for e in r.seed_errors)
            lines.append(f"{r.mode}\t{r.mean:.4f}\t{r.std:.4f}\t{per}")
        return "\n".join(lines) + "\n"


def run_ablation(config: trainer.TrainConfig, modes, seeds, synthetic: Dataset | None,
                 reallike: Dataset | None, test: Dataset, labels: str = "clean",
                 progress=None) -> AblationTable:
    """Train every mode under every seed with the same budget and evaluate on ``test``."""
    rows = []
    for mode in modes:
        errs = []
        for seed in seeds:
            cfg = trainer.with_mode(config, mode, seed)
            res = trainer.train(cfg, synthetic, reallike)
            rep = evaluate(res.params, res.network, test, mode, labels, cfg.histeq)
            errs.append(rep.mean_deg)
            if progress is not None:
                progress(mode, seed, rep.mean_deg)
        rows.append(AblationRow(mode, errs))
    return AblationTable(rows)
