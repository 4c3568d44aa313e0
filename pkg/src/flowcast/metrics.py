"""Kling-Gupta efficiency and the per-basin model comparison report."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class DegenerateSeriesError(ValueError):
    """KGE is undefined for the given series (constant, zero-mean or too short)."""


@dataclass(frozen=True)
class KgeComponents:
    r: float  # Pearson correlation
    beta: float  # mean(sim) / mean(obs)
    gamma: float  # CV(sim) / CV(obs)
    kge: float

    @staticmethod
    def combine(r: float, beta: float, gamma: float) -> float:
        return 1.0 - math.sqrt((r - 1.0) ** 2 + (beta - 1.0) ** 2 + (gamma - 1.0) ** 2)


def kge(sim, obs) -> KgeComponents:
    """KGE of ``sim`` against ``obs`` using population standard deviations.

    Raises:
        DegenerateSeriesError: lengths differ or are below 2, either series is
            constant, or a mean is zero.
    """
    sim = np.asarray(sim, dtype=np.float64).ravel()
    obs = np.asarray(obs, dtype=np.float64).ravel()
    if sim.size != obs.size:
        raise DegenerateSeriesError(f"length mismatch: sim {sim.size}, obs {obs.size}")
    if obs.size < 2:
        raise DegenerateSeriesError("KGE needs at least two values")
    if not (np.isfinite(sim).all() and np.isfinite(obs).all()):
        raise DegenerateSeriesError("series contain non-finite values")
    mu_s, mu_o = sim.mean(), obs.mean()
    sd_s, sd_o = sim.std(), obs.std()
    if sd_o == 0.0 or sd_s == 0.0:
        raise DegenerateSeriesError("KGE is undefined for a constant series")
    if mu_o == 0.0 or mu_s == 0.0:
        raise DegenerateSeriesError("KGE is undefined when a series has zero mean")
    r = float(np.mean((sim - mu_s) * (obs - mu_o)) / (sd_s * sd_o))
    beta = float(mu_s / mu_o)
    gamma = float((sd_s / mu_s) / (sd_o / mu_o))
    return KgeComponents(r, beta, gamma, KgeComponents.combine(r, beta, gamma))


@dataclass(frozen=True)
class BasinResult:
    basin_id: str
    lstm: KgeComponents
    cnn_lstm: KgeComponents

    @property
    def delta(self) -> float:
        return self.cnn_lstm.kge - self.lstm.kge


@dataclass(frozen=True)
class ComparisonSummary:
    n_basins: int
    median_lstm: float
    median_cnn_lstm: float
    improved_count: int
    improved_fraction: float
    best_basin: str
    best_lstm: float
    best_cnn_lstm: float
    rows: tuple[BasinResult, ...]

    @property
    def best_delta(self) -> float:
        return self.best_cnn_lstm - self.best_lstm

    def to_text(self) -> str:
        lines = [
            f"basins compared: {self.n_basins}",
            f"CNN-LSTM better in {self.improved_fraction:.0%} ({self.improved_count} of {self.n_basins} basins)",
            f"largest KGE gain: basin {self.best_basin}, {self.best_lstm:.2f} (LSTM) -> "
            f"{self.best_cnn_lstm:.2f} (CNN-LSTM)",
            f"median KGE: {self.median_lstm:.2f} (LSTM) -> {self.median_cnn_lstm:.2f} (CNN-LSTM)",
            "",
            f"{'basin':<16}{'LSTM':>10}{'CNN-LSTM':>10}{'delta':>10}",
        ]
        for row in self.rows:
            lines.append(f"{row.basin_id:<16}{row.lstm.kge:>10.4f}{row.cnn_lstm.kge:>10.4f}{row.delta:>+10.4f}")
        return "\n".join(lines) + "\n"

    def summary_record(self) -> dict:
        return {
            "n_basins": self.n_basins,
            "median_kge_lstm": self.median_lstm,
            "median_kge_cnn_lstm": self.median_cnn_lstm,
            "improved_count": self.improved_count,
            "improved_fraction": self.improved_fraction,
            "best_basin": self.best_basin,
            "best_kge_lstm": self.best_lstm,
            "best_kge_cnn_lstm": self.best_cnn_lstm,
        }


def compare_report(results) -> ComparisonSummary:
    """Medians, the strict-improvement tally and the largest per-basin gain."""
    results = tuple(results)
    if not results:
        raise ValueError("compare_report needs at least one basin")
    lstm = np.array([r.lstm.kge for r in results])
    cnn = np.array([r.cnn_lstm.kge for r in results])
    improved = int(np.sum(cnn > lstm))
    best = results[int(np.argmax(cnn - lstm))]
    return ComparisonSummary(
        n_basins=len(results),
        median_lstm=float(np.median(lstm)),
        median_cnn_lstm=float(np.median(cnn)),
        improved_count=improved,
        improved_fraction=improved / len(results),
        best_basin=best.basin_id,
        best_lstm=best.lstm.kge,
        best_cnn_lstm=best.cnn_lstm.kge,
        rows=results,
    )
