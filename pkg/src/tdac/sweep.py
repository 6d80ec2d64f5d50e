"""Ablation sweeps: retrain and evaluate once per value of one evolution setting."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

from .train import TrainConfig, evaluate, train

log = logging.getLogger(__name__)

SWEEP_VARIABLES = {"filter_size": "f", "iterations": "L"}


@dataclass(frozen=True)
class SweepSpec:
    """``variable`` is ``filter_size`` (window half-width f) or ``iterations`` (L)."""

    variable: str
    values: tuple
    base: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.variable not in SWEEP_VARIABLES:
            raise ValueError(f"variable must be one of {sorted(SWEEP_VARIABLES)}, got {self.variable!r}")
        if len(self.values) == 0:
            raise ValueError("sweep needs at least one value")
        object.__setattr__(self, "values", tuple(int(v) for v in self.values))

    def config_for(self, value):
        evo = replace(self.base.evolution, **{SWEEP_VARIABLES[self.variable]: int(value)})
        return replace(self.base, evolution=evo)


@dataclass
class SweepRow:
    value: int
    miou: float
    boundf: float


def run_sweep(spec: SweepSpec, train_samples, test_samples, csv_path=None):
    """Train from scratch for each value and report test mIoU and BoundF.

    Every run uses the same seed, data and base configuration; only the
    swept setting changes (both during training and at evaluation).
    """
    rows = []
    for v in spec.values:
        cfg = spec.config_for(v)
        params, _ = train(train_samples, cfg)
        agg, _ = evaluate(test_samples, params, cfg.evolution)
        log.info("%s=%d miou %.4f boundf %.4f", spec.variable, v, agg.miou, agg.boundf)
        rows.append(SweepRow(v, agg.miou, agg.boundf))
    if csv_path is not None:
        write_sweep_csv(csv_path, spec.variable, rows)
    return rows


def write_sweep_csv(path, variable, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([variable, "miou", "boundf"])
        for r in rows:
            w.writerow([r.value, repr(r.miou), repr(r.boundf)])
