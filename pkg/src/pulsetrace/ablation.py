"""Frame-wise vs C-GRU vs C-GRU + periodicity penalty on synthetic phantoms."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import pipeline as P

ABLATION_LR = 1e-3
ABLATION_LAMBDA = 1e-2


@dataclass(frozen=True)
class Variant:
    name: str
    recurrent: bool
    lam: float


VARIANTS = (
    Variant("framewise", recurrent=False, lam=0.0),
    Variant("cgru", recurrent=True, lam=0.0),
    Variant("cgru_cl", recurrent=True, lam=ABLATION_LAMBDA),
)


@dataclass
class RunResult:
    seed: int
    variant: str
    test_mse: float
    test_re: float
    test_cl: float
    best_epoch: int


def run_seed(seed: int, epochs: int = 30, count: int = 25, lr: float = ABLATION_LR,
             variants=VARIANTS, profile: str = "test") -> list[RunResult]:
    sequences = P.make_dataset(count, seed=seed, profile=profile)
    dataset = P.default_split(sequences, seed)
    test = {i: sequences[i] for i in dataset.test}
    out = []
    for v in variants:
        cfg = P.TrainConfig(epochs=epochs, lr=lr, lam=v.lam, seed=seed, profile=profile,
                            recurrent=v.recurrent)
        res = P.train(sequences, dataset, cfg)
        report = P.evaluate(res.model, test)
        out.append(RunResult(seed, v.name, report.mse_mean, report.re_mean,
                             P.mean_cyclic_loss(report), res.best_epoch))
    return out


def summarize(results: list[RunResult]) -> dict[str, dict[str, float]]:
    names = sorted({r.variant for r in results})
    return {
        n: {
            "median_mse": float(np.median([r.test_mse for r in results if r.variant == n])),
            "median_re": float(np.median([r.test_re for r in results if r.variant == n])),
            "mean_cl": float(np.mean([r.test_cl for r in results if r.variant == n])),
        }
        for n in names
    }
