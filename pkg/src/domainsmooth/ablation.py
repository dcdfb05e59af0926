"""The four-way loss ablation (baseline, +contrastive, +memory, full) on synthetic data."""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, replace

import numpy as np

from .data import SynthConfig, generate_synthetic, make_zero_shot_split, restrict
from .model import encode
from .numkit import make_rng
from .retrieval import RetrievalReport, evaluate, itq_fit
from .trainer import TrainConfig, train

VARIANTS = (
    ("baseline", False, False),
    ("baseline+cmcm", True, False),
    ("baseline+ml", False, True),
    ("full", True, True),
)


@dataclass(frozen=True)
class AblationSetup:
    synth: SynthConfig = SynthConfig()
    train: TrainConfig = TrainConfig()
    n_unseen: int = 5
    bits: int = 64
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    itq_iters: int = 50


@dataclass
class AblationResult:
    setup: AblationSetup
    reports: dict[str, list[RetrievalReport]]

    def mean_map(self, variant: str) -> float:
        return math.fsum(r.map_all for r in self.reports[variant]) / len(self.reports[variant])

    def mean_prec(self, variant: str) -> float:
        return math.fsum(r.prec_at_100 for r in self.reports[variant]) / len(self.reports[variant])


def run_seed(setup: AblationSetup, seed: int) -> dict[str, RetrievalReport]:
    img, ske = generate_synthetic(replace(setup.synth, seed=seed))
    split = make_zero_shot_split(img.categories(), setup.n_unseen, make_rng([seed, 1]))
    seen_img, seen_ske = restrict(img, split.seen), restrict(ske, split.seen)
    q, g = restrict(ske, split.unseen), restrict(img, split.unseen)
    out = {}
    for name, use_cmcm, use_ml in VARIANTS:
        cfg = replace(setup.train, seed=seed, use_cmcm=use_cmcm, use_ml=use_ml)
        res = train(cfg, seen_img, seen_ske)
        # hash functions are fitted on seen-category images only
        itq = itq_fit(encode(res.params, seen_img.features), setup.bits, make_rng([seed, 2]), setup.itq_iters)
        out[name] = evaluate(res.params, q, g, "hamming", itq)
    return out


def run_ablation(setup: AblationSetup) -> AblationResult:
    reports: dict[str, list[RetrievalReport]] = {name: [] for name, _, _ in VARIANTS}
    for seed in setup.seeds:
        for name, rep in run_seed(setup, seed).items():
            reports[name].append(rep)
    return AblationResult(setup, reports)


def verdict(a: float, b: float) -> str:
    if a > b:
        return ">"
    if a < b:
        return "<"
    return "tie"


def ordering_verdicts(maps: dict[str, float]) -> list[tuple[str, str, str]]:
    pairs = [
        ("full", "baseline+cmcm"),
        ("full", "baseline+ml"),
        ("baseline+cmcm", "baseline"),
        ("baseline+ml", "baseline"),
    ]
    return [(a, verdict(maps[a], maps[b]), b) for a, b in pairs]


def emit_ablation_table(maps: dict[str, float], precs: dict[str, float] | None = None) -> str:
    """Fixed-order comparison table plus the ordering verdicts."""
    names = [n for n, _, _ in VARIANTS]
    if set(maps) != set(names) or len(maps) != 4:
        raise ValueError(f"need exactly the four variants {names}, got {sorted(maps)}")
    buf = io.StringIO()
    buf.write(f"{'variant':<16}{'mAP@all':>12}{'Prec@100':>12}\n")
    for n in names:
        p = f"{precs[n]:>12.6f}" if precs else f"{'-':>12}"
        buf.write(f"{n:<16}{maps[n]:>12.6f}{p}\n")
    buf.write("\n")
    for a, v, b in ordering_verdicts(maps):
        buf.write(f"{a} {v} {b}\n")
    return buf.getvalue()


def ablation_table(result: AblationResult) -> str:
    names = [n for n, _, _ in VARIANTS]
    maps = {n: result.mean_map(n) for n in names}
    precs = {n: result.mean_prec(n) for n in names}
    lines = [emit_ablation_table(maps, precs), "\nper-seed mAP@all\n"]
    lines.append(f"{'seed':<6}" + "".join(f"{n:>16}" for n in names) + "\n")
    for i, s in enumerate(result.setup.seeds):
        lines.append(f"{s:<6}" + "".join(f"{result.reports[n][i].map_all:>16.6f}" for n in names) + "\n")
    return "".join(lines)


def orderings_hold(result: AblationResult) -> bool:
    maps = {n: result.mean_map(n) for n, _, _ in VARIANTS}
    return all(v == ">" for _, v, _ in ordering_verdicts(maps))
