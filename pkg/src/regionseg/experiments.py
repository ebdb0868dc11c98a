"""Matched-arm comparisons: every arm shares data, seed and all settings but one axis."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

from . import metrics
from .data import Dataset
from .models import ModelConfig
from .trainer import RegionConfig, RegionProvider, TrainConfig, evaluate, train

ABLATIONS = ("e2e-vs-baseline", "softmax-order", "region-shape", "pooling-mode", "loss-balance")

# Fixed desk-scale setup used by the acceptance runs: 200 train / 50 test images of
# the default scene spec, and a schedule with the 20+10 epoch shape at a learning
# rate suited to the small from-scratch backbone.
DESK_SPLIT = (200, 50)
DESK_TRAIN = TrainConfig(lr_phase1=1e-2, epochs_phase1=20, lr_phase2=1e-3, epochs_phase2=10, eval_every=0)


@dataclass
class ArmResult:
    name: str
    model_cfg: ModelConfig
    region_cfg: RegionConfig
    global_acc: float
    class_acc: float
    miou: float
    boundary_class_acc: float | None
    final_loss: float
    seconds: float
    history: list

    def row(self) -> dict:
        return {
            "arm": self.name,
            "global_acc": self.global_acc,
            "class_acc": self.class_acc,
            "miou": self.miou,
            "boundary_class_acc": self.boundary_class_acc,
        }


def run_arm(name: str, model_cfg: ModelConfig, train_cfg: TrainConfig, dataset: Dataset,
            region_cfg: RegionConfig | None = None, band: float = 4) -> ArmResult:
    region_cfg = region_cfg or RegionConfig()
    t0 = time.perf_counter()
    provider = RegionProvider(dataset, model_cfg, region_cfg)
    quiet = replace(train_cfg, eval_every=0)
    result = train(model_cfg, quiet, dataset, region_cfg, provider)
    cm, cm_band, _ = evaluate(result.model, dataset, dataset.test, provider, band=band)
    summary = metrics.summarize(cm)
    band_acc = metrics.class_average_accuracy(cm_band) if cm_band.sum() else None
    return ArmResult(
        name, model_cfg, region_cfg, summary["global_acc"], summary["class_acc"], summary["miou"],
        band_acc, result.history[-1]["loss"] if result.history else float("nan"),
        time.perf_counter() - t0, result.history,
    )


def arms_for(which: str, base: ModelConfig, region_cfg: RegionConfig):
    """``(name, model_cfg, region_cfg)`` triples for one ablation axis."""
    if which == "e2e-vs-baseline":
        return [
            ("baseline", replace(base, kind="baseline", fusion="box-only"), region_cfg),
            ("end-to-end", replace(base, kind="endtoend", fusion="box-only"), region_cfg),
        ]
    if which == "softmax-order":
        return [
            ("softmax-then-max", replace(base, softmax_order="softmax-then-max"), region_cfg),
            ("max-then-softmax", replace(base, softmax_order="max-then-softmax"), region_cfg),
        ]
    if which == "region-shape":
        return [
            ("oversegmentation", base, replace(region_cfg, mode="oversegmentation")),
            ("multi-scale", base, replace(region_cfg, mode="multiscale")),
        ]
    if which == "pooling-mode":
        return [
            ("box", replace(base, fusion="box-only"), region_cfg),
            ("region", replace(base, fusion="region-only"), region_cfg),
            ("region+box tied", replace(base, fusion="tied"), region_cfg),
            ("region+box separate", replace(base, fusion="separate"), region_cfg),
        ]
    if which == "loss-balance":
        return [
            ("unbalanced", replace(base, loss="unbalanced"), region_cfg),
            ("balanced", replace(base, loss="balanced"), region_cfg),
        ]
    raise ValueError(f"unknown ablation {which!r}; choose from {ABLATIONS}")


def run_ablation(which: str, dataset: Dataset, base: ModelConfig, train_cfg: TrainConfig,
                 region_cfg: RegionConfig | None = None, band: float = 4, progress=None) -> list[ArmResult]:
    region_cfg = region_cfg or RegionConfig()
    results = []
    for name, mcfg, rcfg in arms_for(which, base, region_cfg):
        res = run_arm(name, mcfg, train_cfg, dataset, rcfg, band)
        if progress is not None:
            progress(res)
        results.append(res)
    return results


def format_table(which: str, results: list[ArmResult]) -> str:
    """Comparison table plus ``arm``/``delta`` records relative to the first arm."""
    head = f"{'arm':<22}{'global':>9}{'class':>9}{'mIoU':>9}{'boundary':>10}"
    lines = [f"ablation {which}", head, "-" * len(head)]
    for r in results:
        b = "n/a" if r.boundary_class_acc is None else f"{100 * r.boundary_class_acc:.2f}"
        lines.append(f"{r.name:<22}{100 * r.global_acc:9.2f}{100 * r.class_acc:9.2f}{100 * r.miou:9.2f}{b:>10}")
    lines.append("")
    ref = results[0]
    for r in results:
        lines.append(
            f"arm name={r.name.replace(' ', '_')} global_acc={r.global_acc!r} class_acc={r.class_acc!r} "
            f"miou={r.miou!r} boundary_class_acc={r.boundary_class_acc!r}"
        )
    for r in results[1:]:
        lines.append(
            f"delta arm={r.name.replace(' ', '_')} vs={ref.name.replace(' ', '_')} "
            f"global_acc={r.global_acc - ref.global_acc!r} class_acc={r.class_acc - ref.class_acc!r}"
        )
    return "\n".join(lines) + "\n"
