"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 runtime or validation failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import checks, experiments, metrics
from .data import (Dataset, SceneSpec, colorize_labels, default_palette, generate_dataset, load_dataset,
                   manifest_text, read_image, save_dataset, write_image, write_labels)
from .models import CheckpointError, ModelConfig, load_checkpoint, save_checkpoint
from .regions import format_regionset, proposal_sets
from .trainer import (RegionConfig, RegionProvider, TrainConfig, TrainingDiverged, evaluate, format_log_record,
                      train)

EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 1, 2


class CliError(Exception):
    """Runtime or validation failure reported with exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# run.cfg
# ---------------------------------------------------------------------------

def format_run_cfg(sections: dict[str, dict]) -> str:
    lines = []
    for sec in sorted(sections):
        for k, v in sorted(sections[sec].items()):
            if isinstance(v, (tuple, list)):
                v = ",".join(str(x) for x in v)
            lines.append(f"{sec}.{k}={v}")
    return "\n".join(lines) + "\n"


def parse_run_cfg(text: str) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for ln in text.splitlines():
        if not ln.strip() or ln.startswith("#"):
            continue
        key, _, val = ln.partition("=")
        sec, _, name = key.partition(".")
        out.setdefault(sec, {})[name] = val
    return out


def _coerce(cls, raw: dict[str, str]):
    """Rebuild a config dataclass from run.cfg strings using its field defaults' types."""
    defaults = cls()
    kwargs = {}
    for f in fields(cls):
        if f.name not in raw:
            continue
        ref = getattr(defaults, f.name)
        text = raw[f.name]
        if isinstance(ref, tuple):
            item = type(ref[0]) if ref else str
            kwargs[f.name] = tuple(item(t) for t in text.split(",") if t)
        elif isinstance(ref, bool):
            kwargs[f.name] = text == "True"
        else:
            kwargs[f.name] = type(ref)(text)
    return cls(**kwargs)


# ---------------------------------------------------------------------------
# shared flags
# ---------------------------------------------------------------------------

def _add_model_flags(p):
    g = p.add_argument_group("model")
    g.add_argument("--kind", choices=("endtoend", "baseline"), default="endtoend")
    g.add_argument("--fusion", choices=("box-only", "region-only", "tied", "separate"), default="separate")
    g.add_argument("--loss", choices=("balanced", "unbalanced"), default="balanced")
    g.add_argument("--softmax-order", choices=("max-then-softmax", "softmax-then-max"), default="max-then-softmax")
    g.add_argument("--head-width", type=int, default=64)
    g.add_argument("--init-seed", type=int, default=0)


def _add_train_flags(p):
    g = p.add_argument_group("training")
    d = TrainConfig()
    g.add_argument("--lr1", type=float, default=d.lr_phase1, help="phase-1 learning rate")
    g.add_argument("--epochs1", type=int, default=d.epochs_phase1, help="phase-1 epochs")
    g.add_argument("--lr2", type=float, default=d.lr_phase2, help="phase-2 learning rate")
    g.add_argument("--epochs2", type=int, default=d.epochs_phase2, help="phase-2 epochs")
    g.add_argument("--momentum", type=float, default=d.momentum)
    g.add_argument("--weight-decay", type=float, default=d.weight_decay)
    g.add_argument("--seed", type=int, default=d.seed, help="shuffling seed")
    g.add_argument("--no-shuffle", action="store_true")


def _add_region_flags(p):
    g = p.add_argument_group("regions")
    d = RegionConfig()
    g.add_argument("--regions", choices=("multiscale", "oversegmentation", "grid"), default=d.mode)
    g.add_argument("--scales", default=",".join(map(str, d.scales)), help="comma-separated window sizes")
    g.add_argument("--stride-fraction", type=float, default=d.stride_fraction)
    g.add_argument("--merge-threshold", type=float, default=d.merge_threshold)
    g.add_argument("--min-region-size", type=int, default=d.min_region_size)


def _model_cfg(a, num_classes) -> ModelConfig:
    fusion = "box-only" if a.kind == "baseline" else a.fusion
    return ModelConfig(num_classes=num_classes, kind=a.kind, fusion=fusion, loss=a.loss,
                       softmax_order=a.softmax_order, head_width=a.head_width, init_seed=a.init_seed)


def _train_cfg(a) -> TrainConfig:
    return TrainConfig(lr_phase1=a.lr1, epochs_phase1=a.epochs1, lr_phase2=a.lr2, epochs_phase2=a.epochs2,
                       momentum=a.momentum, weight_decay=a.weight_decay, seed=a.seed, shuffle=not a.no_shuffle)


def _region_cfg(a) -> RegionConfig:
    try:
        scales = tuple(int(s) for s in a.scales.split(",") if s)
    except ValueError as exc:
        raise CliError(f"bad --scales {a.scales!r}") from exc
    return RegionConfig(mode=a.regions, scales=scales, stride_fraction=a.stride_fraction,
                        merge_threshold=a.merge_threshold, min_region_size=a.min_region_size)


def _load_data(path):
    path = Path(path)
    if not (path / "manifest.txt").is_file():
        raise CliError(f"{path} is not a dataset directory (no manifest.txt)")
    try:
        return load_dataset(path)
    except (ValueError, OSError) as exc:
        raise CliError(f"cannot load dataset {path}: {exc}") from exc


def _load_model(path):
    path = Path(path)
    if not path.is_file():
        raise CliError(f"checkpoint {path} not found")
    try:
        return load_checkpoint(path)
    except (CheckpointError, ValueError) as exc:
        raise CliError(f"cannot load checkpoint {path}: {exc}") from exc


def _region_cfg_for(checkpoint: Path, model, a) -> RegionConfig:
    """Region settings recorded next to the checkpoint, else those given on the command line.

    A run.cfg whose model section disagrees with the checkpoint is refused.
    """
    cfg_path = checkpoint.parent / "run.cfg"
    if cfg_path.is_file():
        run = parse_run_cfg(cfg_path.read_text())
        if "model" in run:
            try:
                recorded = _coerce(ModelConfig, run["model"])
            except (TypeError, ValueError) as exc:
                raise CliError(f"unreadable model section in {cfg_path}: {exc}") from exc
            if recorded != model.cfg:
                raise CliError(f"checkpoint {checkpoint} does not match the model recorded in {cfg_path}")
        if run.get("regions"):
            return _coerce(RegionConfig, run["regions"])
    return _region_cfg(a)


def _prepare_out(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise CliError(f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise CliError(f"{out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(a) -> int:
    try:
        spec = SceneSpec(size=a.size, num_classes=a.num_classes, freq_exponent=a.freq_exponent,
                         min_objects=a.min_objects, max_objects=a.max_objects, seed=a.seed, texture=a.texture)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    if a.train < 0 or a.test < 0:
        raise CliError("image counts must be non-negative")
    ds = generate_dataset(spec, a.train, a.test)
    manifest = Path(a.out) / "manifest.txt"
    if not a.force and manifest.is_file() and manifest.read_text() == manifest_text(ds):
        print(f"{a.out} already holds this dataset; nothing to do")
        return EXIT_OK
    out = _prepare_out(a.out, a.force)
    save_dataset(ds, out)
    print(f"wrote {len(ds)} images ({a.train} train, {a.test} test) to {out}")
    return EXIT_OK


def _check_scales(rcfg: RegionConfig, size: int) -> None:
    """Fail before any output is written when a window scale cannot fit the images."""
    if rcfg.mode != "oversegmentation":
        proposal_sets(size, size, rcfg.scales, rcfg.stride_fraction)


def cmd_train(a) -> int:
    ds = _load_data(a.data)
    try:
        mcfg = _model_cfg(a, ds.spec.num_classes)
        tcfg = _train_cfg(a)
        rcfg = _region_cfg(a)
        _check_scales(rcfg, ds.spec.size)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    out = _prepare_out(a.out, a.force)
    (out / "run.cfg").write_text(format_run_cfg({
        "command": {"name": "train", "data": str(Path(a.data)), "data_hash": ds.spec.digest()},
        "model": asdict(mcfg), "train": asdict(tcfg), "regions": asdict(rcfg),
    }))
    log_path = out / "train.log"
    log_path.write_text("")

    def on_epoch(rec):
        with log_path.open("a") as fh:
            fh.write(format_log_record(rec) + "\n")
        if not a.quiet:
            print(format_log_record(rec), flush=True)

    try:
        result = train(mcfg, tcfg, ds, rcfg, on_epoch=on_epoch)
    except TrainingDiverged as exc:
        save_checkpoint(exc.model, out / "model.ckpt")
        print(f"training diverged: {exc}; last good weights saved to {out / 'model.ckpt'}", file=sys.stderr)
        return EXIT_FAIL
    save_checkpoint(result.model, out / "model.ckpt")
    print(f"checkpoint written to {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(a) -> int:
    ckpt = Path(a.checkpoint)
    model = _load_model(ckpt)
    ds = _load_data(a.data)
    if model.cfg.num_classes != ds.spec.num_classes:
        raise CliError(f"checkpoint has {model.cfg.num_classes} classes, dataset has {ds.spec.num_classes}")
    rcfg = _region_cfg_for(ckpt, model, a)
    indices = ds.test if a.split == "test" else ds.train if a.split == "train" else list(range(len(ds)))
    if not indices:
        raise CliError(f"split {a.split!r} is empty")
    provider = RegionProvider(ds, model.cfg, rcfg)
    cm, cm_band, fallback = evaluate(model, ds, indices, provider, band=a.boundary_band)
    values = metrics.summarize(cm)
    if a.boundary_band is not None:
        values["boundary_global_acc"] = metrics.global_accuracy(cm_band) if cm_band.sum() else None
        values["boundary_class_acc"] = metrics.class_average_accuracy(cm_band) if cm_band.sum() else None
    print(metrics.format_report(values, f"evaluation on {len(indices)} {a.split} images"), end="")
    print(f"metric uncovered_pixels={fallback}")
    return EXIT_OK


def cmd_predict(a) -> int:
    ckpt = Path(a.checkpoint)
    model = _load_model(ckpt)
    try:
        image = read_image(a.image)
    except (ValueError, OSError) as exc:
        raise CliError(f"cannot read {a.image}: {exc}") from exc
    rcfg = _region_cfg_for(ckpt, model, a)
    h, w = image.shape[:2]
    if h != w or h % 2:
        raise CliError(f"images must be square with even size, got {w}x{h}")
    ds = Dataset(SceneSpec(size=h, num_classes=model.cfg.num_classes), [image], [np.zeros((h, w), np.int64)], [], [0])
    provider = RegionProvider(ds, model.cfg, rcfg)
    prepared = provider.test_regions(0)
    pred, n_fallback = model.predict(image, prepared, return_fallback=True)
    write_labels(a.out, pred)
    if a.color:
        write_image(a.color, colorize_labels(pred, default_palette(model.cfg.num_classes)))
    if a.regions_out:
        Path(a.regions_out).write_text(format_regionset(prepared.regions))
    print(f"wrote {a.out} ({len(prepared)} regions, {n_fallback} uncovered pixels filled)")
    return EXIT_OK


def cmd_gradcheck(a) -> int:
    base = ModelConfig(num_classes=a.num_classes, softmax_order=a.softmax_order, init_seed=a.seed)
    rows = checks.full_report(a.seed, tuple(a.fusion), tuple(a.loss), a.per_param, base)
    print(checks.format_report(rows), end="")
    ok = checks.all_pass(rows)
    print("gradcheck " + ("passed" if ok else "FAILED"))
    return EXIT_OK if ok else EXIT_FAIL


def cmd_ablate(a) -> int:
    ds = _load_data(a.data)
    try:
        base = _model_cfg(a, ds.spec.num_classes)
        tcfg = _train_cfg(a)
        rcfg = _region_cfg(a)
        _check_scales(rcfg, ds.spec.size)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    if not ds.test:
        raise CliError("dataset has no test split")
    progress = None if a.quiet else (lambda r: print(f"finished arm {r.name} in {r.seconds:.1f}s", file=sys.stderr))
    results = experiments.run_ablation(a.which, ds, base, tcfg, rcfg, band=a.boundary_band, progress=progress)
    table = experiments.format_table(a.which, results)
    print(table, end="")
    if a.out:
        Path(a.out).write_text(table)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="regionseg", description="Region-based semantic segmentation with a region-to-pixel layer.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--train", type=int, default=200, help="number of training images")
    g.add_argument("--test", type=int, default=50, help="number of test images")
    d = SceneSpec()
    g.add_argument("--size", type=int, default=d.size)
    g.add_argument("--num-classes", type=int, default=d.num_classes)
    g.add_argument("--freq-exponent", type=float, default=d.freq_exponent)
    g.add_argument("--min-objects", type=int, default=d.min_objects)
    g.add_argument("--max-objects", type=int, default=d.max_objects)
    g.add_argument("--texture", type=float, default=d.texture)
    g.add_argument("--seed", type=int, default=d.seed)
    g.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model and write checkpoint, log and run.cfg")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--force", action="store_true")
    t.add_argument("--quiet", action="store_true")
    _add_model_flags(t)
    _add_train_flags(t)
    _add_region_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("test", "train", "all"), default="test")
    e.add_argument("--boundary-band", type=float, default=None,
                   help="also report accuracy within this many pixels of a label boundary")
    _add_region_flags(e)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="label one PPM image")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--out", required=True, help="output PGM label map")
    r.add_argument("--color", help="optional colorized PPM")
    r.add_argument("--regions-out", help="optional text dump of the regions used")
    _add_region_flags(r)
    r.set_defaults(func=cmd_predict)

    c = sub.add_parser("gradcheck", help="finite-difference check of every layer and the whole model")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--num-classes", type=int, default=4)
    c.add_argument("--per-param", type=int, default=8, help="sampled weights per parameter tensor")
    c.add_argument("--fusion", nargs="+", choices=("box-only", "region-only", "tied", "separate"),
                   default=["tied", "separate"])
    c.add_argument("--loss", nargs="+", choices=("balanced", "unbalanced"), default=["balanced", "unbalanced"])
    c.add_argument("--softmax-order", choices=("max-then-softmax", "softmax-then-max"), default="max-then-softmax")
    c.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("ablate", help="train matched arms that differ in one axis and compare them")
    b.add_argument("--data", required=True)
    b.add_argument("--which", required=True, choices=experiments.ABLATIONS)
    b.add_argument("--boundary-band", type=float, default=4)
    b.add_argument("--out", help="also write the table to this file")
    b.add_argument("--quiet", action="store_true")
    _add_model_flags(b)
    _add_train_flags(b)
    _add_region_flags(b)
    b.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as exc:
        # usage errors and --help end here; return the code so in-process callers see it too
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return a.func(a)
    except (CliError, ValueError) as exc:
        print(f"regionseg {a.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
