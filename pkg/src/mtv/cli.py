"""Command-line interface: ``mtv {count,gradcheck,synth,train,eval,ensemble}``.

Run configs are JSON documents with four optional sections::

    {
      "model":  {"preset": "b2-s4-ti8"}          # or {"toy": {...}} or a full model config
      "data":   {"num_slow": 4, "noise_std": 5.0} # synthetic dataset parameters
      "train":  {"epochs": 30, "base_lr": 0.02}   # training hyperparameters
      "output": {"dir": "runs/demo"}              # output locations
    }

Unknown keys anywhere exit with status 2 and name the key.  Every command
that writes files also writes the fully resolved config next to them.

Exit status: 0 on success, 1 when a check fails or a runtime contract is
violated, 2 for unusable input (bad config, missing files).
"""

from __future__ import annotations

import argparse
import dataclasses
import inspect
import json
import os
import sys
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np

from . import analysis, gradcheck
from .config import MTVConfig, preset, preset_slug, toy_variant
from .data import Dataset, SynthSpec, generate, load_dataset, save_dataset
from .errors import CheckpointError, ConfigError, MTVError
from .fileio import atomic_write
from .model import load_checkpoint, save_checkpoint
from .training import CSVMetricsSink, Hyperparams, evaluate, predict, train

RESOLVED_NAME = "resolved_config.json"
DEFAULT_TOY = {"tubelets": [2, 4, 8], "widths": [32, 24, 16]}


@dataclass(frozen=True)
class OutputPaths:
    dir: str = "mtv-run"
    checkpoint: str = "model.ckpt"
    metrics: str = "metrics.csv"
    report: str = "cost_report.json"
    dataset: str | None = None  # existing synth directory to train on instead of generating

    def path(self, name: str) -> str:
        return os.path.join(self.dir, getattr(self, name))


@dataclass(frozen=True)
class RunConfig:
    model: MTVConfig
    data: SynthSpec = field(default_factory=SynthSpec)
    train: Hyperparams = field(default_factory=Hyperparams)
    output: OutputPaths = field(default_factory=OutputPaths)

    def to_dict(self) -> dict[str, Any]:
        train = asdict(self.train)
        train["eval_crops"] = list(train["eval_crops"])
        data = asdict(self.data)
        data["fast_periods"] = list(data["fast_periods"])
        return {"model": self.model.to_dict(), "data": data, "train": train, "output": asdict(self.output)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _check_keys(d: Any, known: Sequence[str], where: str) -> dict:
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(d).__name__}")
    for key in d:
        if key not in known:
            raise ConfigError(f"{where}: unknown key {key!r}")
    return d


def _resolve_model(d: dict, data: SynthSpec) -> MTVConfig:
    if "preset" in d:
        _check_keys(d, ("preset", "clip_shape", "num_classes"), "model")
        kwargs = {k: tuple(v) if k == "clip_shape" else v for k, v in d.items() if k != "preset"}
        return preset(d["preset"], **kwargs)
    if "toy" in d or not d:
        _check_keys(d, ("toy",), "model")
        toy = dict(DEFAULT_TOY)
        toy.update(_check_keys(d.get("toy", {}), list(inspect.signature(toy_variant).parameters), "model.toy"))
        toy.setdefault("clip_shape", data.clip_shape)
        toy.setdefault("num_classes", data.num_classes)
        for key in ("tubelets", "widths", "clip_shape", "fusion_layers"):
            if toy.get(key) is not None:
                toy[key] = tuple(toy[key])
        return toy_variant(**toy)
    return MTVConfig.from_dict(d)


def parse_run_config(doc: dict | None) -> RunConfig:
    """Resolve a run-config document; the model defaults to a desk-scale three-view model."""
    doc = _check_keys(doc or {}, ("model", "data", "train", "output"), "config")
    data = SynthSpec.from_dict(_check_keys(doc.get("data", {}), [f.name for f in dataclasses.fields(SynthSpec)], "data"))
    hyper = Hyperparams.from_dict(doc.get("train", {}))
    output = OutputPaths(**_check_keys(doc.get("output", {}), [f.name for f in dataclasses.fields(OutputPaths)], "output"))
    model = _resolve_model(_check_keys(doc.get("model", {}), _model_keys(), "model"), data)
    return RunConfig(model, data, hyper, output)


def _model_keys() -> list[str]:
    return [f.name for f in dataclasses.fields(MTVConfig)] + ["preset", "toy"]


def load_run_config(path: str | None, preset_name: str | None = None, seed: int | None = None) -> RunConfig:
    doc: dict = {}
    if path:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if preset_name:
        doc = dict(doc)
        doc["model"] = {"preset": preset_name}
    run = parse_run_config(doc)
    if seed is not None:
        run = dataclasses.replace(
            run, model=dataclasses.replace(run.model, seed=seed), train=dataclasses.replace(run.train, seed=seed)
        )
    return run


def _write_resolved(run: RunConfig, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    atomic_write(os.path.join(directory, RESOLVED_NAME), run.to_json().encode())


def _parse_crops(text: str | None) -> tuple[int, int] | None:
    if text is None:
        return None
    try:
        t, s = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise ConfigError(f"--crops expects TxS such as 4x3, got {text!r}") from exc
    if t < 1 or s < 1:
        raise ConfigError(f"--crops must be positive, got {text!r}")
    return t, s


# ---------------------------------------------------------------------------
# commands


def cmd_count(args) -> int:
    run = load_run_config(args.config, args.preset)
    report = analysis.count_flops(run.model)
    print(f"model: {run.model.name or 'custom'}")
    print(report.to_text())
    slug = preset_slug(run.model.name) if run.model.name else ""
    payload: dict[str, Any] = {"model": run.model.name, "records": report.records()}
    if slug in analysis.REFERENCE:
        devs = analysis.compare_table(report, slug)
        print(f"reference values for {slug} (GFLOPs counted one op per MAC):")
        print(analysis.format_deviations(devs))
        payload["reference"] = {k: asdict(d) | {"relative": d.relative} for k, d in devs.items()}
    if args.out:
        parent = os.path.dirname(os.path.abspath(args.out))
        os.makedirs(parent, exist_ok=True)
        atomic_write(args.out, (json.dumps(payload, indent=2) + "\n").encode())
    return 0


def cmd_gradcheck(args) -> int:
    config = load_run_config(args.config).model if args.config else None
    seed = 0 if args.seed is None else args.seed
    max_coords = None if config is None else 64
    results = gradcheck.run_suite(seed=seed, config=config, max_coords=max_coords)
    failed = 0
    for name, r in results:
        ok = r.passed(gradcheck.SUITE_TOL)
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'} {name:<24} max rel error {r.max_rel_error:.3e}")
    if failed:
        print("worst coordinates:")
        for name, r in sorted(results, key=lambda nr: -nr[1].max_rel_error)[:failed]:
            if not r.passed(gradcheck.SUITE_TOL):
                print(
                    f"  {name}: input {r.worst_input} index {tuple(int(i) for i in r.worst_index)} "
                    f"autodiff {r.autodiff:.6e} numeric {r.numeric:.6e}"
                )
    print(f"{len(results) - failed}/{len(results)} checks passed (tolerance {gradcheck.SUITE_TOL:g})")
    return 1 if failed else 0


def cmd_synth(args) -> int:
    run = load_run_config(args.config)
    spec = run.data if args.seed is None else dataclasses.replace(run.data, seed=args.seed)
    run = dataclasses.replace(run, data=spec)
    out = args.out or run.output.dataset or os.path.join(run.output.dir, "data")
    manifest = save_dataset([generate(spec, "train"), generate(spec, "eval")], out)
    _write_resolved(run, out)
    print(f"wrote {spec.train_samples} train / {spec.eval_samples} eval clips to {out} ({manifest})")
    return 0


def _datasets(run: RunConfig) -> tuple[Dataset, Dataset]:
    if run.output.dataset:
        return load_dataset(run.output.dataset, "train"), load_dataset(run.output.dataset, "eval")
    return generate(run.data, "train"), generate(run.data, "eval")


def cmd_train(args) -> int:
    run = load_run_config(args.config, args.preset, args.seed)
    if args.out:
        run = dataclasses.replace(run, output=dataclasses.replace(run.output, dir=args.out))
    crops = _parse_crops(args.crops)
    if crops is not None:
        run = dataclasses.replace(run, train=dataclasses.replace(run.train, eval_crops=crops))
    train_set, eval_set = _datasets(run)
    os.makedirs(run.output.dir, exist_ok=True)
    _write_resolved(run, run.output.dir)
    metrics = run.output.path("metrics")
    partial = metrics + ".partial"
    sink = CSVMetricsSink(partial)

    def log(row: dict) -> None:
        sink(row)
        print(
            f"epoch {row['epoch']:>3} step {row['step']:>6} lr {row['lr']:.4g} "
            f"loss {row['train_loss']:.4f} acc {row['train_acc']:.3f} eval {row['eval_acc']:.3f}",
            flush=True,
        )

    result = train(run.model, train_set, run.train, metrics_sink=log, eval_set=eval_set)
    os.replace(partial, metrics)
    save_checkpoint(result.params, run.output.path("checkpoint"))
    print(f"checkpoint: {run.output.path('checkpoint')}")
    print(f"metrics: {metrics}")
    return 0


def _eval_dataset(args) -> Dataset:
    if args.data:
        return load_dataset(args.data, args.split)
    if args.config:
        run = load_run_config(args.config)
        if run.output.dataset:
            return load_dataset(run.output.dataset, args.split)
        return generate(run.data, args.split)
    raise ConfigError("no dataset: pass --data DIR or --config with a data section")


def _load(path: str):
    if not os.path.exists(path):
        raise ConfigError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_eval(args) -> int:
    if not args.checkpoint or len(args.checkpoint) != 1:
        raise ConfigError("eval needs exactly one --checkpoint")
    params = _load(args.checkpoint[0])
    ds = _eval_dataset(args)
    crops = _parse_crops(args.crops) or (1, 1)
    acc = evaluate(params, ds, crops)
    print(f"accuracy {acc:.4f} on {len(ds)} {ds.split} clips ({crops[0]}x{crops[1]} crops)")
    return 0


def ensemble_probabilities(checkpoints: Sequence, clips: np.ndarray, crops: tuple[int, int] = (1, 1)) -> np.ndarray:
    """Sum of per-model class probabilities."""
    from .model import make_crops, multi_crop_inference

    total = None
    for params in checkpoints:
        if crops == (1, 1):
            probs = predict(params, clips)
        else:
            target = params.config.clip_shape
            probs = np.stack([multi_crop_inference(params, make_crops(c, target, *crops)) for c in clips])
        total = probs if total is None else total + probs
    return total


def cmd_ensemble(args) -> int:
    if not args.checkpoint:
        raise ConfigError("ensemble needs at least one --checkpoint")
    models = [_load(p) for p in args.checkpoint]
    classes = {m.config.num_classes for m in models}
    if len(classes) != 1:
        raise ConfigError(f"checkpoints disagree on the number of classes: {sorted(classes)}")
    ds = _eval_dataset(args)
    crops = _parse_crops(args.crops) or (1, 1)
    probs = ensemble_probabilities(models, ds.clips, crops)
    acc = float(np.mean(probs.argmax(axis=1) == ds.labels))
    print(f"ensemble of {len(models)} accuracy {acc:.4f} on {len(ds)} {ds.split} clips")
    return 0


COMMANDS = {
    "count": cmd_count,
    "gradcheck": cmd_gradcheck,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ensemble": cmd_ensemble,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtv", description="Multiview video transformer toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("count", "parameter and FLOP report"),
        ("gradcheck", "finite-difference gradient suite"),
        ("synth", "generate the synthetic dataset"),
        ("train", "train a model"),
        ("eval", "evaluate a checkpoint"),
        ("ensemble", "evaluate summed probabilities of several checkpoints"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--out", help="output file (count) or directory")
        p.add_argument("--seed", type=int, help="override model and training seeds (dataset seed for synth)")
        p.add_argument("--preset", help="named model preset, e.g. b2-s4-ti8")
        p.add_argument("--crops", help="temporal x spatial crops, e.g. 4x3")
        p.add_argument("--checkpoint", action="append", help="checkpoint path (repeatable for ensemble)")
        p.add_argument("--data", help="synthetic dataset directory")
        p.add_argument("--split", default="eval", choices=("train", "eval"))
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CheckpointError) as exc:
        print(f"mtv {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (MTVError, OSError) as exc:
        print(f"mtv {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
