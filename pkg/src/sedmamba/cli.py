"""Command-line entry point: synth, train, eval, complexity and sweep.

Every command reads one JSON run config (``--config``), applies the command
line overrides, and writes the fully resolved config as
``config.resolved.json`` next to its outputs so the run can be repeated
from that file alone.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure,
5 monotonicity violation in a sweep.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .complexity import REFERENCE_LENGTH, complexity_report, sweep_report, ablation_configs
from .data import MANIFEST_NAME, LabeledSequence, SynthConfig, load_annotated_videos, load_manifest, load_split, \
    synth_generate, write_synth_dataset
from .errors import ConfigError, DataError, DimensionError, NumericError
from .metrics import write_curve_csv
from .model import ModelConfig
from .training import TrainConfig, evaluate, load_checkpoint, model_from_checkpoint, train_run

log = logging.getLogger("sedmamba")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_MONOTONIC = 5

RESOLVED_NAME = "config.resolved.json"


def _reject_unknown(section: str, d: dict, allowed):
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {sorted(unknown)}")


@dataclass
class DataSection:
    synth: dict | None = None  # SynthConfig fields, generated in memory
    synth_dir: str | None = None  # directory holding a synthetic manifest
    embeddings_dir: str | None = None
    annotations: str | None = None
    split_file: str | None = None
    native_rate: float = 60.0
    sample_rate: float = 5.0
    test_count: int = 5  # held-out tail of a synthetic set when no split file is given


@dataclass
class EvalSection:
    split: str = "test"  # "test", "train" or "all"
    boundary_seconds: float = 3.0
    curves: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    checkpoint: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataSection = field(default_factory=DataSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    complexity_length: int = REFERENCE_LENGTH

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        top = {"seed", "out_dir", "checkpoint", "model", "data", "train", "eval", "complexity"}
        _reject_unknown("run config", d, top)
        seed = int(d.get("seed", 0))

        train = dict(d.get("train") or {})
        if train.get("seed", seed) != seed:
            raise ConfigError(f"train.seed={train['seed']} conflicts with seed={seed}")
        train["seed"] = seed

        data = dict(d.get("data") or {})
        _reject_unknown("data", data, {f.name for f in fields(DataSection)})
        section = DataSection(**data)
        if section.synth is not None:
            synth = dict(section.synth)
            if synth.get("seed", seed) != seed:
                raise ConfigError(f"data.synth.seed={synth['seed']} conflicts with seed={seed}")
            synth["seed"] = seed
            SynthConfig.from_dict(synth)  # validate early
            section.synth = synth
        if section.test_count < 0:
            raise ConfigError("data.test_count must be >= 0")

        ev = dict(d.get("eval") or {})
        _reject_unknown("eval", ev, {f.name for f in fields(EvalSection)})
        ev_section = EvalSection(**ev)
        if ev_section.split not in ("test", "train", "all"):
            raise ConfigError(f"eval.split must be test, train or all, got {ev_section.split!r}")

        comp = dict(d.get("complexity") or {})
        _reject_unknown("complexity", comp, {"length"})
        length = int(comp.get("length", REFERENCE_LENGTH))
        if length < 1:
            raise ConfigError("complexity.length must be >= 1")

        try:
            return cls(
                seed=seed,
                out_dir=str(d.get("out_dir", "runs/default")),
                checkpoint=d.get("checkpoint"),
                model=ModelConfig.from_dict(dict(d.get("model") or {})),
                data=section,
                train=TrainConfig.from_dict(train),
                eval=ev_section,
                complexity_length=length,
            )
        except TypeError as err:  # wrong value types inside a section
            raise ConfigError(str(err)) from err

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "out_dir": self.out_dir,
            "checkpoint": self.checkpoint,
            "model": self.model.to_dict(),
            "data": asdict(self.data),
            "train": asdict(self.train),
            "eval": asdict(self.eval),
            "complexity": {"length": self.complexity_length},
        }


def load_run_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"{p}: invalid JSON ({err})") from err
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: run config must be a JSON object")
    return raw


def resolve(args) -> RunConfig:
    raw = load_run_config(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
        for section, key in (("train", None), ("data", "synth")):
            sub = raw.get(section) or {}
            if key is not None:
                sub = sub.get(key)
            if isinstance(sub, dict):
                sub.pop("seed", None)
    if args.out is not None:
        raw["out_dir"] = args.out
    if getattr(args, "checkpoint", None) is not None:
        raw["checkpoint"] = args.checkpoint
    return RunConfig.from_dict(raw)


def write_resolved(rc: RunConfig, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / RESOLVED_NAME).write_text(json.dumps(rc.to_dict(), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def _require(path: str | None, what: str) -> Path:
    if path is None:
        raise ConfigError(f"data.{what} is not set")
    p = Path(path)
    if not p.exists():
        raise DataError(f"data.{what} not found: {p}")
    return p


def load_datasets(rc: RunConfig) -> tuple[list[LabeledSequence], list[LabeledSequence]]:
    """Train and test sequences as described by the data section."""
    d = rc.data
    if d.embeddings_dir is not None or d.annotations is not None:
        split = load_split(_require(d.split_file, "split_file"))
        emb_dir = _require(d.embeddings_dir, "embeddings_dir")
        ann = _require(d.annotations, "annotations")
        train = load_annotated_videos(emb_dir, ann, split["train"], d.native_rate, d.sample_rate)
        test = load_annotated_videos(emb_dir, ann, split["test"], d.native_rate, d.sample_rate)
    else:
        if d.synth_dir is not None:
            seqs = load_manifest(_require(d.synth_dir, "synth_dir") / MANIFEST_NAME)
        elif d.synth is not None:
            seqs = synth_generate(SynthConfig.from_dict(d.synth))
        else:
            raise ConfigError("data section names no source (synth, synth_dir or embeddings_dir)")
        if d.split_file is not None:
            split = load_split(_require(d.split_file, "split_file"))
            by_id = {s.video_id: s for s in seqs}
            missing = [v for v in split["train"] + split["test"] if v not in by_id]
            if missing:
                raise DataError(f"split file names unknown sequences: {missing}")
            train = [by_id[v] for v in split["train"]]
            test = [by_id[v] for v in split["test"]]
        else:
            if d.test_count >= len(seqs):
                raise ConfigError(f"test_count={d.test_count} leaves no training sequences out of {len(seqs)}")
            cut = len(seqs) - d.test_count
            train, test = seqs[:cut], seqs[cut:]
    for s in train + test:
        if s.embeddings.width != rc.model.d_model:
            raise ConfigError(f"model.d_model={rc.model.d_model} but {s.video_id} has width {s.embeddings.width}")
    return train, test


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(rc: RunConfig, force: bool = False) -> dict:
    if rc.data.synth is None:
        raise ConfigError("synth needs a data.synth section")
    cfg = SynthConfig.from_dict(rc.data.synth)
    out = Path(rc.out_dir)
    manifest = write_synth_dataset(cfg, out, force=force)
    write_resolved(rc, out)
    print(f"wrote {len(manifest['sequences'])} sequences to {out}")
    return manifest


def cmd_train(rc: RunConfig):
    train, test = load_datasets(rc)
    out = Path(rc.out_dir)
    write_resolved(rc, out)
    resume = load_checkpoint(rc.checkpoint) if rc.checkpoint else None
    result = train_run(train, rc.model, rc.train, val_set=test or None, out_dir=out, resume=resume,
                       on_epoch=lambda e: print(json.dumps(e, sort_keys=True), flush=True))
    summary = {"final": result.history[-1] if result.history else None, "best": result.best,
               "epochs_run": result.checkpoint.epoch}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return result


def cmd_eval(rc: RunConfig, workers: int = 1):
    if rc.checkpoint is None:
        raise ConfigError("eval needs --checkpoint (or a checkpoint entry in the config)")
    ckpt = load_checkpoint(rc.checkpoint)
    rc.model = ckpt.model_config
    train, test = load_datasets(rc)
    dataset = {"test": test, "train": train, "all": train + test}[rc.eval.split]
    if not dataset:
        raise DataError(f"eval split {rc.eval.split!r} is empty")
    out = Path(rc.out_dir)
    write_resolved(rc, out)
    model = model_from_checkpoint(ckpt)
    report, probs = evaluate(model, dataset, workers=workers, boundary_seconds=rc.eval.boundary_seconds)
    report.metadata.update({"checkpoint": str(rc.checkpoint), "epoch": ckpt.epoch, "split": rc.eval.split,
                            "videos": [s.video_id for s in dataset]})
    report.save(out / "metrics.json")
    if rc.eval.curves:
        curves = out / "curves"
        curves.mkdir(exist_ok=True)
        for seq, p in zip(dataset, probs):
            write_curve_csv(curves / f"{seq.video_id}.csv", p, seq.labels)
    print(report.to_json())
    return report


def cmd_complexity(rc: RunConfig, out: bool = False):
    rep = complexity_report(rc.model, rc.complexity_length)
    if out:
        d = Path(rc.out_dir)
        write_resolved(rc, d)
        (d / "complexity.json").write_text(rep.to_json() + "\n")
        (d / "complexity.txt").write_text(rep.table() + "\n")
    print(rep.table())
    return rep


def cmd_sweep(rc: RunConfig, out: bool = False):
    triples = [(axis, v, c) for axis, items in ablation_configs(rc.model).items() for v, c in items]
    table = sweep_report(triples, rc.complexity_length)
    if out:
        d = Path(rc.out_dir)
        write_resolved(rc, d)
        (d / "sweep.json").write_text(table.to_json() + "\n")
        (d / "sweep.txt").write_text(table.table() + "\n")
    print(table.table())
    return table


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sedmamba", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False, workers=False, force=False):
        p.add_argument("--config", metavar="PATH", help="JSON run config")
        p.add_argument("--out", metavar="DIR", help="output directory (overrides out_dir)")
        p.add_argument("--seed", type=int, help="seed for data generation and training")
        if checkpoint:
            p.add_argument("--checkpoint", metavar="PATH", help="checkpoint to evaluate or resume from")
        if workers:
            p.add_argument("--workers", type=int, default=1, help="parallel evaluation workers (default 1)")
        if force:
            p.add_argument("--force", action="store_true", help="overwrite an existing dataset")
        return p

    common(sub.add_parser("synth", help="write a synthetic dataset and manifest"), force=True)
    common(sub.add_parser("train", help="train a model, writing checkpoints and an epoch log"), checkpoint=True)
    common(sub.add_parser("eval", help="evaluate a checkpoint"), checkpoint=True, workers=True)
    common(sub.add_parser("complexity", help="parameter and FLOP report for the model config"))
    common(sub.add_parser("sweep", help="complexity along the block, width and FCTF-depth axes"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = resolve(args)
        if args.command == "synth":
            cmd_synth(rc, force=args.force)
        elif args.command == "train":
            cmd_train(rc)
        elif args.command == "eval":
            if args.workers < 1:
                raise ConfigError("--workers must be >= 1")
            cmd_eval(rc, workers=args.workers)
        elif args.command == "complexity":
            cmd_complexity(rc, out=args.out is not None)
        elif args.command == "sweep":
            table = cmd_sweep(rc, out=args.out is not None)
            if not table.monotonic:
                print("monotonicity violated", file=sys.stderr)
                return EXIT_MONOTONIC
    except (ConfigError, DimensionError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
