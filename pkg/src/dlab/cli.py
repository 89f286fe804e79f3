"""Command-line entry point: ``dlab <command> [options]``.

Exit codes: 0 on success, 2 on usage or configuration errors, 1 when a run
fails.  Every command that produces artifacts writes ``manifest.json`` into
its output directory before doing any work.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from dlab import __version__
from dlab.checkpoint import VERSION as CKPT_VERSION
from dlab.checkpoint import FormatError, load_checkpoint, save_checkpoint
from dlab.curriculum import (HELD_OUT, Mitigation, PretrainConfig, TrainConfig, build_stages, compute_metrics,
                             evaluate_all, pretrain_base, run_sequence)
from dlab.experiments import DriftSetup, drift_run
from dlab.groups import GROUP_NAMES, ConfigError, ParamGroup
from dlab.mitigation import BETA_SWEEP, DEFAULT_BETA, MITIGATION_KINDS, merge_lora, wise_ft_interpolate
from dlab.model import ModelConfig, TinyLmm
from dlab.objectives import DistillConfig
from dlab.probes import CHECKPOINT_GRID, NumericTokenSet, layer_attribution
from dlab.report import ReportError, emit_report
from dlab.tasks import (D_VISUAL, HELD_OUT_KINDS, N_VISUAL, NUMERIC_TOKENS, SEQUENCES, VOCAB_SIZE,
                        SyntheticTaskSpec, generate_task)

log = logging.getLogger("dlab")

MANIFEST_VERSION = 1
SEED_ENV = "DLAB_SEED"

# ---------------------------------------------------------------- configuration


@dataclass
class ExperimentConfig:
    seed: int = 0
    group: str = "mlp"
    model: ModelConfig = field(default_factory=ModelConfig)
    order: str | list = "default"
    train_n: int = 512
    eval_n: int = 256
    train: TrainConfig = field(default_factory=TrainConfig)
    pretrain_steps: int = PretrainConfig.steps
    base_checkpoint: str | None = None
    mitigation: str = "none"
    lwf: DistillConfig = field(default_factory=DistillConfig)
    lora_rank: int = 4
    lora_alpha: float = 8.0
    lora_targets: str = "mlp"
    beta: float = DEFAULT_BETA
    probe_size: int = 100
    probe_steps: int = 1000
    probe_grid: tuple = CHECKPOINT_GRID
    numeric: tuple = tuple(sorted(NUMERIC_TOKENS))
    output_dir: str = "runs/out"

    def as_json(self) -> dict:
        """Flat dotted-key form; ``from_json`` of this reproduces the config."""
        return {
            "seed": self.seed,
            "group": self.group,
            **{f"model.{k}": v for k, v in asdict(self.model).items()},
            "curriculum.order": self.order,
            "curriculum.train_n": self.train_n,
            "curriculum.eval_n": self.eval_n,
            "train.batch_size": self.train.batch_size,
            "train.lr": self.train.lr,
            "train.warmup_frac": self.train.warmup_frac,
            "pretrain.steps": self.pretrain_steps,
            "base_checkpoint": self.base_checkpoint,
            "mitigation.kind": self.mitigation,
            "lwf.lambda": self.lwf.lam,
            "lwf.tau": self.lwf.tau,
            "lwf.max_positions": self.lwf.max_positions,
            "lora.rank": self.lora_rank,
            "lora.alpha": self.lora_alpha,
            "lora.targets": self.lora_targets,
            "wise_ft.beta": self.beta,
            "probe.batch_size": self.probe_size,
            "probe.steps": self.probe_steps,
            "probe.grid": list(self.probe_grid),
            "probe.numeric": list(self.numeric),
            "output_dir": self.output_dir,
        }

    @property
    def mitigation_config(self) -> Mitigation:
        return Mitigation(self.mitigation, self.lwf, self.lora_rank, self.lora_alpha, self.lora_targets, self.beta)


KNOWN_KEYS = frozenset(ExperimentConfig().as_json())


def flatten(obj: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in obj.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def from_json(doc: dict) -> ExperimentConfig:
    """Nested objects and dotted keys are equivalent; unknown keys are an error."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    flat = flatten(doc)
    unknown = sorted(set(flat) - KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    d = ExperimentConfig().as_json()
    d.update(flat)
    try:
        model = ModelConfig(**{f.name: d[f"model.{f.name}"] for f in fields(ModelConfig)})
        cfg = ExperimentConfig(
            seed=int(d["seed"]),
            group=str(ParamGroup.parse(d["group"])),
            model=model,
            order=d["curriculum.order"],
            train_n=int(d["curriculum.train_n"]),
            eval_n=int(d["curriculum.eval_n"]),
            train=TrainConfig(int(d["train.batch_size"]), float(d["train.lr"]), float(d["train.warmup_frac"])),
            pretrain_steps=int(d["pretrain.steps"]),
            base_checkpoint=d["base_checkpoint"],
            mitigation=d["mitigation.kind"],
            lwf=DistillConfig(float(d["lwf.lambda"]), float(d["lwf.tau"]), int(d["lwf.max_positions"])),
            lora_rank=int(d["lora.rank"]),
            lora_alpha=float(d["lora.alpha"]),
            lora_targets=str(ParamGroup.parse(d["lora.targets"])),
            beta=float(d["wise_ft.beta"]),
            probe_size=int(d["probe.batch_size"]),
            probe_steps=int(d["probe.steps"]),
            probe_grid=tuple(int(s) for s in d["probe.grid"]),
            numeric=tuple(int(t) for t in d["probe.numeric"]),
            output_dir=str(d["output_dir"]),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid config value: {exc}") from exc
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    m = cfg.model
    if m.vocab_size != VOCAB_SIZE or m.n_visual != N_VISUAL or m.d_visual != D_VISUAL:
        raise ConfigError(f"synthetic tasks need vocab_size={VOCAB_SIZE}, n_visual={N_VISUAL}, d_visual={D_VISUAL}")
    if cfg.mitigation not in MITIGATION_KINDS:
        raise ConfigError(f"mitigation.kind must be one of {', '.join(MITIGATION_KINDS)}")
    if isinstance(cfg.order, str) and cfg.order not in SEQUENCES:
        raise ConfigError(f"curriculum.order must be one of {', '.join(SEQUENCES)} or a list of task kinds")
    if not 0.0 <= cfg.beta <= 1.0:
        raise ConfigError("wise_ft.beta must lie in [0, 1]")
    if cfg.lwf.lam < 0 or cfg.lwf.tau <= 0 or cfg.lwf.max_positions < 1:
        raise ConfigError("lwf needs lambda >= 0, tau > 0, max_positions >= 1")
    if cfg.train.batch_size < 1 or cfg.train_n < 1 or cfg.eval_n < 1 or cfg.probe_size < 1:
        raise ConfigError("sizes must be positive")
    try:
        NumericTokenSet(cfg.numeric, m.vocab_size)
    except ValueError as exc:
        raise ConfigError(f"probe.numeric: {exc}") from exc


def load_config(path: str | None, overrides: dict | None = None) -> ExperimentConfig:
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    flat = flatten(doc) if isinstance(doc, dict) else doc
    if isinstance(flat, dict):
        flat.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if os.environ.get(SEED_ENV):
        try:
            flat["seed"] = int(os.environ[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    return from_json(flat)


# ---------------------------------------------------------------- helpers


def write_manifest(out: Path, command: str, cfg: ExperimentConfig | None, extra: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "manifest_version": MANIFEST_VERSION,
        "checkpoint_format_version": CKPT_VERSION,
        "dlab_version": __version__,
        "command": command,
        "numpy_version": np.__version__,
    }
    if cfg is not None:
        doc["seed"] = cfg.seed
        doc["config"] = cfg.as_json()
    doc.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def base_model(cfg: ExperimentConfig) -> TinyLmm:
    if cfg.base_checkpoint:
        return load_checkpoint(cfg.base_checkpoint, cfg.model).model
    return pretrain_base(cfg.model, cfg.seed, PretrainConfig(steps=cfg.pretrain_steps))


def save(model: TinyLmm, path: Path, step: int | None = None) -> None:
    save_checkpoint(model, path, step=step, with_config=True)


def _targets_and_held(cfg: ExperimentConfig):
    stages = build_stages(cfg.order, cfg.seed, cfg.train_n, cfg.eval_n)
    targets = {s.kind: generate_task(s) for s in stages}
    held = {k: generate_task(SyntheticTaskSpec(k, cfg.seed, 0, cfg.eval_n)) for k in HELD_OUT_KINDS}
    return stages, targets, held


# ---------------------------------------------------------------- commands


def cmd_train(args, cfg: ExperimentConfig) -> int:
    """Pre-train (or load) the stage-0 base model."""
    out = Path(args.out or cfg.output_dir)
    write_manifest(out, "train", cfg)
    model = base_model(cfg)
    save(model, out / "ckpt_stage0.dlab", step=0 if cfg.base_checkpoint else cfg.pretrain_steps)
    _, targets, held = _targets_and_held(cfg)
    row = evaluate_all(model, targets, held)
    write_csv(out / "base_accuracy.csv", ("task", "accuracy"), [(t, repr(a)) for t, a in row.items()])
    print(f"base model written to {out / 'ckpt_stage0.dlab'}")
    return 0


def cmd_sequence(args, cfg: ExperimentConfig) -> int:
    out = Path(args.out or cfg.output_dir)
    write_manifest(out, "sequence", cfg)
    model = base_model(cfg)
    stages, _, _ = _targets_and_held(cfg)
    result = run_sequence(model, stages, cfg.group, cfg.mitigation_config, cfg.seed, cfg.train)
    (out / "matrix.csv").write_text(result.matrix.to_csv())
    save(model, out / "ckpt_stage0.dlab", step=0)
    step = 0
    for k, (ckpt, losses) in enumerate(zip(result.checkpoints, result.losses), start=1):
        step += len(losses)
        save(ckpt, out / f"ckpt_stage{k}.dlab", step=step)
    if result.failed:
        print(f"run failed after {len(result.checkpoints)} stages (training diverged)", file=sys.stderr)
        return 1
    metrics = compute_metrics(result.matrix, [s.kind for s in stages]).as_dict()
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    for k, v in metrics.items():
        print(f"{k:>22s} {v:+.2f}")
    return 0


def cmd_probe(args, cfg: ExperimentConfig) -> int:
    """Tune the base model on Count and record NTB over the checkpoint grid."""
    out = Path(args.out or cfg.output_dir)
    write_manifest(out, "probe", cfg)
    base = base_model(cfg)
    setup = DriftSetup(cfg.seed, base, steps=cfg.probe_steps, batch_size=cfg.train.batch_size, lr=cfg.train.lr,
                       probe_size=cfg.probe_size, eval_n=cfg.eval_n, grid=cfg.probe_grid,
                       numeric=NumericTokenSet(cfg.numeric, cfg.model.vocab_size))
    lwf = cfg.lwf if cfg.mitigation == "lwf" else None
    run = drift_run(setup, cfg.group, lwf)
    rows = [(run.label, s, repr(v)) for s, v in sorted(run.ntb.items())]
    write_csv(out / "probe.csv", ("series", "step", "ntb"), rows)
    write_csv(out / "attribution.csv", ("step", "layer", "pathway", "value"), run.attribution.rows())
    save(base, out / "ckpt_base.dlab", step=0)
    print(f"NTB {run.ntb[0]:.4f} -> {run.ntb[max(run.ntb)]:.4f}; held-out {run.held_out_before:.1f} -> "
          f"{run.held_out_after:.1f}")
    return 0


def cmd_attribute(args, cfg: ExperimentConfig) -> int:
    out = Path(args.out or cfg.output_dir)
    write_manifest(out, "attribute", cfg, {"base": args.base, "tuned": args.tuned})
    base = load_checkpoint(args.base).model
    tuned = load_checkpoint(args.tuned).model
    caption = generate_task(SyntheticTaskSpec("caption", cfg.seed, 0, cfg.eval_n))
    batch = caption.eval.subset(np.arange(min(cfg.probe_size, cfg.eval_n)))
    report = layer_attribution(base, tuned, batch, step=args.step)
    write_csv(out / "attribution.csv", ("step", "layer", "pathway", "value"),
              [("" if s is None else s, l, p, repr(v)) for s, l, p, v in report.rows()])
    print(f"completeness error {report.completeness_error():.2e}")
    return 0


def cmd_interpolate(args, cfg: ExperimentConfig) -> int:
    out = Path(args.out or cfg.output_dir)
    write_manifest(out, "interpolate", cfg, {"base": args.base, "tuned": args.tuned, "betas": list(args.betas)})
    base = load_checkpoint(args.base).model
    tuned = load_checkpoint(args.tuned).model
    _, targets, held = _targets_and_held(cfg)
    tasks = list(targets) + [HELD_OUT]
    rows = []
    for beta in args.betas:
        row = evaluate_all(wise_ft_interpolate(base, tuned, beta), targets, held)
        rows.append([repr(beta)] + [repr(row[t]) for t in tasks])
        print(f"beta {beta:.2f} held-out {row[HELD_OUT]:.1f}")
    write_csv(out / "interpolation.csv", ["beta"] + tasks, rows)
    return 0


def cmd_merge_lora(args, cfg) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if not ckpt.model.lora:
        print(f"{args.checkpoint} carries no adapters", file=sys.stderr)
        return 1
    merged = merge_lora(ckpt.model)
    save_checkpoint(merged, args.output, step=ckpt.step, rng_state=ckpt.rng_state, with_config=True)
    print(f"merged {len(ckpt.model.lora)} adapters into {args.output}")
    return 0


def cmd_report(args, cfg) -> int:
    for p in emit_report(args.run):
        print(p)
    return 0


# ---------------------------------------------------------------- parsing


def group_name(text: str) -> str:
    try:
        return str(ParamGroup.parse(text))
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def beta_list(text: str) -> tuple[float, ...]:
    try:
        betas = tuple(float(b) for b in text.split(",") if b.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"betas must be comma-separated floats: {text!r}") from exc
    if not betas or any(not 0.0 <= b <= 1.0 for b in betas):
        raise argparse.ArgumentTypeError("every beta must lie in [0, 1]")
    return betas


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="dlab",
        description="Desk-scale continual-learning lab.",
        epilog="parameter groups: " + ", ".join(GROUP_NAMES),
    )
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, group=True):
        sp.add_argument("--config", help="JSON experiment config (unknown keys are rejected)")
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        sp.add_argument("--seed", type=int, help=f"overrides the config seed; {SEED_ENV} overrides both")
        sp.add_argument("--base", dest="base_checkpoint", help="base checkpoint instead of pre-training")
        if group:
            sp.add_argument("--group", type=group_name, metavar="GROUP",
                            help="one of " + ", ".join(GROUP_NAMES) + " (comma-join for a composite)")
        return sp

    with_config(sub.add_parser("train", help="pre-train the stage-0 base model"), group=False)
    with_config(sub.add_parser("sequence", help="run the staged curriculum"))
    sp = with_config(sub.add_parser("probe", help="NTB over the checkpoint grid while tuning on Count"))
    sp.add_argument("--steps", type=int, dest="probe_steps")
    sp = with_config(sub.add_parser("attribute", help="layer-wise logit attribution between two checkpoints"),
                     group=False)
    sp.add_argument("--tuned", required=True)
    sp.add_argument("--step", type=int)
    sp = with_config(sub.add_parser("interpolate", help="evaluate WiSE-FT interpolations over a beta list"),
                     group=False)
    sp.add_argument("--tuned", required=True)
    sp.add_argument("--betas", type=beta_list, default=BETA_SWEEP)
    sp = sub.add_parser("merge-lora", help="fold LoRA adapters into the backbone weights")
    sp.add_argument("checkpoint")
    sp.add_argument("-o", "--output", required=True)
    sp = sub.add_parser("report", help="render run CSVs to SVG")
    sp.add_argument("run", help="run directory holding matrix.csv / probe.csv / attribution.csv")
    return p


COMMANDS = {
    "train": cmd_train,
    "sequence": cmd_sequence,
    "probe": cmd_probe,
    "attribute": cmd_attribute,
    "interpolate": cmd_interpolate,
    "merge-lora": cmd_merge_lora,
    "report": cmd_report,
}


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    cfg = None
    try:
        if hasattr(args, "config"):
            overrides = {"seed": args.seed, "base_checkpoint": args.base_checkpoint,
                         "group": getattr(args, "group", None), "probe.steps": getattr(args, "probe_steps", None)}
            cfg = load_config(args.config, overrides)
            if args.command in ("attribute", "interpolate") and not cfg.base_checkpoint:
                parser.error(f"{args.command} needs --base")
            if args.command in ("attribute", "interpolate"):
                args.base = cfg.base_checkpoint
        return COMMANDS[args.command](args, cfg)
    except SystemExit as exc:
        return int(exc.code or 0)
    except ConfigError as exc:
        print(f"dlab: configuration error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    except (FormatError, ReportError) as exc:
        print(f"dlab: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # a failed run, not a usage error
        log.debug("run failed", exc_info=True)
        print(f"dlab: run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
