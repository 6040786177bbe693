"""Command-line entry point: ``agcm {synth,train,eval,gradcheck,ablate}``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional

from . import data as D
from .checkpoint import load_checkpoint
from .errors import AgcmError, ConfigError
from .gradcheck import GradcheckConfig, format_report, timed_gradcheck
from .metrics import mean_report, write_eval_csv
from .network import NetworkConfig, declare_network
from .training import TrainConfig, config_from_dict, evaluate_model, train

logger = logging.getLogger("agcmnet")

ERROR_PREFIX = "agcm-error:"


@dataclasses.dataclass(frozen=True)
class AblateConfig:
    eval_n: int = 16
    eval_seed: int = 1


@dataclasses.dataclass(frozen=True)
class SynthConfig:
    height: int = 64
    width: int = 64
    n_objects: Optional[int] = None
    max_objects: int = 3
    shapes: tuple = D.SHAPES
    min_size: float = 0.08
    max_size: float = 0.22

    def scene_spec(self) -> D.SceneSpec:
        return D.SceneSpec(height=self.height, width=self.width, n_objects=self.n_objects,
                           max_objects=self.max_objects, shapes=tuple(self.shapes),
                           min_size=self.min_size, max_size=self.max_size)


SECTIONS = {
    "network": NetworkConfig,
    "train": TrainConfig,
    "synth": SynthConfig,
    "gradcheck": GradcheckConfig,
    "ablate": AblateConfig,
}


@dataclasses.dataclass(frozen=True)
class RunConfig:
    network: NetworkConfig
    train: TrainConfig
    synth: SynthConfig
    gradcheck: GradcheckConfig
    ablate: AblateConfig

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(path: Optional[str], overrides: list[str], seed: Optional[int]) -> RunConfig:
    """Merge the JSON file, ``--set section.key=value`` overrides and ``--seed``."""
    raw: dict = {}
    if path:
        with open(path) as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(unknown)}")
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, field = key.partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r} in override {item!r}")
        raw.setdefault(section, {})[field] = _parse_value(value)
    if seed is not None:
        raw.setdefault("train", {})["seed"] = seed
    if "input_size" in raw.get("network", {}):
        raw.setdefault("train", {}).setdefault("image_size", raw["network"]["input_size"])
    built = {}
    for name, cls in SECTIONS.items():
        section = raw.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"section {name!r} must be a JSON object")
        try:
            built[name] = config_from_dict(cls, section)
        except TypeError as exc:
            raise ConfigError(f"section {name!r}: {exc}") from exc
    return RunConfig(**built)


def _echo(cfg: RunConfig, out_dir: Optional[Path], command: str, seed) -> None:
    payload = {"command": command, "seed": seed, "config": cfg.to_dict()}
    text = json.dumps(payload, indent=2, sort_keys=True)
    print(text)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(text + "\n")


# ---------------------------------------------------------------- commands


def cmd_synth(args, cfg: RunConfig) -> int:
    seed = args.seed if args.seed is not None else 0
    out = Path(args.out)
    scenes = D.gen_dataset(args.n, seed, cfg.synth.scene_spec())
    D.write_scenes(out, scenes)
    print(f"wrote {len(scenes)} scenes to {out}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    samples = D.load_dir(args.data)
    eval_set = D.load_dir(args.eval) if args.eval else None
    result = train(cfg.network, cfg.train, samples, out_dir=args.out, eval_set=eval_set)
    with open(Path(args.out) / "train_steps.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "lr", "loss"])
        for step, lr, loss in result.step_log:
            writer.writerow([step, repr(lr), repr(loss)])
    last = result.epoch_log[-1]
    print(f"trained {last['step']} steps; final loss {last['loss']:.6f}, MAE {last['MAE']:.6f}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    params = declare_network(cfg.network)
    load_checkpoint(args.checkpoint, params, expected_hash=cfg.network.config_hash())
    samples = D.load_dir(args.data)
    reports = evaluate_model(samples, cfg.network, params)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = write_eval_csv(out / "eval.csv", [s.ident for s in samples], reports)
    print(f"F {summary.f_beta:.6f}  MAE {summary.mae:.6f}  E {summary.e_measure:.6f}  S {summary.s_measure:.6f}")
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    seed = args.seed if args.seed is not None else 0
    rows, elapsed = timed_gradcheck(cfg.gradcheck, seed)
    print(format_report(rows, elapsed))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "gradcheck.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["stage", "operation", "max_rel_err", "tolerance", "status"])
            for r in rows:
                writer.writerow([r.stage, r.operation, f"{r.max_rel_err:.6e}", r.tolerance,
                                 "pass" if r.passed else "fail"])
    failed = [r.stage for r in rows if not r.passed]
    if failed:
        print(f"{ERROR_PREFIX} gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


ABLATION_ROWS = ((), (4,), (4, 5))
METRIC_COLUMNS = ("F", "MAE", "E", "S")


def run_ablation(cfg: RunConfig, samples, out_dir: Path, splits: dict) -> list[dict]:
    """Train the three AGCM placements with one seed and budget; evaluate on ``splits``."""
    rows = []
    for stages in ABLATION_ROWS:
        net = cfg.network.replace(agcm_stages=stages)
        tag = "none" if not stages else "_".join(map(str, stages))
        result = train(net, cfg.train, samples, out_dir=out_dir / f"agcm_{tag}")
        row = {"layer_4": int(4 in stages), "layer_5": int(5 in stages),
               "params": result.params.num_parameters()}
        for split, split_samples in splits.items():
            rep = mean_report(evaluate_model(split_samples, net, result.params))
            for col, value in zip(METRIC_COLUMNS, rep.as_row()):
                row[f"{split}_{col}"] = value
        rows.append(row)
    return rows


def cmd_ablate(args, cfg: RunConfig) -> int:
    samples = D.load_dir(args.data)
    out = Path(args.out)
    spec = dataclasses.replace(cfg.synth.scene_spec(), height=cfg.network.input_size[0],
                               width=cfg.network.input_size[1])
    eval_scenes = D.gen_dataset(cfg.ablate.eval_n, cfg.ablate.eval_seed, spec)
    splits = {"synthetic": [D.Sample(f"{i:04d}", s.image, s.mask) for i, s in enumerate(eval_scenes)]}
    rows = run_ablation(cfg, samples, out, splits)
    header = list(rows[0])
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([f"{row[k]:.6f}" if isinstance(row[k], float) else row[k] for k in header])
    base, full = rows[0], rows[-1]
    summary = {
        "baseline_mae": base["synthetic_MAE"],
        "agcm_4_5_mae": full["synthetic_MAE"],
        "two_agcm_best_mae": full["synthetic_MAE"] <= min(r["synthetic_MAE"] for r in rows),
        "note": "direction is reported, not gated; synthetic-scale statistics do not transfer",
    }
    (out / "ablation_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"baseline MAE {base['synthetic_MAE']:.6f}; AGCM(4,5) MAE {full['synthetic_MAE']:.6f}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agcm", description=__doc__)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON config with sections " + ", ".join(SECTIONS))
    parser.add_argument("--data", help="directory of img_*.ppm / msk_*.pgm pairs")
    parser.add_argument("--eval", help="optional evaluation directory for train")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int, help="run seed (unsigned 64-bit)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. train.epochs=3 (repeatable)")
    parser.add_argument("--n", type=int, default=16, help="number of scenes for synth")
    parser.add_argument("--checkpoint", help="checkpoint file for eval")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        if args.n < 0:
            raise ConfigError("--n must be non-negative")
        needs = {"train": ("data", "out"), "eval": ("data", "out"), "ablate": ("data", "out"),
                 "synth": ("out",)}
        for flag in needs.get(args.command, ()):
            if getattr(args, flag) is None:
                raise ConfigError(f"{args.command} requires --{flag}")
        cfg = resolve_config(args.config, args.overrides, args.seed)
        _echo(cfg, Path(args.out) if args.out else None, args.command, args.seed)
        return COMMANDS[args.command](args, cfg)
    except (AgcmError, OSError) as exc:
        print(f"{ERROR_PREFIX} {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
