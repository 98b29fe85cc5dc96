"""Command-line pipeline: build-data, train, translate, evaluate, reproduce-all.

Configuration is an INI file checked against SCHEMA; unknown sections or keys
are errors. Every random choice derives from ``[experiment] seed``.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import torch

from .artifact_sim import PhysicsParams, ProjectionGeometry
from .dataset import (DatasetConfig, build_paired_testset, build_training_corpus, check_no_leakage,
                      read_manifest)
from .losses import LossWeights, Variant
from .metrics import MetricsReport, aggregate, emit_figures, evaluate_pair
from .phantoms import PhantomSpec
from .training import NonFiniteLossError, TrainConfig, load_checkpoint, train
from .translate import Direction, Mode, TranslateConfig, translate_batch
from .volumes import VolumeFileError, load_volume

log = logging.getLogger("mar3d")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class DataError(RuntimeError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple[int, ...]:
    out = []
    for part in s.split(","):
        part = part.strip()
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    return tuple(out)


def _opt_int(s: str) -> int | None:
    return None if s.strip().lower() in ("", "none") else int(s)


# section -> key -> (parser, default)
SCHEMA = {
    "experiment": {"seed": (int, 0), "output_root": (str, "runs/default")},
    "phantoms": {
        "image_size": (_ints, (128, 128)), "slice_range": (_ints, (14, 22)), "n_teeth": (int, 14),
        "tissue_hu": (float, 40.0), "bone_hu": (float, 900.0), "tooth_hu": (float, 1400.0),
        "air_hu": (float, -1000.0), "perturb": (_bool, True),
    },
    "physics": {
        "metal_hu": (float, 3000.0), "photon_count": (float, 2e5), "beam_hardening": (float, 4.0),
        "n_angles": (int, 180), "noise": (_bool, True),
    },
    "dataset": {"n_clean": (int, 24), "n_artifact": (int, 16), "n_test_phantoms": (int, 6), "m_values": (_ints, tuple(range(1, 9)))},
    "train": {
        "variant": (str, "PROPOSED"), "n_slices": (int, 3), "batch_size": (int, 4), "epochs": (int, 1),
        "steps_per_epoch": (int, 100), "lr": (float, 2e-4), "beta1": (float, 0.5), "beta2": (float, 0.999),
        "lr_decay": (_bool, False), "lambda_cyc": (float, 10.0), "lambda_int": (float, 25.0),
        "lambda_fea": (float, 1.0), "lambda_id": (float, 5.0), "checkpoint_interval": (int, 500),
        "crop": (_opt_int, 64), "gen_depth": (int, 3), "gen_width": (int, 16), "threads": (int, 1),
    },
    "translate": {"mode": (str, "SEQUENTIAL"), "direction": (str, "TOP_DOWN")},
    "metrics": {"figure_slices": (_ints, ()), "figure_volumes": (int, 2)},
}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    output_root: Path
    dataset: DatasetConfig
    train: TrainConfig
    translate: TranslateConfig
    figure_slices: tuple[int, ...]
    figure_volumes: int
    threads: int = 1

    @property
    def data_dir(self) -> Path:
        return self.output_root / "data"

    @property
    def run_name(self) -> str:
        return f"{self.train.variant.value}-N{self.train.n_slices}"

    @property
    def train_dir(self) -> Path:
        return self.output_root / "train" / self.run_name

    @property
    def translate_dir(self) -> Path:
        return self.output_root / "translate" / f"{self.run_name}-{self.translate.mode.value}"

    def evaluate_dir(self, results: Path) -> Path:
        return self.output_root / "evaluate" / results.name


def parse_config(text: str) -> dict[str, dict]:
    """Parse and schema-check INI text; returns typed values with defaults filled in."""
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from exc
    values = {sec: {k: default for k, (_, default) in keys.items()} for sec, keys in SCHEMA.items()}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        for key, raw in cp.items(sec):
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {key!r} in [{sec}]")
            try:
                values[sec][key] = SCHEMA[sec][key][0](raw)
            except ValueError as exc:
                raise ConfigError(f"[{sec}] {key}: {exc}") from exc
    return values


def build_experiment(values: dict, seed_override: int | None = None, out: str | None = None,
                     variant: str | None = None, n_slices: int | None = None, mode: str | None = None) -> ExperimentConfig:
    ex, ph, phys, ds, tr, tl, mt = (values[k] for k in SCHEMA)
    seed = ex["seed"] if seed_override is None else seed_override
    root = Path(out or os.environ.get("MAR3D_OUTPUT_ROOT") or ex["output_root"])
    try:
        size = tuple(ph["image_size"])
        if len(size) != 2 or len(ph["slice_range"]) != 2:
            raise ValueError("image_size and slice_range take two integers")
        phantom = PhantomSpec(n_teeth=ph["n_teeth"], tissue_hu=ph["tissue_hu"], bone_hu=ph["bone_hu"],
                              tooth_hu=ph["tooth_hu"], air_hu=ph["air_hu"], image_size=size)
        physics = PhysicsParams(metal_hu=phys["metal_hu"], photon_count_I0=phys["photon_count"],
                                beam_hardening_coeff=phys["beam_hardening"], noise=phys["noise"])
        geometry = ProjectionGeometry.for_image(size[1], n_angles=phys["n_angles"])
        dataset = DatasetConfig(seed=seed, n_clean=ds["n_clean"], n_artifact=ds["n_artifact"],
                                n_test_phantoms=ds["n_test_phantoms"], m_values=ds["m_values"],
                                slice_range=tuple(ph["slice_range"]), image_size=size, perturb=ph["perturb"],
                                phantom=phantom, physics=physics, geometry=geometry)
        weights = LossWeights(tr["lambda_cyc"], tr["lambda_int"], tr["lambda_fea"], tr["lambda_id"])
        train_cfg = TrainConfig(
            variant=Variant(variant or tr["variant"]), n_slices=n_slices or tr["n_slices"],
            batch_size=tr["batch_size"], epochs=tr["epochs"], steps_per_epoch=tr["steps_per_epoch"], lr=tr["lr"],
            betas=(tr["beta1"], tr["beta2"]), lr_decay=tr["lr_decay"], seed=seed, weights=weights,
            checkpoint_interval=tr["checkpoint_interval"], crop=tr["crop"], gen_depth=tr["gen_depth"],
            gen_width=tr["gen_width"],
        )
        translate_cfg = TranslateConfig(train_cfg.n_slices, Mode(mode or tl["mode"]), Direction(tl["direction"]))
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    if train_cfg.n_slices > dataset.slice_range[0]:
        raise ConfigError(f"N={train_cfg.n_slices} exceeds the smallest volume depth {dataset.slice_range[0]}")
    return ExperimentConfig(seed, root, dataset, train_cfg, translate_cfg, mt["figure_slices"],
                            mt["figure_volumes"], tr["threads"])


def load_experiment(path, **overrides) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return build_experiment(parse_config(text), **overrides)


# --- commands ------------------------------------------------------------------------

def cmd_build_data(exp: ExperimentConfig):
    train_m = build_training_corpus(exp.dataset, exp.data_dir / "train")
    test_m = build_paired_testset(exp.dataset, exp.data_dir / "test")
    check_no_leakage(train_m, test_m)
    log.info("built %d training and %d test volumes", len(train_m.entries), len(test_m.entries))
    return train_m, test_m


def _manifest(exp: ExperimentConfig, split: str):
    path = exp.data_dir / split / "manifest.jsonl"
    if not path.exists():
        raise DataError(f"missing {path}; run build-data first")
    return read_manifest(path)


def cmd_train(exp: ExperimentConfig, checkpoint: str | None = None) -> Path:
    manifest = _manifest(exp, "train")
    resume = checkpoint
    existing = exp.train_dir / "checkpoint.pt"
    if resume is None and existing.exists():
        ck = load_checkpoint(existing)
        if ck.state.config == exp.train:
            resume = existing  # continue an interrupted run (or no-op if finished)
    ck = train(exp.train, manifest, exp.train_dir, resume=resume)
    log.info("trained %d steps -> %s", ck.state.step, ck.path)
    return ck.path


def cmd_translate(exp: ExperimentConfig, checkpoint: str | None = None, out: Path | None = None) -> Path:
    ckpt = Path(checkpoint) if checkpoint else exp.train_dir / "checkpoint.pt"
    if not ckpt.exists():
        raise DataError(f"missing checkpoint {ckpt}")
    ck = load_checkpoint(ckpt, expect_n_slices=exp.translate.n_slices)
    out = out or exp.translate_dir
    translate_batch(ck.state.nets.G_Y, _manifest(exp, "test"), exp.translate, out)
    info = {"variant": ck.state.config.variant.value, "n_slices": exp.translate.n_slices,
            "mode": exp.translate.mode.value, "direction": exp.translate.direction.value}
    (out / "run.json").write_text(json.dumps(info, sort_keys=True), encoding="utf-8")
    return out


def cmd_evaluate(exp: ExperimentConfig, results_dir: Path | None = None) -> MetricsReport:
    results = Path(results_dir or exp.translate_dir)
    test = _manifest(exp, "test")
    info_path = results / "run.json"
    method = json.loads(info_path.read_text())["variant"] if info_path.exists() else results.name
    rows, omissions, figure_pairs = [], [], []
    for ref_e, e in test.pairs():
        ref, orig, mask = test.load(ref_e), test.load(e), test.load_mask(e)
        keys = dict(volume_id=e.volume_id, phantom_id=e.phantom_id, m=e.m)
        rows.append(evaluate_pair(ref, orig, None, mask, method="original", **keys))
        path = results / "volumes" / f"{e.volume_id}.vxmr"
        try:
            corr = load_volume(path)
        except (OSError, VolumeFileError) as exc:
            omissions.append(f"{e.volume_id}: {exc}")
            continue
        rows.append(evaluate_pair(ref, orig, corr, mask, method=method, **keys))
        if len(figure_pairs) < exp.figure_volumes:
            figure_pairs.append((e.volume_id, ref, orig, corr))
    report = aggregate(rows)
    report.omissions = omissions
    out = exp.evaluate_dir(results)
    out.mkdir(parents=True, exist_ok=True)
    report.write_rows(out / "metrics.csv")
    report.write_aggregates(out / "table.csv")
    report.write_omissions(out / "omissions.txt")
    emit_figures(report, figure_pairs, out / "figures", list(exp.figure_slices) or None)
    for o in omissions:
        log.warning("omitted %s", o)
    return report


def summarize(report: MetricsReport, method: str) -> dict:
    """Headline numbers: overall median R_s and per-m median SSIM before and after."""
    per_m = {}
    for m in sorted({r.m for r in report.rows}):
        per_m[m] = {"original": report.median("ssim", m=m, method="original"),
                    "corrected": report.median("ssim", m=m, method=method)}
    return {"median_r_s": report.median("r_s", method=method), "per_m_ssim": per_m}


def cmd_reproduce_all(exp: ExperimentConfig) -> dict:
    cmd_build_data(exp)
    cmd_train(exp)
    results = cmd_translate(exp)
    report = cmd_evaluate(exp, results)
    summary = summarize(report, exp.train.variant.value)
    (exp.evaluate_dir(results) / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


# --- entry point -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mar3d", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("build-data", "train", "translate", "evaluate", "reproduce-all"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="INI experiment config")
        p.add_argument("--out", help="output root override")
        p.add_argument("--seed-override", type=int)
        p.add_argument("--variant", choices=[v.value for v in Variant])
        p.add_argument("--n-slices", type=int)
        p.add_argument("--mode", choices=[m.value for m in Mode])
        if name in ("train", "translate"):
            p.add_argument("--checkpoint")
        if name == "evaluate":
            p.add_argument("--results", help="directory written by translate")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    try:
        exp = load_experiment(args.config, seed_override=args.seed_override, out=args.out,
                              variant=args.variant, n_slices=args.n_slices, mode=args.mode)
        torch.set_num_threads(exp.threads)
        if args.command == "build-data":
            cmd_build_data(exp)
        elif args.command == "train":
            print(cmd_train(exp, args.checkpoint))
        elif args.command == "translate":
            print(cmd_translate(exp, args.checkpoint))
        elif args.command == "evaluate":
            report = cmd_evaluate(exp, Path(args.results) if args.results else None)
            for rec in report.aggregates:
                print(f"m={rec['m']} {rec['method']:>10} ssim={rec['ssim']:.4f} rmse={rec['rmse_hu']:.1f} r_s={rec['r_s']:.2f}")
        else:
            print(json.dumps(cmd_reproduce_all(exp), indent=2, sort_keys=True))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, VolumeFileError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteLossError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # checkpoint/config mismatches surface as ValueError from the loaders
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
