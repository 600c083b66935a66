"""``ganbert`` command line: synth-data, train, evaluate, hist, dump-tokens.

Exit codes (stable):

    0  success
    1  unexpected error
    2  usage error (argparse)
    3  invalid configuration
    4  missing or unreadable data
    5  checkpoint error or checkpoint/data mismatch
    6  training diverged or produced a non-finite loss
    7  output location not writable
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_generator
from .config import ConfigError, RunConfig, load_config, with_seed
from .generator import Generator, GeneratorConfig
from .metrics import evaluate_pairs, histogram, plot_histograms
from .tokenizer import dumps_tokens, plan_mask, tokenize_pair
from .training import Trainer, TrainingError, prepare_pairs
from .volume import (
    Modality,
    PairSample,
    VolumeError,
    compute_stats,
    load_volume,
    normalize_mri,
    normalize_pet,
    restore_pet_array,
    save_volume,
    synth_pair,
)

log = logging.getLogger("ganbert")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_CHECKPOINT = 5
EXIT_DIVERGED = 6
EXIT_IO = 7


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------- #
# helpers


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CliError(f"cannot write to {out}: {exc}", EXIT_IO) from exc
    return out


def write_manifest(out: Path, command: str, argv: Sequence[str], cfg: Optional[RunConfig], seed,
                   artifacts: Dict[str, object], started: str, **extra) -> Path:
    manifest = {
        "tool": "ganbert",
        "version": __version__,
        "command": command,
        "argv": list(argv),
        "seed": seed,
        "config": cfg.to_dict() if cfg is not None else None,
        "artifacts": artifacts,
        "started": started,
        "finished": _now(),
        **extra,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    return path


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = with_seed(cfg, args.seed)
    return cfg


def pair_files(data_dir) -> List[tuple]:
    """``(id, mri_path, pet_path)`` for every ``<id>_mri.vol`` with a PET partner."""
    root = Path(data_dir)
    if not root.is_dir():
        raise CliError(f"data directory {root} does not exist", EXIT_DATA)
    out = []
    for mri in sorted(root.glob("*_mri.vol")):
        pid = mri.name[: -len("_mri.vol")]
        pet = root / f"{pid}_pet.vol"
        if not pet.exists():
            raise CliError(f"{mri.name} has no matching {pet.name}", EXIT_DATA)
        out.append((pid, mri, pet))
    if not out:
        raise CliError(f"no *_mri.vol / *_pet.vol pairs in {root}", EXIT_DATA)
    return out


def load_pairs(data_dir) -> List[PairSample]:
    pairs = []
    for pid, mri_path, pet_path in pair_files(data_dir):
        try:
            mri, pet = load_volume(mri_path), load_volume(pet_path)
        except (OSError, VolumeError) as exc:
            raise CliError(f"cannot read pair {pid}: {exc}", EXIT_DATA) from exc
        if mri.modality is not Modality.MRI or pet.modality is not Modality.PET:
            raise CliError(f"pair {pid}: wrong modalities {mri.modality}/{pet.modality}", EXIT_DATA)
        pairs.append(PairSample(mri, pet, compute_stats(mri), pid))
    return pairs


def _check_pair_dims(pairs, gen_cfg: GeneratorConfig, code: int) -> None:
    for p in pairs:
        if p.mri.dims != tuple(gen_cfg.input_dims) or p.pet.dims != tuple(gen_cfg.output_dims):
            raise CliError(
                f"pair {p.id}: dims {p.mri.dims} -> {p.pet.dims} do not match generator "
                f"{tuple(gen_cfg.input_dims)} -> {tuple(gen_cfg.output_dims)}", code)


def restored_outputs(generator: Generator, pairs: Sequence[PairSample]) -> List[np.ndarray]:
    generator.eval()
    out = []
    with torch.no_grad():
        for p in pairs:
            norm, stats = normalize_mri(p.mri)
            fake = generator(torch.from_numpy(norm.data)[None, None])[0].numpy()
            out.append(restore_pet_array(fake, stats))
    generator.train()
    return out


def write_csv(path: Path, fields: Sequence[str], rows: Sequence[Dict[str, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        for row in rows:
            writer.writerow([int(row[f]) if f == "step" else repr(float(row[f])) for f in fields])


# --------------------------------------------------------------------------- #
# commands


def cmd_synth_data(args) -> int:
    started = _now()
    cfg = resolve_config(args)
    n = cfg.n_pairs if args.n is None else args.n
    if n < 0:
        raise CliError("-n must be >= 0", EXIT_USAGE)
    out = _out_dir(args.out)
    files = []
    for i in range(n):
        pair = synth_pair(i, cfg.data)
        for vol in (pair.mri, pair.pet):
            path = out / f"{pair.id}_{vol.modality.value.lower()}.vol"
            save_volume(path, vol)
            files.append(path.name)
    write_manifest(out, "synth-data", args.argv, cfg, cfg.data.seed, {"volumes": files}, started, n_pairs=n)
    print(f"wrote {n} pairs to {out}")
    return EXIT_OK


def _apply_train_flags(cfg: RunConfig, args) -> RunConfig:
    weights = cfg.weights
    for name in ("nsp", "mlm", "l1"):
        value = getattr(args, f"lambda_{name}")
        if value is not None:
            weights = replace(weights, **{name: value})
    train = cfg.train
    if args.steps is not None:
        train = replace(train, total_steps=args.steps)
    if args.use_cnn_d:
        train = replace(train, use_cnn_d=True)
    return replace(cfg, weights=weights, train=train)


def cmd_train(args) -> int:
    started = _now()
    cfg = _apply_train_flags(resolve_config(args), args)
    out = _out_dir(args.out)
    pairs = load_pairs(args.data)
    _check_pair_dims(pairs, cfg.generator, EXIT_DATA)
    data = prepare_pairs(pairs)

    if args.resume:
        try:
            trainer = Trainer.load(args.resume, data, cfg.train)
        except (CheckpointError, TrainingError, KeyError, TypeError, RuntimeError) as exc:
            raise CliError(f"cannot resume from {args.resume}: {exc}", EXIT_CHECKPOINT) from exc
        if trainer.gen_cfg != cfg.generator or trainer.bert_cfg != cfg.bert:
            raise CliError("resume checkpoint model config differs from the run config", EXIT_CHECKPOINT)
        trainer.weights = cfg.weights
    else:
        trainer = Trainer(data, cfg.generator, cfg.bert, cfg.train, cfg.weights)

    ckpt_dir = out / "checkpoints"
    saved: List[str] = []
    every = cfg.train.checkpoint_every

    def on_row(row):
        step = int(row["step"])
        if step % 10 == 0 or step == cfg.train.total_steps:
            log.info("step %d  g_total %.4f  g_l1 %.4f  d_nsp %.4f", step, row["g_total"], row["g_l1"], row["d_nsp"])
        if every and step % every == 0:
            ckpt_dir.mkdir(exist_ok=True)
            path = ckpt_dir / f"step_{step:06d}.pt"
            trainer.save(path)
            saved.append(str(path.relative_to(out)))

    status, code = "completed", EXIT_OK
    remaining = max(cfg.train.total_steps - trainer.state.step, 0)
    try:
        trainer.run(remaining, on_row)
    except TrainingError as exc:
        status, code = f"aborted: {exc}", EXIT_DIVERGED
        print(f"error: {exc}", file=sys.stderr)

    write_csv(out / "loss.csv", trainer.csv_fields, trainer.state.history)
    artifacts = {"loss_csv": "loss.csv", "checkpoints": saved}
    if code == EXIT_OK:
        trainer.save(out / "state.pt")
        save_generator(out / "generator.pt", trainer.state.generator)
        fakes = restored_outputs(trainer.state.generator, pairs)
        report = evaluate_pairs((p.id, p.pet, f) for p, f in zip(pairs, fakes))
        (out / "metrics.json").write_text(report.to_json() + "\n")
        artifacts.update(state="state.pt", generator="generator.pt", metrics="metrics.json")
        print(f"trained {trainer.state.step} steps; train PSNR {report.psnr:.2f} dB, SSIM {report.ssim:.4f}")
    write_manifest(out, "train", args.argv, cfg, cfg.train.seed, artifacts, started,
                   status=status, data_dir=str(args.data), resume=args.resume, steps=trainer.state.step)
    return code


def _load_any_generator(path) -> Generator:
    try:
        archive = load_checkpoint(path)
        if archive["kind"] == "generator":
            model = Generator(GeneratorConfig(**archive["config"]))
            model.load_state_dict(archive["state_dict"])
        elif archive["kind"] == "train_state":
            model = Generator(GeneratorConfig(**archive["generator_config"]))
            model.load_state_dict(archive["generator"])
        else:
            raise CheckpointError(f"{path}: a {archive['kind']!r} checkpoint has no generator")
    except (CheckpointError, KeyError, TypeError, RuntimeError, ValueError) as exc:
        raise CliError(f"cannot load generator from {path}: {exc}", EXIT_CHECKPOINT) from exc
    return model


def cmd_evaluate(args) -> int:
    started = _now()
    out = _out_dir(args.out)
    pairs = load_pairs(args.data)
    if args.sanity:
        fakes = [p.pet.data for p in pairs]
    else:
        if args.checkpoint is None:
            raise CliError("a checkpoint is required unless --sanity is given", EXIT_USAGE)
        generator = _load_any_generator(args.checkpoint)
        _check_pair_dims(pairs, generator.config, EXIT_CHECKPOINT)
        fakes = restored_outputs(generator, pairs)
    report = evaluate_pairs((p.id, p.pet, f) for p, f in zip(pairs, fakes))
    (out / "metrics.json").write_text(report.to_json() + "\n")

    lo, hi = args.range
    real_h = histogram(np.concatenate([p.pet.data.ravel() for p in pairs]), args.bins, (lo, hi), "real")
    gen_h = histogram(np.concatenate([np.ravel(f) for f in fakes]), args.bins, (lo, hi), "generated")
    (out / "histograms.json").write_text(json.dumps([real_h.to_dict(), gen_h.to_dict()], indent=2) + "\n")
    plot_histograms([real_h, gen_h], out / "histograms.png")
    write_manifest(out, "evaluate", args.argv, None, None,
                   {"metrics": "metrics.json", "histograms": "histograms.json", "plot": "histograms.png"},
                   started, checkpoint=args.checkpoint, data_dir=str(args.data), sanity=args.sanity)
    print(f"{report.n_pairs} pairs: PSNR {report.psnr:.2f} dB  SSIM {report.ssim:.4f}  RMSE {report.rmse:.4f}")
    return EXIT_OK


def cmd_hist(args) -> int:
    started = _now()
    out = _out_dir(args.out)
    paths: List[Path] = []
    for p in map(Path, args.paths):
        paths.extend(sorted(p.glob("*.vol")) if p.is_dir() else [p])
    if not paths:
        raise CliError("no volume files given", EXIT_DATA)
    lo, hi = args.range
    per_file, values = [], []
    for path in paths:
        try:
            vol = load_volume(path)
        except (OSError, VolumeError) as exc:
            raise CliError(f"cannot read {path}: {exc}", EXIT_DATA) from exc
        if args.modality and vol.modality.value != args.modality:
            continue
        values.append(vol.data.ravel())
        per_file.append(histogram(vol, args.bins, (lo, hi), path.name))
    if not values:
        raise CliError(f"no {args.modality} volumes among the inputs", EXIT_DATA)
    combined = histogram(np.concatenate(values), args.bins, (lo, hi), "all")
    doc = {"combined": combined.to_dict(), "files": [h.to_dict() for h in per_file]}
    (out / "histogram.json").write_text(json.dumps(doc, indent=2) + "\n")
    plot_histograms([combined], out / "histogram.png")
    write_manifest(out, "hist", args.argv, None, None, {"histogram": "histogram.json", "plot": "histogram.png"},
                   started, inputs=[str(p) for p in paths])
    print(f"{combined.total} voxels from {len(per_file)} files; min {combined.min:.4g} max {combined.max:.4g} "
          f"|v|<1 fraction {combined.fraction_small:.3f}")
    return EXIT_OK


def cmd_dump_tokens(args) -> int:
    try:
        mri, pet = load_volume(args.mri), load_volume(args.pet)
    except (OSError, VolumeError) as exc:
        raise CliError(str(exc), EXIT_DATA) from exc
    if mri.modality is not Modality.MRI or pet.modality is not Modality.PET:
        raise CliError("expected an MRI volume then a PET volume", EXIT_DATA)
    norm_mri, stats = normalize_mri(mri)
    seq = tokenize_pair(norm_mri, normalize_pet(pet, stats))
    if args.mask_seed is not None:
        seq, _ = plan_mask(seq, args.mask_seed)
    text = dumps_tokens(seq)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------- #
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ganbert", description="MRI-to-PET synthesis with a BERT discriminator")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="YAML run config")
        if seed:
            p.add_argument("--seed", type=int, help="overrides data.seed and train.seed")

    p = sub.add_parser("synth-data", help="write synthetic MRI/PET pairs")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("-n", type=int, help="number of pairs (default: data.n_pairs)")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="adversarial training on a pair directory")
    common(p)
    p.add_argument("data", help="directory of <id>_mri.vol / <id>_pet.vol pairs")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, help="total training steps (overrides train.total_steps)")
    p.add_argument("--resume", help="train-state checkpoint to continue from")
    p.add_argument("--lambda-nsp", type=float)
    p.add_argument("--lambda-mlm", type=float)
    p.add_argument("--lambda-l1", type=float)
    p.add_argument("--use-cnn-d", action="store_true", help="add the volumetric CNN discriminator")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="PSNR/SSIM/RMSE and histograms on restored PET")
    p.add_argument("checkpoint", nargs="?", help="generator or train-state checkpoint")
    p.add_argument("data")
    p.add_argument("--out", required=True)
    p.add_argument("--sanity", action="store_true", help="score the real PET against itself")
    p.add_argument("--bins", type=int, default=100)
    p.add_argument("--range", type=float, nargs=2, default=(-100.0, 1000.0), metavar=("LO", "HI"))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("hist", help="intensity histogram over volume files")
    p.add_argument("paths", nargs="+", help="volume files or directories")
    p.add_argument("--out", required=True)
    p.add_argument("--bins", type=int, default=100)
    p.add_argument("--range", type=float, nargs=2, default=(-100.0, 1000.0), metavar=("LO", "HI"))
    p.add_argument("--modality", choices=["MRI", "PET"])
    p.set_defaults(func=cmd_hist)

    p = sub.add_parser("dump-tokens", help="print the token sequence of one pair")
    p.add_argument("mri")
    p.add_argument("pet")
    p.add_argument("--mask-seed", type=int, help="apply the masking plan drawn from this seed")
    p.add_argument("--out", help="write to a file instead of stdout")
    p.set_defaults(func=cmd_dump_tokens)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (VolumeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        log.exception("unexpected failure")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
