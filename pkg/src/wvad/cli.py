"""Command-line entry point tying the modules into reproducible runs.

Subcommands: synth, train, eval, mine, gradcheck, ablate, export-scores.
Every run writes a ``run.json`` echoing the fully resolved configuration
into its output directory. Exit codes: 0 ok, 2 config/usage error,
3 I/O or file-format error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import verification
from .encoder import EncoderConfig, load_checkpoint
from .errors import ConfigError, FormatError, MetricError, TrainingError
from .losses import LossConfig
from .metrics import EvalRecord, evaluate, snippet_to_frame_scores
from .mining import MiningConfig, mine_batch
from .synthdata import SynthConfig, generate_dataset, load_manifest, load_split
from .tensor import no_grad
from .trainer import TrainConfig, train

# loss-term weights (w_contrast, w_snippet, w_video, w_reg) and model per
# ablation row: (a) ranking only on raw features, (b) + encoder,
# (c) + video head, (d) + contrastive mining = the full model
ABLATION_PRESETS = {
    "a": ("linear", dict(w_contrast=0.0, w_snippet=1.0, w_video=0.0, w_reg=1.0)),
    "b": ("transformer", dict(w_contrast=0.0, w_snippet=1.0, w_video=0.0, w_reg=1.0)),
    "c": ("transformer", dict(w_contrast=0.0, w_snippet=1.0, w_video=1.0, w_reg=1.0)),
    "d": ("transformer", dict(w_contrast=1.0, w_snippet=1.0, w_video=1.0, w_reg=1.0)),
}

SCORE_COLUMNS = ("video_id", "t", "score", "video_label")
FRAME_COLUMNS = ("video_id", "frame", "score", "label")


@dataclasses.dataclass
class ResolvedConfig:
    synth: SynthConfig
    train: TrainConfig
    ablate_seeds: list[int]

    def as_dict(self) -> dict:
        return {
            "synth": dataclasses.asdict(self.synth),
            "train": dataclasses.asdict(self.train),
            "ablate": {"seeds": list(self.ablate_seeds)},
        }


def _build_section(cls, section: dict, name: str):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in config section {name!r}: {unknown}")
    return cls(**section)


def load_config(path=None, seed_override=None) -> ResolvedConfig:
    """Parse the single JSON config schema; unknown keys anywhere are errors."""
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: config is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config root must be a JSON object")
    known = {"synth", "train", "encoder", "loss", "mining", "ablate"}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config sections: {unknown}")

    synth_section = dict(data.get("synth", {}))
    if isinstance(synth_section.get("region_len_range"), list):
        synth_section["region_len_range"] = tuple(synth_section["region_len_range"])
    synth = _build_section(SynthConfig, synth_section, "synth")

    encoder = _build_section(EncoderConfig, data.get("encoder", {}), "encoder")
    loss = _build_section(LossConfig, data.get("loss", {}), "loss")
    mining = _build_section(MiningConfig, data.get("mining", {}), "mining")

    train_section = dict(data.get("train", {}))
    for key in ("encoder", "loss", "mining"):
        if key in train_section:
            raise ConfigError(f"put {key!r} at the top level, not inside 'train'")
    train_cfg = _build_section(
        TrainConfig, train_section | {"encoder": encoder, "loss": loss, "mining": mining},
        "train")

    ablate_section = dict(data.get("ablate", {}))
    seeds = ablate_section.pop("seeds", [0, 1, 2])
    if ablate_section:
        raise ConfigError(f"unknown keys in config section 'ablate': "
                          f"{sorted(ablate_section)}")
    if (not isinstance(seeds, list) or not seeds
            or not all(isinstance(s, int) for s in seeds)):
        raise ConfigError("ablate.seeds must be a non-empty list of integers")

    if seed_override is not None:
        synth = dataclasses.replace(synth, seed=seed_override)
        train_cfg = dataclasses.replace(train_cfg, seed=seed_override)
    return ResolvedConfig(synth=synth, train=train_cfg, ablate_seeds=list(seeds))


def _write_run_record(out_dir: Path, command: str, config: ResolvedConfig | None,
                      **extra):
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {"command": command}
    if config is not None:
        record["config"] = config.as_dict()
    record.update(extra)
    (out_dir / "run.json").write_text(
        json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _check_dataset_compat(data_dir, config: ResolvedConfig):
    manifest, _ = load_manifest(data_dir)
    ds = manifest.get("config", {})
    enc = config.train.encoder
    if ds.get("d_in") != enc.d_in or ds.get("num_snippets") != enc.num_snippets:
        raise ConfigError(
            f"dataset is T={ds.get('num_snippets')}, D={ds.get('d_in')} but the "
            f"encoder expects T={enc.num_snippets}, D={enc.d_in}; fix the config")


def _train_triples(data_dir) -> list[tuple[str, int, np.ndarray]]:
    videos = load_split(data_dir, "train")
    return [(v.record.id, v.record.video_label, v.features) for v in videos]


def evaluate_model(model, videos) -> tuple[float, float, list[tuple]]:
    """Frame-level AUC/AP of a model over loaded test videos."""
    scores_parts, label_parts, rows = [], [], []
    for v in videos:
        if v.frame_labels is None:
            raise FormatError(f"video {v.record.id} has no frame labels; "
                              "evaluation needs the test split")
        with no_grad():
            out = model.forward(v.features)
        frame_scores = snippet_to_frame_scores(
            out.scores.data.astype(np.float64), v.record.num_frames)
        scores_parts.append(frame_scores)
        label_parts.append(v.frame_labels)
        for f in range(v.record.num_frames):
            rows.append((v.record.id, f, float(frame_scores[f]), int(v.frame_labels[f])))
    record = EvalRecord(frame_scores=np.concatenate(scores_parts),
                        frame_labels=np.concatenate(label_parts))
    auc, ap = evaluate(record)
    return auc, ap, rows


def ablation_train_config(base: TrainConfig, preset: str, seed: int) -> TrainConfig:
    model, weights = ABLATION_PRESETS[preset]
    loss = dataclasses.replace(base.loss, **weights)
    return dataclasses.replace(base, model=model, loss=loss, seed=seed)


# ---------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    config = load_config(args.config, args.seed)
    out = Path(args.out)
    generate_dataset(config.synth, out)
    _write_run_record(out, "synth", config)
    print(f"dataset written to {out}")
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config, args.seed)
    _check_dataset_compat(args.data, config)
    out = Path(args.out)
    _write_run_record(out, "train", config, data=str(args.data),
                      resume=str(args.resume) if args.resume else None)
    result = train(_train_triples(args.data), config.train,
                   out_dir=out, resume=args.resume)
    print(f"trained {result.steps} steps; checkpoint at {result.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    videos = load_split(args.data, "test")
    auc, ap, rows = evaluate_model(model, videos)
    if args.out is not None:
        out = Path(args.out)
        _write_run_record(out, "eval", None,
                          checkpoint=str(args.checkpoint), data=str(args.data))
        with open(out / "frame_scores.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(FRAME_COLUMNS)
            for vid, frame, score, label in rows:
                writer.writerow([vid, frame, repr(score), label])
    print(f"AUC={auc:.6f} AP={ap:.6f}")
    return 0


def cmd_export_scores(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    videos = load_split(args.data, args.split)
    out = Path(args.out)
    _write_run_record(out, "export-scores", None,
                      checkpoint=str(args.checkpoint), data=str(args.data),
                      split=args.split)
    with open(out / "scores.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SCORE_COLUMNS)
        for v in videos:
            with no_grad():
                scores = model.forward(v.features).scores.data
            for t, s in enumerate(scores):
                writer.writerow([v.record.id, t, repr(float(s)), v.record.video_label])
    print(f"wrote {out / 'scores.csv'}")
    return 0


def _read_scores_csv(path) -> list[tuple[str, int, np.ndarray]]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise FormatError(f"{path}: no such file") from None
    lines = text.splitlines()
    if not lines:
        return []
    reader = csv.DictReader(lines)
    if reader.fieldnames is None or set(reader.fieldnames) != set(SCORE_COLUMNS):
        raise ConfigError(f"{path}: expected columns {','.join(SCORE_COLUMNS)}, "
                          f"got {reader.fieldnames}")
    per_video: dict[str, dict] = {}
    for i, row in enumerate(reader, start=2):
        try:
            vid = row["video_id"]
            t = int(row["t"])
            score = float(row["score"])
            label = int(row["video_label"])
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{path}:{i}: malformed row: {e}") from e
        if vid is None or label not in (0, 1):
            raise ConfigError(f"{path}:{i}: bad video id or label")
        entry = per_video.setdefault(vid, {"label": label, "scores": {}})
        if entry["label"] != label:
            raise ConfigError(f"{path}:{i}: conflicting labels for video {vid}")
        if t in entry["scores"]:
            raise ConfigError(f"{path}:{i}: duplicate snippet index {t} for {vid}")
        entry["scores"][t] = score
    videos = []
    for vid, entry in per_video.items():
        ts = sorted(entry["scores"])
        if ts != list(range(len(ts))):
            raise ConfigError(f"{path}: video {vid} snippet indices are not 0..T-1")
        videos.append((vid, entry["label"],
                       np.array([entry["scores"][t] for t in ts], dtype=np.float64)))
    return videos


def cmd_mine(args) -> int:
    config = load_config(args.config, args.seed)
    videos = _read_scores_csv(args.scores)
    try:
        mined = mine_batch(videos, config.train.mining) if videos else None
    except ValueError as e:
        raise ConfigError(str(e)) from e
    out = Path(args.out)
    _write_run_record(out, "mine", config, scores=str(args.scores))
    with open(out / "mined.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["set", "video_id", "t"])
        if mined is not None:
            for name, group in (("HA", mined.hard_abnormal), ("EA", mined.easy_abnormal),
                                ("HN", mined.hard_normal), ("EN", mined.easy_normal)):
                for vid, t in group:
                    writer.writerow([name, vid, t])
    print(f"wrote {out / 'mined.csv'}")
    return 0


def cmd_gradcheck(args) -> int:
    report = verification.run_all(seeds=args.seeds)
    lines = report.summary_lines()
    print("\n".join(lines))
    if args.out is not None:
        out = Path(args.out)
        _write_run_record(out, "gradcheck", None, seeds=args.seeds,
                          passed=report.passed)
        (out / "gradcheck.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if not report.passed:
        raise TrainingError("gradient verification failed")
    return 0


def cmd_ablate(args) -> int:
    config = load_config(args.config, args.seed)
    _check_dataset_compat(args.data, config)
    out = Path(args.out)
    _write_run_record(out, "ablate", config, data=str(args.data))
    triples = _train_triples(args.data)
    test_videos = load_split(args.data, "test")
    results = []
    for preset in sorted(ABLATION_PRESETS):
        for seed in config.ablate_seeds:
            run_cfg = ablation_train_config(config.train, preset, seed)
            run_dir = out / f"run_{preset}_seed{seed}"
            result = train(triples, run_cfg, out_dir=run_dir)
            auc, ap, _ = evaluate_model(result.model, test_videos)
            results.append((preset, seed, auc, ap))
            print(f"config {preset} seed {seed}: AUC={auc:.4f} AP={ap:.4f}")
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["config", "seed", "auc", "ap"])
        for preset, seed, auc, ap in results:
            writer.writerow([preset, seed, repr(auc), repr(ap)])
    for preset in sorted(ABLATION_PRESETS):
        rows = [(auc, ap) for p, _, auc, ap in results if p == preset]
        mean_auc = sum(a for a, _ in rows) / len(rows)
        mean_ap = sum(p for _, p in rows) / len(rows)
        print(f"config {preset} mean: AUC={mean_auc:.4f} AP={mean_ap:.4f}")
    return 0


# ---------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wvad",
        description="Weakly supervised video anomaly detection workflows")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--out", required=out_required, default=None,
                       help="output directory")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(p, out_required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-scores", help="write per-snippet scores as CSV")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.set_defaults(func=cmd_export_scores)

    p = sub.add_parser("mine", help="mine hard/easy snippet sets from a score CSV")
    common(p)
    p.add_argument("--scores", required=True, help="input score CSV")
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("gradcheck", help="run the gradient verification suite")
    common(p, out_required=False)
    p.add_argument("--seeds", type=int, default=10)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and score the four loss ablations")
    common(p)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 3
    except (TrainingError, MetricError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
