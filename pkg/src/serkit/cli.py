"""Command-line surface: train, eval, pseudolabel, gradcheck, report, synth.

Every command is deterministic given --seed and its inputs. Exit codes:
0 success, 1 configuration error, 2 data error, 3 numeric failure; the
reason is printed as a single machine-parseable line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .checkpoint import load_into_model
from .config import RunConfig
from .datapipe import (
    ConsensusConfig,
    ManifestRecord,
    consensus_label,
    read_manifest,
    synth_dataset,
    utterance_pseudo_label,
    window_split,
    write_manifest,
)
from .errors import ConfigError, DataError, NumericError, SerkitError
from .evaluation import evaluate_manifest
from .labels import EmotionLabel
from .losses import DimTargets
from .model import SERModel
from .reporting import read_report_csv, svg_bar_chart, write_report_csv, write_svg
from .training import compute_batch_loss, train_loop

log = logging.getLogger("serkit.cli")

EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


def _setup_logging():
    level_name = os.environ.get("SER_LOG_LEVEL", "warn").lower()
    level = {"error": logging.ERROR, "warn": logging.WARNING,
             "info": logging.INFO, "debug": logging.DEBUG}.get(level_name)
    if level is None:
        raise ConfigError(f"SER_LOG_LEVEL must be error/warn/info/debug, got {level_name!r}")
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


# -- train -----------------------------------------------------------------------


class RunLock:
    """Sentinel file guarding a run directory against concurrent writers."""

    def __init__(self, out_dir: str):
        self.path = os.path.join(out_dir, ".lock")

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(f"run directory is locked (stale {self.path}?)") from None
        os.close(fd)
        return self

    def __exit__(self, *exc):
        if os.path.exists(self.path):
            os.remove(self.path)
        return False


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config, args.set)
    train_records = read_manifest(args.train)
    dev_records = read_manifest(args.dev)
    os.makedirs(args.out, exist_ok=True)
    with RunLock(args.out):
        cfg.write_echo(os.path.join(args.out, "effective_config.cfg"))
        model = SERModel(cfg.model_config(args.seed))
        state = train_loop(
            model, train_records, dev_records, args.out,
            loss_cfg=cfg.loss_config(),
            opt_cfg=cfg.optimizer_config(),
            train_cfg=cfg.train_config(args.seed),
            augment_cfg=cfg.augment_config(),
            config_hash=cfg.config_hash(),
        )
        with open(os.path.join(args.out, "train_state.json"), "w", encoding="utf-8") as handle:
            json.dump(state.summary(relative_to=args.out), handle, indent=2, sort_keys=True)
            handle.write("\n")
    print(f"trained {state.epoch} epochs, best dev categorical loss {state.best_dev_cat_loss:.6f}")
    return 0


# -- eval ------------------------------------------------------------------------


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise ConfigError("at least one --checkpoint is required")
    cfg = RunConfig.load(args.config, args.set)
    records = read_manifest(args.manifest)
    models = []
    for path in args.checkpoint:
        model = SERModel(cfg.model_config(args.seed))
        load_into_model(path, model, expected_hash=cfg.config_hash())
        models.append(model)
    report = evaluate_manifest(models, records, granularity=args.granularity,
                               merge_cap_s=cfg["eval.merge_cap_s"])
    write_report_csv(args.report, report)
    if args.svg:
        name = os.path.splitext(os.path.basename(args.report))[0]
        write_svg(args.svg, svg_bar_chart([(name, dict(report.rows()))]))
    headline = report.uar_4 if args.classes == 4 else report.uar_7
    print(f"scored {report.n_scored} segments: uar_{args.classes}={headline:.4f}")
    return 0


# -- pseudolabel -------------------------------------------------------------------


def _read_window_predictions(path: str) -> dict:
    """Per-predictor JSONL: utterance_id, window_start_s, window_end_s, label."""
    if not os.path.exists(path):
        raise DataError(f"prediction file not found: {path}")
    by_utterance: dict = {}
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                payload = json.loads(line)
                utt = payload["utterance_id"]
                window = (float(payload["window_start_s"]), float(payload["window_end_s"]))
                label = payload["label"]
            except (json.JSONDecodeError, KeyError) as exc:
                raise DataError(f"{path}:{line_no}: bad window prediction ({exc})") from None
            by_utterance.setdefault(utt, {})[window] = label
    if not by_utterance:
        raise DataError(f"prediction file is empty: {path}")
    return by_utterance


def _read_durations(path: str) -> list:
    """JSONL of id + duration_s (or frames + frame_rate_hz), with passthrough fields."""
    if not os.path.exists(path):
        raise DataError(f"durations file not found: {path}")
    rows = []
    seen = set()
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                payload = json.loads(line)
                utt = payload["id"]
            except (json.JSONDecodeError, KeyError) as exc:
                raise DataError(f"{path}:{line_no}: bad durations line ({exc})") from None
            if utt in seen:
                raise DataError(f"{path}:{line_no}: duplicate id {utt!r}")
            seen.add(utt)
            if "duration_s" in payload:
                duration = float(payload["duration_s"])
                frame_rate = float(payload.get("frame_rate_hz", 100.0))
                frames = int(payload.get("frames", round(duration * frame_rate)))
            elif "frames" in payload and "frame_rate_hz" in payload:
                frames = int(payload["frames"])
                frame_rate = float(payload["frame_rate_hz"])
                duration = frames / frame_rate
            else:
                raise DataError(f"{path}:{line_no}: need duration_s or frames+frame_rate_hz")
            rows.append({
                "id": utt, "duration_s": duration, "frames": frames,
                "frame_rate_hz": frame_rate,
                "features_path": payload.get("features_path", ""),
                "split": payload.get("split", "train"),
                "language": payload.get("language"),
            })
    if not rows:
        raise DataError(f"durations file is empty: {path}")
    return rows


def cmd_pseudolabel(args) -> int:
    cfg = ConsensusConfig(window_s=args.window_s, hop_s=args.hop_s,
                          min_emotional_fraction=args.min_frac)
    preds_a = _read_window_predictions(args.pred_a)
    preds_b = _read_window_predictions(args.pred_b)
    durations = _read_durations(args.durations)
    wanted = {row["id"] for row in durations}
    missing = sorted((wanted - set(preds_a)) | (wanted - set(preds_b))
                     | (set(preds_a) ^ set(preds_b)))
    if missing:
        raise DataError(f"prediction files do not cover the same ids; missing: {missing[:10]}")

    records = []
    class_counts = {label.canonical_name: 0 for label in EmotionLabel}
    n_windows = 0
    n_neutral_windows = 0
    for row in durations:
        utt = row["id"]
        windows = window_split(row["duration_s"], cfg)
        labels = []
        for start, end in windows:
            key = (start, end)
            if key not in preds_a[utt] or key not in preds_b[utt]:
                raise DataError(
                    f"utterance {utt}: window ({start}, {end}) missing from predictions"
                )
            label = consensus_label(preds_a[utt][key], preds_b[utt][key], cfg)
            labels.append(label)
            n_windows += 1
            if label == EmotionLabel.NEUTRAL:
                n_neutral_windows += 1
        pseudo = utterance_pseudo_label(labels, cfg)
        class_counts[pseudo.label.canonical_name] += 1
        records.append(ManifestRecord(
            id=utt,
            features_path=row["features_path"],
            frames=row["frames"],
            frame_rate_hz=row["frame_rate_hz"],
            label=pseudo.label.canonical_name,
            split=row["split"],
            language=row["language"],
        ))
    write_manifest(args.out, records)
    stats = {
        "n_utterances": len(records),
        "n_windows": n_windows,
        "neutral_fallback_fraction": n_neutral_windows / n_windows if n_windows else 0.0,
        "per_class_counts": class_counts,
    }
    with open(args.out + ".stats.json", "w", encoding="utf-8") as handle:
        json.dump(stats, handle, indent=2, sort_keys=True)
        handle.write("\n")
    print(f"pseudo-labeled {len(records)} utterances "
          f"({stats['neutral_fallback_fraction']:.3f} neutral window fraction)")
    return 0


# -- gradcheck ----------------------------------------------------------------------


def _gradcheck_group(name: str) -> str:
    if ".lora." in name:
        return "encoder.lora"
    return name.split(".", 1)[0]


def cmd_gradcheck(args) -> int:
    from .autodiff import finite_difference_sample, relative_error

    cfg = RunConfig.load(args.config, args.set)
    loss_cfg = cfg.loss_config()
    model = SERModel(cfg.model_config(args.seed))
    rng = np.random.default_rng((args.seed, 0xFD))
    batch = [rng.normal(size=(args.frames, cfg["model.feature_dim"]))
             for _ in range(args.batch)]
    cats = np.eye(7)[rng.integers(0, 7, size=args.batch)]
    dims = DimTargets(values=rng.uniform(0.1, 0.9, size=(args.batch, 3)),
                      present_mask=np.ones(args.batch, dtype=bool))

    model.zero_grad()
    loss, _, _ = compute_batch_loss(model, batch, cats, dims, loss_cfg)
    loss.backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in model.trainable_parameters().items()}

    def loss_at(name, arr):
        tensor = model.params[name]
        saved = tensor.data
        tensor.data = arr
        try:
            return compute_batch_loss(model, batch, cats, dims, loss_cfg)[0].item()
        finally:
            tensor.data = saved

    group_err: dict = {}
    worst_param, worst_err = None, -1.0
    for name, tensor in model.trainable_parameters().items():
        n = tensor.data.size
        k = min(args.samples, n)
        idx = rng.choice(n, size=k, replace=False)
        fd = finite_difference_sample(lambda arr, name=name: loss_at(name, arr),
                                      tensor.data, idx, h=args.step)
        err = relative_error(analytic[name].reshape(-1)[idx], fd)
        group = _gradcheck_group(name)
        group_err[group] = max(group_err.get(group, 0.0), err)
        if err > worst_err:
            worst_param, worst_err = name, err

    failed = False
    for group in sorted(group_err):
        status = "PASS" if group_err[group] < args.tolerance else "FAIL"
        failed = failed or status == "FAIL"
        print(f"group {group}: max_rel_err={group_err[group]:.3e} [{status}]")
    if failed:
        raise NumericError(
            f"gradient check failed (worst parameter {worst_param}, rel err {worst_err:.3e})"
        )
    return 0


# -- report -------------------------------------------------------------------------


def cmd_report(args) -> int:
    groups = []
    for path in args.inputs:
        name = os.path.splitext(os.path.basename(path))[0]
        groups.append((name, read_report_csv(path)))
    write_svg(args.svg, svg_bar_chart(groups))
    print(f"wrote {args.svg} with {len(groups)} group(s)")
    return 0


# -- synth --------------------------------------------------------------------------


def cmd_synth(args) -> int:
    manifest = synth_dataset(args.out, n_per_class=args.n_per_class, frames=args.frames,
                             dim=args.dim, seed=args.seed, split=args.split,
                             frame_rate_hz=args.frame_rate,
                             geometry_seed=args.geometry_seed)
    print(f"wrote {manifest}")
    return 0


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="serkit",
                                     description="Speech emotion recognition desk stack")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from manifests")
    p_train.add_argument("--config", default=None)
    p_train.add_argument("--train", required=True)
    p_train.add_argument("--dev", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate checkpoint ensemble on a manifest")
    p_eval.add_argument("--checkpoint", action="append", default=[])
    p_eval.add_argument("--manifest", required=True)
    p_eval.add_argument("--report", required=True)
    p_eval.add_argument("--classes", type=int, choices=(7, 4), default=7)
    p_eval.add_argument("--granularity", choices=("fine", "merged"), default="fine")
    p_eval.add_argument("--svg", default=None)
    p_eval.add_argument("--config", default=None)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p_eval.set_defaults(func=cmd_eval)

    p_pseudo = sub.add_parser("pseudolabel", help="windowed two-predictor consensus labels")
    p_pseudo.add_argument("--pred-a", required=True)
    p_pseudo.add_argument("--pred-b", required=True)
    p_pseudo.add_argument("--durations", required=True)
    p_pseudo.add_argument("--out", required=True)
    p_pseudo.add_argument("--min-frac", type=float, default=0.25)
    p_pseudo.add_argument("--window-s", type=float, default=4.0)
    p_pseudo.add_argument("--hop-s", type=float, default=2.0)
    p_pseudo.set_defaults(func=cmd_pseudolabel)

    p_grad = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--tolerance", type=float, default=1e-4)
    p_grad.add_argument("--samples", type=int, default=3, help="probed elements per tensor")
    p_grad.add_argument("--frames", type=int, default=12)
    p_grad.add_argument("--batch", type=int, default=2)
    p_grad.add_argument("--step", type=float, default=1e-5)
    p_grad.add_argument("--config", default=None)
    p_grad.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p_grad.set_defaults(func=cmd_gradcheck)

    p_report = sub.add_parser("report", help="render report CSVs as an SVG bar chart")
    p_report.add_argument("--in", dest="inputs", nargs="+", required=True)
    p_report.add_argument("--svg", required=True)
    p_report.set_defaults(func=cmd_report)

    p_synth = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--n-per-class", type=int, required=True)
    p_synth.add_argument("--frames", type=int, default=16)
    p_synth.add_argument("--dim", type=int, default=16)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--geometry-seed", type=int, default=None,
                         help="class-centroid seed; share across splits (default: --seed)")
    p_synth.add_argument("--split", choices=("train", "dev", "eval"), default="train")
    p_synth.add_argument("--frame-rate", type=float, default=8.0)
    p_synth.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"error: numeric: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SerkitError as exc:  # fallback for any future subclass
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
