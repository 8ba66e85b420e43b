"""Command-line pipeline: pretrain, train, evaluate, baseline, heatmap.

Every artifact carries the run configuration (JSON comment line for CSVs, a
``config`` key for JSON, the checkpoint header for checkpoints). A command
either writes all of its artifacts or removes the ones it had started.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import clustering, dataio, evaluation, heatmap, hierarchical, tae
from .similarity import MetricKind


# pool sizes used for the two-class benchmark datasets
POOL_PRESETS = {
    "NASA_MMS": 10,
    "BeetleFly": 8,
    "BirdChicken": 8,
    "Computers": 10,
    "Earthquakes": 8,
    "MoteStrain": 4,
    "PhalangesOutlinesCorrect": 4,
    "ProximalPhalanxOutlineCorrect": 4,
    "ShapeletSim": 10,
    "SonyAIBORobotSurface2": 5,
    "SonyAIBORobotSurface1": 5,
    "ItalyPowerDemand": 4,
    "WormsTwoClass": 10,
}
DEFAULT_POOL = 10

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data: explicit UCR files, a UCR dataset name under $DTC_DATA_DIR, or synthetic events
    dataset_train: str | None = None
    dataset_test: str | None = None
    dataset: str | None = None
    synth_n: int = 104
    synth_length: int = 1140
    synth_event_rate: float = 0.55
    synth_seed: int = 0
    normalize: bool = True
    # model and training
    metric: str = "CID"
    pool_size: int | None = None
    k: int = 2
    seed: int = 0
    epochs: int = 10
    batch_size: int = 64
    pretrain_lr: float = 0.01
    lr: float = 0.1
    max_epochs: int = 100
    min_epochs: int = 20
    joint: bool = True
    kl_reduction: str = "mean"
    reconstruction_weight: float = 10.0
    reseed_without_members: bool = False
    min_member_frac: float = 0.0
    # protocol
    trials: int = 5
    bootstrap_runs: int = 10
    checkpoint: str | None = None
    target_class: int | None = None
    out_dir: str = "runs"

    def validate(self):
        try:
            self.metric = MetricKind.parse(self.metric).value
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        positive = ("synth_n", "synth_length", "k", "epochs", "batch_size", "max_epochs", "min_epochs",
                    "trials", "bootstrap_runs")
        for name in positive:
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.pool_size is not None and self.pool_size < 1:
            raise ConfigError(f"pool_size must be positive, got {self.pool_size}")
        if not 0.0 < self.synth_event_rate < 1.0:
            raise ConfigError(f"synth_event_rate must be in (0, 1), got {self.synth_event_rate}")
        if self.lr < 0 or self.pretrain_lr < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.kl_reduction not in ("mean", "sum"):
            raise ConfigError(f"kl_reduction must be 'mean' or 'sum', got {self.kl_reduction!r}")
        if self.reconstruction_weight < 0:
            raise ConfigError("reconstruction_weight must be non-negative")
        if not 0.0 <= self.min_member_frac < 0.5:
            raise ConfigError(f"min_member_frac must be in [0, 0.5), got {self.min_member_frac}")
        if self.k != 2:
            raise ConfigError("the evaluation protocol is binary; k must be 2")
        if self.dataset_test and not self.dataset_train:
            raise ConfigError("--dataset-test needs --dataset-train")
        for path in (self.dataset_train, self.dataset_test):
            if path and not Path(path).is_file():
                raise ConfigError(f"dataset file not found: {path}")
        return self

    @property
    def pool(self):
        if self.pool_size is not None:
            return self.pool_size
        return POOL_PRESETS.get(self.dataset or "", DEFAULT_POOL)

    def to_dict(self):
        d = asdict(self)
        d["pool_size"] = self.pool
        return d

    def tag(self):
        return json.dumps({"config": self.to_dict()}, sort_keys=True)


def load_dataset(cfg: RunConfig) -> dataio.Dataset:
    if cfg.dataset_train:
        data = dataio.load_ucr(cfg.dataset_train, cfg.dataset_test)
    elif cfg.dataset:
        paths = dataio.ucr_paths(cfg.dataset)
        if paths is None:
            root = os.environ.get(dataio.DATA_DIR_ENV, ".")
            raise ConfigError(
                f"dataset {cfg.dataset!r} not found under {root!r}; "
                f"set ${dataio.DATA_DIR_ENV} or pass --dataset-train/--dataset-test"
            )
        data = dataio.load_ucr(*paths, name=cfg.dataset)
    else:
        data = dataio.synth_events(cfg.synth_n, cfg.synth_length, cfg.synth_event_rate, seed=cfg.synth_seed)
    return dataio.znormalize(data) if cfg.normalize else data


class Outputs:
    """Tracks the files a command writes so a failure can remove them."""

    def __init__(self, out_dir):
        self.dir = Path(out_dir)
        self.written = []
        self._created_dirs = []

    def path(self, name):
        p = self.dir / name
        missing = [d for d in [p.parent, *p.parent.parents] if not d.exists()]
        p.parent.mkdir(parents=True, exist_ok=True)
        self._created_dirs.extend(sorted(missing, key=lambda d: len(d.parts), reverse=True))
        self.written.append(p)
        return p

    def discard(self):
        for p in self.written:
            for q in (p, Path(f"{p}.tmp")):
                if q.exists():
                    q.unlink()
        for d in self._created_dirs:
            try:
                d.rmdir()
            except OSError:
                pass
        self.written = []


def _tae_config(cfg, data):
    return tae.TaeConfig(input_length=data.length, pool_size=cfg.pool)


def _train_config(cfg):
    return clustering.TrainConfig(
        k=cfg.k, metric=cfg.metric, batch_size=cfg.batch_size, learning_rate=cfg.lr,
        max_epochs=cfg.max_epochs, min_epochs=cfg.min_epochs, joint=cfg.joint,
        kl_reduction=cfg.kl_reduction, reconstruction_weight=cfg.reconstruction_weight,
        reseed_without_members=cfg.reseed_without_members, min_member_frac=cfg.min_member_frac,
    )


def _pretrained(cfg, data, seed):
    model = tae.init_tae(_tae_config(cfg, data), seed)
    return tae.pretrain(model, data.sequences, epochs=cfg.epochs, batch_size=cfg.batch_size,
                        learning_rate=cfg.pretrain_lr, seed=seed)


def _write_loss_csv(path, losses, cfg, seed):
    with open(path, "w") as fh:
        fh.write(f"# {json.dumps({'config': cfg.to_dict(), 'seed': seed}, sort_keys=True)}\n")
        fh.write("epoch,reconstruction_loss\n")
        for i, v in enumerate(losses, start=1):
            fh.write(f"{i},{v!r}\n")


def _checkpoint_path(cfg, out, default):
    p = Path(cfg.checkpoint) if cfg.checkpoint else out.dir / default
    if not p.is_file():
        raise ConfigError(f"checkpoint not found: {p} (run the preceding command first or pass --checkpoint)")
    return p


def cmd_pretrain(cfg, out):
    data = load_dataset(cfg)
    model, losses = _pretrained(cfg, data, cfg.seed)
    extra = {"config": cfg.to_dict(), "seed": cfg.seed, "loss_history": losses, "stage": "pretrain"}
    dataio.save_checkpoint(out.path("pretrain.ckpt"), model, extra=extra)
    _write_loss_csv(out.path("pretrain_loss.csv"), losses, cfg, cfg.seed)
    print(f"pretrained {data.name}: loss {losses[0]:.4f} -> {losses[-1]:.4f}")


def cmd_train(cfg, out):
    data = load_dataset(cfg)
    ckpt = dataio.load_checkpoint(_checkpoint_path(cfg, out, "pretrain.ckpt"))
    if ckpt.model.config.input_length != data.length:
        raise ConfigError(f"checkpoint expects length {ckpt.model.config.input_length}, data has {data.length}")
    result = clustering.train_dtc(ckpt.model, data.sequences, _train_config(cfg), seed=cfg.seed)
    h = result.history
    summary = {"epochs": len(h.records), "converged": h.converged, "final_change": h.final_change}
    if data.labels is not None:
        summary["auc"] = evaluation.aligned_auc(result.Q, data.labels)
    extra = {"config": cfg.to_dict(), "seed": cfg.seed, "stage": "train", "summary": summary}
    dataio.save_checkpoint(out.path("dtc.ckpt"), result.model, result.centroids, extra=extra)
    h.write_csv(out.path("train_history.csv"), comment=json.dumps({"config": cfg.to_dict(), "seed": cfg.seed}, sort_keys=True))
    with open(out.path("assignments.csv"), "w") as fh:
        fh.write(f"# {cfg.tag()}\n")
        fh.write("index,cluster," + ",".join(f"q{j}" for j in range(cfg.k)) + ",label\n")
        for i, row in enumerate(result.Q):
            label = "" if data.labels is None else int(data.labels[i])
            fh.write(f"{i},{int(np.argmax(row))}," + ",".join(repr(float(v)) for v in row) + f",{label}\n")
    print(f"trained {data.name}: {summary}")


def _require_labels(data):
    if data.labels is None or len(np.unique(data.labels)) < 2:
        raise ConfigError("evaluation needs ground-truth labels with both classes present")


def cmd_evaluate(cfg, out):
    data = load_dataset(cfg)
    _require_labels(data)
    aucs, rocs, trials = [], [], []
    for t in range(cfg.trials):
        seed = cfg.seed + t
        model, losses = _pretrained(cfg, data, seed)
        result = clustering.train_dtc(model, data.sequences, _train_config(cfg), seed=seed)
        score = evaluation.oriented_score(result.Q, data.labels)
        curve = evaluation.roc_curve(score, data.labels)
        aucs.append(evaluation.auc(curve))
        rocs.append(list(zip(curve.fpr.tolist(), curve.tpr.tolist())))
        trials.append({"seed": seed, "auc": aucs[-1], "epochs": len(result.history.records),
                       "converged": result.history.converged, "final_change": result.history.final_change})
        print(f"trial {t}: seed {seed} auc {aucs[-1]:.4f}")
    mean, stderr = evaluation.summarize(aucs)
    report = evaluation.EvaluationReport(
        dataset=data.name, method="DTC", metric=cfg.metric, auc_mean=mean, auc_stderr=stderr,
        trial_aucs=aucs, meta={"n": len(data), "length": data.length, "ratio": data.ratio, "trials": trials},
        config=cfg.to_dict() | {"seed": cfg.seed}, roc=rocs,
    )
    report.write_json(out.path("evaluate_report.json"))
    report.write_roc_csv(out.path("evaluate_roc.csv"))
    print(f"DTC-{cfg.metric} AUC {mean:.4f} +/- {stderr:.4f}")


def cmd_baseline(cfg, out):
    data = load_dataset(cfg)
    _require_labels(data)
    _, scores = hierarchical.baseline_cluster(data.sequences, cfg.metric, cfg.k)
    score = evaluation.oriented_score(scores, data.labels)
    mean, stderr, values = evaluation.bootstrap_auc(score, data.labels, n_runs=cfg.bootstrap_runs, seed=cfg.seed)
    curve = evaluation.roc_curve(score, data.labels)
    report = evaluation.EvaluationReport(
        dataset=data.name, method="hierarchical", metric=cfg.metric, auc_mean=mean, auc_stderr=stderr,
        trial_aucs=list(values), meta={"n": len(data), "length": data.length, "ratio": data.ratio,
                                       "full_sample_auc": evaluation.auc(curve)},
        config=cfg.to_dict() | {"seed": cfg.seed}, roc=[list(zip(curve.fpr.tolist(), curve.tpr.tolist()))],
    )
    report.write_json(out.path("baseline_report.json"))
    report.write_roc_csv(out.path("baseline_roc.csv"))
    print(f"baseline-{cfg.metric} AUC {mean:.4f} +/- {stderr:.4f}")


def _event_class(cfg, labels, data):
    if cfg.target_class is not None:
        if not 0 <= cfg.target_class < cfg.k:
            raise ConfigError(f"target_class must be in [0, {cfg.k}), got {cfg.target_class}")
        return cfg.target_class
    if data.labels is not None:
        # post-hoc labelling: the cluster holding the larger share of positives
        share = [np.mean(data.labels[labels == j]) if np.any(labels == j) else -1.0 for j in range(cfg.k)]
        return int(np.argmax(share))
    return 1


def cmd_heatmap(cfg, out):
    data = load_dataset(cfg)
    ckpt = dataio.load_checkpoint(_checkpoint_path(cfg, out, "dtc.ckpt"))
    if ckpt.centroids is None:
        raise ConfigError("checkpoint has no centroids; pass a checkpoint written by the train command")
    Z = tae.encode_batched(ckpt.model, data.sequences)
    labels = clustering.hard_assign(clustering.soft_assign(Z, ckpt.centroids, cfg.metric))
    if len(np.unique(labels)) < 2:
        raise ConfigError("all sequences fall in one cluster; a localizer cannot be trained on a single class "
                          "(retrain with --reseed-without-members, optionally with --min-member-frac)")
    model = heatmap.train_localizer(data.sequences, labels, seed=cfg.seed, n_classes=cfg.k)
    target = _event_class(cfg, labels, data)
    maps = heatmap.generate_heatmap(model, data.sequences, target)
    peaks = heatmap.raw_peak(model, data.sequences, target)
    tag = cfg.tag()
    for i, (x, hm) in enumerate(zip(data.sequences, maps)):
        heatmap.write_heatmap_csv(out.path(f"heatmaps/heatmap_{i:05d}.csv"), x, hm, comment=tag)
    summary = {"config": cfg.to_dict(), "seed": cfg.seed, "target_class": target,
               "train_accuracy": model.train_accuracy, "epochs": model.epochs_run,
               "clusters": np.bincount(labels, minlength=cfg.k).tolist(),
               "raw_peak": peaks.tolist()}
    if data.windows is not None:
        events = [i for i, w in enumerate(data.windows) if w]
        if events:
            summary["localization_rate"] = heatmap.localization_rate(maps[events], [data.windows[i] for i in events])
    with open(out.path("heatmap_summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"heatmaps for {len(maps)} sequences, target class {target}, "
          f"train accuracy {model.train_accuracy:.3f}")


COMMANDS = {
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "baseline": cmd_baseline,
    "heatmap": cmd_heatmap,
}


def build_parser():
    p = argparse.ArgumentParser(prog="dtc", description="Autoencoder-based time-series clustering pipeline")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--dataset-train", help="UCR-format training split")
    p.add_argument("--dataset-test", help="UCR-format test split, concatenated with the training split")
    p.add_argument("--dataset", help=f"UCR dataset name looked up under ${dataio.DATA_DIR_ENV}")
    p.add_argument("--metric", type=str.upper, choices=[m.value for m in MetricKind])
    p.add_argument("--pool-size", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int, help="pretraining epochs")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, help="joint training learning rate")
    p.add_argument("--pretrain-lr", type=float)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--min-epochs", type=int, help="epochs before the convergence test applies")
    p.add_argument("--reseed-without-members", action="store_true", default=None,
                   help="re-seed a centroid that wins no hard assignment during training")
    p.add_argument("--min-member-frac", type=float,
                   help="with --reseed-without-members: member share below which a centroid is re-seeded")
    p.add_argument("--trials", type=int)
    p.add_argument("--synth-n", type=int)
    p.add_argument("--synth-length", type=int)
    p.add_argument("--synth-seed", type=int)
    p.add_argument("--checkpoint")
    p.add_argument("--target-class", type=int)
    p.add_argument("--out-dir")
    p.add_argument("--config", help="JSON file whose keys override the flags")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    values = {k: v for k, v in vars(args).items() if k in known and v is not None}
    if args.config:
        try:
            with open(args.config) as fh:
                overrides = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from None
        except ValueError as exc:
            raise ConfigError(f"config file {args.config} is not valid JSON: {exc}") from None
        if not isinstance(overrides, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(overrides) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values.update(overrides)
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return cfg.validate()


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"dtc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Outputs(cfg.out_dir)
    try:
        COMMANDS[args.command](cfg, out)
    except (ConfigError, dataio.DataFormatError, dataio.CheckpointError, OSError) as exc:
        out.discard()
        print(f"dtc {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (clustering.TrainingDivergedError, clustering.InvariantViolation, FloatingPointError) as exc:
        out.discard()
        print(f"dtc {args.command}: training failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except BaseException:
        out.discard()
        raise
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
