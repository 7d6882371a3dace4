"""Command-line entry point: simulate, train, eval, monitor, plot.

Every command reads an optional JSON run configuration (``--config``) with the
sections ``world``, ``model``, ``train``, ``monitor`` and ``simulate``, plus a
top-level ``seed``. Unknown keys are rejected.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .diffcore import ConfigurationError, NumericError, StateError
from .fieldsim import WorldConfig, anomaly_fraction, run_episode
from .metrics import InputError, MetricsReport, evaluate
from .model import Paad, PaadConfig, default_config
from .monitor import MonitorConfig, StreamError, process_stream, summarize
from .persist import FormatError, load_checkpoint, read_dataset, save_checkpoint, write_dataset
from .train import Arrays, TrainSettings, predict_arrays, prepare, split_by_episode, train

log = logging.getLogger("paad")


@dataclass(frozen=True)
class SimulateSettings:
    episodes: int = 10
    steps: int = 500


@dataclass
class RunConfig:
    model: PaadConfig = field(default_factory=default_config)
    world: WorldConfig = field(default_factory=WorldConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    monitor: MonitorConfig = field(default_factory=MonitorConfig)
    simulate: SimulateSettings = field(default_factory=SimulateSettings)
    seed: int = 0
    test_fraction: float = 0.0

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {"model", "world", "train", "monitor", "simulate", "seed", "test_fraction"}
        extra = set(d) - known
        if extra:
            raise ConfigurationError(f"unknown config sections {sorted(extra)}")
        rc = cls()
        if "model" in d:
            rc.model = PaadConfig.from_dict(_checked(PaadConfig, d["model"], "model"))
        for key, typ in (("world", WorldConfig), ("train", TrainSettings),
                         ("monitor", MonitorConfig), ("simulate", SimulateSettings)):
            if key in d:
                setattr(rc, key, typ(**_checked(typ, d[key], key)))
        rc.seed = int(d.get("seed", 0))
        rc.test_fraction = float(d.get("test_fraction", 0.0))
        if not 0.0 <= rc.test_fraction < 1.0:
            raise ConfigurationError("test_fraction must lie in [0, 1)")
        return rc

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: top level must be an object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return dict(model=self.model.to_dict(), world=self.world.to_dict(),
                    train=asdict(self.train), monitor=self.monitor.to_dict(),
                    simulate=asdict(self.simulate), seed=self.seed,
                    test_fraction=self.test_fraction)


def _checked(typ, d, section):
    if not isinstance(d, dict):
        raise ConfigurationError(f"section {section!r} must be an object")
    names = {f.name for f in fields(typ)}
    extra = set(d) - names
    if extra:
        raise ConfigurationError(f"unknown keys in {section!r}: {sorted(extra)}")
    return d


def _ablated(cfg: PaadConfig, args) -> PaadConfig:
    kw = {}
    if getattr(args, "fusion_mode", None):
        kw["fusion_mode"] = args.fusion_mode
    if getattr(args, "attention", None):
        kw["attention"] = args.attention
    if getattr(args, "no_reconstruction", False):
        kw["reconstruction"] = False
    if getattr(args, "path_view", None):
        kw["path_view"] = args.path_view
    return cfg.with_ablation(**kw) if kw else cfg


def _run_config(args) -> RunConfig:
    rc = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        rc.seed = args.seed
    rc.model = _ablated(rc.model, args)
    return rc


# ------------------------------------------------------------------ commands

def cmd_simulate(rc: RunConfig, out) -> dict:
    frames, episodes = [], []
    for e in range(rc.simulate.episodes):
        wc = replace(rc.world, seed=rc.seed * 1000 + e)
        ep = run_episode(wc, rc.simulate.steps, rc.model.camera, rc.model.horizon)
        frames.extend(ep)
        episodes.extend([e] * len(ep))
    write_dataset(out, frames, episodes, rc.model.horizon, rc.model.image_shape, rc.model.lidar_len)
    frac = anomaly_fraction(frames) if frames else 0.0
    return dict(frames=len(frames), episodes=rc.simulate.episodes, anomaly_fraction=frac)


def _check_shapes(cfg: PaadConfig, ds):
    h = ds.header
    if (h.horizon, h.image_h, h.image_w, h.lidar_len) != (cfg.horizon, cfg.image_h, cfg.image_w,
                                                          cfg.lidar_len):
        raise ConfigurationError(
            f"dataset holds T={h.horizon} image {h.image_h}x{h.image_w} lidar {h.lidar_len}; "
            f"model expects T={cfg.horizon} image {cfg.image_h}x{cfg.image_w} "
            f"lidar {cfg.lidar_len}")


def cmd_train(rc: RunConfig, dataset, out, resume=None, on_epoch=None):
    ds = read_dataset(dataset)
    if len(ds) == 0:
        raise InputError("dataset is empty")
    if resume:
        model = load_checkpoint(resume)
    else:
        model = Paad(replace(rc.model, init_seed=rc.seed))
    _check_shapes(model.config, ds)
    rng = np.random.default_rng(rc.seed)
    if rc.test_fraction > 0:
        train_idx, test_idx = split_by_episode(ds.episodes, rc.test_fraction, rng)
    else:
        train_idx, test_idx = np.arange(len(ds)), np.zeros(0, dtype=int)
    data = prepare(ds.frames, model)
    try:
        result = train(model, data, replace(rc.train, seed=rc.seed), indices=train_idx,
                       on_epoch=on_epoch)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    save_checkpoint(out, model)
    summary = dict(steps=result.steps, train_frames=len(train_idx), test_frames=len(test_idx),
                   epochs=[asdict(e) for e in result.epochs])
    if len(test_idx):
        y = data.labels[test_idx]
        if 0 < y.sum() < y.size:
            sub = Arrays(data.images[test_idx], data.lidar[test_idx], data.paths[test_idx], y)
            r = evaluate(predict_arrays(model, sub), y)
            summary["test"] = dict(f1=r.f1, pr_auc=r.pr_auc)
    return model, summary


def report_dict(name: str, cfg: PaadConfig, r: MetricsReport, gamma: float) -> dict:
    def kde(d):
        return None if d is None else dict(grid=d.grid.tolist(), density=d.density.tolist(),
                                           bandwidth=d.bandwidth)
    return dict(name=name, fusion_mode=cfg.fusion_mode, attention=cfg.attention,
                reconstruction=cfg.reconstruction, path_view=cfg.path_view,
                precision=r.precision, recall=r.recall, f1=r.f1, pr_auc=r.pr_auc,
                n_points=r.n_points, n_positive=r.n_positive, gamma=gamma,
                pr_curve=dict(threshold=r.curve.thresholds.tolist(),
                              precision=r.curve.precision.tolist(),
                              recall=r.curve.recall.tolist()),
                kde_normal=kde(r.kde_normal), kde_failure=kde(r.kde_failure))


def cmd_eval(checkpoints, dataset, gamma=0.9, grid_size=200) -> dict:
    ds = read_dataset(dataset)
    rows = []
    for ck in checkpoints:
        model = load_checkpoint(ck)
        _check_shapes(model.config, ds)
        data = prepare(ds.frames, model)
        r = evaluate(predict_arrays(model, data), data.labels, grid_size)
        rows.append(report_dict(Path(ck).stem, model.config, r, gamma))
    return dict(dataset=str(dataset), frames=len(ds), variants=rows)


def grid_table(report: dict) -> str:
    head = "variant\tfusion_mode\tattention\treconstruction\tpath_view\tf1\tpr_auc"
    lines = [head]
    for v in report["variants"]:
        lines.append(f"{v['name']}\t{v['fusion_mode']}\t{v['attention']}\t"
                     f"{int(v['reconstruction'])}\t{v['path_view']}\t{v['f1']:.4f}\t"
                     f"{v['pr_auc']:.4f}")
    return "\n".join(lines) + "\n"


def cmd_monitor(checkpoint, dataset, mcfg: MonitorConfig):
    ds = read_dataset(dataset)
    model = load_checkpoint(checkpoint)
    _check_shapes(model.config, ds)
    # one stream per episode, each with its own trigger state
    events, alerts, anomalous = [], [], []
    for ep in np.unique(ds.episodes):
        frames = [ds.frames[i] for i in np.flatnonzero(ds.episodes == ep)]
        elog = process_stream(frames, model, mcfg)
        events.extend(elog.events)
        alerts.extend(e.alert for e in elog.events)
        anomalous.extend(f.anomalous for f in frames)
        # a window must not run across an episode boundary
        alerts.append(False)
        anomalous.append(False)
    summary = summarize(alerts, anomalous)
    return events, summary


def cmd_plot(report_path, out_dir) -> list[Path]:
    report = json.loads(Path(report_path).read_text())
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for v in report["variants"]:
        c = v["pr_curve"]
        p = out_dir / f"{v['name']}_pr.tsv"
        rows = ["threshold\tprecision\trecall"]
        rows += [f"{t!r}\t{pr!r}\t{rc!r}" for t, pr, rc in
                 zip(c["threshold"], c["precision"], c["recall"])]
        p.write_text("\n".join(rows) + "\n")
        written.append(p)
        if v["kde_normal"] and v["kde_failure"]:
            p = out_dir / f"{v['name']}_kde.tsv"
            rows = ["x\tnormal\tfailure"]
            rows += [f"{x!r}\t{a!r}\t{b!r}" for x, a, b in
                     zip(v["kde_normal"]["grid"], v["kde_normal"]["density"],
                         v["kde_failure"]["density"])]
            p.write_text("\n".join(rows) + "\n")
            written.append(p)
    return written


# ------------------------------------------------------------------ argparse

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="paad", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, ablation=False):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.add_argument("--out", required=True)
        if ablation:
            sp.add_argument("--fusion-mode", choices=("both", "lidar_only", "camera_only"))
            sp.add_argument("--attention", choices=("mha", "mlp"))
            sp.add_argument("--no-reconstruction", action="store_true")
            sp.add_argument("--path-view", choices=("front", "bev"))

    sp = sub.add_parser("simulate", help="write a simulated dataset")
    common(sp)
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--steps", type=int)

    sp = sub.add_parser("train", help="train a model and write a checkpoint")
    common(sp, ablation=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--resume", help="continue from this checkpoint")
    sp.add_argument("--epochs", type=int)

    sp = sub.add_parser("eval", help="metrics for one or more checkpoints")
    common(sp)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--checkpoint", action="append", required=True)

    sp = sub.add_parser("monitor", help="run the runtime monitor over a dataset")
    common(sp)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--checkpoint", required=True)

    sp = sub.add_parser("plot", help="emit plot data from an eval report")
    sp.add_argument("--report", required=True)
    sp.add_argument("--out", required=True)
    return p


def run(args) -> int:
    if args.command == "plot":
        for path in cmd_plot(args.report, args.out):
            print(path)
        return 0
    rc = _run_config(args)
    print(f"seed {rc.seed}")
    if args.command == "simulate":
        if args.episodes is not None or args.steps is not None:
            rc.simulate = SimulateSettings(
                rc.simulate.episodes if args.episodes is None else args.episodes,
                rc.simulate.steps if args.steps is None else args.steps)
        s = cmd_simulate(rc, args.out)
        print(f"frames {s['frames']} episodes {s['episodes']} "
              f"anomaly_fraction {s['anomaly_fraction']:.4f}")
    elif args.command == "train":
        if args.epochs is not None:
            rc.train = replace(rc.train, epochs=args.epochs)

        def show(e):
            print(f"epoch {e.epoch} steps {e.steps} bce {e.bce:.4f} recon_nll {e.recon_nll:.4f} "
                  f"kl {e.kl:.4f} total {e.total:.4f} mean_bce {e.mean_bce:.4f}", flush=True)
        _, s = cmd_train(rc, args.dataset, args.out, args.resume, on_epoch=show)
        if "test" in s:
            print(f"test f1 {s['test']['f1']:.4f} pr_auc {s['test']['pr_auc']:.4f}")
    elif args.command == "eval":
        report = cmd_eval(args.checkpoint, args.dataset, rc.monitor.gamma)
        Path(args.out).write_text(json.dumps(report, indent=1))
        sys.stdout.write(grid_table(report))
    elif args.command == "monitor":
        events, summary = cmd_monitor(args.checkpoint, args.dataset, rc.monitor)
        Path(args.out).write_text("".join(e.line() + "\n" for e in events))
        sys.stdout.write(summary.text())
    return 0


ERRORS = (ConfigurationError, InputError, FormatError, StreamError, NumericError, StateError,
          OSError, ValueError, KeyError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ERRORS as exc:
        print(f"paad {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
