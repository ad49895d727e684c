"""Command-line interface: ``hgn <command> [options]``.

Reports are ``key=value`` lines on stdout; tabular data goes to tab-separated
files next to the rendered figures.  Failures print ``error: category=<c>
message=<m>`` on stderr and exit 1; usage errors exit 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import evaluation, synthgen, trainer
from .losses import LossWeights
from .netcore import engine
from .netcore.gradcheck import grad_check
from .netcore.network import (CheckpointError, ConfigError, NetworkConfig, init_params,
                              load_checkpoint, save_checkpoint)

log = logging.getLogger("hybridgaze")

GRADCHECK_DEFAULTS = {"input_size": [8, 12], "widths": [4, 6], "mode": "HGN+UM", "dtype": "float64",
                      "tolerance": 1e-3, "samples": 200, "batch": 4}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration

CONFIG_SECTIONS = {"synth", "reallike", "train", "gradcheck"}


def load_config(path) -> dict:
    """Read a JSON or YAML config file (by extension) into a plain dict."""
    if path is None:
        return {}
    text = Path(path).read_text()
    if str(path).endswith((".yml", ".yaml")):
        import yaml
        data = yaml.safe_load(text) or {}
    else:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    unknown = set(data) - CONFIG_SECTIONS
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    for name, section in data.items():
        if not isinstance(section, dict):
            raise ConfigError(f"{path}: section [{name}] must be a mapping")
    return data


def _build(cls, d: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def synth_config(cfg: dict, seed=None, count=None) -> synthgen.SynthConfig:
    d = dict(cfg.get("synth", {}))
    if seed is not None:
        d["seed"] = seed
    if count is not None:
        d["count"] = count
    try:
        return _build(synthgen.SynthConfig, d, "synth")
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def reallike_spec(cfg: dict) -> tuple[float, synthgen.DegradationSpec]:
    d = dict(cfg.get("reallike", {}))
    fraction = float(d.pop("fraction", 0.0))
    degradation = d.pop("degradation", {})
    if d:
        raise ConfigError(f"unknown keys in [reallike]: {sorted(d)}")
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError("reallike.fraction must lie in [0, 1]")
    return fraction, _build(synthgen.DegradationSpec, degradation, "reallike.degradation")


def train_config(cfg: dict, seed=None, mode=None, epochs=None) -> trainer.TrainConfig:
    d = dict(cfg.get("train", {}))
    if "weights" in d:
        d["weights"] = _build(LossWeights, d["weights"], "train.weights")
    if "augment" in d:
        d["augment"] = _build(synthgen.AugmentPolicy, d["augment"], "train.augment")
    for k, v in (("seed", seed), ("mode", mode), ("epochs", epochs)):
        if v is not None:
            d[k] = v
    return _build(trainer.TrainConfig, d, "train")


def validate_config(cfg: dict) -> None:
    """Build every section once so typos fail fast whatever the subcommand."""
    synth_config(cfg)
    reallike_spec(cfg)
    tc = train_config(cfg)
    trainer.mode_spec(tc.mode)
    extra = set(cfg.get("gradcheck", {})) - set(GRADCHECK_DEFAULTS) - {"seed"}
    if extra:
        raise ConfigError(f"unknown keys in [gradcheck]: {sorted(extra)}")


# ---------------------------------------------------------------------------
# helpers

def _emit(pairs):
    for k, v in pairs:
        print(f"{k}={v}")


def _outdir(path) -> Path:
    if path is None:
        raise UsageError("--out is required")
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _require(args, *names):
    missing = [n for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + n for n in missing))


def _load_model(args):
    net, params, meta = load_checkpoint(args.checkpoint)
    mode = args.mode or meta.get("mode")
    if mode is None:
        raise ConfigError("checkpoint records no mode; pass --mode")
    trainer.mode_spec(mode)
    missing = set(trainer.mode_spec(mode).heads) - set(net.heads)
    if missing:
        raise ConfigError(f"mode {mode} needs heads {sorted(missing)} that the checkpoint lacks")
    return net, params, mode, bool(meta.get("histeq", False))


def _split(data: synthgen.Dataset):
    return data.subset(synthgen.Domain.SYNTHETIC), data.subset(synthgen.Domain.REALLIKE)


def _parse_list(text, conv):
    try:
        return [conv(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"cannot parse list {text!r}") from exc


# ---------------------------------------------------------------------------
# commands

def cmd_generate(args, cfg):
    _require(args, "out")
    sc = synth_config(cfg, args.seed, args.count)
    fraction, spec = reallike_spec(cfg)
    if args.reallike_fraction is not None:
        fraction = args.reallike_fraction
    data = synthgen.generate_dataset(sc, fraction, spec)
    synthgen.write_dataset(data, args.out)
    _emit([("status", "ok"), ("path", args.out), ("count", len(data)),
           ("synthetic", len(data.subset(synthgen.Domain.SYNTHETIC))),
           ("reallike", len(data.subset(synthgen.Domain.REALLIKE))),
           ("dataset", evaluation.dataset_identity(data))])


def cmd_train(args, cfg):
    _require(args, "dataset", "out")
    from . import plotting
    out = _outdir(args.out)
    tc = train_config(cfg, args.seed, args.mode, args.epochs)
    syn, real = _split(synthgen.read_dataset(args.dataset))
    val = synthgen.read_dataset(args.val) if args.val else None
    metrics_path = out / "metrics.tsv"
    with open(metrics_path, "w") as fh:
        fh.write(trainer.metrics_header() + "\n")

    def progress(m):
        with open(metrics_path, "a") as fh:
            fh.write(m.line() + "\n")
        log.info("epoch %d val=%.3f", m.epoch, m.val_angular_deg)

    ckdir = out if tc.checkpoint_every else None
    res = trainer.train(tc, syn if len(syn) else None, real if len(real) else None, val, ckdir, progress)
    save_checkpoint(out / "checkpoint.json", res.network, res.params, res.checkpoint_meta())
    if res.metrics:
        plotting.plot_training_curves(res.metrics, out / "training.png")
    last = res.metrics[-1] if res.metrics else None
    _emit([("status", "ok"), ("mode", tc.mode), ("epochs", tc.epochs),
           ("checkpoint", out / "checkpoint.json"), ("metrics", metrics_path),
           ("final_L_total", f"{last.L_total:.6g}" if last else "nan"),
           ("final_val_angular_deg", f"{last.val_angular_deg:.6g}" if last else "nan")])


def cmd_eval(args, cfg):
    _require(args, "checkpoint", "dataset")
    net, params, mode, histeq = _load_model(args)
    data = synthgen.read_dataset(args.dataset)
    rep = evaluation.evaluate(params, net, data, mode, args.labels, histeq)
    sys.stdout.write(rep.to_text())
    if args.out:
        out = _outdir(args.out)
        (out / "per_sample.tsv").write_text(rep.per_sample_text())
        (out / "report.txt").write_text(rep.to_text())
        print(f"per_sample={out / 'per_sample.tsv'}")


def cmd_quality(args, cfg):
    _require(args, "checkpoint", "dataset", "out")
    from . import plotting
    net, params, mode, histeq = _load_model(args)
    data = synthgen.read_dataset(args.dataset)
    quants = _parse_list(args.quantiles, float) if args.quantiles else evaluation.DEFAULT_QUANTILES
    hist = evaluation.quality_report(params, net, data, mode, quants, args.bins, histeq)
    out = _outdir(args.out)
    (out / "quality_hist.tsv").write_text(hist.histogram_text())
    (out / "manifest.tsv").write_text(hist.manifest_text())
    values = "#index\tquality\tdomain\n" + "".join(
        f"{i}\t{v:.6g}\t{synthgen.Domain(int(d)).name}\n" for i, (v, d) in enumerate(zip(hist.values, hist.domains)))
    (out / "quality_values.tsv").write_text(values)
    plotting.plot_quality_histogram(hist, out / "quality_hist.png")
    plotting.plot_quantile_gallery(data.images(), hist, out / "gallery.png")
    sys.stdout.write(hist.summary_text())
    _emit([("manifest", out / "manifest.tsv"), ("histogram", out / "quality_hist.tsv")])


def cmd_viz(args, cfg):
    _require(args, "checkpoint", "dataset", "index", "out")
    from . import plotting
    net, params, mode, histeq = _load_model(args)
    data = synthgen.read_dataset(args.dataset)
    if not 0 <= args.index < len(data):
        raise ConfigError(f"index {args.index} outside dataset of {len(data)} samples")
    s = data.samples[args.index]
    pred = trainer.predict(params, net, mode, s.image[None], histeq=histeq)
    lm = pred.landmarks[0] if pred.landmarks is not None else None
    origin = lm[0] if lm is not None else s.landmarks[0]
    err = float(evaluation.angular_error(s.gaze, pred.gaze[0]))
    plotting.visualize(s.image, s.gaze, pred.gaze[0], args.out, landmarks=lm, origin=origin,
                       title=f"#{args.index} {mode} error {err:.2f} deg")
    _emit([("status", "ok"), ("path", args.out), ("index", args.index), ("angular_deg", f"{err:.6f}")])


def cmd_gradcheck(args, cfg):
    g = {**GRADCHECK_DEFAULTS, **cfg.get("gradcheck", {})}
    seed = args.seed if args.seed is not None else int(g.get("seed", 0))
    mode = args.mode or g["mode"]
    tc = trainer.TrainConfig(mode=mode, dtype=g["dtype"], input_size=tuple(g["input_size"]),
                             widths=tuple(g["widths"]), seed=seed)
    net = replace(tc.network_config(), radius_prior=max(2.0, min(g["input_size"]) / 2))
    params = init_params(net, seed)
    batch = trainer.toy_batch(net, int(g["batch"]), seed)
    rep = grad_check(params, trainer.loss_builder(net, tc, batch), float(g["tolerance"]),
                     int(g["samples"]), seed=seed)
    print(rep.summary())
    _emit([("mode", mode), ("parameters", sum(p.size for p in params.values()))])
    if not rep.passed:
        raise CommandFailure("gradcheck-failed", f"max deviation {rep.max_deviation:.3e} > {rep.tolerance:.1e}")


def cmd_ablate(args, cfg):
    _require(args, "dataset", "test", "out")
    from . import plotting
    out = _outdir(args.out)
    tc = train_config(cfg, None, None, args.epochs)
    modes = _parse_list(args.modes, str)
    for m in modes:
        trainer.mode_spec(m)
    seeds = _parse_list(args.seeds, int)
    syn, real = _split(synthgen.read_dataset(args.dataset))
    test = synthgen.read_dataset(args.test)
    table = evaluation.run_ablation(
        tc, modes, seeds, syn if len(syn) else None, real if len(real) else None, test, args.labels,
        progress=lambda m, s, e: log.info("%s seed %d: %.3f deg", m, s, e))
    (out / "ablation.tsv").write_text(table.to_text())
    plotting.plot_ablation(table, out / "ablation.png")
    sys.stdout.write(table.to_text())
    _emit([("table", out / "ablation.tsv"), ("figure", out / "ablation.png")])


class CommandFailure(Exception):
    def __init__(self, category, message):
        super().__init__(message)
        self.category = category


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "quality": cmd_quality,
            "viz": cmd_viz, "gradcheck": cmd_gradcheck, "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or YAML config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--checkpoint")
    common.add_argument("--dataset")
    common.add_argument("--mode", choices=sorted(trainer.MODES))
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="hgn", description="Hybrid gaze network toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="render a synthetic dataset")
    g.add_argument("--count", type=int)
    g.add_argument("--reallike-fraction", type=float)

    t = sub.add_parser("train", parents=[common], help="train a model from a dataset")
    t.add_argument("--val", help="held-out dataset for per-epoch validation")
    t.add_argument("--epochs", type=int)

    e = sub.add_parser("eval", parents=[common], help="angular error of a checkpoint")
    e.add_argument("--labels", choices=["observed", "clean"], default="observed")

    q = sub.add_parser("quality", parents=[common], help="uncertainty quality histogram and gallery")
    q.add_argument("--quantiles", help="comma-separated, e.g. 0,0.5,1")
    q.add_argument("--bins", type=int, default=20)

    v = sub.add_parser("viz", parents=[common], help="overlay prediction on one sample")
    v.add_argument("--index", type=int)

    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the full loss")

    a = sub.add_parser("ablate", parents=[common], help="train and compare several modes")
    a.add_argument("--test", help="held-out dataset")
    a.add_argument("--modes", default="B,B+U,HGN,HGN+UM")
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--epochs", type=int)
    a.add_argument("--labels", choices=["observed", "clean"], default="clean")
    return p


@contextmanager
def thread_limit():
    """Cap BLAS threads at HGN_THREADS (default 1) for reproducible reductions."""
    from threadpoolctl import threadpool_limits
    raw = os.environ.get("HGN_THREADS", "1")
    try:
        n = max(1, int(raw))
    except ValueError:
        raise UsageError(f"HGN_THREADS must be an integer, got {raw!r}")
    with threadpool_limits(limits=n):
        yield


def _fail(category: str, message) -> int:
    msg = str(message).replace("\n", " ")
    print(f"error: category={category} message={msg}", file=sys.stderr)
    return 1


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        with thread_limit():
            cfg = load_config(args.config)
            validate_config(cfg)
            COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"hgn: error: {exc}", file=sys.stderr)
        return 2
    except CommandFailure as exc:
        return _fail(exc.category, exc)
    except synthgen.DatasetError as exc:
        return _fail(f"dataset-{exc.code}", exc)
    except CheckpointError as exc:
        return _fail("checkpoint", exc)
    except ConfigError as exc:
        return _fail("config", exc)
    except trainer.TrainingError as exc:
        return _fail("training", exc)
    except engine.NonFiniteError as exc:
        return _fail("numeric", exc)
    except OSError as exc:
        return _fail("io", exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
