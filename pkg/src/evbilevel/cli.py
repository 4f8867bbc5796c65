"""``evbilevel`` command line: simulate, denoise, train, eval.

Every command takes ``--config`` (JSON run config), ``--out`` and ``--seed``,
writes the fully-resolved config to ``<out>/config.json`` and returns exit
code 0 only when all of its outputs were written.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import plotting
from .autodiff import ParamFormatError, ParamSet
from .batch import make_batch
from .bilevel import (
    STRATEGIES,
    TrainConfig,
    TrainState,
    TrainingDiverged,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)
from .denoise import DenoiseConfig, apply_mask, gradient_mask
from .events import EventFormatError, rasterize_counts, save_events
from .imageio import write_pnm
from .metrics import event_prf, image_report
from .networks import NetConfig, init_denoiser, init_enhancer
from .retinex import decompose, gradient_magnitude
from .sim import SimConfig, load_dataset, make_scene, moving_edge_demo, save_dataset

logger = logging.getLogger("evbilevel")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


# Run configuration ------------------------------------------------------------

_SECTIONS = {"sim": SimConfig, "denoise": DenoiseConfig, "net": NetConfig, "train": TrainConfig}
_SEEDED = ("sim", "net", "train")


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "run"
    dataset: str = "synthetic"  # or "demo": the single moving-edge scene
    n_train: int = 8
    n_test: int = 4
    strategy: str = "bilevel"
    gradient_source: str = "reference"  # image whose reflectance gradient drives the mask
    sim: SimConfig = field(default_factory=SimConfig)
    denoise: DenoiseConfig = field(default_factory=DenoiseConfig)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.dataset not in ("synthetic", "demo"):
            raise ConfigError(f"dataset must be 'synthetic' or 'demo', got {self.dataset!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {sorted(STRATEGIES)}, got {self.strategy!r}")
        if self.gradient_source not in ("reference", "low"):
            raise ConfigError("gradient_source must be 'reference' or 'low'")
        if self.n_train < 0 or self.n_test < 0 or self.n_train + self.n_test == 0:
            raise ConfigError("need at least one scene")
        for name in _SEEDED:
            section = getattr(self, name)
            if section.seed != self.seed:
                setattr(self, name, replace(section, seed=self.seed))

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        kwargs = {}
        for key, value in data.items():
            if key in _SECTIONS:
                kwargs[key] = _section(key, value)
            else:
                kwargs[key] = value
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sim"] = self.sim.to_dict()
        return d


def _section(name: str, value: dict):
    kind = _SECTIONS[name]
    if not isinstance(value, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in fields(kind)}
    unknown = sorted(set(value) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {unknown}")
    if "seed" in value and name in _SEEDED:
        raise ConfigError(f"set the top-level 'seed' instead of '{name}.seed'")
    try:
        return kind(**value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def resolve_config(args) -> RunConfig:
    data = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{args.config}: top level must be an object")
    if args.seed is not None:
        data["seed"] = args.seed
    if args.out is not None:
        data["out"] = args.out
    if getattr(args, "strategy", None) is not None:
        data["strategy"] = args.strategy
    if getattr(args, "iterations", None) is not None:
        data.setdefault("train", {})["iterations"] = args.iterations
    return RunConfig.from_dict(data)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c)) for c in columns])


def _map(fn, items, parallel: int):
    """Ordered map; results do not depend on ``parallel``."""
    if parallel > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


# simulate ---------------------------------------------------------------------


def _make_one(job):
    index, cfg = job
    return make_scene(index, cfg)


def cmd_simulate(cfg: RunConfig, out: Path, parallel: int = 1) -> dict:
    if cfg.dataset == "demo":
        samples = [moving_edge_demo(cfg=replace(cfg.sim, seed=cfg.seed))]
        splits = ["test"]
    else:
        n = cfg.n_train + cfg.n_test
        samples = _map(_make_one, [(i, cfg.sim) for i in range(n)], parallel)
        splits = ["train"] * cfg.n_train + ["test"] * cfg.n_test
    save_dataset(samples, out, cfg.sim, splits)
    return {"scenes": len(samples), "events": int(sum(len(s.events) for s in samples))}


# denoise ----------------------------------------------------------------------


DENOISE_COLUMNS = [
    "scene", "n_events", "n_kept", "kept_fraction",
    "precision", "recall", "f1", "baseline_precision", "baseline_f1", "flags",
]


def _denoise_one(job):
    sample, dcfg, source, out = job
    image = sample.high if source == "reference" else sample.low
    grad = gradient_magnitude(decompose(image).reflectance)
    mask = gradient_mask(grad, dcfg)
    t0, t1 = sample.window
    window = sample.events.window(t0, t1)
    kept = apply_mask(window, mask)
    d = out / sample.name
    d.mkdir(parents=True, exist_ok=True)
    save_events(kept, d / "events_denoised.evtxt", with_labels=kept.labeled)
    write_pnm(d / "mask.pgm", (mask != 0).astype(float), bits=8)
    plotting.denoise_panels(
        grad, mask, rasterize_counts(window, t0, t1), rasterize_counts(kept, t0, t1), d / "denoise.png"
    )
    row = {"scene": sample.name, "n_events": len(window), "n_kept": len(kept)}
    row["kept_fraction"] = len(kept) / len(window) if len(window) else 0.0
    flags = []
    if not len(kept):
        flags.append("empty_output")
    if window.labeled:
        prf, base = event_prf(kept, window), event_prf(window, window)
        row.update(precision=prf.precision, recall=prf.recall, f1=prf.f1)
        row.update(baseline_precision=base.precision, baseline_f1=base.f1)
        flags += prf.flags
    else:
        flags.append("unlabeled")
    row["flags"] = ";".join(flags)
    return row


def cmd_denoise(cfg: RunConfig, dataset: Path, out: Path, parallel: int = 1) -> dict:
    samples = load_dataset(dataset)
    if not samples:
        raise ConfigError(f"{dataset}: dataset has no scenes")
    rows = _map(_denoise_one, [(s, cfg.denoise, cfg.gradient_source, out) for s in samples], parallel)
    for row in rows:
        if "unlabeled" in row["flags"]:
            logger.warning("%s: events carry no labels; precision/recall skipped", row["scene"])
    _write_csv(out / "denoise.csv", rows, DENOISE_COLUMNS)
    scored = [r for r in rows if "f1" in r]
    summary = {"scenes": len(rows)}
    if scored:
        summary["mean_f1"] = float(np.mean([r["f1"] for r in scored]))
        summary["mean_baseline_f1"] = float(np.mean([r["baseline_f1"] for r in scored]))
    _write_json(out / "summary.json", summary)
    plotting.metric_bars(rows, out / "denoise_f1.png", keys=("f1", "baseline_f1", "kept_fraction"))
    return summary


# train ------------------------------------------------------------------------


def log_columns(strategy: str) -> list[str]:
    cols = ["iter", "psi", "phi", "grad_w_norm", "grad_theta_norm"]
    return cols + ["fd_scale"] if strategy == "bilevel" else cols


def _split(samples, name):
    chosen = [s for s in samples if s.extra.get("split") == name]
    return chosen or samples


def cmd_train(cfg: RunConfig, dataset: Path, out: Path, resume: Path | None = None) -> dict:
    samples = _split(load_dataset(dataset), "train")
    batch = make_batch(samples, cfg.denoise)
    if resume is not None:
        state = load_checkpoint(resume, cfg.train)
        _check_arch(cfg.net, state.w.merged(state.theta), resume)
    else:
        state = TrainState(init_denoiser(cfg.net), init_enhancer(cfg.net), cfg.train)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    def checkpoint(s):
        save_checkpoint(s, ckpt_dir / f"iter_{s.k:06d}.bevl")

    start = state.k
    try:
        train(cfg.strategy, state, batch, checkpoint=checkpoint)
    finally:
        _write_csv(out / "train_log.csv", state.log, log_columns(cfg.strategy))
    save_checkpoint(state, out / "final.bevl")
    if state.log:
        plotting.training_curves(state.log, out / "training_curves.png", title=cfg.strategy)
    manifest = {
        "strategy": cfg.strategy,
        "net": cfg.net.to_dict(),
        "train": cfg.train.to_dict(),
        "start_iter": start,
        "end_iter": state.k,
        "scenes": [s.name for s in samples],
    }
    _write_json(out / "manifest.json", manifest)
    last = state.log[-1] if state.log else {}
    return {"iterations": state.k - start, "final_psi": last.get("psi"), "final_phi": last.get("phi")}


# eval -------------------------------------------------------------------------


EVAL_COLUMNS = ["scene", "psnr", "psnr_star", "ssim", "event_precision", "event_recall", "event_f1"]


class ArchitectureMismatch(ConfigError):
    pass


def _check_arch(net: NetConfig, params: ParamSet, path) -> None:
    expected = init_denoiser(net).merged(init_enhancer(net))
    if expected.shapes() == {k: params[k].shape for k in params}:
        return
    found = {}
    manifest = Path(path).parent / "manifest.json"
    if manifest.exists():
        found = json.loads(manifest.read_text()).get("net", {})
    raise ArchitectureMismatch(
        f"checkpoint {path} does not match the configured network\n"
        f"  configured net: {json.dumps(net.to_dict(), sort_keys=True)}\n"
        f"  checkpoint net: {json.dumps(found, sort_keys=True) if found else '(no manifest; shapes differ)'}"
    )


def _event_prf_from_probs(sample, probs) -> tuple[float, float, float]:
    keep_pixels = np.argmax(probs, axis=0) != 2
    t0, t1 = sample.window
    window = sample.events.window(t0, t1)
    kept = apply_mask(window, keep_pixels.astype(float))
    if not window.labeled:
        return float("nan"), float("nan"), float("nan")
    prf = event_prf(kept, window)
    return prf.precision, prf.recall, prf.f1


def cmd_eval(cfg: RunConfig, dataset: Path, out: Path, checkpoint: Path | None, self_reference: bool = False) -> dict:
    samples = _split(load_dataset(dataset), "test")
    batch = make_batch(samples, cfg.denoise)
    if self_reference:
        enhanced = np.stack([s.high for s in samples])
        probs = None
    else:
        if checkpoint is None:
            raise ConfigError("eval needs --checkpoint (or --self-reference)")
        state = load_checkpoint(checkpoint, cfg.train)
        _check_arch(cfg.net, state.w.merged(state.theta), checkpoint)
        enhanced, probs = predict(state.w, state.theta, batch)
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, s in enumerate(samples):
        row = {"scene": s.name, **image_report(enhanced[i], s.high).to_dict()}
        if probs is not None:
            p, r, f = _event_prf_from_probs(s, probs[i])
            row.update(event_precision=p, event_recall=r, event_f1=f)
            cls = np.argmax(probs[i], axis=0)
            kept_counts = np.stack([cls == 0, cls == 1], axis=-1).astype(np.int64)
            write_pnm(img_dir / f"{s.name}_events.ppm", plotting.event_image(kept_counts), bits=8)
        t0, t1 = s.window
        write_pnm(img_dir / f"{s.name}_events_noisy.ppm", plotting.event_image(rasterize_counts(s.events, t0, t1)), bits=8)
        write_pnm(img_dir / f"{s.name}_triptych.ppm", plotting.triptych(s.low, enhanced[i], s.high), bits=8)
        rows.append(row)
    _write_csv(out / "metrics.csv", rows, EVAL_COLUMNS)
    summary = {k: float(np.mean([r[k] for r in rows])) for k in ("psnr", "psnr_star", "ssim")}
    summary["scenes"] = len(rows)
    _write_json(out / "summary.json", summary)
    plotting.metric_bars(rows, out / "metrics.png")
    return summary


# entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evbilevel", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, dataset=True):
        if dataset:
            p.add_argument("dataset", type=Path, help="dataset root written by 'simulate'")
        p.add_argument("--config", type=Path, help="JSON run config")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--parallel", type=int, default=1, help="worker processes for per-scene work")
        p.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("simulate", help="generate a synthetic dataset"), dataset=False)
    common(sub.add_parser("denoise", help="gradient-guided event filtering with a PRF report"))
    p = sub.add_parser("train", help="train denoiser and enhancer")
    common(p)
    p.add_argument("--strategy", choices=sorted(STRATEGIES))
    p.add_argument("--iterations", type=int, help="overrides train.iterations")
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p = sub.add_parser("eval", help="metrics, triptychs and event images on the test split")
    common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--self-reference", action="store_true", help="score the references against themselves")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "config.json", cfg.to_dict())
        if args.command == "simulate":
            result = cmd_simulate(cfg, out, args.parallel)
        elif args.command == "denoise":
            result = cmd_denoise(cfg, args.dataset, out, args.parallel)
        elif args.command == "train":
            result = cmd_train(cfg, args.dataset, out, args.resume)
        else:
            result = cmd_eval(cfg, args.dataset, out, args.checkpoint, args.self_reference)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParamFormatError, EventFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except OSError as exc:
        where = f" ({exc.filename})" if exc.filename else ""
        print(f"I/O error{where}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_FAIL
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
