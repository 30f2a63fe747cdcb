"""Command-line entry point: train, upsample, eval, gradcheck and ablate.

Exit codes: 0 success, 1 user error (bad flag, bad file, bad config),
2 internal invariant violation (failed gradient check, diverged training,
anything unexpected).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from threadpoolctl import threadpool_limits

from . import gradcheck
from .geometry import PointCloud
from .network import (
    CheckpointError,
    NetworkParams,
    count_parameters,
    default_stage_configs,
    load_checkpoint,
    parameter_bytes,
    save_checkpoint,
)
from .pipeline import (
    CloudFormatError,
    PatchSet,
    evaluate,
    manifest_patchset,
    mesh_from_cloud,
    parse_toy_uri,
    read_cloud,
    toy_patchset,
    upsample_cloud,
    write_cloud,
)
from .tensor import DimensionError
from .training import (
    SUPERVISION_MODES,
    PatchEvaluation,
    TrainConfig,
    TrainingDiverged,
    TrainReport,
    evaluate_patches,
    train,
)

log = logging.getLogger("cascadepu")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2


class UserError(Exception):
    """Bad input from the command line, a config file or a data file."""


# ----------------------------------------------------------------- run config

def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


@dataclass(frozen=True)
class Key:
    name: str
    parse: Callable[[str], object]
    default: object
    doc: str
    source: str


KEYS: tuple[Key, ...] = (
    Key("seed", int, 0, "seed for initialisation, shape synthesis and input subsets", "artifact plumbing"),
    Key("dataset", str, "toy://sphere,torus,box",
        "toy://NAMES (sphere, torus, box, plane or all) or a manifest of dense clouds",
        "artifact plumbing; toy shapes stand in for the training meshes"),
    Key("patches_per_shape", int, 64, "ground-truth patches cut per toy shape or manifest cloud",
        "training protocol: patches cut from each training mesh"),
    Key("heldout_patches_per_shape", int, 8, "patches per held-out toy shape for evaluation",
        "artifact plumbing"),
    Key("epochs", int, 100, "training epochs", "training protocol: 100 epochs"),
    Key("batch_size", int, 1, "patches per optimiser step",
        "training protocol uses 64 or 32; 1 suits desk-scale runs"),
    Key("lr0", float, 1e-3, "initial learning rate", "training protocol: starts at 0.001"),
    Key("lr_decay", float, 0.7, "step decay factor", "training protocol: decay rate 0.7"),
    Key("decay_interval_iters", int, 0,
        "iterations between decays; 0 keeps the reference 50k-of-107.8k fraction of the run",
        "training protocol: every 50k iterations"),
    Key("patch_gt_size", int, 1024, "ground-truth points per training patch",
        "training protocol: 1,024 ground-truth points per patch"),
    Key("patch_input_size", int, 256, "sparse input points per training patch",
        "training protocol: x4 from 256 input points"),
    Key("supervision", str, "all_stages", "all_stages sums every stage's Chamfer loss; last_stage uses only the final one",
        "loss definition; last_stage is the supervision ablation"),
    Key("stages", int, 3, "cascade depth: 2 -> rates (2,2), 3 -> (2,2,1), 4 -> (2,2,1,1)",
        "cascade overview; 2 and 4 are the stage-count ablation"),
    Key("k_attention", int, 16, "neighbours per point in local attention", "feature extraction network details"),
    Key("extractor", str, "transformer", "transformer or mlp_only (dense_gcn_stub is rejected)",
        "feature extractor ablation"),
    Key("residual", _bool, True, "add predicted offsets to duplicated inputs instead of regressing coordinates",
        "residual coordinate reconstruction; off is the residual ablation"),
    Key("position_encoding", _bool, True, "relative position encoding inside attention",
        "local attention definition"),
    Key("beta1", float, 0.9, "Adam first-moment decay", "Adam defaults"),
    Key("beta2", float, 0.999, "Adam second-moment decay", "Adam defaults"),
    Key("eps", float, 1e-8, "Adam denominator epsilon", "Adam defaults"),
    Key("grad_clip", float, 0.0, "global gradient-norm clip; 0 disables", "artifact plumbing"),
    Key("checkpoint_every", int, 0, "also save a checkpoint every N epochs; 0 disables", "artifact plumbing"),
    Key("patch_size", int, 256, "points per inference patch", "patch-based inference; 256 matches training inputs"),
    Key("num_seeds", int, 0, "inference patch seeds; 0 grows from 3M/patch_size until every point is covered",
        "patch-based inference; seed count is not given, default documented here"),
    Key("ablation_seeds", int, 1, "seeds averaged per ablation variant, counting up from seed",
        "artifact plumbing"),
    Key("output_root", str, "runs", "folder holding run directories", "artifact plumbing"),
)
KEY_INDEX = {k.name: k for k in KEYS}
# Keys that do not change what a run computes, so they stay out of the run hash.
_UNHASHED = ("seed", "output_root")


class RunConfig(dict):
    """Flat ``key = value`` settings; every key has a default and unknown keys are errors."""

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls({k.name: k.default for k in KEYS})

    def set(self, name: str, text: str, origin: str = "override") -> None:
        key = KEY_INDEX.get(name)
        if key is None:
            raise UserError(f"{origin}: unknown config key {name!r}")
        try:
            self[name] = key.parse(text)
        except ValueError as exc:
            raise UserError(f"{origin}: bad value for {name}: {exc}") from None

    @classmethod
    def from_text(cls, text: str, origin: str = "<config>") -> "RunConfig":
        cfg = cls.defaults()
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UserError(f"{origin}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            name, value = (s.strip() for s in line.split("=", 1))
            cfg.set(name, value, f"{origin}:{lineno}")
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise UserError(f"config file not found: {path}")
        return cls.from_text(path.read_text(), str(path))

    def to_text(self) -> str:
        lines = []
        for k in KEYS:
            v = self[k.name]
            lines.append(f"{k.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        body = "\n".join(l for l in self.to_text().splitlines() if l.split(" = ")[0] not in _UNHASHED)
        return hashlib.sha256(body.encode()).hexdigest()[:12]

    def run_dir(self) -> Path:
        return Path(self["output_root"]) / f"{self.digest()}-seed{self['seed']}"

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(
                epochs=self["epochs"], batch_size=self["batch_size"], lr0=self["lr0"],
                lr_decay=self["lr_decay"], decay_interval_iters=self["decay_interval_iters"],
                patch_gt_size=self["patch_gt_size"], patch_input_size=self["patch_input_size"],
                seed=self["seed"], supervision_mode=self["supervision"], beta1=self["beta1"],
                beta2=self["beta2"], eps=self["eps"], grad_clip=self["grad_clip"],
                checkpoint_every=self["checkpoint_every"])
        except ValueError as exc:
            raise UserError(str(exc)) from None

    def stage_configs(self):
        try:
            return default_stage_configs(
                self["stages"], k_attention=self["k_attention"], feature_extractor_kind=self["extractor"],
                use_residual=self["residual"], use_position_encoding=self["position_encoding"])
        except (ValueError, NotImplementedError) as exc:
            raise UserError(str(exc)) from None


def keys_help() -> str:
    width = max(len(k.name) for k in KEYS)
    rows = ["config keys (key = default: meaning [origin]):"]
    for k in KEYS:
        default = str(k.default).lower() if isinstance(k.default, bool) else k.default
        rows.append(f"  {k.name:<{width}} = {default}: {k.doc} [{k.source}]")
    return "\n".join(rows)


# ----------------------------------------------------------------- datasets

def load_dataset(cfg: RunConfig) -> PatchSet:
    uri = cfg["dataset"]
    try:
        if uri.startswith("toy://"):
            return toy_patchset(parse_toy_uri(uri), cfg["patches_per_shape"], cfg["patch_gt_size"], cfg["seed"])
        return manifest_patchset(uri, cfg["patches_per_shape"], cfg["patch_gt_size"])
    except FileNotFoundError as exc:
        raise UserError(str(exc)) from None
    except (ValueError, CloudFormatError) as exc:
        raise UserError(f"dataset {uri}: {exc}") from None


def heldout_dataset(cfg: RunConfig) -> PatchSet | None:
    """Toy shapes of the same families with different proportions; none for manifests."""
    uri = cfg["dataset"]
    if not uri.startswith("toy://") or cfg["heldout_patches_per_shape"] < 1:
        return None
    return toy_patchset(parse_toy_uri(uri), cfg["heldout_patches_per_shape"], cfg["patch_gt_size"],
                        cfg["seed"] + 1, heldout=True)


# ----------------------------------------------------------------- commands

def run_training(cfg: RunConfig, run_dir: Path | None = None) -> tuple[NetworkParams, TrainReport]:
    tcfg = cfg.train_config()
    configs = cfg.stage_configs()
    data = load_dataset(cfg)
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.txt").write_text(cfg.to_text())
    net, report = train(data, tcfg, configs, checkpoint_dir=run_dir)
    if run_dir is not None:
        save_checkpoint(net, run_dir / "checkpoint.bin")
        report.write(run_dir / "train_report.tsv")
    return net, report


def cmd_train(args, cfg: RunConfig) -> int:
    run_dir = cfg.run_dir()
    net, report = run_training(cfg, run_dir)
    print(report.to_text(), end="")
    print(f"parameters: {count_parameters(net)} ({parameter_bytes(net)} bytes as float64)")
    held = heldout_dataset(cfg)
    if held is not None:
        ev = evaluate_patches(net, held, cfg.train_config(), seed=cfg["seed"])
        (run_dir / "heldout.txt").write_text(_heldout_table(ev))
        print(_heldout_table(ev), end="")
    print(f"run directory: {run_dir}")
    return EXIT_OK


def _heldout_table(ev: PatchEvaluation) -> str:
    cells = " ".join(f"{v * 1e3:.4f}" for v in ev.stage_cd)
    return (f"heldout cd x1e3 per stage: {cells}\n"
            f"duplicate baseline cd x1e3: {ev.baseline_cd * 1e3:.4f}\n"
            f"baseline / final: {ev.baseline_ratio:.3f}\n")


def _read(path: str) -> PointCloud:
    p = Path(path)
    if not p.exists():
        raise UserError(f"file not found: {p}")
    try:
        return read_cloud(p)
    except (CloudFormatError, ValueError) as exc:
        raise UserError(str(exc)) from None


def cmd_upsample(args, cfg: RunConfig) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise UserError(f"checkpoint not found: {ckpt}")
    try:
        net = load_checkpoint(ckpt)
    except CheckpointError as exc:
        raise UserError(str(exc)) from None
    cloud = _read(args.input)
    num_seeds = cfg["num_seeds"] or None
    try:
        out = upsample_cloud(cloud, net, args.rate, use_refiner=not args.no_refiner,
                             patch_size=cfg["patch_size"], num_seeds=num_seeds)
    except ValueError as exc:
        raise UserError(str(exc)) from None
    write_cloud(out, args.output)
    print(f"{len(cloud)} -> {len(out)} points written to {args.output}")
    return EXIT_OK


ABSENT = "absent"


def format_metrics(values: dict) -> str:
    """Fixed-width two-line table of the metrics scaled by 1e3."""
    head = "".join(f"{name:>12}" for name in ("cd", "hd", "p2f"))
    cells = "".join(f"{ABSENT:>12}" if values[n] is None else f"{values[n]:>12.3f}" for n in ("cd", "hd", "p2f"))
    return head + "\n" + cells + "\n"


def cmd_eval(args, cfg: RunConfig) -> int:
    pred, gt = _read(args.pred), _read(args.gt)
    if len(pred) == 0 or len(gt) == 0:
        raise UserError("eval: empty point cloud")
    surface = None
    if args.mesh:
        mesh_cloud = _read(args.mesh)
        try:
            surface = mesh_from_cloud(mesh_cloud)
        except ValueError as exc:
            raise UserError(f"{args.mesh}: {exc}") from None
    metrics = evaluate(pred, gt, surface).scaled(1e3)
    if args.json:
        print(json.dumps({**metrics.as_dict(), "scale": 1000}, sort_keys=True))
    else:
        print(format_metrics(metrics.as_dict()), end="")
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    try:
        results = gradcheck.run_suite(args.seed, args.corrupt)
    except ValueError as exc:
        raise UserError(str(exc)) from None
    width = max(len(r.op) for r in results)
    print(f"{'op':<{width}}  {'worst_rel_err':>13}  {'checked':>7}  {'skipped':>7}  status")
    for r in results:
        print(f"{r.op:<{width}}  {r.worst:>13.3e}  {r.checked:>7d}  {r.skipped:>7d}  {'ok' if r.ok else 'FAIL'}")
    failed = [r.op for r in results if not r.ok]
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


# ----------------------------------------------------------------- ablations

ABLATION_AXES = {
    # axis -> (config key, reference value, alternative value); reference is expected to be no worse.
    "stages": ("stages", 3, 2),
    "residual": ("residual", True, False),
    "supervision": ("supervision", "all_stages", "last_stage"),
    "extractor": ("extractor", "transformer", "mlp_only"),
}
TIE_FRACTION = 0.05


@dataclass(frozen=True)
class AblationResult:
    axis: str
    reference: object
    alternative: object
    reference_cd: float
    alternative_cd: float
    reference_runs: tuple = ()
    alternative_runs: tuple = ()

    @property
    def verdict(self) -> str:
        """``holds`` when the reference is better by more than the tie band,
        ``inconclusive`` inside it, ``reversed`` otherwise."""
        lo, hi = sorted((self.reference_cd, self.alternative_cd))
        if hi - lo <= TIE_FRACTION * hi:
            return "inconclusive"
        return "holds" if self.reference_cd < self.alternative_cd else "reversed"

    def row(self) -> str:
        return (f"{self.axis:<12} {str(self.reference):>12} {self.reference_cd * 1e3:>10.4f} "
                f"{str(self.alternative):>12} {self.alternative_cd * 1e3:>10.4f}  {self.verdict}")

    def seed_rows(self) -> list[str]:
        return [f"  seed {i}: {a * 1e3:.4f} vs {b * 1e3:.4f}"
                for i, (a, b) in enumerate(zip(self.reference_runs, self.alternative_runs))]


ABLATION_HEADER = (f"{'axis':<12} {'reference':>12} {'cd x1e3':>10} {'alternative':>12} {'cd x1e3':>10}  verdict")


def ablation_score(cfg: RunConfig) -> float:
    """Held-out final-stage CD of a freshly trained model (training patches
    when the dataset has no held-out split)."""
    net, _ = run_training(cfg)
    held = heldout_dataset(cfg) or load_dataset(cfg)
    return evaluate_patches(net, held, cfg.train_config(), seed=cfg["seed"]).final_cd


def run_ablation(cfg: RunConfig, axis: str, cache: dict | None = None) -> AblationResult:
    """Train the reference and the alternative setting on identical data and
    seed and compare their scores, averaged over ``ablation_seeds`` seeds
    counting up from ``seed``. ``cache`` maps (config digest, seed) to a
    score so axes sharing a reference train it once."""
    if axis not in ABLATION_AXES:
        raise UserError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_AXES)}")
    if cfg["ablation_seeds"] < 1:
        raise UserError(f"ablation_seeds must be at least 1, got {cfg['ablation_seeds']}")
    cache = {} if cache is None else cache
    key, ref, alt = ABLATION_AXES[axis]
    runs = []
    for value in (ref, alt):
        scores = []
        for offset in range(cfg["ablation_seeds"]):
            variant = RunConfig(cfg)
            variant[key] = value
            variant["seed"] = cfg["seed"] + offset
            tag = (variant.digest(), variant["seed"])
            if tag not in cache:
                cache[tag] = ablation_score(variant)
            scores.append(cache[tag])
        runs.append(tuple(scores))
    return AblationResult(axis, ref, alt, sum(runs[0]) / len(runs[0]), sum(runs[1]) / len(runs[1]),
                          runs[0], runs[1])


def cmd_ablate(args, cfg: RunConfig) -> int:
    axes = list(ABLATION_AXES) if args.axis == "all" else [args.axis]
    rows = [ABLATION_HEADER]
    print(ABLATION_HEADER)
    cache: dict = {}
    for axis in axes:
        res = run_ablation(cfg, axis, cache)
        rows += [res.row(), *res.seed_rows()]
        print(res.row(), flush=True)
    run_dir = cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(cfg.to_text())
    (run_dir / f"ablation_{args.axis}.txt").write_text("\n".join(rows) + "\n")
    return EXIT_OK


# ----------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USER, f"{self.prog}: error: {message}\n")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat 'key = value' file; see the key list below")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cascadepu", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter, epilog=keys_help())
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads for numerical kernels (default 1, bit-reproducible)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    fmt = argparse.RawDescriptionHelpFormatter
    p = sub.add_parser("train", help="train a cascade and write a checkpoint and loss report",
                       formatter_class=fmt, epilog=keys_help())
    _add_config_flags(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--dataset", help="toy://NAMES or a manifest path")
    p.add_argument("--supervision", choices=SUPERVISION_MODES)
    p.add_argument("--stages", type=int, choices=(2, 3, 4))
    p.add_argument("--seed", type=int)
    p.add_argument("--output-root", dest="output_root")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("upsample", help="patch-wise x4 or x16 upsampling of a cloud",
                       formatter_class=fmt, epilog=keys_help())
    _add_config_flags(p)
    p.add_argument("checkpoint")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--rate", type=int, choices=(4, 16), default=4)
    p.add_argument("--no-refiner", action="store_true", help="skip the final r=1 refinement stage")
    p.set_defaults(func=cmd_upsample)

    p = sub.add_parser("eval", help="CD, HD and P2F (x1e3) of a prediction against ground truth")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--mesh", help="OFF mesh of the true surface, for P2F")
    p.add_argument("--json", action="store_true", help="print one JSON object instead of the table")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable operation")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", choices=gradcheck.OPERATIONS, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train paired runs differing in one setting and compare",
                       formatter_class=fmt, epilog=keys_help())
    _add_config_flags(p)
    p.add_argument("--axis", choices=(*ABLATION_AXES, "all"), default="all")
    p.add_argument("--epochs", type=int)
    p.add_argument("--dataset")
    p.add_argument("--seed", type=int)
    p.add_argument("--output-root", dest="output_root")
    p.set_defaults(func=cmd_ablate)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig.defaults()
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise UserError(f"--set expects KEY=VALUE, got {item!r}")
        name, value = item.split("=", 1)
        cfg.set(name.strip(), value.strip(), "--set")
    for name in ("epochs", "dataset", "supervision", "stages", "seed", "output_root"):
        value = getattr(args, name, None)
        if value is not None and not (name == "seed" and args.command == "gradcheck"):
            cfg[name] = value
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("cascadepu: error: --threads must be at least 1", file=sys.stderr)
        return EXIT_USER
    try:
        cfg = resolve_config(args)
        with threadpool_limits(limits=args.threads):
            return args.func(args, cfg)
    except UserError as exc:
        print(f"cascadepu: error: {exc}", file=sys.stderr)
        return EXIT_USER
    except (TrainingDiverged, DimensionError) as exc:
        print(f"cascadepu: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # anything else is a bug, not a user mistake
        log.debug("unhandled", exc_info=True)
        print(f"cascadepu: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
