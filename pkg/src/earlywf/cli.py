"""Command-line pipeline: ``earlywf <command>``.

All artifacts live under ``--output-dir``::

    data/                synthetic corpus            (synth)
    splits/{train,validation,test}/                  (split)
    features/{role}.npy  TAF cache                   (extract)
    target.json          attribution classifier      (train-target)
    temporal_profiles.json, heatmap.csv              (attribute)
    augmented/           training set + variants     (augment)
    encoder.npz          encoder checkpoint          (train)
    profiles.json        website spheres             (profile)
    verdicts.jsonl       engine verdicts             (replay)
    sweep.csv            loading-ratio table         (sweep)
    report_*.{csv,json}  metrics                     (eval)

Settings resolve as: built-in defaults, then the config file's ``params``
section, then its section for the command, then command-line flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import shutil
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attribution import (
    AttributionConfig,
    AttributionTarget,
    effective_range,
    export_heatmap_csv,
    load_temporal_profiles,
    save_temporal_profiles,
    temporal_profiles,
    train_attribution_target,
)
from .augmentation import AugmentConfig, augment_dataset
from .defenses import FrontConfig, SplitConfig, defend_dataset
from .encoder import EncoderConfig, EncoderModel, train_encoder
from .evaluation import (
    early_stage_sweep,
    evaluate_verdicts,
    plot_sweep,
    write_report,
    write_sweep_csv,
)
from .features import TafConfig, extract_taf, save_feature_cache
from .identifier import CLOSED_WORLD, OPEN_WORLD, EngineConfig, batch_replay, read_verdicts, write_verdicts
from .profiling import ProfileStore, build_profiles
from .traces import (
    ROLES,
    SynthSpec,
    load_dataset,
    save_dataset,
    split_dataset,
    synth_dataset,
)

EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION = 0, 1, 2

DEFAULTS = {
    # shared pipeline parameters
    "mu": 0.3,
    "lam": 0.6,
    "alpha": 2,
    "rho": 2000,
    "theta_ms": 80.0,
    "eta": 128,
    "gamma": 0.1,
    "tau": 0.12,
    "sigma": 80.0,
    "epsilon": 0.01,
    "mode": OPEN_WORLD,
    "seed": 0,
    # attribution
    "n_intervals": 100,
    "shap_samples": 200,
    "traces_per_site": 10,
    # encoder and training
    "conv2d_channels": [32, 64],
    "conv1d_channels": [64, 128, 128, 128],
    "window_pool": 4,
    "dropout": 0.1,
    "epochs": 30,
    "lr": 1e-3,
    "batch_size": 64,
    "per_site": 4,
    # synth
    "num_sites": 20,
    "synth_traces_per_site": 100,
    "unmonitored_sites": 0,
    # replay / sweep / eval
    "ratio": None,
    "ratios": [0.2, 0.4, 0.6, 0.8, 1.0],
    "r": 20.0,
    "role": "test",
    "include_unmonitored": True,
    "plot": False,
    # defend
    "defense": "front",
    "client_budget": 1000,
    "server_budget": 1000,
    "rayleigh_scale": 2.0,
    "num_paths": 3,
    "path": 0,
    "input": None,
    "target": None,
}

TYPES = {k: type(v) for k, v in DEFAULTS.items() if v is not None and not isinstance(v, list)}
TYPES["theta_ms"] = TYPES["lr"] = TYPES["sigma"] = TYPES["tau"] = float


class ValidationError(Exception):
    """Bad configuration or arguments (exit code 2)."""


class MissingArtifact(Exception):
    """A prerequisite file is absent (exit code 1)."""


class JsonFormatter(logging.Formatter):
    def format(self, record):
        entry = {
            "time": round(record.created, 3),
            "level": record.levelname.lower(),
            "stage": getattr(record, "stage", "cli"),
            "message": record.getMessage(),
        }
        entry.update(getattr(record, "fields", {}))
        return json.dumps(entry, default=str)


log = logging.getLogger("earlywf.cli")


def emit(stage, message, **fields):
    log.info(message, extra={"stage": stage, "fields": fields})


@dataclass
class Context:
    command: str
    out: Path
    cfg: dict
    dry_run: bool

    # artifact paths
    @property
    def data(self):
        return self.out / "data"

    def split_dir(self, role):
        return self.out / "splits" / role

    @property
    def features(self):
        return self.out / "features"

    @property
    def target(self):
        return self.out / "target.json"

    @property
    def temporal(self):
        return self.out / "temporal_profiles.json"

    @property
    def augmented(self):
        return self.out / "augmented"

    @property
    def encoder(self):
        return self.out / "encoder.npz"

    @property
    def profiles(self):
        return self.out / "profiles.json"

    @property
    def verdicts(self):
        return self.out / "verdicts.jsonl"

    # typed config views
    def taf(self):
        return TafConfig(self.cfg["rho"], self.cfg["theta_ms"])

    def attribution(self):
        c = self.cfg
        return AttributionConfig(
            n=c["n_intervals"], mu=c["mu"], lam=c["lam"], num_samples=c["shap_samples"],
            traces_per_site=c["traces_per_site"], seed=c["seed"],
        )

    def encoder_config(self):
        c = self.cfg
        return EncoderConfig(
            eta=c["eta"], gamma=c["gamma"], rho=c["rho"], theta_ms=c["theta_ms"],
            conv2d_channels=tuple(c["conv2d_channels"]), conv1d_channels=tuple(c["conv1d_channels"]),
            window_pool=c["window_pool"], dropout=c["dropout"],
        )

    def engine(self):
        c = self.cfg
        return EngineConfig(c["tau"], c["sigma"], c["epsilon"], c["mode"], self.taf())

    def defense_config(self):
        c = self.cfg
        if c["defense"] == "front":
            return FrontConfig(c["client_budget"], c["server_budget"], c["rayleigh_scale"], c["seed"])
        return SplitConfig(c["num_paths"], c["seed"], c["path"])


def require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{path} not found; run `earlywf {producer}` first")
    return path


def load_split(ctx, role):
    return load_dataset(require(ctx.split_dir(role), "split"), role=role)


def write_dataset(dataset, directory: Path):
    # replace a previous run's output so reruns are idempotent
    if directory.exists():
        shutil.rmtree(directory)
    return save_dataset(dataset, directory)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(ctx):
    c = ctx.cfg
    spec = SynthSpec(
        num_sites=c["num_sites"], traces_per_site=c["synth_traces_per_site"], seed=c["seed"],
        num_unmonitored_sites=c["unmonitored_sites"],
    )
    data = synth_dataset(spec)
    write_dataset(data, ctx.data)
    (ctx.data / "synth_spec.json").write_text(spec.to_json() + "\n")
    return {"traces": len(data), "sites": len(data.sites), "path": ctx.data}


def cmd_split(ctx):
    src = Path(ctx.cfg["input"]) if ctx.cfg["input"] else ctx.data
    data = load_dataset(require(src, "synth"))
    parts = split_dataset(data, seed=ctx.cfg["seed"])
    for part in parts:
        write_dataset(part, ctx.split_dir(part.role))
    return {role: len(p) for role, p in zip(ROLES, parts)}


def cmd_extract(ctx):
    taf = ctx.taf()
    counts = {}
    for role in ROLES:
        d = load_split(ctx, role)
        X = np.stack([extract_taf(t, taf) for t in d])
        save_feature_cache(ctx.features / role, X.astype(np.float32), [t.trace_id for t in d], taf)
        counts[role] = len(d)
    return counts


def cmd_train_target(ctx):
    train = load_split(ctx, "train")
    model = train_attribution_target(train, ctx.attribution())
    model.save(ctx.target)
    return {"classes": len(model.classes_), "path": ctx.target}


def cmd_attribute(ctx):
    acfg = ctx.attribution()
    model = AttributionTarget.load(require(ctx.target, "train-target"))
    profiles = temporal_profiles(model, load_split(ctx, "train"), acfg)
    ranges = {s: effective_range(p, acfg.mu, acfg.lam) for s, p in profiles.items()}
    save_temporal_profiles(profiles, ranges, ctx.temporal)
    export_heatmap_csv(profiles, ctx.out / "heatmap.csv")
    return {"ranges": {s: [r.s, r.t] for s, r in sorted(ranges.items())}}


def cmd_augment(ctx):
    _, ranges = load_temporal_profiles(require(ctx.temporal, "attribute"))
    train = load_split(ctx, "train").monitored()
    out = augment_dataset(train, AugmentConfig(ctx.cfg["alpha"], ranges, ctx.cfg["seed"]))
    write_dataset(out, ctx.augmented)
    return {"original": len(train), "augmented": len(out)}


def cmd_train(ctx):
    data = load_dataset(require(ctx.augmented, "augment"), role="train")
    c = ctx.cfg
    model = train_encoder(
        data, ctx.encoder_config(), epochs=c["epochs"], lr=c["lr"], seed=c["seed"],
        batch_size=c["batch_size"], per_site=c["per_site"],
    )
    model.save(ctx.encoder)
    return {"final_loss": model.metadata.get("final_loss"), "path": ctx.encoder}


def cmd_profile(ctx):
    model = EncoderModel.load(require(ctx.encoder, "train"))
    data = load_dataset(require(ctx.augmented, "augment"), role="train")
    store = build_profiles(model, data, model_ref=str(ctx.encoder))
    store.save(ctx.profiles)
    return {"sites": len(store.sites), "mean_radius": float(np.mean([p.radius for p in store.profiles.values()]))}


def _inference_inputs(ctx):
    model = EncoderModel.load(require(ctx.encoder, "train"))
    store = ProfileStore.load(require(ctx.profiles, "profile"))
    test = load_split(ctx, ctx.cfg["role"])
    if not ctx.cfg["include_unmonitored"]:
        test = test.monitored()
    return model, store, test


def cmd_replay(ctx):
    model, store, test = _inference_inputs(ctx)
    verdicts = batch_replay(store, model, test, ctx.engine(), ratio=ctx.cfg["ratio"])
    write_verdicts(verdicts, ctx.verdicts)
    vias = {}
    for v in verdicts:
        vias[v.via] = vias.get(v.via, 0) + 1
    return {"verdicts": len(verdicts), "via": vias, "path": ctx.verdicts}


def cmd_sweep(ctx):
    model, store, test = _inference_inputs(ctx)
    rows = early_stage_sweep(store, model, test, ctx.cfg["ratios"], ctx.engine())
    write_sweep_csv(rows, ctx.out / "sweep.csv")
    if ctx.cfg["plot"]:
        plot_sweep(rows, ctx.out / "sweep.png")
    return {"rows": [{k: round(v, 4) for k, v in r.items()} for r in rows]}


def cmd_defend(ctx):
    c = ctx.cfg
    src = Path(c["input"]) if c["input"] else ctx.data
    dst = Path(c["target"]) if c["target"] else ctx.out / f"data_{c['defense']}"
    data = load_dataset(require(src, "synth"))
    write_dataset(defend_dataset(data, c["defense"], ctx.defense_config()), dst)
    return {"traces": len(data), "path": dst}


def cmd_eval(ctx):
    verdicts = read_verdicts(require(ctx.verdicts, "replay"))
    sites = ProfileStore.load(ctx.profiles).sites if ctx.profiles.exists() else None
    report = evaluate_verdicts(verdicts, sites, r=ctx.cfg["r"])
    write_report(report, ctx.out)
    return report.summary()


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic corpus"),
    "split": (cmd_split, "stratified 8:1:1 split"),
    "extract": (cmd_extract, "cache TAF features for every split"),
    "train-target": (cmd_train_target, "fit the attribution classifier"),
    "attribute": (cmd_attribute, "temporal profiles and effective ranges"),
    "augment": (cmd_augment, "tail-mask augmentation of the training split"),
    "train": (cmd_train, "contrastive encoder training"),
    "profile": (cmd_profile, "build website spheres"),
    "replay": (cmd_replay, "run the engine over a split"),
    "sweep": (cmd_sweep, "metrics across loading ratios"),
    "defend": (cmd_defend, "apply a defense to a corpus"),
    "eval": (cmd_eval, "score a verdict log"),
}

# flags each command accepts (beyond the global ones)
COMMAND_FLAGS = {
    "synth": ["num_sites", "synth_traces_per_site", "unmonitored_sites"],
    "split": ["input"],
    "extract": ["rho", "theta_ms"],
    "train-target": ["n_intervals"],
    "attribute": ["n_intervals", "shap_samples", "traces_per_site", "mu", "lam"],
    "augment": ["alpha"],
    "train": ["epochs", "lr", "batch_size", "eta", "gamma", "rho", "theta_ms"],
    "profile": [],
    "replay": ["ratio", "role", "tau", "sigma", "epsilon", "mode"],
    "sweep": ["ratios", "role", "plot", "mode"],
    "defend": ["defense", "input", "target", "client_budget", "server_budget", "num_paths", "path"],
    "eval": ["r"],
}


def _mode(value):
    v = value.replace("-", "_")
    if v not in (OPEN_WORLD, CLOSED_WORLD):
        raise argparse.ArgumentTypeError(f"mode must be open-world or closed-world, got {value!r}")
    return v


def _ratios(value):
    return [float(x) for x in value.split(",") if x.strip()]


def _add_flag(p, key):
    name = "--" + key.replace("_", "-")
    if key == "mode":
        p.add_argument(name, type=_mode, default=None, help="open-world or closed-world")
    elif key == "ratios":
        p.add_argument(name, type=_ratios, default=None, help="comma-separated, e.g. 0.2,0.4,1.0")
    elif key == "ratio":
        p.add_argument(name, type=float, default=None, help="fixed loading ratio; omit for clock replay")
    elif key == "plot":
        p.add_argument(name, action="store_true", default=None)
    elif key in ("input", "target", "role", "defense"):
        p.add_argument(name, default=None)
    else:
        p.add_argument(name, type=TYPES[key], default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="earlywf", description="Early-stage website fingerprinting pipeline.")
    parser.add_argument("--config", type=Path, help="JSON config with `params` and per-command sections")
    parser.add_argument("--output-dir", type=Path, default=None, help="root for all artifacts (default: runs)")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--dry-run", action="store_true", help="validate and print the resolved config only")
    parser.add_argument("--quiet", action="store_true", help="only log warnings")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        for key in COMMAND_FLAGS[name]:
            _add_flag(p, key)
    return parser


def resolve_config(args) -> tuple[dict, Path]:
    cfg = dict(DEFAULTS)
    file_cfg = {}
    if args.config is not None:
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ValidationError("config must be a JSON object")
        unknown_sections = set(file_cfg) - set(COMMANDS) - {"params", "output_dir"}
        if unknown_sections:
            raise ValidationError(f"unknown config section(s): {sorted(unknown_sections)}")
    for section in ("params", args.command):
        values = file_cfg.get(section, {})
        unknown = set(values) - set(DEFAULTS)
        if unknown:
            raise ValidationError(f"unknown key(s) in config section {section!r}: {sorted(unknown)}")
        cfg.update(values)
    for key in COMMAND_FLAGS[args.command]:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if args.seed is not None:
        cfg["seed"] = args.seed
    cfg["mode"] = _mode(str(cfg["mode"]))
    out = args.output_dir or Path(file_cfg.get("output_dir", "runs"))
    return cfg, Path(out)


def validate(ctx: Context):
    """Build every typed config the command might use; raises ValueError on bad values."""
    try:
        ctx.taf()
        ctx.attribution()
        ctx.encoder_config()
        ctx.engine()
        if ctx.command == "defend":
            if ctx.cfg["defense"] not in ("front", "split"):
                raise ValueError(f"defense must be 'front' or 'split', got {ctx.cfg['defense']!r}")
            ctx.defense_config()
        if ctx.command == "synth":
            SynthSpec(ctx.cfg["num_sites"], ctx.cfg["synth_traces_per_site"], ctx.cfg["seed"],
                      ctx.cfg["unmonitored_sites"]).validate()
        ratio = ctx.cfg["ratio"]
        ratios = ctx.cfg["ratios"] if ctx.command == "sweep" else [1.0 if ratio is None else ratio]
        if not ratios or any(not 0 < r <= 1 for r in ratios):
            raise ValueError(f"ratios must lie in (0, 1], got {ratios}")
        if ctx.cfg["role"] not in ROLES:
            raise ValueError(f"role must be one of {ROLES}")
        if ctx.cfg["r"] < 1:
            raise ValueError("r must be >= 1")
    except (ValueError, TypeError) as exc:
        raise ValidationError(str(exc)) from exc


def _configure_logging(quiet):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter())
    log.handlers[:] = [handler]
    log.setLevel(logging.WARNING if quiet else logging.INFO)
    log.propagate = False


def _jsonable(value):
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, Path):
        return str(value)
    return value


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_VALIDATION
    _configure_logging(args.quiet)
    stage = args.command
    try:
        cfg, out = resolve_config(args)
        ctx = Context(args.command, out, cfg, args.dry_run)
        validate(ctx)
        emit(stage, "resolved config", config=_jsonable(cfg), output_dir=str(out))
        if args.dry_run:
            emit(stage, "dry run: configuration is valid")
            return EXIT_OK
        out.mkdir(parents=True, exist_ok=True)
        started = time.time()
        result = COMMANDS[args.command][0](ctx)
        emit(stage, "done", seconds=round(time.time() - started, 3), result=_jsonable(result))
        return EXIT_OK
    except ValidationError as exc:
        log.error(str(exc), extra={"stage": stage, "fields": {"exit": EXIT_VALIDATION}})
        return EXIT_VALIDATION
    except MissingArtifact as exc:
        log.error(str(exc), extra={"stage": stage, "fields": {"exit": EXIT_RUNTIME}})
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        log.error(f"{type(exc).__name__}: {exc}", extra={"stage": stage, "fields": {"exit": EXIT_RUNTIME}})
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
