"""Command-line front end.

``gbtomo <subcommand> [--config PATH] [--out DIR] [--seed N] [--workers N]
[--set key=value ...]`` loads the shipped default configuration of the
subcommand, overlays the optional JSON file and the ``--set`` dot-path
overrides, validates the result, runs the experiment and writes a
``manifest.json`` with the SHA-256 of every emitted file.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import shutil
import sys
import tempfile
import traceback
from dataclasses import dataclass, field
from importlib import resources

SUBCOMMANDS = ("trace", "beam", "verify", "xray", "carleman", "recover")
MANIFOLD_KEYS = {
    "euclidean_disk": {"catalog_id", "radius"},
    "constant_curvature_disk": {"catalog_id", "kappa", "radius"},
    "radial_conformal": {"catalog_id", "profile", "radius"},
}
MAX_SEED = 2**64 - 1

EXIT_OK, EXIT_CONFIG, EXIT_MODULE = 0, 2, 3


class ConfigError(ValueError):
    """Schema violation; ``path`` is the offending dot-path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message


def default_config(subcommand: str) -> dict:
    """Shipped default configuration of ``subcommand``."""
    if subcommand not in SUBCOMMANDS:
        raise ConfigError("subcommand", f"unknown subcommand {subcommand!r}")
    text = resources.files("gbtomo").joinpath("configs", f"{subcommand}.json").read_text()
    return json.loads(text)


@dataclass
class ExperimentConfig:
    """A validated experiment: subcommand, parameters, seed and output options."""

    subcommand: str
    params: dict
    seed: int = 0
    emit_plots: bool = False
    out: str = "out"
    workers: int = field(default_factory=lambda: os.cpu_count() or 1)

    def to_dict(self) -> dict:
        return {"subcommand": self.subcommand, "seed": self.seed, "emit_plots": self.emit_plots, "out": self.out, "workers": self.workers, "params": self.params}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        allowed = {"subcommand", "seed", "emit_plots", "out", "workers", "params"}
        for k in d:
            if k not in allowed:
                raise ConfigError(k, "unknown key")
        if "subcommand" not in d:
            raise ConfigError("subcommand", "missing")
        sub = d["subcommand"]
        defaults = default_config(sub)
        params = merge(defaults, d.get("params", {}), "params")
        cfg = cls(sub, params, d.get("seed", 0), d.get("emit_plots", False), d.get("out", "out"), d.get("workers", os.cpu_count() or 1))
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    def validate(self) -> None:
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or not 0 <= self.seed <= MAX_SEED:
            raise ConfigError("seed", "must be an integer in [0, 2^64)")
        if not isinstance(self.emit_plots, bool):
            raise ConfigError("emit_plots", "must be a boolean")
        if not isinstance(self.workers, int) or isinstance(self.workers, bool) or self.workers < 1:
            raise ConfigError("workers", "must be a positive integer")
        check_schema(default_config(self.subcommand), self.params, "params")


def _type_ok(default, value) -> bool:
    if default is None:
        return True
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, (int, float)):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str) or (value is None)
    if isinstance(default, list):
        return isinstance(value, list)
    if isinstance(default, dict):
        return isinstance(value, dict)
    return True


def _check_manifold(value, path: str) -> None:
    if not isinstance(value, dict) or "catalog_id" not in value:
        raise ConfigError(f"{path}.catalog_id", "missing")
    cid = value["catalog_id"]
    if cid not in MANIFOLD_KEYS:
        raise ConfigError(f"{path}.catalog_id", f"unknown catalog {cid!r}")
    for k in value:
        if k not in MANIFOLD_KEYS[cid]:
            raise ConfigError(f"{path}.{k}", f"unknown key for {cid}")


def check_schema(defaults: dict, value: dict, path: str) -> None:
    """Reject unknown keys and type mismatches against ``defaults``."""
    for k, v in value.items():
        p = f"{path}.{k}"
        if k not in defaults:
            raise ConfigError(p, "unknown key")
        if k == "manifold":
            _check_manifold(v, p)
            continue
        d = defaults[k]
        if not _type_ok(d, v):
            raise ConfigError(p, f"expected {type(d).__name__}, got {type(v).__name__}")
        if isinstance(d, dict):
            check_schema(d, v, p)


def merge(defaults: dict, override: dict, path: str) -> dict:
    """Recursive overlay of ``override`` on ``defaults`` after schema checks."""
    if not isinstance(override, dict):
        raise ConfigError(path, "must be an object")
    check_schema(defaults, override, path)
    out = copy.deepcopy(defaults)
    for k, v in override.items():
        if isinstance(out.get(k), dict) and isinstance(v, dict) and k != "manifold":
            out[k] = merge(out[k], v, f"{path}.{k}")
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_assignment(text: str):
    """``key.path=value`` with the value read as JSON when possible."""
    if "=" not in text:
        raise ConfigError(text, "expected key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def apply_set(config: dict, key: str, value) -> dict:
    """Set a dot-path inside the experiment dictionary (a copy is returned)."""
    parts = key.split(".")
    out = copy.deepcopy(config)
    node = out
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(key, "unknown key")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(key, "unknown key")
    node[parts[-1]] = value
    return out


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: str, cfg: ExperimentConfig, summary: dict) -> dict:
    """Manifest of every file in ``out`` (except itself) with content hashes."""
    files = []
    for root, _, names in os.walk(out):
        for n in sorted(names):
            full = os.path.join(root, n)
            rel = os.path.relpath(full, out)
            if rel == "manifest.json":
                continue
            files.append({"path": rel, "sha256": sha256_file(full), "bytes": os.path.getsize(full)})
    files.sort(key=lambda f: f["path"])
    cfg_dict = cfg.to_dict()
    cfg_dict.pop("out")
    cfg_dict.pop("workers")
    manifest = {
        "subcommand": cfg.subcommand,
        "seed": cfg.seed,
        "config_sha256": hashlib.sha256(json.dumps(cfg_dict, sort_keys=True).encode()).hexdigest(),
        "files": files,
        "summary": summary,
    }
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def run(cfg: ExperimentConfig) -> tuple:
    """Run a validated experiment; returns ``(exit_status, manifest)``.

    Artifacts are written to a staging directory and moved into the
    output directory only after the runner succeeds, so the manifest lists
    exactly the files of this run and failures leave no partial output.
    """
    from . import experiments

    cfg.validate()
    os.makedirs(cfg.out, exist_ok=True)
    stage = tempfile.mkdtemp(prefix=".staging-", dir=cfg.out)
    try:
        resolved = cfg.to_dict()
        resolved.pop("out")
        resolved.pop("workers")
        with open(os.path.join(stage, "config.json"), "w") as fh:
            json.dump(resolved, fh, indent=2, sort_keys=True)
        runner = experiments.RUNNERS[cfg.subcommand]
        kwargs = {"emit_plots": cfg.emit_plots}
        if cfg.subcommand in ("carleman", "recover"):
            kwargs["seed"] = cfg.seed
        if cfg.subcommand == "recover":
            kwargs["workers"] = cfg.workers
        summary = runner(cfg.params, stage, **kwargs)
        manifest = write_manifest(stage, cfg, summary)
        for name in os.listdir(stage):
            os.replace(os.path.join(stage, name), os.path.join(cfg.out, name))
    finally:
        shutil.rmtree(stage, ignore_errors=True)
    return EXIT_OK, manifest


def failing_module(exc: BaseException) -> str:
    """Name of the innermost package module on the traceback of ``exc``."""
    name = "cli"
    for frame in traceback.extract_tb(exc.__traceback__):
        parts = frame.filename.replace("\\", "/").split("/")
        if "gbtomo" in parts[:-1]:
            name = parts[-1].removesuffix(".py")
    return name


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gbtomo", description="Gaussian beam, Carleman and attenuated ray transform experiments.")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", help="JSON experiment file")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="64-bit seed")
        p.add_argument("--workers", type=int, default=None, help="cap on parallel workers")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dot-path override, e.g. params.grid_n=32")
        p.add_argument("--plots", action="store_true", help="emit SVG plots")
        if name == "verify":
            p.add_argument("--quantity", default=None, help="swept quantity (l2_Q, dt_l2_Q, residual_adjoint, residual_forward, boundary_l2, concentration)")
    return parser


def config_from_args(args) -> ExperimentConfig:
    """Resolve defaults, the optional file and the flag overrides."""
    raw: dict = {"subcommand": args.subcommand}
    if args.config:
        with open(args.config) as fh:
            try:
                file_cfg = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError("config", f"invalid JSON: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise ConfigError("config", "must be a JSON object")
        if file_cfg.get("subcommand", args.subcommand) != args.subcommand:
            raise ConfigError("subcommand", f"file is for {file_cfg['subcommand']!r}")
        raw.update(file_cfg)
    base = ExperimentConfig.from_dict(raw).to_dict()
    for item in args.set:
        key, value = parse_assignment(item)
        base = apply_set(base, key, value)
    if getattr(args, "quantity", None) is not None:
        base = apply_set(base, "params.quantity", args.quantity)
    if args.seed is not None:
        base["seed"] = args.seed
    if args.out is not None:
        base["out"] = args.out
    if args.workers is not None:
        base["workers"] = args.workers
    if args.plots:
        base["emit_plots"] = True
    return ExperimentConfig.from_dict(base)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
    except ConfigError as exc:
        print(f"gbtomo: configuration error at {exc.path}: {exc.message}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        status, manifest = run(cfg)
    except Exception as exc:  # module failures are reported with their origin
        module = failing_module(exc)
        print(f"gbtomo {cfg.subcommand}: error in module {module}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_MODULE
    print(json.dumps(manifest["summary"], indent=2, sort_keys=True))
    return status


if __name__ == "__main__":
    sys.exit(main())
