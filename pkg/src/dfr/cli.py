"""Command-line interface.

Every command takes a JSON config (validated against the schema in
``dfr/schemas/<command>.json``) and writes its artifacts plus a
``manifest.json`` into ``output_dir``.  The manifest holds the resolved
config, input/output hashes, package versions and the only timestamp;
``dfr <command> --manifest path/to/manifest.json`` replays the run.

Precedence for the master seed: config, then the ``DFR_SEED`` environment
variable, then ``--seed``.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import io
import json
import os
import platform
import sys
import tempfile
from dataclasses import replace
from datetime import datetime, timezone
from importlib import metadata
from importlib.resources import files
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .analysis import (
    FAMILIES,
    ExperimentGrid,
    ablation_l1,
    ablation_retrains,
    decoding_sweep,
    logit_additivity,
    method_comparison,
    pcorr_sweep,
    write_report,
)
from .data import GroupSchema, load_embeddings, save_embeddings
from .erm import TrainConfig, extract_features, load_model, save_model, train_erm
from .metrics import evaluate
from .reweighting import DfrConfig, run_dfr
from .solver import load_head, predict_labels, save_head
from .synth import RawDataset, SpuriousSpec, assign_groups, drop_minority, generate

COMMANDS = ("generate", "train-erm", "extract", "dfr", "evaluate", "sweep", "verify")
SPLITS = ("train", "val", "test")
SEED_ENV = "DFR_SEED"


class ConfigError(ValueError):
    def __init__(self, message, json_path="$"):
        super().__init__(message)
        self.json_path = json_path


class CheckFailed(RuntimeError):
    pass


# ----------------------------------------------------------------- config

def load_schema(command: str) -> dict:
    name = command.replace("-", "_") + ".json"
    return json.loads(files("dfr").joinpath("schemas", name).read_text())


def validate_config(command: str, config) -> None:
    validator = jsonschema.Draft202012Validator(load_schema(command))
    errors = sorted(validator.iter_errors(config), key=lambda e: (len(e.path), list(map(str, e.path))))
    if errors:
        err = errors[0]
        raise ConfigError(f"config error at {err.json_path}: {err.message}", err.json_path)


def _parse_scalar(text: str):
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        return text
    if isinstance(value, (dict, list)):
        raise ConfigError(f"--set only overrides scalar fields, got {text!r}")
    return value


def apply_overrides(config: dict, sets, seed_flag=None) -> dict:
    config = json.loads(json.dumps(config))
    for item in sets or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key.path=value, got {item!r}")
        key, raw = item.split("=", 1)
        parts = key.split(".")
        node = config
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override inside non-object field {key!r}", "$." + key)
        if isinstance(node.get(parts[-1]), (dict, list)):
            raise ConfigError(f"--set only overrides scalar fields, {key!r} is not one", "$." + key)
        node[parts[-1]] = _parse_scalar(raw)
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            config["seed"] = int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    if seed_flag is not None:
        config["seed"] = int(seed_flag)
    config.setdefault("seed", 0)
    return config


# ---------------------------------------------------------------- helpers

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write_json(path: Path, obj) -> None:
    path.write_text(_dump(obj))


def _meta_path(path) -> Path:
    p = Path(path)
    return p / "dataset.json" if p.is_dir() else p


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such file or directory: {p}")
    return p


def load_dataset(path):
    """Read a dataset directory written by ``generate`` or ``extract``."""
    meta_file = _require(_meta_path(path))
    meta = json.loads(meta_file.read_text())
    root = meta_file.parent
    parts = {s: load_embeddings(_require(root / meta["files"][s]), n_classes=meta["n_classes"],
                                n_groups=meta["n_groups"])
             for s in SPLITS if s in meta["files"]}
    return meta, parts, [root / meta["files"][s] for s in parts]


def _raw(meta, emb) -> RawDataset:
    if meta["kind"] != "raw":
        raise ValueError("expected a raw dataset written by 'generate'")
    return RawDataset.from_embeddings(emb, meta["n_attributes"], meta["d_core"])


def _versions() -> dict:
    out = {"python": platform.python_version(), "dfr": __version__}
    for pkg in ("numpy", "scipy", "scikit-learn", "jsonschema"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def write_manifest(command, config, out_dir: Path, inputs, extra=None) -> Path:
    outputs = {p.name: sha256_file(p) for p in sorted(out_dir.iterdir())
               if p.is_file() and p.name != "manifest.json"}
    manifest = {
        "command": command,
        "config": config,
        "seed": config.get("seed"),
        "inputs": {str(Path(p).resolve()): sha256_file(p) for p in inputs},
        "outputs": outputs,
        "versions": _versions(),
        "created": datetime.now(timezone.utc).isoformat(),
    }
    if extra:
        manifest.update(extra)
    path = out_dir / "manifest.json"
    _write_json(path, manifest)
    return path


# --------------------------------------------------------------- commands

def cmd_generate(cfg, out: Path):
    spec = SpuriousSpec(**cfg.get("synth", {}))
    ext = ".csv" if cfg.get("format") == "csv" else ".dfre"
    parts = generate(spec, cfg["seed"])
    _, schema = assign_groups(parts[0].labels, parts[0].attributes, spec.n_attributes,
                              spec.n_classes)
    names = {}
    for name, raw in zip(SPLITS, parts):
        names[name] = name + ext
        save_embeddings(raw.to_embeddings(), out / names[name])
    _write_json(out / "dataset.json", {
        "kind": "raw", "n_classes": spec.n_classes, "n_attributes": spec.n_attributes,
        "n_groups": spec.n_groups, "d_core": spec.d_core, "files": names,
        "schema": schema.to_dict(), "synth": spec.to_dict(),
    })
    print(f"wrote {', '.join(names.values())} to {out}")
    return []


def cmd_train_erm(cfg, out: Path):
    meta, parts, paths = load_dataset(cfg["dataset"])
    raw = _raw(meta, parts["train"])
    if cfg.get("drop_minority"):
        raw = drop_minority(raw)
    tc = TrainConfig(**{**cfg.get("train", {}), "seed": cfg["seed"]})
    model = train_erm(raw, tc)
    save_model(model, out / "model.dfrm")
    _write_json(out / "training.json", {"train_losses": model.train_losses,
                                        "sizes": list(model.sizes), "n_rows": raw.n})
    print(f"trained {list(model.sizes)} for {tc.epochs} epochs; final loss "
          f"{model.train_losses[-1] if model.train_losses else float('nan'):.4f}")
    return [paths[0]]


def cmd_extract(cfg, out: Path):
    meta, parts, paths = load_dataset(cfg["dataset"])
    model_path = _require(cfg["model"])
    model = load_model(model_path)
    names = {}
    for name, emb in parts.items():
        names[name] = name + ".dfre"
        save_embeddings(extract_features(model, _raw(meta, emb)), out / names[name])
    _write_json(out / "dataset.json", {
        "kind": "embeddings", "n_classes": meta["n_classes"], "n_attributes": meta["n_attributes"],
        "n_groups": meta["n_groups"], "d_core": None, "files": names, "schema": meta["schema"],
    })
    print(f"extracted {model.n_features}-d features for {', '.join(names)}")
    return paths + [model_path]


def cmd_dfr(cfg, out: Path):
    dcfg = DfrConfig(**{**cfg.get("dfr", {}), "seed": cfg["seed"]})
    schema = None
    if "dataset" in cfg:
        meta, parts, inputs = load_dataset(cfg["dataset"])
        rw = cfg.get("reweight_split", "val")
        train, reweight, test = parts.get("train"), parts[rw], parts.get("test")
        schema = GroupSchema.from_dict(meta["schema"])
    else:
        e = cfg["embeddings"]
        kw = {"n_classes": e.get("n_classes"), "n_groups": e.get("n_groups")}
        inputs = [_require(e[k]) for k in ("train", "reweight", "test") if k in e]
        loaded = {k: load_embeddings(e[k], **kw) for k in ("train", "reweight", "test") if k in e}
        train, reweight, test = loaded.get("train"), loaded["reweight"], loaded.get("test")
    res = run_dfr(train, reweight, test, schema, dcfg)
    save_head(res.head, out / "head.dfrh")
    (out / "result.json").write_text(res.to_json() + "\n")
    msg = f"chosen C={res.chosen_C:g}"
    if res.test_metrics is not None:
        _write_json(out / "metrics.json", res.test_metrics.to_dict())
        msg += f"; test worst-group accuracy {res.test_metrics.worst_group_accuracy:.4f}"
    print(msg)
    return inputs


def cmd_evaluate(cfg, out: Path):
    inputs = []
    split = cfg.get("split", "test")
    train_counts = None
    if "dataset" in cfg:
        meta, parts, paths = load_dataset(cfg["dataset"])
        data = parts[split]
        inputs += paths
        train_counts = GroupSchema.from_dict(meta["schema"]).train_counts
    elif "embeddings" in cfg:
        meta = None
        inputs.append(_require(cfg["embeddings"]))
        data = load_embeddings(cfg["embeddings"])
    else:
        raise ConfigError("evaluate needs 'dataset' or 'embeddings'")
    if "head" in cfg:
        inputs.append(_require(cfg["head"]))
        preds = predict_labels(load_head(cfg["head"]), data.features)
    else:
        if meta is None:
            raise ConfigError("evaluating a model needs a raw 'dataset'", "$.dataset")
        inputs.append(_require(cfg["model"]))
        preds = load_model(cfg["model"]).predict(_raw(meta, data).inputs)
    m = evaluate(preds, data.labels, data.groups, data.n_groups, train_counts)
    _write_json(out / "metrics.json", m.to_dict())
    print(f"worst-group accuracy {m.worst_group_accuracy:.4f}, "
          f"mean accuracy {m.unweighted_mean_over_examples:.4f}")
    return inputs


_DEFAULT_FAMILY = {
    "pcorr_sweep": "colormnist5", "decoding": "dominoes_moderate",
    "ablation_retrains": "celeba_like", "ablation_l1": "high_dim",
    "method_comparison": "imbalanced", "logit_additivity": "dominoes_moderate",
}


def _sweep_family(cfg):
    name = cfg.get("family", _DEFAULT_FAMILY[cfg["analysis"]])
    if name not in FAMILIES:
        raise ConfigError(f"unknown family {name!r}; choose from {sorted(FAMILIES)}", "$.family")
    fam = FAMILIES[name]
    return replace(fam, spec=replace(fam.spec, **cfg.get("family_overrides", {})),
                   train=replace(fam.train, **cfg.get("train_overrides", {})),
                   dfr=replace(fam.dfr, **cfg.get("dfr_overrides", {})))


def cmd_sweep(cfg, out: Path):
    analysis, seed = cfg["analysis"], cfg["seed"]
    fam = _sweep_family(cfg)
    n = cfg.get("n_outer_seeds")
    grid_kw = {"seed": seed, "n_outer_seeds": n or 5}
    if "p_corr_values" in cfg:
        grid_kw["p_corr_values"] = tuple(cfg["p_corr_values"])
    if analysis == "pcorr_sweep":
        report = pcorr_sweep(ExperimentGrid(**grid_kw), fam, cfg.get("include_oracle", True))
    elif analysis == "decoding":
        report = decoding_sweep(ExperimentGrid(**grid_kw), fam, cfg.get("include_transfer", False))
    elif analysis == "ablation_retrains":
        report = ablation_retrains(fam, tuple(cfg.get("ks", (1, 3, 5, 10, 20))), n or 20, seed)
    elif analysis == "ablation_l1":
        report = ablation_l1(fam, n or 20, seed)
    elif analysis == "method_comparison":
        report = method_comparison(fam, n or 20, seed, cfg.get("include_nm", False))
    else:
        rows = []
        for k in range(n or 5):
            tr, _, te = generate(fam.spec, seed + k)
            model = train_erm(tr, replace(fam.train, seed=seed + k))
            r = logit_additivity(model, te)
            rows.append({"outer_seed": k, "max_abs_deviation": r["max_abs_deviation"],
                         **{f"r_squared_class_{c}": v for c, v in enumerate(r["r_squared"])}})
        report = {"analysis": "logit_additivity", "rows": rows,
                  "summary": {"median_max_abs_deviation":
                              float(np.median([r["max_abs_deviation"] for r in rows]))}}
    report["config"] = {"family": cfg.get("family", _DEFAULT_FAMILY[analysis]), "seed": seed}
    write_report(report, out, analysis)
    print(f"wrote {analysis}.json and {analysis}.csv to {out}")
    return []


def cmd_verify(cfg, out: Path):
    from .verify import run_checks
    results = run_checks(cfg.get("criteria"), seed=cfg["seed"], echo=print)
    _write_json(out / "verify.json", {
        "results": [{k: v for k, v in r.to_dict().items() if k != "seconds"} for r in results],
        "all_passed": all(r.passed for r in results),
    })
    timings = {str(r.criterion): r.seconds for r in results}
    failed = [r.criterion for r in results if not r.passed]
    return [], {"timings": timings}, failed


HANDLERS = {
    "generate": cmd_generate, "train-erm": cmd_train_erm, "extract": cmd_extract,
    "dfr": cmd_dfr, "evaluate": cmd_evaluate, "sweep": cmd_sweep, "verify": cmd_verify,
}


def run_command(command: str, config: dict, out_dir=None) -> Path:
    """Validate ``config``, run ``command`` and write the manifest.

    Returns the output directory.  Raises :class:`CheckFailed` after writing
    everything if ``verify`` found failing checks.
    """
    if out_dir is not None:
        config = {**config, "output_dir": str(out_dir)}
    validate_config(command, config)
    out = Path(config["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    res = HANDLERS[command](config, out)
    extra, failed = None, []
    if isinstance(res, tuple):
        inputs, extra, failed = res
    else:
        inputs = res
    write_manifest(command, config, out, inputs, extra)
    if failed:
        raise CheckFailed(f"checks failed: {failed}")
    return out


def _read_config(args) -> dict:
    if args.manifest:
        man = json.loads(_require(args.manifest).read_text())
        if man.get("command") != args.command:
            raise ConfigError(f"manifest was written by {man.get('command')!r}, not {args.command!r}")
        return man["config"]
    try:
        return json.loads(_require(args.config).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{args.config}: invalid JSON at line {e.lineno} column {e.colno}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dfr", description="Last-layer feature reweighting toolkit")
    parser.add_argument("--version", action="version", version=f"dfr {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run {name} from a JSON config")
        src = p.add_mutually_exclusive_group(required=name != "verify")
        src.add_argument("--config", type=Path, help="JSON config file")
        src.add_argument("--manifest", type=Path, help="replay the config stored in a manifest")
        p.add_argument("--out", type=Path, help="override output_dir")
        p.add_argument("--seed", type=int, help=f"override the master seed (also via {SEED_ENV})")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a scalar config field, e.g. dfr.n_retrains=5")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "verify" and not (args.config or args.manifest):
            config = {"output_dir": str(args.out or "verify_out")}
        else:
            config = _read_config(args)
        config = apply_overrides(config, args.set, args.seed)
        if args.out is not None:
            config["output_dir"] = str(args.out)
        run_command(args.command, config)
    except ConfigError as e:
        _report_error(e, {"json_path": e.json_path})
        return 2
    except FileNotFoundError as e:
        _report_error(e)
        return 2
    except CheckFailed as e:
        _report_error(e)
        return 1
    except (ValueError, RuntimeError, OSError) as e:
        _report_error(e)
        return 1
    return 0


def _report_error(exc, extra=None) -> None:
    err = {"type": type(exc).__name__, "message": str(exc)}
    err.update(extra or {})
    print(json.dumps({"error": err}, sort_keys=True), file=sys.stderr)


# --------------------------------------------------------- reproducibility

def _probe_configs(root: Path, seed: int):
    gen, erm, ext = root / "generate", root / "train-erm", root / "extract"
    return [
        ("generate", {"output_dir": str(gen), "seed": seed,
                      "synth": {"n_train": 400, "n_val": 120, "n_test": 200}}),
        ("train-erm", {"output_dir": str(erm), "seed": seed, "dataset": str(gen),
                       "train": {"epochs": 3, "hidden": [16]}}),
        ("extract", {"output_dir": str(ext), "seed": seed, "dataset": str(gen),
                     "model": str(erm / "model.dfrm")}),
        ("dfr", {"output_dir": str(root / "dfr"), "seed": seed, "dataset": str(ext),
                 "dfr": {"n_retrains": 3, "c_grid": [1.0, 0.1]}}),
        ("evaluate", {"output_dir": str(root / "evaluate"), "seed": seed, "dataset": str(ext),
                      "head": str(root / "dfr" / "head.dfrh")}),
        ("sweep", {"output_dir": str(root / "sweep"), "seed": seed, "analysis": "ablation_l1",
                   "n_outer_seeds": 2}),
        ("verify", {"output_dir": str(root / "verify"), "seed": seed, "criteria": [3, 4]}),
    ]


def reproducibility_probe(seed: int = 0):
    """Run every command, replay each from its manifest, compare artifacts.

    Returns ``(mismatches, n_files_compared)``.
    """
    mismatches, n_files = [], 0
    with tempfile.TemporaryDirectory() as tmp, contextlib.redirect_stdout(io.StringIO()):
        first, second = Path(tmp) / "a", Path(tmp) / "b"
        for command, cfg in _probe_configs(first, seed):
            out_a = run_command(command, cfg)
            manifest = json.loads((out_a / "manifest.json").read_text())
            out_b = run_command(command, manifest["config"], second / command)
            for p in sorted(out_a.iterdir()):
                if p.name == "manifest.json":
                    continue
                n_files += 1
                q = out_b / p.name
                if not q.exists() or p.read_bytes() != q.read_bytes():
                    mismatches.append(f"{command}/{p.name}")
            replay = json.loads((out_b / "manifest.json").read_text())
            if replay["outputs"] != manifest["outputs"]:
                mismatches.append(f"{command}/manifest outputs")
    return mismatches, n_files


if __name__ == "__main__":
    sys.exit(main())
