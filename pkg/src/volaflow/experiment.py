"""Run bundles and config-driven experiments.

A run bundle is the JSON record of one training run: the configuration
echo, the best snapshot, the validation history and provenance (input
digest, seed, package version). An experiment config lists an RV file,
split lengths, a seed and the methods to compare.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .cotrain import Snapshot, TrainConfig, train
from .errors import InputError, VolaflowError
from .evaluate import compare_methods, score_snapshot, write_report_dir
from .marketdata import DEFAULT_SPLIT, RvPanel, load_rv_panel
from .transforms import canonical_family, initial_transform

logger = logging.getLogger(__name__)

TRANSFORM_OPTIONS = ("k", "tau", "steps", "time_conditioning", "init_scale", "d", "lam")
TRAIN_OPTIONS = ("iterations", "eval_every", "learning_rate", "beta1", "beta2", "epsilon",
                 "stocks_per_batch", "window_length")


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def input_provenance(path) -> dict:
    path = Path(path)
    return {"input": path.name, "input_path": str(path.resolve()), "input_sha256": file_digest(path)}


@dataclass(frozen=True)
class MethodSpec:
    """One method of an experiment: a transform family plus its options."""

    name: str
    family: str
    residual: str = "gaussian"
    options: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: dict, defaults: dict | None = None) -> "MethodSpec":
        if "family" not in data:
            raise InputError(f"method spec {data!r} has no family")
        family = canonical_family(data["family"])
        unknown = set(data) - {"name", "family", "residual", *TRANSFORM_OPTIONS, *TRAIN_OPTIONS}
        if unknown:
            raise InputError(f"method {data.get('name', family)}: unknown keys {sorted(unknown)}")
        residual = data.get("residual", "gaussian")
        if residual not in ("gaussian", "student_t"):
            raise InputError(f"unknown residual model {residual!r}")
        tr = dict(defaults or {})
        tr.update({k: data[k] for k in TRAIN_OPTIONS if k in data})
        return cls(
            name=str(data.get("name", family)),
            family=family,
            residual=residual,
            options={k: data[k] for k in TRANSFORM_OPTIONS if k in data},
            train=tr,
        )

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **self.train)

    def to_dict(self) -> dict:
        return {"name": self.name, "family": self.family, "residual": self.residual,
                **self.options, **self.train}


@dataclass
class RunBundle:
    config: dict
    best: Snapshot
    history: list[tuple[int, float]]
    provenance: dict
    diagnostics: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "best": self.best.to_dict(),
            "history": [{"iteration": i, "val_loglik": v} for i, v in self.history],
            "provenance": self.provenance,
            "diagnostics": list(self.diagnostics),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunBundle":
        try:
            return cls(
                config=data["config"],
                best=Snapshot.from_dict(data["best"]),
                history=[(int(h["iteration"]), float(h["val_loglik"])) for h in data["history"]],
                provenance=data["provenance"],
                diagnostics=list(data.get("diagnostics", [])),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed run bundle: {exc}") from exc

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunBundle":
        path = Path(path)
        if not path.is_file():
            raise InputError(f"run bundle not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(data)

    @property
    def label(self) -> str:
        return str(self.config.get("name", self.best.transform.family))


def train_method(panel: RvPanel, spec: MethodSpec, seed: int, provenance: dict) -> RunBundle:
    """Train one method on ``panel`` and package the result."""
    cfg = spec.train_config(seed)
    start = initial_transform(spec.family, np.random.default_rng(seed), **spec.options)
    result = train(panel, start, cfg, spec.residual)
    config = {**spec.to_dict(), "seed": seed, "split": list(panel.split), "train": cfg.to_dict()}
    prov = {**provenance, "seed": seed, "version": __version__}
    return RunBundle(config, result.best, result.history, prov, result.diagnostics)


@dataclass
class ExperimentConfig:
    rv: Path
    methods: list[MethodSpec]
    split: tuple[int, int, int] = DEFAULT_SPLIT
    seed: int = 0
    reference: str | None = None
    baseline: str = "identity"
    out: Path | None = None

    @classmethod
    def from_dict(cls, data: dict, base_dir: Path = Path(".")) -> "ExperimentConfig":
        if "rv" not in data:
            raise InputError("experiment config needs an 'rv' input path")
        if not data.get("methods"):
            raise InputError("experiment config lists no methods")
        defaults = data.get("train", {})
        bad = set(defaults) - set(TRAIN_OPTIONS)
        if bad:
            raise InputError(f"unknown training options {sorted(bad)}")
        methods = [MethodSpec.from_dict(m, defaults) for m in data["methods"]]
        names = [m.name for m in methods]
        if len(set(names)) != len(names):
            raise InputError(f"duplicate method names in {names}")
        reference = data.get("reference")
        if reference is not None and reference not in names:
            raise InputError(f"reference {reference!r} is not one of the methods {names}")
        rv = Path(data["rv"])
        out = data.get("out")
        return cls(
            rv=rv if rv.is_absolute() else base_dir / rv,
            methods=methods,
            split=tuple(int(v) for v in data.get("split", DEFAULT_SPLIT)),
            seed=int(data.get("seed", 0)),
            reference=reference,
            baseline=str(data.get("baseline", "identity")),
            out=None if out is None else (Path(out) if Path(out).is_absolute() else base_dir / out),
        )

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise InputError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(data, path.parent)


def evaluate_bundles(panel: RvPanel, bundles: list[RunBundle], out_dir, reference=None,
                     baseline="identity", failures=None) -> Path:
    scores = {b.label: score_snapshot(panel, b.best, "test") for b in bundles}
    reports = compare_methods(scores, reference)
    snaps = {b.label: b.best for b in bundles}
    return write_report_dir(out_dir, reports, snaps, baseline, failures)


def run_experiment(config, out_dir=None) -> Path:
    """Train every method of ``config`` and write the comparison report.

    A method that fails is listed in ``failures.csv``; the report covers the
    surviving methods. Method ``i`` trains with seed ``seed + i``.
    """
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.load(config)
    out = Path(out_dir) if out_dir is not None else cfg.out
    if out is None:
        raise InputError("no output directory given")
    if not cfg.rv.is_file():
        raise InputError(f"RV input not found: {cfg.rv}")
    panel = load_rv_panel(cfg.rv, cfg.split)
    provenance = input_provenance(cfg.rv)
    out.mkdir(parents=True, exist_ok=True)
    bundles, failures = [], {}
    for i, spec in enumerate(cfg.methods):
        try:
            b = train_method(panel, spec, cfg.seed + i, provenance)
        except VolaflowError as exc:
            logger.warning("method %s failed: %s", spec.name, exc)
            failures[spec.name] = f"{exc.tag}: {exc}"
            continue
        b.save(out / f"run_{spec.name}.json")
        bundles.append(b)
    if not bundles:
        raise InputError("every method failed: " + "; ".join(f"{k} ({v})" for k, v in failures.items()))
    reference = cfg.reference if cfg.reference in {b.label for b in bundles} else None
    return evaluate_bundles(panel, bundles, out, reference, cfg.baseline, failures)
