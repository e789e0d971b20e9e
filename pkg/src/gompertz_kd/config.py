"""Config file parsing, validation, overrides, and snapshots.

A run is described by one YAML file with sections `dataset`, `models`,
`schedule`, `losses`, `trainer`, `report`, and optionally `sweep`.
Command-line overrides are dotted `key=value` pairs applied after file
parsing (deepest key wins) and echoed into the run's config snapshot.
"""

from __future__ import annotations

import copy
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
import yaml

from gompertz_kd.data import DATA_ROOT_ENV, DatasetSpec, SyntheticSpec
from gompertz_kd.errors import ConfigurationError
from gompertz_kd.schedule import TIME_UNITS, ConstantSchedule, GompertzSchedule

MODES = ("student_only", "hinton_kd", "fixed_full", "gompertz_full")
FULL_MODES = ("fixed_full", "gompertz_full")
DISTILL_MODES = ("hinton_kd", "fixed_full", "gompertz_full")


def default_config_dict() -> dict:
    return {
        "dataset": {
            "name": "synthetic",
            "root": None,
            "subset_size": None,
            "subset_seed": 0,
            "test_subset_size": None,
            "normalization": "auto",
            "synthetic": {
                "num_classes": 4,
                "samples_per_class": 128,
                "test_samples_per_class": 64,
                "noise": 0.35,
                "class_separation": 1.0,
            },
        },
        "models": {
            "teacher": "tiny_teacher",
            "student": "tiny_student",
            "teacher_checkpoint": None,
            "allow_paper_scale": False,
        },
        "schedule": {
            "kind": "gompertz",
            "beta_min": 0.1,
            "beta_max": 1.0,
            "growth_rate_b": None,
            "time_shift_t0": 0.0,
            "time_unit": "raw_epoch",
            "beta": None,
        },
        "losses": {
            "r": 0.5,
            "tau": 4.0,
            "kd_tau_squared": False,
            "num_quantiles": 256,
        },
        "trainer": {
            "mode": "gompertz_full",
            "epochs": None,
            "batch_size": 64,
            "seed": 0,
            "cache_teacher": True,
            "second_order_grad_match": False,
            "eval_batch_size": 512,
            "grad_clip_norm": 10.0,
            "optimizer": {
                "kind": "sgd",
                "learning_rate": 0.05,
                "momentum": 0.9,
                "weight_decay": 0.0,
                "decay": "cosine",
            },
        },
        "report": {"strict": False},
        "sweep": {
            "seeds": [0, 1, 2],
            "modes": list(MODES),
            "teacher_epochs": None,
            "teacher_seed": 0,
        },
    }


def _deep_merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value, f"{path}{key}.")
        else:
            out[key] = copy.deepcopy(value)
    return out


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """Apply dotted key=value overrides, parsing values as YAML scalars."""
    out = copy.deepcopy(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        dotted, raw_value = item.split("=", 1)
        keys = dotted.strip().split(".")
        if not all(keys):
            raise ConfigurationError(f"override {item!r} has an empty key segment")
        try:
            value = yaml.safe_load(raw_value)
        except yaml.YAMLError:
            value = raw_value
        node = out
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigurationError(
                    f"override {item!r} descends through non-mapping key {key!r}"
                )
        node[keys[-1]] = value
    return out


def load_config_dict(path: str | Path, overrides: list[str] | None = None) -> dict:
    """Read a YAML config file and resolve it over the defaults."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        user = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: YAML parse error: {exc}") from exc
    if not isinstance(user, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    cfg = _deep_merge(default_config_dict(), user)
    if overrides:
        cfg = apply_overrides(cfg, list(overrides))
    return cfg


def _check(violations, cond: bool, message: str) -> None:
    if not cond:
        violations.append(message)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def validate_config_dict(cfg: dict) -> list[str]:
    """Return a list of 'section.key: problem' diagnostics; empty if valid."""
    v: list[str] = []
    known = default_config_dict()
    for section, keys in cfg.items():
        if section not in known:
            v.append(f"{section}: unknown section")
        elif isinstance(keys, dict):
            for key in keys:
                if key not in known[section]:
                    v.append(f"{section}.{key}: unknown key")

    ds = cfg.get("dataset", {})
    name = ds.get("name")
    _check(v, name in ("cifar10", "cifar100", "synthetic"),
           f"dataset.name: must be cifar10, cifar100 or synthetic, got {name!r}")
    if name in ("cifar10", "cifar100"):
        _check(v, bool(ds.get("root") or os.environ.get(DATA_ROOT_ENV)),
               f"dataset.root: required for {name} (or set ${DATA_ROOT_ENV})")
    for key in ("subset_size", "test_subset_size"):
        val = ds.get(key)
        _check(v, val is None or (isinstance(val, int) and val >= 1),
               f"dataset.{key}: must be a positive integer or null")
    syn = ds.get("synthetic", {})
    if isinstance(syn, dict):
        _check(v, isinstance(syn.get("num_classes"), int) and syn.get("num_classes", 0) >= 2,
               "dataset.synthetic.num_classes: must be an integer >= 2")

    models = cfg.get("models", {})
    _check(v, isinstance(models.get("student"), str) and models.get("student"),
           "models.student: required model id")

    sched = cfg.get("schedule", {})
    kind = sched.get("kind")
    _check(v, kind in ("gompertz", "constant"),
           f"schedule.kind: must be gompertz or constant, got {kind!r}")
    if kind == "gompertz":
        bmin, bmax = sched.get("beta_min"), sched.get("beta_max")
        _check(v, _is_num(bmin), "schedule.beta_min: must be a finite number")
        _check(v, _is_num(bmax), "schedule.beta_max: must be a finite number")
        if _is_num(bmin) and _is_num(bmax):
            _check(v, bmin < bmax, "schedule: constraint beta_min < beta_max violated")
        unit = sched.get("time_unit")
        _check(v, unit in TIME_UNITS, f"schedule.time_unit: must be one of {TIME_UNITS}")
        b = sched.get("growth_rate_b")
        if b is None:
            _check(v, unit == "normalized_fraction",
                   "schedule.growth_rate_b: required when time_unit=raw_epoch")
        else:
            _check(v, _is_num(b) and b > 0, "schedule: constraint growth_rate_b > 0 violated")
        _check(v, _is_num(sched.get("time_shift_t0")),
               "schedule.time_shift_t0: must be a finite number")
    elif kind == "constant":
        beta = sched.get("beta")
        _check(v, _is_num(beta) and beta >= 0,
               "schedule.beta: must be a finite number >= 0 for constant schedules")

    losses = cfg.get("losses", {})
    r = losses.get("r")
    _check(v, _is_num(r) and 0.0 <= r <= 1.0, "losses.r: must lie in [0, 1]")
    tau = losses.get("tau")
    _check(v, _is_num(tau) and tau > 0, "losses.tau: must be > 0")
    nq = losses.get("num_quantiles")
    _check(v, isinstance(nq, int) and nq >= 1, "losses.num_quantiles: must be an integer >= 1")

    tr = cfg.get("trainer", {})
    mode = tr.get("mode")
    _check(v, mode in MODES, f"trainer.mode: must be one of {MODES}, got {mode!r}")
    epochs = tr.get("epochs")
    _check(v, isinstance(epochs, int) and epochs >= 1,
           "trainer.epochs: must be an integer >= 1")
    bs = tr.get("batch_size")
    _check(v, isinstance(bs, int) and bs >= 1, "trainer.batch_size: must be an integer >= 1")
    _check(v, isinstance(tr.get("seed"), int), "trainer.seed: must be an integer")
    opt = tr.get("optimizer", {})
    _check(v, opt.get("kind") in ("sgd", "adam"),
           f"trainer.optimizer.kind: must be sgd or adam, got {opt.get('kind')!r}")
    _check(v, _is_num(opt.get("learning_rate")) and opt.get("learning_rate") > 0,
           "trainer.optimizer.learning_rate: must be > 0")
    _check(v, opt.get("decay") in ("cosine", "none"),
           f"trainer.optimizer.decay: must be cosine or none, got {opt.get('decay')!r}")
    clip = tr.get("grad_clip_norm", 10.0)
    _check(v, clip is None or (_is_num(clip) and clip >= 0),
           "trainer.grad_clip_norm: must be a number >= 0 (0 disables) or null")

    if mode == "gompertz_full" and kind == "constant":
        v.append("trainer.mode: gompertz_full requires schedule.kind=gompertz")
    if mode in ("hinton_kd", "fixed_full") and kind == "gompertz" and sched.get("beta") is None:
        # fixed modes take their constant from schedule.beta when present,
        # else fall back to beta_max; only flag if neither is usable
        if not _is_num(sched.get("beta_max")):
            v.append(f"trainer.mode: {mode} requires a constant beta "
                     "(schedule.kind=constant, schedule.beta, or a valid beta_max)")

    sweep = cfg.get("sweep", {})
    seeds = sweep.get("seeds")
    _check(v, isinstance(seeds, list) and seeds and all(isinstance(s, int) for s in seeds),
           "sweep.seeds: must be a non-empty list of integers")
    modes = sweep.get("modes")
    _check(v, isinstance(modes, list) and modes and all(m in MODES for m in modes),
           f"sweep.modes: must be a non-empty subset of {MODES}")
    te = sweep.get("teacher_epochs")
    _check(v, te is None or (isinstance(te, int) and te >= 1),
           "sweep.teacher_epochs: must be a positive integer or null")
    _check(v, isinstance(sweep.get("teacher_seed", 0), int),
           "sweep.teacher_seed: must be an integer")
    return v


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd"
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    decay: str = "cosine"


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved description of one training run."""

    train_data: DatasetSpec
    eval_data: DatasetSpec
    student_id: str
    mode: str
    epochs: int
    schedule: GompertzSchedule | ConstantSchedule
    teacher_id: str | None = None
    teacher_checkpoint: str | None = None
    allow_paper_scale: bool = False
    batch_size: int = 64
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    r: float = 0.5
    tau: float = 4.0
    kd_tau_squared: bool = False
    num_quantiles: int = 256
    second_order_grad_match: bool = False
    seed: int = 0
    cache_teacher: bool = True
    eval_batch_size: int = 512
    grad_clip_norm: float = 10.0
    raw: dict = field(default_factory=dict, compare=False)

    def validate(self) -> list[str]:
        violations = []
        violations += [f"train data: {m}" for m in self.train_data.validate()]
        violations += [f"eval data: {m}" for m in self.eval_data.validate()]
        if self.epochs < 1:
            violations.append("epochs must be >= 1")
        if self.batch_size < 1:
            violations.append("batch_size must be >= 1")
        if self.mode not in MODES:
            violations.append(f"mode must be one of {MODES}")
        if self.mode == "gompertz_full" and not isinstance(self.schedule, GompertzSchedule):
            violations.append("mode gompertz_full requires a Gompertz schedule")
        if self.mode in ("hinton_kd", "fixed_full") and not isinstance(
            self.schedule, ConstantSchedule
        ):
            violations.append(f"mode {self.mode} requires a constant schedule")
        if self.mode in DISTILL_MODES and not self.teacher_checkpoint:
            violations.append(f"mode {self.mode} requires models.teacher_checkpoint")
        violations += [f"schedule: {m}" for m in self.schedule.validate()]
        return violations


def _dataset_specs(cfg: dict) -> tuple[DatasetSpec, DatasetSpec]:
    ds = cfg["dataset"]
    syn_cfg = ds.get("synthetic") or {}
    syn = SyntheticSpec(
        num_classes=syn_cfg.get("num_classes", 4),
        samples_per_class=syn_cfg.get("samples_per_class", 128),
        test_samples_per_class=syn_cfg.get("test_samples_per_class", 64),
        noise=syn_cfg.get("noise", 0.35),
        class_separation=syn_cfg.get("class_separation", 1.0),
    )
    norm = ds.get("normalization", "auto")
    if isinstance(norm, dict):
        norm = (tuple(norm["mean"]), tuple(norm["std"]))
    common = dict(
        name=ds["name"],
        root=ds.get("root"),
        subset_seed=ds.get("subset_seed", 0),
        normalization=norm,
        synthetic=syn,
    )
    train = DatasetSpec(split="train", subset_size=ds.get("subset_size"), **common)
    test = DatasetSpec(split="test", subset_size=ds.get("test_subset_size"), **common)
    return train, test


def schedule_from_dict(sched: dict, mode: str) -> GompertzSchedule | ConstantSchedule:
    """Build the schedule object a given training mode needs."""
    if mode == "student_only":
        return ConstantSchedule(0.0)
    if mode in ("hinton_kd", "fixed_full"):
        beta = sched.get("beta")
        if beta is None:
            beta = sched.get("beta_max", 1.0)
        return ConstantSchedule(float(beta))
    if sched.get("kind") == "constant":
        return ConstantSchedule(float(sched.get("beta", 0.0)))
    unit = sched.get("time_unit", "raw_epoch")
    b = sched.get("growth_rate_b")
    if b is None and unit == "normalized_fraction":
        b = 5.0
    return GompertzSchedule(
        growth_rate_b=float(b) if b is not None else float("nan"),
        beta_min=float(sched.get("beta_min", 0.1)),
        beta_max=float(sched.get("beta_max", 1.0)),
        time_shift_t0=float(sched.get("time_shift_t0", 0.0)),
        time_unit=unit,
    )


def experiment_from_dict(cfg: dict) -> ExperimentConfig:
    """Validate a resolved config dict and build the ExperimentConfig."""
    violations = validate_config_dict(cfg)
    if violations:
        raise ConfigurationError("invalid config:\n  " + "\n  ".join(violations))
    train, test = _dataset_specs(cfg)
    models = cfg["models"]
    tr = cfg["trainer"]
    losses = cfg["losses"]
    opt = tr["optimizer"]
    mode = tr["mode"]
    return ExperimentConfig(
        train_data=train,
        eval_data=test,
        student_id=models["student"],
        teacher_id=models.get("teacher"),
        teacher_checkpoint=models.get("teacher_checkpoint"),
        allow_paper_scale=bool(models.get("allow_paper_scale", False)),
        mode=mode,
        epochs=int(tr["epochs"]),
        batch_size=int(tr["batch_size"]),
        optimizer=OptimizerConfig(
            kind=opt["kind"],
            learning_rate=float(opt["learning_rate"]),
            momentum=float(opt.get("momentum", 0.9)),
            weight_decay=float(opt.get("weight_decay", 0.0)),
            decay=opt.get("decay", "cosine"),
        ),
        schedule=schedule_from_dict(cfg["schedule"], mode),
        r=float(losses["r"]),
        tau=float(losses["tau"]),
        kd_tau_squared=bool(losses.get("kd_tau_squared", False)),
        num_quantiles=int(losses.get("num_quantiles", 256)),
        second_order_grad_match=bool(tr.get("second_order_grad_match", False)),
        seed=int(tr["seed"]),
        cache_teacher=bool(tr.get("cache_teacher", True)),
        eval_batch_size=int(tr.get("eval_batch_size", 512)),
        grad_clip_norm=float(tr.get("grad_clip_norm") or 0.0),
        raw=copy.deepcopy(cfg),
    )


def load_experiment(
    path: str | Path, overrides: list[str] | None = None, seed: int | None = None
) -> ExperimentConfig:
    cfg = load_config_dict(path, overrides)
    if seed is not None:
        cfg["trainer"]["seed"] = int(seed)
    return experiment_from_dict(cfg)


def snapshot_yaml(cfg: dict) -> str:
    """Deterministic YAML rendering of a resolved config dict."""
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False)
