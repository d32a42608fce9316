"""Experiment configuration files.

One INI file describes an entire run: where the data come from (a
synthesis block or per-domain file paths), which tasks and settings to
evaluate, and how to train.  Parsing is strict; any key or section the
schema does not know is an error naming the field path, so typos like
`leraning_rate` fail before any work starts.

`resolved_text` renders a configuration back to canonical INI with every
default made explicit.  Parsing that text yields an equal configuration,
and its hash stamps the run directory, so re-running from a resolved
config lands in the same place with byte-identical outputs.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import math
from dataclasses import dataclass

from .labels import TASKS
from .objectives import OBJECTIVES, PenaltyConfig
from .protocol import SETTINGS
from .simulate import DomainProfile, OutcomeParams, ShiftKnobs, default_outcome_params
from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; `path` names the offending section or key."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


@dataclass(frozen=True)
class DomainSpec:
    """Synthesis settings for one domain, as written in the file."""

    name: str
    n_stays: int
    los_log_mean: float
    los_log_sd: float
    n_hospitals: int = 0
    prevalence_multiplier: float = 1.0
    measurement_rate_multiplier: float = 1.0
    feature_mean_offsets: tuple = ()  # ((concept, delta), ...)
    coef_shifts: tuple = ()  # ((task, ((concept, delta), ...)), ...)


@dataclass(frozen=True)
class ExperimentConfig:
    output_dir: str
    seed: int
    tasks: tuple
    protocols: tuple
    synth_seed: int | None
    domains: tuple  # DomainSpec when synthesising
    data_paths: tuple  # ((name, statics path, events path), ...) otherwise
    train: TrainConfig
    search_draws: int
    test_fraction: float
    n_folds: int
    train_domains: tuple | None
    test_domains: tuple | None
    pooled_merge: bool | None  # None decides by objective
    per_stay: bool
    calibration_bins: int
    calibration_winsor: float

    @property
    def domain_names(self) -> tuple:
        if self.domains:
            return tuple(spec.name for spec in self.domains)
        return tuple(name for name, _, _ in self.data_paths)

    def build_profiles(self) -> tuple:
        if not self.domains:
            raise ConfigError("synth", "configuration uses data paths, not synthesis")
        return tuple(_build_profile(spec) for spec in self.domains)


def _build_profile(spec: DomainSpec) -> DomainProfile:
    outcome_params = None
    if spec.coef_shifts:
        defaults = default_outcome_params()
        outcome_params = {}
        for task, shifts in spec.coef_shifts:
            base = defaults[task]
            coefficients = dict(base.coefficients)
            for concept, delta in shifts:
                coefficients[concept] = coefficients.get(concept, 0.0) + delta
            outcome_params[task] = OutcomeParams(
                base.intercept, base.severity_slope, coefficients
            )
    try:
        return DomainProfile(
            domain_id=spec.name,
            n_stays=spec.n_stays,
            los_log_mean=spec.los_log_mean,
            los_log_sd=spec.los_log_sd,
            outcome_params=outcome_params,
            shift=ShiftKnobs(
                feature_mean_offsets=dict(spec.feature_mean_offsets),
                prevalence_multiplier=spec.prevalence_multiplier,
                measurement_rate_multiplier=spec.measurement_rate_multiplier,
            ),
            n_hospitals=spec.n_hospitals,
        )
    except ValueError as exc:
        raise ConfigError(f"domain:{spec.name}", str(exc)) from None


# Parsing helpers.  Each receives the raw string and the field path.

def _int(raw, path, minimum=None, maximum=None):
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(path, f"expected an integer, got {raw!r}") from None
    if minimum is not None and value < minimum:
        raise ConfigError(path, f"must be >= {minimum}, got {value}")
    if maximum is not None and value > maximum:
        raise ConfigError(path, f"must be <= {maximum}, got {value}")
    return value


def _float(raw, path, minimum=None, exclusive_min=None, maximum=None):
    try:
        value = float(raw)
    except ValueError:
        raise ConfigError(path, f"expected a number, got {raw!r}") from None
    if not math.isfinite(value):
        raise ConfigError(path, f"must be finite, got {raw!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(path, f"must be >= {minimum}, got {value}")
    if exclusive_min is not None and value <= exclusive_min:
        raise ConfigError(path, f"must be > {exclusive_min}, got {value}")
    if maximum is not None and value > maximum:
        raise ConfigError(path, f"must be <= {maximum}, got {value}")
    return value


def _bool(raw, path):
    lowered = raw.strip().lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    raise ConfigError(path, f"expected true or false, got {raw!r}")


def _names(raw, path):
    items = tuple(part.strip() for part in raw.split(",") if part.strip())
    if not items:
        raise ConfigError(path, "expected a comma-separated list")
    if len(set(items)) != len(items):
        raise ConfigError(path, "duplicate entries")
    return items


def _mapping(raw, path):
    pairs = []
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        name, _, value = part.partition(":")
        if not _ or not name.strip():
            raise ConfigError(path, f"expected name:value pairs, got {part!r}")
        pairs.append((name.strip(), _float(value.strip(), path)))
    if not pairs:
        raise ConfigError(path, "expected name:value pairs")
    names = [n for n, _ in pairs]
    if len(set(names)) != len(names):
        raise ConfigError(path, "duplicate entries")
    return tuple(pairs)


def _grad_clip(raw, path):
    if raw.strip().lower() == "none":
        return None
    return _float(raw, path, exclusive_min=0.0)


_RUN_KEYS = ("output_dir", "seed", "tasks", "protocols")
_SYNTH_KEYS = ("seed",)
_DOMAIN_KEYS = (
    "n_stays", "los_log_mean", "los_log_sd", "n_hospitals",
    "prevalence_multiplier", "measurement_rate_multiplier",
    "feature_mean_offsets", "mortality_coef_shift", "aki_coef_shift",
    "sepsis_coef_shift",
)
_DATA_KEYS = ("statics", "events")
_TRAIN_KEYS = (
    "objective", "learning_rate", "weight_decay", "dropout", "batch_size",
    "hidden_dim", "n_layers", "max_epochs", "patience", "grad_clip",
    "stay_averaged", "search_draws",
    "coral_gamma", "coral_squared_mean_term",
    "vrex_lambda", "vrex_warmup", "fishr_lambda", "fishr_warmup", "fishr_ema",
    "mldg_beta", "mldg_n_meta_test", "groupdro_eta",
)
_EVALUATE_KEYS = (
    "test_fraction", "n_folds", "train_domains", "test_domains",
    "pooled_merge", "per_stay", "calibration_bins", "calibration_winsor",
)

_LOS_MEAN_DEFAULT = DomainProfile.__dataclass_fields__["los_log_mean"].default
_LOS_SD_DEFAULT = DomainProfile.__dataclass_fields__["los_log_sd"].default


def _check_keys(parser, section, allowed):
    for key in parser[section]:
        if key not in allowed:
            raise ConfigError(f"{section}.{key}", "unknown key")


def _require(parser, section, key):
    if key not in parser[section]:
        raise ConfigError(f"{section}.{key}", "missing required key")
    return parser[section][key]


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("file", f"not valid INI: {exc}") from None

    known = {"run", "synth", "train", "evaluate"}
    domain_sections, data_sections = [], []
    for section in parser.sections():
        if section.startswith("domain:"):
            domain_sections.append(section)
        elif section.startswith("data:"):
            data_sections.append(section)
        elif section not in known:
            raise ConfigError(section, "unknown section")
    if parser.defaults():
        raise ConfigError("DEFAULT", "unknown section")

    if "run" not in parser:
        raise ConfigError("run", "missing required section")
    _check_keys(parser, "run", _RUN_KEYS)
    output_dir = _require(parser, "run", "output_dir").strip()
    if not output_dir:
        raise ConfigError("run.output_dir", "must not be empty")
    seed = _int(_require(parser, "run", "seed"), "run.seed", minimum=0, maximum=2**63 - 1)
    tasks = _names(_require(parser, "run", "tasks"), "run.tasks")
    for task in tasks:
        if task not in TASKS:
            raise ConfigError("run.tasks", f"unknown task {task!r}")
    protocols = _names(_require(parser, "run", "protocols"), "run.protocols")
    for setting in protocols:
        if setting not in SETTINGS:
            raise ConfigError("run.protocols", f"unknown protocol {setting!r}")

    if domain_sections and data_sections:
        raise ConfigError("file", "give either domain: sections or data: sections, not both")
    if not domain_sections and not data_sections:
        raise ConfigError("file", "no data source: add domain: or data: sections")

    synth_seed = None
    domains = ()
    if domain_sections:
        if "synth" not in parser:
            raise ConfigError("synth", "missing required section")
        _check_keys(parser, "synth", _SYNTH_KEYS)
        synth_seed = _int(
            _require(parser, "synth", "seed"), "synth.seed", minimum=0, maximum=2**64 - 1
        )
        domains = tuple(
            _parse_domain(parser, section) for section in sorted(domain_sections)
        )
    elif "synth" in parser:
        raise ConfigError("synth", "synth block given but domains use data: sections")

    data_paths = []
    for section in sorted(data_sections):
        _check_keys(parser, section, _DATA_KEYS)
        name = section.split(":", 1)[1]
        if not name:
            raise ConfigError(section, "empty domain name")
        data_paths.append(
            (
                name,
                _require(parser, section, "statics").strip(),
                _require(parser, section, "events").strip(),
            )
        )

    train, search_draws = _parse_train(parser, seed)
    evaluate = _parse_evaluate(parser)

    domain_names = (
        tuple(spec.name for spec in domains)
        if domains
        else tuple(name for name, _, _ in data_paths)
    )
    for field in ("train_domains", "test_domains"):
        chosen = evaluate[field]
        if chosen is not None:
            for name in chosen:
                if name not in domain_names:
                    raise ConfigError(f"evaluate.{field}", f"unknown domain {name!r}")
    if "pooled" in protocols and len(domain_names) < 2:
        raise ConfigError("run.protocols", "pooled needs at least two domains")

    config = ExperimentConfig(
        output_dir=output_dir,
        seed=seed,
        tasks=tasks,
        protocols=protocols,
        synth_seed=synth_seed,
        domains=domains,
        data_paths=tuple(data_paths),
        train=train,
        search_draws=search_draws,
        **evaluate,
    )
    if domains:
        config.build_profiles()  # validates against the generator's rules
    return config


def _parse_domain(parser, section) -> DomainSpec:
    _check_keys(parser, section, _DOMAIN_KEYS)
    name = section.split(":", 1)[1]
    if not name:
        raise ConfigError(section, "empty domain name")
    get = parser[section].get
    shifts = []
    for task in TASKS:
        raw = get(f"{task}_coef_shift")
        if raw is not None:
            shifts.append((task, _mapping(raw, f"{section}.{task}_coef_shift")))
    return DomainSpec(
        name=name,
        n_stays=_int(_require(parser, section, "n_stays"), f"{section}.n_stays", minimum=1),
        los_log_mean=_float(get("los_log_mean", repr(_LOS_MEAN_DEFAULT)), f"{section}.los_log_mean"),
        los_log_sd=_float(get("los_log_sd", repr(_LOS_SD_DEFAULT)), f"{section}.los_log_sd", exclusive_min=0.0),
        n_hospitals=_int(get("n_hospitals", "0"), f"{section}.n_hospitals", minimum=0),
        prevalence_multiplier=_float(
            get("prevalence_multiplier", "1.0"), f"{section}.prevalence_multiplier", exclusive_min=0.0
        ),
        measurement_rate_multiplier=_float(
            get("measurement_rate_multiplier", "1.0"),
            f"{section}.measurement_rate_multiplier", exclusive_min=0.0,
        ),
        feature_mean_offsets=(
            _mapping(get("feature_mean_offsets"), f"{section}.feature_mean_offsets")
            if get("feature_mean_offsets") is not None
            else ()
        ),
        coef_shifts=tuple(shifts),
    )


def _parse_train(parser, seed) -> tuple:
    defaults = TrainConfig()
    penalties = PenaltyConfig()
    if "train" not in parser:
        return dataclasses.replace(defaults, seed=seed), 0
    _check_keys(parser, "train", _TRAIN_KEYS)
    get = parser["train"].get

    objective = get("objective", defaults.objective)
    if objective not in OBJECTIVES:
        raise ConfigError("train.objective", f"unknown objective {objective!r}")
    penalties = PenaltyConfig(
        coral_gamma=_float(get("coral_gamma", repr(penalties.coral_gamma)), "train.coral_gamma", exclusive_min=0.0),
        coral_squared_mean_term=_bool(
            get("coral_squared_mean_term", str(penalties.coral_squared_mean_term).lower()),
            "train.coral_squared_mean_term",
        ),
        vrex_lambda=_float(get("vrex_lambda", repr(penalties.vrex_lambda)), "train.vrex_lambda", exclusive_min=0.0),
        vrex_warmup=_int(get("vrex_warmup", str(penalties.vrex_warmup)), "train.vrex_warmup", minimum=0),
        fishr_lambda=_float(get("fishr_lambda", repr(penalties.fishr_lambda)), "train.fishr_lambda", exclusive_min=0.0),
        fishr_warmup=_int(get("fishr_warmup", str(penalties.fishr_warmup)), "train.fishr_warmup", minimum=0),
        fishr_ema=_float(get("fishr_ema", repr(penalties.fishr_ema)), "train.fishr_ema", exclusive_min=0.0, maximum=1.0),
        mldg_beta=_float(get("mldg_beta", repr(penalties.mldg_beta)), "train.mldg_beta", exclusive_min=0.0),
        mldg_n_meta_test=_int(get("mldg_n_meta_test", str(penalties.mldg_n_meta_test)), "train.mldg_n_meta_test", minimum=1),
        groupdro_eta=_float(get("groupdro_eta", repr(penalties.groupdro_eta)), "train.groupdro_eta", exclusive_min=0.0),
    )
    try:
        train = TrainConfig(
            learning_rate=_float(get("learning_rate", repr(defaults.learning_rate)), "train.learning_rate", exclusive_min=0.0),
            weight_decay=_float(get("weight_decay", repr(defaults.weight_decay)), "train.weight_decay", minimum=0.0),
            dropout=_float(get("dropout", repr(defaults.dropout)), "train.dropout", minimum=0.0),
            batch_size=_int(get("batch_size", str(defaults.batch_size)), "train.batch_size", minimum=1),
            hidden_dim=_int(get("hidden_dim", str(defaults.hidden_dim)), "train.hidden_dim", minimum=1),
            n_layers=_int(get("n_layers", str(defaults.n_layers)), "train.n_layers", minimum=1),
            max_epochs=_int(get("max_epochs", str(defaults.max_epochs)), "train.max_epochs", minimum=1),
            patience=_int(get("patience", str(defaults.patience)), "train.patience", minimum=1),
            seed=seed,
            objective=objective,
            penalties=penalties,
            grad_clip=_grad_clip(get("grad_clip", "none"), "train.grad_clip"),
            stay_averaged=_bool(get("stay_averaged", str(defaults.stay_averaged).lower()), "train.stay_averaged"),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError("train", str(exc)) from None
    search_draws = _int(get("search_draws", "0"), "train.search_draws", minimum=0)
    return train, search_draws


_POOLED_MERGE = {"auto": None, "merge": True, "separate": False}


def _parse_evaluate(parser) -> dict:
    out = {
        "test_fraction": 0.2,
        "n_folds": 5,
        "train_domains": None,
        "test_domains": None,
        "pooled_merge": None,
        "per_stay": False,
        "calibration_bins": 10,
        "calibration_winsor": 0.999,
    }
    if "evaluate" not in parser:
        return out
    _check_keys(parser, "evaluate", _EVALUATE_KEYS)
    get = parser["evaluate"].get
    out["test_fraction"] = _float(
        get("test_fraction", "0.2"), "evaluate.test_fraction", exclusive_min=0.0, maximum=0.9
    )
    out["n_folds"] = _int(get("n_folds", "5"), "evaluate.n_folds", minimum=2)
    for field in ("train_domains", "test_domains"):
        raw = get(field)
        if raw is not None:
            out[field] = _names(raw, f"evaluate.{field}")
    raw = get("pooled_merge", "auto")
    if raw not in _POOLED_MERGE:
        raise ConfigError("evaluate.pooled_merge", f"expected auto, merge, or separate, got {raw!r}")
    out["pooled_merge"] = _POOLED_MERGE[raw]
    out["per_stay"] = _bool(get("per_stay", "false"), "evaluate.per_stay")
    out["calibration_bins"] = _int(get("calibration_bins", "10"), "evaluate.calibration_bins", minimum=2)
    out["calibration_winsor"] = _float(
        get("calibration_winsor", "0.999"), "evaluate.calibration_winsor",
        exclusive_min=0.0, maximum=1.0,
    )
    return out


def load_config(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _fmt_mapping(pairs) -> str:
    return ",".join(f"{name}:{value!r}" for name, value in pairs)


def resolved_text(config: ExperimentConfig) -> str:
    """Canonical INI with every effective value written out."""
    out = io.StringIO()
    out.write("[run]\n")
    out.write(f"output_dir = {config.output_dir}\n")
    out.write(f"seed = {config.seed}\n")
    out.write(f"tasks = {','.join(config.tasks)}\n")
    out.write(f"protocols = {','.join(config.protocols)}\n")

    if config.domains:
        out.write("\n[synth]\n")
        out.write(f"seed = {config.synth_seed}\n")
        for spec in config.domains:
            out.write(f"\n[domain:{spec.name}]\n")
            out.write(f"n_stays = {spec.n_stays}\n")
            out.write(f"los_log_mean = {spec.los_log_mean!r}\n")
            out.write(f"los_log_sd = {spec.los_log_sd!r}\n")
            out.write(f"n_hospitals = {spec.n_hospitals}\n")
            out.write(f"prevalence_multiplier = {spec.prevalence_multiplier!r}\n")
            out.write(f"measurement_rate_multiplier = {spec.measurement_rate_multiplier!r}\n")
            if spec.feature_mean_offsets:
                out.write(f"feature_mean_offsets = {_fmt_mapping(spec.feature_mean_offsets)}\n")
            for task, shifts in spec.coef_shifts:
                out.write(f"{task}_coef_shift = {_fmt_mapping(shifts)}\n")
    for name, statics, events in config.data_paths:
        out.write(f"\n[data:{name}]\n")
        out.write(f"statics = {statics}\n")
        out.write(f"events = {events}\n")

    train = config.train
    out.write("\n[train]\n")
    out.write(f"objective = {train.objective}\n")
    for key in ("learning_rate", "weight_decay", "dropout"):
        out.write(f"{key} = {getattr(train, key)!r}\n")
    for key in ("batch_size", "hidden_dim", "n_layers", "max_epochs", "patience"):
        out.write(f"{key} = {getattr(train, key)}\n")
    out.write(f"grad_clip = {'none' if train.grad_clip is None else repr(train.grad_clip)}\n")
    out.write(f"stay_averaged = {_fmt(train.stay_averaged)}\n")
    out.write(f"search_draws = {config.search_draws}\n")
    for key in (
        "coral_gamma", "coral_squared_mean_term", "vrex_lambda", "vrex_warmup",
        "fishr_lambda", "fishr_warmup", "fishr_ema", "mldg_beta",
        "mldg_n_meta_test", "groupdro_eta",
    ):
        out.write(f"{key} = {_fmt(getattr(train.penalties, key))}\n")

    out.write("\n[evaluate]\n")
    out.write(f"test_fraction = {config.test_fraction!r}\n")
    out.write(f"n_folds = {config.n_folds}\n")
    if config.train_domains is not None:
        out.write(f"train_domains = {','.join(config.train_domains)}\n")
    if config.test_domains is not None:
        out.write(f"test_domains = {','.join(config.test_domains)}\n")
    merge_word = {None: "auto", True: "merge", False: "separate"}[config.pooled_merge]
    out.write(f"pooled_merge = {merge_word}\n")
    out.write(f"per_stay = {_fmt(config.per_stay)}\n")
    out.write(f"calibration_bins = {config.calibration_bins}\n")
    out.write(f"calibration_winsor = {config.calibration_winsor!r}\n")
    return out.getvalue()


def config_stamp(config: ExperimentConfig) -> str:
    """Twelve hex characters identifying the resolved configuration."""
    return hashlib.sha256(resolved_text(config).encode("utf-8")).hexdigest()[:12]
