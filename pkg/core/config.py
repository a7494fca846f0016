"""
Run configuration
Typed sections with collected validation, loaded from flat `key = value` files
"""

import difflib
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union, get_type_hints

from dotenv import load_dotenv

from core.exceptions import ConfigError, ValidationError

# Load environment variables
load_dotenv()


MODEL_KINDS = ("sams", "cpa", "conditional")
INFERENCE_MODES = ("mean-field", "corr-e", "corr-z", "corr-both")
LIKELIHOODS = ("auto", "counts", "gaussian")
SPLITS = ("train", "val", "test")
REGIMES = ("fixed-prior", "fixed-sparsity")


# =============================================================================
# VALUE HELPERS
# =============================================================================

TRUE_VALUES = ('true', '1', 'yes', 'on', 'enabled')
FALSE_VALUES = ('false', '0', 'no', 'off', 'disabled')


def parse_bool(key: str, value: str) -> bool:
    """Convert a raw string to boolean"""
    value = value.lower().strip()
    if value in TRUE_VALUES:
        return True
    if value in FALSE_VALUES:
        return False
    raise ValidationError(
        f"Invalid boolean value for {key}",
        field=key, value=value,
        suggestion=f"Use: {', '.join(TRUE_VALUES[:3])} or {', '.join(FALSE_VALUES[:3])}"
    )


def parse_int(key: str, value: str, min_val: int = None, max_val: int = None) -> int:
    """Convert a raw string to integer with bounds"""
    try:
        int_value = int(value.strip())
    except ValueError:
        raise ValidationError("Invalid integer value", field=key, value=value,
                              suggestion="Use a valid integer")

    if min_val is not None and int_value < min_val:
        raise ValidationError(f"Value {int_value} below minimum {min_val}",
                              field=key, value=value, suggestion=f"Use value >= {min_val}")
    if max_val is not None and int_value > max_val:
        raise ValidationError(f"Value {int_value} above maximum {max_val}",
                              field=key, value=value, suggestion=f"Use value <= {max_val}")
    return int_value


def parse_float(key: str, value: str) -> float:
    try:
        return float(value.strip())
    except ValueError:
        raise ValidationError("Invalid number", field=key, value=value,
                              suggestion="Use a decimal value such as 0.1 or 1e-6")


def parse_list(key: str, value: str, separator: str = ',') -> List[str]:
    """Split a raw string into a list; an empty string is an empty list"""
    return [item.strip() for item in value.split(separator) if item.strip()]


def get_bool(key: str, default: bool = False) -> bool:
    """Convert environment variable to boolean"""
    value = os.getenv(key, '').strip()
    return parse_bool(key, value) if value else default


def get_int(key: str, default: int = 0, min_val: int = None, max_val: int = None) -> int:
    """Convert environment variable to integer with validation"""
    value = os.getenv(key)
    return default if value is None else parse_int(key, value, min_val, max_val)


# =============================================================================
# VALIDATION RESULT
# =============================================================================

@dataclass
class ValidationResult:
    """Stores validation results"""
    is_valid: bool = True
    errors: List[ConfigError] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)

    def add_error(self, error: ConfigError):
        self.errors.append(error)
        self.is_valid = False

    def add_warning(self, warning: str):
        self.warnings.append(warning)

    def require(self, condition: bool, message: str, key: str, value: Any = None,
                suggestion: str = None):
        if not condition:
            self.add_error(ValidationError(message, field=key,
                                           value=None if value is None else str(value),
                                           suggestion=suggestion))


def normalize_mode(mode: str) -> str:
    return mode.strip().lower().replace("_", "-")


# =============================================================================
# CONFIGURATION SECTIONS
# =============================================================================

@dataclass
class ModelConfig:
    """Generative model and variational family"""
    kind: str = "sams"
    inference_mode: str = "mean-field"
    latent_dim: int = 10
    alpha: float = 0.1
    beta: float = 1.0
    encoder_hidden: Tuple[int, ...] = (400, 400)
    decoder_hidden: Tuple[int, ...] = (400, 400)
    embedding_hidden: Tuple[int, ...] = (100,)
    temperature: float = 1.0
    likelihood: str = "auto"

    def validate(self) -> ValidationResult:
        result = ValidationResult()

        result.require(self.kind in MODEL_KINDS, f"Unknown model kind '{self.kind}'", "model",
                       self.kind, suggestion=f"Use: {', '.join(MODEL_KINDS)}")

        mode = normalize_mode(self.inference_mode)
        result.require(mode in INFERENCE_MODES, f"Unknown inference mode '{self.inference_mode}'",
                       "inference_mode", self.inference_mode,
                       suggestion=f"Use: {', '.join(INFERENCE_MODES)}")
        if self.kind == "conditional" and mode in INFERENCE_MODES:
            result.require(mode == "mean-field",
                           "Conditional VAE has no masks or embeddings to correlate",
                           "inference_mode", self.inference_mode, suggestion="Use mean-field")

        result.require(self.latent_dim >= 1, "Latent dimension must be positive", "latent_dim",
                       self.latent_dim)
        result.require(0.0 < self.alpha < 1.0, "Mask prior probability must lie in (0, 1)",
                       "alpha", self.alpha)
        result.require(self.beta > 0, "Embedding prior variance must be positive", "beta", self.beta)
        result.require(self.temperature > 0, "Relaxation temperature must be positive",
                       "temperature", self.temperature)
        result.require(self.likelihood in LIKELIHOODS, f"Unknown likelihood '{self.likelihood}'",
                       "likelihood", self.likelihood, suggestion=f"Use: {', '.join(LIKELIHOODS)}")

        for key in ("encoder_hidden", "decoder_hidden", "embedding_hidden"):
            dims = getattr(self, key)
            result.require(all(d >= 1 for d in dims), "Hidden widths must be positive", key, dims)

        if self.kind == "cpa" and self.alpha != ModelConfig.alpha:
            result.add_warning("alpha has no effect for the cpa model (masks are fixed to 1)")

        return result

    @property
    def mode(self) -> str:
        return normalize_mode(self.inference_mode)


@dataclass
class TrainConfig:
    """Stochastic variational inference settings"""
    batch_size: int = 512
    learning_rate: float = 3e-4
    weight_decay: float = 1e-6
    steps: int = 150_000
    particles: int = 1
    checkpoint_every: int = 1000
    val_particles: int = 1
    seed: int = 0
    threads: int = 1

    def validate(self) -> ValidationResult:
        result = ValidationResult()

        for key in ("batch_size", "steps", "particles", "checkpoint_every", "val_particles",
                    "threads"):
            value = getattr(self, key)
            result.require(value >= 1, f"{key} must be at least 1", key, value)

        result.require(self.learning_rate >= 0, "Learning rate cannot be negative",
                       "learning_rate", self.learning_rate)
        result.require(self.weight_decay >= 0, "Weight decay cannot be negative",
                       "weight_decay", self.weight_decay)
        result.require(self.seed >= 0, "Seed cannot be negative", "seed", self.seed)

        if self.checkpoint_every > self.steps:
            result.add_warning("checkpoint_every exceeds steps; only the final step is evaluated")

        return result


@dataclass
class SimConfig:
    """Synthetic ground-truth generator"""
    latent_dim: int = 15
    genes: int = 50
    perturbations: int = 20
    samples_per_treatment: int = 100
    val_samples_per_treatment: int = 10
    mask_density: float = 0.1
    embedding_mean: float = 5.0
    embedding_var: float = 0.5
    hidden: Tuple[int, ...] = (20, 20)
    noise_fraction: float = 0.2
    pilot_cells: int = 10_000
    seed: int = 0

    def validate(self) -> ValidationResult:
        result = ValidationResult()

        for key in ("latent_dim", "genes", "perturbations", "samples_per_treatment"):
            value = getattr(self, key)
            result.require(value >= 1, f"{key} must be at least 1", key, value)

        result.require(self.val_samples_per_treatment >= 0,
                       "Validation cells per treatment cannot be negative",
                       "val_samples_per_treatment", self.val_samples_per_treatment)
        result.require(0.0 <= self.mask_density <= 1.0, "Mask density must lie in [0, 1]",
                       "mask_density", self.mask_density)
        result.require(self.embedding_var > 0, "Embedding variance must be positive",
                       "embedding_var", self.embedding_var)
        result.require(0.0 < self.noise_fraction < 1.0, "Noise fraction must lie in (0, 1)",
                       "noise_fraction", self.noise_fraction,
                       suggestion="0.2 gives 80% signal variance per feature")
        result.require(self.pilot_cells >= 2, "Need at least 2 pilot cells to estimate variance",
                       "pilot_cells", self.pilot_cells)
        result.require(all(d >= 1 for d in self.hidden), "Hidden widths must be positive",
                       "hidden", self.hidden)
        result.require(self.seed >= 0, "Seed cannot be negative", "seed", self.seed)

        return result


@dataclass
class StudyConfig:
    """Mask-recovery grid"""
    samples: Tuple[int, ...] = (50, 100, 200)
    regimes: Tuple[str, ...] = REGIMES
    seeds: Tuple[int, ...] = (0,)
    alpha: float = 0.1
    beta: float = 10.0
    hidden: Tuple[int, ...] = (100, 100)
    steps: int = 20_000
    workers: int = 1

    def validate(self) -> ValidationResult:
        result = ValidationResult()

        result.require(len(self.samples) > 0 and all(n >= 1 for n in self.samples),
                       "Samples per treatment must be positive", "samples", self.samples)
        unknown = [r for r in self.regimes if r not in REGIMES]
        result.require(not unknown and len(self.regimes) > 0, f"Unknown regimes {unknown}",
                       "regimes", self.regimes, suggestion=f"Use: {', '.join(REGIMES)}")
        result.require(len(self.seeds) > 0, "At least one seed is required", "seeds", self.seeds)
        result.require(0.0 < self.alpha < 1.0, "Fixed-prior alpha must lie in (0, 1)",
                       "alpha", self.alpha)
        result.require(self.beta > 0, "Embedding prior variance must be positive", "beta", self.beta)
        result.require(self.steps >= 1, "Training steps per grid cell must be at least 1",
                       "steps", self.steps)
        result.require(self.workers >= 1, "workers must be at least 1", "workers", self.workers)

        return result


@dataclass
class DataConfig:
    """Dataset location and splitting"""
    dataset: Optional[str] = None
    control: Optional[str] = None
    split_fractions: Tuple[float, ...] = (0.8, 0.1, 0.1)
    stratify: bool = True
    split_seed: int = 0
    holdout_fraction: float = 0.0

    def validate(self) -> ValidationResult:
        result = ValidationResult()

        if self.dataset is not None:
            result.require(Path(self.dataset).is_dir(), "Dataset directory not found", "dataset",
                           self.dataset, suggestion="Point dataset at a directory with X.csv and D.csv")

        result.require(len(self.split_fractions) == 3, "Need train, val and test fractions",
                       "split_fractions", self.split_fractions)
        result.require(all(f >= 0 for f in self.split_fractions)
                       and abs(sum(self.split_fractions) - 1.0) < 1e-9,
                       "Split fractions must be non-negative and sum to 1", "split_fractions",
                       self.split_fractions)
        result.require(0.0 <= self.holdout_fraction < 1.0, "Holdout fraction must lie in [0, 1)",
                       "holdout_fraction", self.holdout_fraction)

        return result


@dataclass
class EvalConfig:
    """Held-out evaluation"""
    k: int = 100
    split: str = "test"
    ate: bool = False
    ate_particles: int = 100
    ate_samples: int = 0
    seed: int = 0

    def validate(self) -> ValidationResult:
        result = ValidationResult()

        result.require(self.k >= 1, "K must be at least 1", "k", self.k)
        result.require(self.split in SPLITS, f"Unknown split '{self.split}'", "split", self.split,
                       suggestion=f"Use: {', '.join(SPLITS)}")
        result.require(self.ate_particles >= 1, "ATE particles must be at least 1",
                       "ate_particles", self.ate_particles)
        result.require(self.ate_samples >= 0, "ATE samples cannot be negative", "ate_samples",
                       self.ate_samples, suggestion="0 uses the closed-form likelihood mean")

        return result


@dataclass
class LogConfig:
    """Logging configuration"""
    level: str = "INFO"
    to_file: bool = False
    to_console: bool = True
    dir: str = "logs"
    format: str = "simple"
    use_colors: bool = True
    max_bytes: int = 10 * 1024 * 1024
    backup_count: int = 5

    def validate(self) -> ValidationResult:
        result = ValidationResult()

        valid_levels = ['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL']
        result.require(self.level.upper() in valid_levels, f"Invalid log level '{self.level}'",
                       "level", suggestion=f"Use: {', '.join(valid_levels)}")

        valid_formats = ['simple', 'detailed', 'json']
        result.require(self.format in valid_formats, f"Invalid format '{self.format}'", "format",
                       suggestion=f"Use: {', '.join(valid_formats)}")

        if not self.to_file and not self.to_console:
            result.add_warning("No log output enabled")

        if self.to_file:
            try:
                Path(self.dir).mkdir(parents=True, exist_ok=True)
            except OSError as e:
                result.add_error(ValidationError(f"Cannot create log dir: {e}", field="dir",
                                                 suggestion="Use writable directory"))

        return result

    @classmethod
    def from_env(cls, base: Optional["LogConfig"] = None) -> "LogConfig":
        """Apply SAMS_LOG* environment overrides on top of `base`."""
        base = base or cls()
        level = os.getenv("SAMS_LOG")
        return replace(
            base,
            level=(level or base.level).upper(),
            format=os.getenv("SAMS_LOG_FORMAT", base.format).lower(),
            dir=os.getenv("SAMS_LOG_DIR", base.dir),
            to_file=get_bool("SAMS_LOG_TO_FILE", base.to_file),
            max_bytes=get_int("SAMS_LOG_MAX_BYTES", base.max_bytes, min_val=1024),
        )


# =============================================================================
# FLAT KEY REGISTRY
# =============================================================================

# (attribute on RunConfig, key prefix, section type)
SECTIONS: Tuple[Tuple[str, str, type], ...] = (
    ("model", "", ModelConfig),
    ("train", "", TrainConfig),
    ("sim", "sim_", SimConfig),
    ("study", "study_", StudyConfig),
    ("data", "", DataConfig),
    ("eval", "eval_", EvalConfig),
    ("logging", "log_", LogConfig),
)

def _build_key_index() -> Dict[str, Tuple[str, str, Any]]:
    index: Dict[str, Tuple[str, str, Any]] = {}
    for section, prefix, cls in SECTIONS:
        hints = get_type_hints(cls)
        for f in fields(cls):
            key = prefix + f.name
            # `kind` reads better as `model` in config files
            if section == "model" and f.name == "kind":
                key = "model"
            if key in index:
                raise ConfigError(f"duplicate configuration key '{key}'")
            index[key] = (section, f.name, hints[f.name])
    index["out"] = ("", "out", str)
    return index


KEY_INDEX = _build_key_index()


def coerce_value(key: str, raw: str, annotation: Any) -> Any:
    """Convert a raw config string to the annotated field type"""
    raw = raw.strip()
    origin = getattr(annotation, "__origin__", None)
    args = getattr(annotation, "__args__", ())

    if origin is Union and type(None) in args:
        if raw.lower() in ("", "none", "null"):
            return None
        inner = next(a for a in args if a is not type(None))
        return coerce_value(key, raw, inner)

    if origin in (tuple, Tuple):
        item_type = args[0] if args else str
        return tuple(coerce_value(key, item, item_type) for item in parse_list(key, raw))

    if annotation is bool:
        return parse_bool(key, raw)
    if annotation is int:
        return parse_int(key, raw)
    if annotation is float:
        return parse_float(key, raw)
    return raw


def suggest_key(key: str) -> Optional[str]:
    matches = difflib.get_close_matches(key, list(KEY_INDEX), n=1, cutoff=0.6)
    return matches[0] if matches else None


def parse_config_file(path: Union[str, Path]) -> Dict[str, str]:
    """
    Read a flat `key = value` file.

    Blank lines and `#` comments are skipped; inline `#` starts a comment.
    Unknown keys are rejected with the closest known key as suggestion.
    """
    path = Path(path)
    if not path.is_file():
        raise ValidationError("Config file not found", field="--config", value=str(path),
                              suggestion="Pass an existing key = value file")

    values: Dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ValidationError(f"Line {lineno} is not 'key = value'", field=str(path),
                                  value=line)
        key, value = (part.strip() for part in line.split('=', 1))
        if key not in KEY_INDEX:
            closest = suggest_key(key)
            raise ValidationError(f"Unknown configuration key '{key}' (line {lineno})", field=key,
                                  suggestion=f"Did you mean '{closest}'?" if closest else None)
        values[key] = value
    return values


# =============================================================================
# MAIN CONFIGURATION CLASS
# =============================================================================

@dataclass
class RunConfig:
    """All sections of one command invocation"""
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    study: StudyConfig = field(default_factory=StudyConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    logging: LogConfig = field(default_factory=LogConfig)
    out: str = "runs"

    def set(self, key: str, value: Any) -> None:
        """Set one flat key, coercing strings to the field type"""
        if key not in KEY_INDEX:
            closest = suggest_key(key)
            raise ValidationError(f"Unknown configuration key '{key}'", field=key,
                                  suggestion=f"Did you mean '{closest}'?" if closest else None)
        section, name, annotation = KEY_INDEX[key]
        if isinstance(value, str):
            value = coerce_value(key, value, annotation)
        target = self if not section else getattr(self, section)
        setattr(target, name, value)

    def update(self, values: Dict[str, Any]) -> "RunConfig":
        for key, value in values.items():
            self.set(key, value)
        return self

    def to_flat_dict(self) -> Dict[str, Any]:
        """Config echo keyed by flat key"""
        flat: Dict[str, Any] = {}
        for key, (section, name, _) in KEY_INDEX.items():
            target = self if not section else getattr(self, section)
            value = getattr(target, name)
            flat[key] = list(value) if isinstance(value, tuple) else value
        return flat

    # =========================================================================
    # VALIDATION METHODS
    # =========================================================================

    def validate_all(self) -> ValidationResult:
        """Validate all configuration sections"""
        overall_result = ValidationResult()

        prefixes = {section: prefix for section, prefix, _ in SECTIONS}
        for section_name, _, _ in SECTIONS:
            section_result = getattr(self, section_name).validate()

            for error in section_result.errors:
                if error.field and '.' not in error.field:
                    error.field = f"{section_name}.{prefixes[section_name]}{error.field}"
                overall_result.add_error(error)

            for warning in section_result.warnings:
                overall_result.add_warning(f"{section_name}: {warning}")

        if not self.out:
            overall_result.add_error(ValidationError("Output directory required", field="out"))

        return overall_result

    def raise_if_invalid(self) -> "RunConfig":
        result = self.validate_all()
        if not result.is_valid:
            raise result.errors[0]
        return self

    # =========================================================================
    # DISPLAY METHODS
    # =========================================================================

    def validation_report(self, validation_result: Optional[ValidationResult] = None) -> str:
        """Detailed validation report"""
        validation_result = validation_result or self.validate_all()

        if validation_result.is_valid and not validation_result.warnings:
            return "Configuration is valid"

        lines = ["VALIDATION REPORT", "=" * 40]
        if validation_result.errors:
            lines.append(f"ERRORS ({len(validation_result.errors)}):")
            lines.extend(f"{i}. {error}" for i, error in enumerate(validation_result.errors, 1))
        if validation_result.warnings:
            lines.append(f"WARNINGS ({len(validation_result.warnings)}):")
            lines.extend(f"{i}. {w}" for i, w in enumerate(validation_result.warnings, 1))
        lines.append("=" * 40)
        return "\n".join(lines)


def load_run_config(path: Optional[Union[str, Path]] = None,
                    overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Build a RunConfig from defaults, an optional config file, explicit
    overrides (CLI flags) and SAMS_LOG* environment variables, in that order.
    """
    config = RunConfig()
    if path is not None:
        config.update(parse_config_file(path))
    if overrides:
        config.update({k: v for k, v in overrides.items() if v is not None})
    config.logging = LogConfig.from_env(config.logging)
    return config
