"""Flat key=value run configuration with sections.

The format is deliberately dependency-free and diff-friendly:

    [task]
    kind = reverse        # copy | reverse | substitute
    vocab_size = 64

Unknown sections or keys are rejected, every key has a default, and
parse(serialize(cfg)) == cfg holds exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .errors import ConfigurationError

_TRUE = ("true", "yes", "1", "on")
_FALSE = ("false", "no", "0", "off")


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_tuple(text: str) -> tuple:
    return tuple(int(part.strip()) for part in text.split(","))


@dataclass(frozen=True)
class RunConfig:
    # [run]
    seed: int = 7
    workdir: str = "runs/default"

    # [task]
    kind: str = "reverse"
    vocab_size: int = 64
    min_len: int = 3
    max_len: int = 10
    pairs: int = 25000
    train_frac: float = 0.8
    valid_frac: float = 0.1
    test_frac: float = 0.1

    # [model]
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    model_max_len: int = 64
    dropout: float = 0.1

    # [quant]
    bits: int = 8
    power_of_two: bool = False

    # [schedule]
    fp32_steps: int = 1600
    phase_steps: tuple = (200, 40, 300, 200, 300, 200)
    phase4: bool = True
    phase5: bool = True
    phase6: bool = True
    batch_size: int = 64
    eval_interval: int = 200
    eval_sentences: int = 200

    # [optimizer]
    base_rate: float = 0.08
    warmup: int = 400

    # [decode]
    beam_size: int = 4
    alpha: float = 0.6
    decode_max_len: int = 24


# section -> config key -> (field name, parser)
SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "run": {"seed": ("seed", int), "workdir": ("workdir", str)},
    "task": {
        "kind": ("kind", str),
        "vocab_size": ("vocab_size", int),
        "min_len": ("min_len", int),
        "max_len": ("max_len", int),
        "pairs": ("pairs", int),
        "train_frac": ("train_frac", float),
        "valid_frac": ("valid_frac", float),
        "test_frac": ("test_frac", float),
    },
    "model": {
        "n_layers": ("n_layers", int),
        "d_model": ("d_model", int),
        "n_heads": ("n_heads", int),
        "d_ff": ("d_ff", int),
        "max_len": ("model_max_len", int),
        "dropout": ("dropout", float),
    },
    "quant": {
        "bits": ("bits", int),
        "power_of_two": ("power_of_two", _parse_bool),
    },
    "schedule": {
        "fp32_steps": ("fp32_steps", int),
        "phase_steps": ("phase_steps", _parse_int_tuple),
        "phase4": ("phase4", _parse_bool),
        "phase5": ("phase5", _parse_bool),
        "phase6": ("phase6", _parse_bool),
        "batch_size": ("batch_size", int),
        "eval_interval": ("eval_interval", int),
        "eval_sentences": ("eval_sentences", int),
    },
    "optimizer": {
        "base_rate": ("base_rate", float),
        "warmup": ("warmup", int),
    },
    "decode": {
        "beam_size": ("beam_size", int),
        "alpha": ("alpha", float),
        "max_len": ("decode_max_len", int),
    },
}

_FIELD_TO_KEY = {fname: (section, key)
                 for section, keys in SCHEMA.items()
                 for key, (fname, _) in keys.items()}


def parse_config(text: str) -> RunConfig:
    """Parse config text; unknown sections/keys or bad values reject."""
    values = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigurationError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key = value, got {raw!r}")
        if section is None:
            raise ConfigurationError(f"line {lineno}: key outside any [section]")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in SCHEMA[section]:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r} in [{section}]")
        fname, parser = SCHEMA[section][key]
        try:
            values[fname] = parser(value)
        except ValueError as e:
            raise ConfigurationError(f"line {lineno}: bad value for {key}: {e}") from e
    cfg = RunConfig(**values)
    validate_config(cfg)
    return cfg


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigurationError(f"cannot read config {path}: {e}") from e
    return parse_config(text)


def serialize_config(cfg: RunConfig) -> str:
    """Emit text that parses back to an equal RunConfig."""
    by_section: dict[str, list[str]] = {s: [] for s in SCHEMA}
    for f in fields(cfg):
        section, key = _FIELD_TO_KEY[f.name]
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            rendered = "true" if value else "false"
        elif isinstance(value, tuple):
            rendered = ",".join(str(v) for v in value)
        else:
            rendered = repr(value) if isinstance(value, float) else str(value)
        by_section[section].append(f"{key} = {rendered}")
    blocks = []
    for section, lines in by_section.items():
        if lines:
            blocks.append(f"[{section}]\n" + "\n".join(lines))
    return "\n\n".join(blocks) + "\n"


def validate_config(cfg: RunConfig) -> None:
    total = cfg.train_frac + cfg.valid_frac + cfg.test_frac
    if abs(total - 1.0) > 1e-9:
        raise ConfigurationError(f"split fractions sum to {total!r}, expected 1.0")
    if len(cfg.phase_steps) != 6:
        raise ConfigurationError(
            f"phase_steps needs 6 entries, got {len(cfg.phase_steps)}")
    for name in ("pairs", "fp32_steps", "batch_size", "eval_interval",
                 "eval_sentences", "warmup", "beam_size", "decode_max_len"):
        if getattr(cfg, name) < 1:
            raise ConfigurationError(f"{name} must be >= 1, got {getattr(cfg, name)}")
    if cfg.base_rate <= 0:
        raise ConfigurationError(f"base_rate must be positive, got {cfg.base_rate}")


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    """Apply non-None keyword overrides (CLI flags beat file values)."""
    updates = {k: v for k, v in kw.items() if v is not None}
    out = replace(cfg, **updates)
    validate_config(out)
    return out


# wiring into the library types ------------------------------------------------

def task_spec(cfg: RunConfig):
    from .data import TaskSpec
    return TaskSpec(kind=cfg.kind, vocab_size=cfg.vocab_size,
                    min_len=cfg.min_len, max_len=cfg.max_len)


def model_config(cfg: RunConfig, mode_bits: int | None = None):
    from .model import TransformerConfig
    from .quant import QuantConfig
    return TransformerConfig(
        n_layers=cfg.n_layers, d_model=cfg.d_model, n_heads=cfg.n_heads,
        d_ff=cfg.d_ff, vocab_size=cfg.vocab_size, max_len=cfg.model_max_len,
        dropout=cfg.dropout,
        quant=QuantConfig(bits=mode_bits if mode_bits is not None else cfg.bits,
                          power_of_two_scalars=cfg.power_of_two))


def phase_plan(cfg: RunConfig):
    from .schedule import PhasePlan
    return PhasePlan(steps_per_phase=cfg.phase_steps, run_phase_4=cfg.phase4,
                     run_phase_5=cfg.phase5, run_phase_6=cfg.phase6)


def beam_params(cfg: RunConfig, beam: int | None = None, alpha: float | None = None):
    from .decoding import BeamParams
    return BeamParams(beam_size=beam if beam is not None else cfg.beam_size,
                      alpha=alpha if alpha is not None else cfg.alpha,
                      max_len=cfg.decode_max_len)
