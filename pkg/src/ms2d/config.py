"""Processing configuration read from ``key = value`` files."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field, replace

from . import keyvalue
from .denoise import DenoiseSpec
from .window import ApodizationSpec

DEFAULT_CHUNK_BYTES = 64 << 20
ENV_CHUNK_BYTES = "MS2D_CHUNK_BYTES"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PhaseSettings:
    """Explicit coefficients, or ``optimize`` with seed ranges (None = default)."""

    coeffs: tuple | None = None
    optimize: bool = False
    seed_c1: tuple | None = None
    seed_c2: tuple | None = None
    n_columns: int = 8  # vertical only: precursor scans summed for optimization

    @property
    def defined(self) -> bool:
        return self.coeffs is not None or self.optimize


@dataclass(frozen=True)
class LPSettings:
    enabled: bool = False
    order: int | None = None  # None: min(10, 2 * n_precursors)
    n_corrupt: int | str = "auto"
    train_fraction: float = 0.5
    n_precursors: int = 5

    def __post_init__(self):
        if not 0 < self.train_fraction <= 1:
            raise ConfigError("lp.train_fraction must lie in (0, 1]")
        if self.order is not None and self.order < 1:
            raise ConfigError("lp.order must be >= 1")
        if self.n_corrupt != "auto" and int(self.n_corrupt) < 0:
            raise ConfigError("lp.n_corrupt must be >= 0 or 'auto'")


@dataclass(frozen=True)
class ProcessingConfig:
    mode: str = "magnitude"
    apod_h: ApodizationSpec = field(default_factory=lambda: ApodizationSpec("kv-asym", 0.25))
    apod_v: ApodizationSpec = field(default_factory=lambda: ApodizationSpec("sine-bell", 0.25, 0.5))
    zerofill_h: int | None = None  # None: 2 in absorption, 1 in magnitude
    zerofill_v: int = 2
    phase_h: PhaseSettings = PhaseSettings()
    phase_v: PhaseSettings = PhaseSettings()
    lp: LPSettings = LPSettings()
    denoise: DenoiseSpec = DenoiseSpec()
    chunk_bytes: int = DEFAULT_CHUNK_BYTES
    threads: int = 1
    cal_h: tuple | None = None  # (A, B) overrides
    cal_v: tuple | None = None  # (A, B, offset) overrides
    out_kind: str = "real-f64"

    def __post_init__(self):
        if self.mode not in ("magnitude", "absorption"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.zerofill_h is not None and self.zerofill_h < 0 or self.zerofill_v < 0:
            raise ConfigError("zerofill counts must be >= 0")
        if self.chunk_bytes <= 0:
            raise ConfigError("chunk budget must be positive")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.out_kind not in ("real-f32", "real-f64"):
            raise ConfigError("out_kind must be real-f32 or real-f64")

    @property
    def zf_h(self) -> int:
        if self.zerofill_h is not None:
            return self.zerofill_h
        return 2 if self.mode == "absorption" else 1

    def validate(self) -> None:
        """Checks that need the whole config (called before processing)."""
        if self.mode == "absorption":
            if not (self.phase_h.defined and self.phase_v.defined):
                raise ConfigError("absorption mode requires phase model "
                                  "(phase_h/phase_v coefficients or optimize = true)")

    def effective_chunk_bytes(self) -> int:
        env = os.environ.get(ENV_CHUNK_BYTES)
        if env:
            try:
                value = int(float(env))
            except ValueError:
                raise ConfigError(f"{ENV_CHUNK_BYTES} is not a byte count: {env!r}") from None
            if value <= 0:
                raise ConfigError(f"{ENV_CHUNK_BYTES} must be positive")
            return value
        return self.chunk_bytes

    def to_items(self) -> dict:
        """Canonical flat form; also the input of :meth:`hash`."""
        items = {"mode": self.mode, "zerofill_h": self.zf_h, "zerofill_v": self.zerofill_v}
        for name, a in (("apod_h", self.apod_h), ("apod_v", self.apod_v)):
            items[f"{name}.family"] = a.family
            items[f"{name}.f"] = float(a.F)
            items[f"{name}.sine_shift"] = float(a.sine_shift)
        for name, p, keys in (("phase_h", self.phase_h, ("c0", "c1", "c2")),
                              ("phase_v", self.phase_v, ("d0", "d1"))):
            if p.coeffs is not None:
                for k, v in zip(keys, p.coeffs):
                    items[f"{name}.{k}"] = float(v)
            items[f"{name}.optimize"] = p.optimize
            if p.seed_c1 is not None:
                items[f"{name}.seed_{keys[1]}"] = f"{p.seed_c1[0]!r}:{p.seed_c1[1]!r}"
            if p.seed_c2 is not None and name == "phase_h":
                items[f"{name}.seed_c2"] = f"{p.seed_c2[0]!r}:{p.seed_c2[1]!r}"
        items["phase_v.n_columns"] = self.phase_v.n_columns
        items["lp.enabled"] = self.lp.enabled
        items["lp.order"] = "auto" if self.lp.order is None else self.lp.order
        items["lp.n_corrupt"] = self.lp.n_corrupt
        items["lp.train_fraction"] = float(self.lp.train_fraction)
        items["lp.n_precursors"] = self.lp.n_precursors
        items["denoise.enabled"] = self.denoise.enabled
        items["denoise.rank"] = self.denoise.rank
        items["denoise.iterations"] = self.denoise.iterations
        items["denoise.hankel_rows"] = self.denoise.hankel_rows or "auto"
        if self.cal_h is not None:
            items["cal_h.a"], items["cal_h.b"] = map(float, self.cal_h)
        if self.cal_v is not None:
            items["cal_v.a"], items["cal_v.b"], items["cal_v.offset_hz"] = map(float, self.cal_v)
        items["out_kind"] = self.out_kind
        return items

    def hash(self) -> str:
        text = "\n".join(f"{k}={keyvalue.format_value(v)}" for k, v in sorted(self.to_items().items()))
        return hashlib.sha256(text.encode()).hexdigest()

    def with_mode(self, mode: str) -> "ProcessingConfig":
        return replace(self, mode=mode)


def _apod(kv, prefix, default: ApodizationSpec) -> ApodizationSpec:
    family = kv.get(f"{prefix}.family", default.family)
    F = float(kv.get(f"{prefix}.f", default.F))
    shift = float(kv.get(f"{prefix}.sine_shift", default.sine_shift))
    if f"{prefix}.sqrt_fall" in kv:
        sqrt_fall = keyvalue.as_bool(kv[f"{prefix}.sqrt_fall"])
        if family.startswith("kv-asym"):
            family = "kv-asym-sqrt" if sqrt_fall else "kv-asym"
        elif sqrt_fall:
            raise ConfigError(f"{prefix}.sqrt_fall applies to kv-asym windows only")
    return ApodizationSpec(family, F, shift)


def _phase(kv, prefix, keys, default: PhaseSettings) -> PhaseSettings:
    given = [k for k in keys if f"{prefix}.{k}" in kv]
    coeffs = None
    if given:
        coeffs = tuple(float(kv.get(f"{prefix}.{k}", 0.0)) for k in keys)
    optimize = keyvalue.as_bool(kv.get(f"{prefix}.optimize", "false"))
    seed1 = kv.get(f"{prefix}.seed_{keys[1]}")
    seed2 = kv.get(f"{prefix}.seed_c2") if len(keys) == 3 else None
    return PhaseSettings(
        coeffs=coeffs, optimize=optimize,
        seed_c1=keyvalue.as_range(seed1) if seed1 else None,
        seed_c2=keyvalue.as_range(seed2) if seed2 else None,
        n_columns=int(kv.get(f"{prefix}.n_columns", default.n_columns)),
    )


KNOWN_PREFIXES = ("apod_h.", "apod_v.", "phase_h.", "phase_v.", "lp.", "denoise.", "cal_h.", "cal_v.")
KNOWN_KEYS = ("mode", "zerofill_h", "zerofill_v", "chunk_bytes", "threads", "out_kind")


def config_from_items(kv: dict, base: ProcessingConfig | None = None) -> ProcessingConfig:
    base = base or ProcessingConfig()
    for key in kv:
        if key not in KNOWN_KEYS and not key.startswith(KNOWN_PREFIXES):
            raise ConfigError(f"unknown config key {key!r}")
    try:
        order = kv.get("lp.order", "auto")
        n_corrupt = kv.get("lp.n_corrupt", "auto")
        lp = LPSettings(
            enabled=keyvalue.as_bool(kv.get("lp.enabled", str(base.lp.enabled))),
            order=None if order == "auto" else int(order),
            n_corrupt="auto" if n_corrupt == "auto" else int(n_corrupt),
            train_fraction=float(kv.get("lp.train_fraction", base.lp.train_fraction)),
            n_precursors=int(kv.get("lp.n_precursors", base.lp.n_precursors)),
        )
        hrows = kv.get("denoise.hankel_rows", "auto")
        den = DenoiseSpec(
            enabled=keyvalue.as_bool(kv.get("denoise.enabled", str(base.denoise.enabled))),
            rank=int(kv.get("denoise.rank", base.denoise.rank)),
            iterations=int(kv.get("denoise.iterations", base.denoise.iterations)),
            hankel_rows=None if hrows == "auto" else int(hrows),
        )
        cal_h = base.cal_h
        if "cal_h.a" in kv:
            cal_h = (float(kv["cal_h.a"]), float(kv.get("cal_h.b", 0.0)))
        cal_v = base.cal_v
        if "cal_v.a" in kv:
            cal_v = (float(kv["cal_v.a"]), float(kv.get("cal_v.b", 0.0)),
                     float(kv.get("cal_v.offset_hz", 0.0)))
        zf_h = kv.get("zerofill_h")
        return ProcessingConfig(
            mode=kv.get("mode", base.mode),
            apod_h=_apod(kv, "apod_h", base.apod_h),
            apod_v=_apod(kv, "apod_v", base.apod_v),
            zerofill_h=base.zerofill_h if zf_h is None else int(zf_h),
            zerofill_v=int(kv.get("zerofill_v", base.zerofill_v)),
            phase_h=_phase(kv, "phase_h", ("c0", "c1", "c2"), base.phase_h),
            phase_v=_phase(kv, "phase_v", ("d0", "d1"), base.phase_v),
            lp=lp, denoise=den,
            chunk_bytes=int(float(kv.get("chunk_bytes", base.chunk_bytes))),
            threads=int(kv.get("threads", base.threads)),
            cal_h=cal_h, cal_v=cal_v,
            out_kind=kv.get("out_kind", base.out_kind),
        )
    except (ValueError, keyvalue.KeyValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def load_config(path, **overrides) -> ProcessingConfig:
    kv = keyvalue.read_file(path) if path else {}
    kv.update({k: str(v) for k, v in overrides.items() if v is not None})
    return config_from_items(kv)
