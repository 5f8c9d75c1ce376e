from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, NamedTuple, Optional, Tuple

LOGGER = logging.getLogger("parashard.config")

TRANSFORMER = "transformer"
MAMBA2 = "mamba2"
BLOCK_KINDS = (TRANSFORMER, MAMBA2)

TRAINING = "training"
PREFILL = "prefill"
MODES = (TRAINING, PREFILL)

TP_PLAIN = "plain"
TP_SP = "tpsp"
TP_UP = "tpup"
TP_FLAVORS = (TP_PLAIN, TP_SP, TP_UP)

_TRANSFORMER_REQUIRED = ("a", "k", "d_h", "I")
_MAMBA_REQUIRED = ("n", "expand_mamba", "ngroups_ssm", "h", "p", "l")


class ParashardError(RuntimeError):
    pass


class ConfigError(ParashardError, ValueError):
    def __init__(self, message: str, field: Optional[str] = None, rule: Optional[str] = None) -> None:
        super().__init__(message)
        self.field = field
        self.rule = rule


class BindingError(ParashardError, ValueError):
    pass


class UnsupportedBlockError(ParashardError, ValueError):
    pass


class UnsupportedFlavorError(ParashardError, ValueError):
    pass


class ChunkingError(ParashardError, ValueError):
    pass


class InvalidGroupError(ParashardError, ValueError):
    pass


class InvalidBandwidthError(ParashardError, ValueError):
    pass


class MetricError(ParashardError, ValueError):
    pass


class UnknownReferenceError(ParashardError, KeyError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; transformer fields and Mamba fields share one record."""

    name: str
    block_kind: str
    layers: int
    d: int
    a: int = 0
    k: int = 0
    d_h: int = 0
    I: int = 0
    v: int = 0
    n: int = 0
    expand_mamba: int = 0
    d_inner: int = 0
    ngroups_ssm: int = 0
    h: int = 0
    p: int = 0
    l: int = 0
    a_byte: int = 2
    w_byte: int = 2

    @property
    def is_transformer(self) -> bool:
        return self.block_kind == TRANSFORMER

    @property
    def is_mamba(self) -> bool:
        return self.block_kind == MAMBA2


@dataclass(frozen=True)
class WorkloadSpec:
    b: int
    global_batch: int
    s: int
    mode: str = TRAINING
    out_tokens: int = 1

    @property
    def tokens_per_step(self) -> int:
        return self.global_batch * self.s

    @property
    def is_training(self) -> bool:
        return self.mode == TRAINING


@dataclass(frozen=True)
class ClusterSpec:
    world: int
    devices_per_node: int
    mem_capacity: int
    cube_peak: float
    vector_peak: float
    mem_bandwidth: float
    intra_bw: float
    inter_bw: float
    training_state_bytes_per_param: int = 0
    # seconds per layer per micro-batch that do not shrink with the shard size
    layer_launch_overhead: float = 0.0

    @property
    def nodes(self) -> int:
        return self.world // self.devices_per_node


@dataclass(frozen=True)
class ParallelConfig:
    dp: int = 1
    pp: int = 1
    tp: int = 1
    cp: int = 1
    tp_flavor: str = TP_PLAIN

    @property
    def degrees(self) -> Tuple[int, int, int, int]:
        return (self.dp, self.pp, self.tp, self.cp)

    @property
    def world(self) -> int:
        return self.dp * self.pp * self.tp * self.cp

    def label(self) -> str:
        return "({},{},{},{})".format(*self.degrees)


@dataclass(frozen=True)
class SLOSpec:
    min_throughput: Optional[float] = None
    max_ttft: Optional[float] = None
    percentile_q: float = 0.95


@dataclass(frozen=True)
class DerivedDims:
    d_inner: int
    d_inproj: int


@dataclass(frozen=True)
class BoundConfig:
    cfg: ParallelConfig
    cluster: ClusterSpec

    def unbind(self) -> ParallelConfig:
        return self.cfg


class ConfigBundle(NamedTuple):
    model: ModelSpec
    workload: WorkloadSpec
    cluster: ClusterSpec
    slo: SLOSpec


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def _fail(field: str, rule: str) -> ConfigError:
    return ConfigError(f"{field}: {rule}", field=field, rule=rule)


def validate_model(m: ModelSpec) -> ModelSpec:
    if not m.name:
        raise _fail("model.name", "must be non-empty")
    if m.block_kind not in BLOCK_KINDS:
        raise _fail("model.block_kind", f"must be one of {', '.join(BLOCK_KINDS)}")
    for name in ("layers", "d", "a_byte", "w_byte"):
        if getattr(m, name) < 1:
            raise _fail(f"model.{name}", "must be >= 1")
    for item in fields(m):
        value = getattr(m, item.name)
        if isinstance(value, int) and value < 0:
            raise _fail(f"model.{item.name}", "must be >= 0")

    if m.is_transformer:
        for name in _TRANSFORMER_REQUIRED:
            if getattr(m, name) < 1:
                raise _fail(f"model.{name}", "must be >= 1 for a transformer block")
        if m.d != m.a * m.d_h:
            raise _fail("model.d", f"d == a * d_h required ({m.a} * {m.d_h} = {m.a * m.d_h} != {m.d})")
        if m.a % m.k:
            raise _fail("model.k", f"k must divide a ({m.a} % {m.k} != 0)")
    else:
        for name in _MAMBA_REQUIRED:
            if getattr(m, name) < 1:
                raise _fail(f"model.{name}", "must be >= 1 for a mamba2 block")
        if m.d_inner != m.expand_mamba * m.d:
            raise _fail(
                "model.d_inner",
                f"d_inner == expand_mamba * d required ({m.expand_mamba} * {m.d} != {m.d_inner})",
            )
    return m


def validate_workload(w: WorkloadSpec) -> WorkloadSpec:
    for name in ("b", "global_batch", "s", "out_tokens"):
        if getattr(w, name) < 1:
            raise _fail(f"workload.{name}", "must be >= 1")
    if w.global_batch < w.b:
        raise _fail("workload.global_batch", "must be >= b")
    if w.mode not in MODES:
        raise _fail("workload.mode", f"must be one of {', '.join(MODES)}")
    return w


def validate_cluster(c: ClusterSpec) -> ClusterSpec:
    for name in ("world", "devices_per_node", "mem_capacity"):
        if getattr(c, name) < 1:
            raise _fail(f"cluster.{name}", "must be >= 1")
    if c.world % c.devices_per_node:
        raise _fail("cluster.world", "world % devices_per_node must be 0")
    for name in ("cube_peak", "vector_peak", "mem_bandwidth", "intra_bw", "inter_bw"):
        if not getattr(c, name) > 0:
            raise _fail(f"cluster.{name}", "must be positive")
    if c.cube_peak < c.vector_peak:
        raise _fail("cluster.cube_peak", "cube_peak >= vector_peak required")
    if c.training_state_bytes_per_param < 0:
        raise _fail("cluster.training_state_bytes_per_param", "must be >= 0")
    if c.layer_launch_overhead < 0:
        raise _fail("cluster.layer_launch_overhead", "must be >= 0")
    return c


def validate_slo(slo: SLOSpec) -> SLOSpec:
    for name in ("min_throughput", "max_ttft"):
        value = getattr(slo, name)
        if value is not None and not value > 0:
            raise _fail(f"slo.{name}", "must be positive when present")
    if not 0 < slo.percentile_q <= 1:
        raise _fail("slo.percentile_q", "must be in (0, 1]")
    return slo


def validate_parallel(cfg: ParallelConfig) -> ParallelConfig:
    for name, value in zip(("dp", "pp", "tp", "cp"), cfg.degrees):
        if value < 1:
            raise _fail(f"parallel.{name}", "must be >= 1")
    if cfg.tp_flavor not in TP_FLAVORS:
        raise UnsupportedFlavorError(f"unknown tp flavor {cfg.tp_flavor!r}")
    return cfg


def bind(cfg: ParallelConfig, cluster: ClusterSpec) -> BoundConfig:
    validate_parallel(cfg)
    if cfg.world != cluster.world:
        raise BindingError(f"product {cfg.world} ≠ world {cluster.world}")
    return BoundConfig(cfg=cfg, cluster=cluster)


def derive_dims(m: ModelSpec) -> DerivedDims:
    if not m.is_mamba:
        raise UnsupportedBlockError(f"{m.name}: derive_dims needs a mamba2 block, got {m.block_kind}")
    if min(m.d, m.expand_mamba, m.ngroups_ssm, m.n, m.h) < 1:
        raise _fail("model", "d, expand_mamba, ngroups_ssm, n and h must be >= 1")
    d_inner = m.expand_mamba * m.d
    return DerivedDims(d_inner=d_inner, d_inproj=2 * d_inner + 2 * m.ngroups_ssm * m.n + m.h)


def default_tp_flavor(m: ModelSpec) -> str:
    return TP_SP if m.is_mamba else TP_PLAIN


def parse_parallel_tuple(text: str, tp_flavor: str = TP_PLAIN) -> ParallelConfig:
    parts = [part.strip() for part in text.split(",")]
    if len(parts) != 4:
        raise ConfigError(f"parallel tuple must be d,p,t,c (got {text!r})", field="parallel", rule="four degrees")
    try:
        dp, pp, tp, cp = (int(part) for part in parts)
    except ValueError as exc:
        raise ConfigError(f"parallel tuple must hold integers (got {text!r})", field="parallel") from exc
    return validate_parallel(ParallelConfig(dp=dp, pp=pp, tp=tp, cp=cp, tp_flavor=tp_flavor))


# ---------------------------------------------------------------------------
# JSON documents
# ---------------------------------------------------------------------------

_INT_FIELDS = {
    "model": {f.name for f in fields(ModelSpec) if f.type in ("int", int)},
    "workload": {"b", "global_batch", "s", "out_tokens"},
    "cluster": {"world", "devices_per_node", "mem_capacity", "training_state_bytes_per_param"},
    "slo": set(),
}
_STR_FIELDS = {"name", "block_kind", "mode"}


def _coerce(section: str, key: str, value: Any) -> Any:
    where = f"{section}.{key}"
    if key in _STR_FIELDS:
        if not isinstance(value, str):
            raise _fail(where, "must be a string")
        return value
    if value is None:
        if section == "slo" and key != "percentile_q":
            return None
        raise _fail(where, "must not be null")
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise _fail(where, "must be a number")
    if key in _INT_FIELDS[section]:
        if isinstance(value, float):
            if not value.is_integer():
                raise _fail(where, "must be an integer")
            value = int(value)
        return value
    return float(value)


def _section(doc: Dict[str, Any], name: str, record_type: type, required: Tuple[str, ...]) -> Dict[str, Any]:
    raw = doc.get(name, {})
    if not isinstance(raw, dict):
        raise _fail(name, "must be an object")
    known = {f.name for f in fields(record_type)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise _fail(f"{name}.{unknown[0]}", "unknown key")
    for key in required:
        if key not in raw:
            raise _fail(f"{name}.{key}", "required key missing")
    return {key: _coerce(name, key, value) for key, value in raw.items()}


def parse_config(text: str, source: str = "<string>") -> ConfigBundle:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{source}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}",
            field="document",
            rule="parse",
        ) from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}: top level must be an object", field="document", rule="object")
    unknown = sorted(set(doc) - {"model", "workload", "cluster", "slo"})
    if unknown:
        raise _fail(unknown[0], "unknown top-level key")

    model_raw = _section(doc, "model", ModelSpec, ("name", "block_kind", "layers", "d"))
    kind = model_raw["block_kind"]
    required = _TRANSFORMER_REQUIRED if kind == TRANSFORMER else _MAMBA_REQUIRED if kind == MAMBA2 else ()
    for key in required:
        if key not in model_raw:
            raise _fail(f"model.{key}", f"required for a {kind} block")
    if kind == MAMBA2 and "d_inner" not in model_raw:
        model_raw["d_inner"] = model_raw["expand_mamba"] * model_raw["d"]

    model = validate_model(ModelSpec(**model_raw))
    workload = validate_workload(WorkloadSpec(**_section(doc, "workload", WorkloadSpec, ("b", "global_batch", "s"))))
    cluster = validate_cluster(
        ClusterSpec(
            **_section(
                doc,
                "cluster",
                ClusterSpec,
                ("world", "devices_per_node", "mem_capacity", "cube_peak", "vector_peak", "mem_bandwidth", "intra_bw", "inter_bw"),
            )
        )
    )
    slo = validate_slo(SLOSpec(**_section(doc, "slo", SLOSpec, ())))
    LOGGER.debug("loaded %s: %s block, %d layers, world %d", source, model.block_kind, model.layers, cluster.world)
    return ConfigBundle(model, workload, cluster, slo)


def load_config(path: Path | str) -> ConfigBundle:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}", field="path", rule="exists") from exc
    return parse_config(text, source=str(path))


def serialize(model: ModelSpec, workload: WorkloadSpec, cluster: ClusterSpec, slo: Optional[SLOSpec] = None) -> str:
    doc = {
        "model": asdict(model),
        "workload": asdict(workload),
        "cluster": asdict(cluster),
        "slo": asdict(slo or SLOSpec()),
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


__all__ = [
    "BLOCK_KINDS",
    "BindingError",
    "BoundConfig",
    "ChunkingError",
    "ClusterSpec",
    "ConfigBundle",
    "ConfigError",
    "DerivedDims",
    "InvalidBandwidthError",
    "InvalidGroupError",
    "MAMBA2",
    "MetricError",
    "ModelSpec",
    "ParallelConfig",
    "ParashardError",
    "PREFILL",
    "SLOSpec",
    "TP_FLAVORS",
    "TP_PLAIN",
    "TP_SP",
    "TP_UP",
    "TRAINING",
    "TRANSFORMER",
    "UnknownReferenceError",
    "UnsupportedBlockError",
    "UnsupportedFlavorError",
    "WorkloadSpec",
    "bind",
    "default_tp_flavor",
    "derive_dims",
    "load_config",
    "parse_config",
    "parse_parallel_tuple",
    "serialize",
    "validate_cluster",
    "validate_model",
    "validate_parallel",
    "validate_slo",
    "validate_workload",
]
