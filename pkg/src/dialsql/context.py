"""Method configurations, model assembly, input preparation, checkpoints.

A ContextConfig names how dialogue history enters the model: through
the question side (concatenation, a turn-level encoder, or an
importance gate) and/or through the previous turn's SQL (attention,
action copy, tree copy). The named registry ships as packaged JSON so
experiment sets are reproducible against a fixed manifest.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .data import Dialogue, Vocabulary
from .grammar import GrammarOptions, Production, agnostic_productions
from .nn import ContractError, Parameter, get_precision, init_uniform

__all__ = [
    "ConfigError",
    "ContextConfig",
    "ModelBundle",
    "TurnInputs",
    "method_names",
    "method_config",
    "build_model",
    "prepare_inputs",
    "config_hash",
    "save_checkpoint",
    "load_checkpoint",
]

QUESTION_METHODS = ("none", "concat", "turn", "gate")
SQL_METHODS = ("sql_attn", "action_copy", "tree_copy")

DEFAULT_DIMS = {"embedding": 100, "hidden": 200, "distance": 100}


class ConfigError(Exception):
    """A configuration is malformed or internally inconsistent."""


@dataclass(frozen=True)
class ContextConfig:
    question_method: str = "none"
    sql_methods: frozenset[str] = frozenset()
    h: int = 5                                   # recent-question window
    dims: tuple[tuple[str, int], ...] = tuple(sorted(DEFAULT_DIMS.items()))

    def __post_init__(self):
        if self.question_method not in QUESTION_METHODS:
            raise ConfigError(f"unknown question method {self.question_method!r}")
        bad = set(self.sql_methods) - set(SQL_METHODS)
        if bad:
            raise ConfigError(f"unknown sql methods {sorted(bad)}")
        if self.h < 0:
            raise ConfigError("history window h must be >= 0")
        dims = dict(self.dims)
        if set(dims) != set(DEFAULT_DIMS):
            raise ConfigError(f"dims must have keys {sorted(DEFAULT_DIMS)}")
        for k, v in dims.items():
            if not isinstance(v, int) or v <= 0:
                raise ConfigError(f"dimension {k} must be a positive integer")
        if dims["hidden"] % 2:
            raise ConfigError("hidden dimension must be even (split across directions)")

    @property
    def embedding_dim(self) -> int:
        return dict(self.dims)["embedding"]

    @property
    def hidden_dim(self) -> int:
        return dict(self.dims)["hidden"]

    @property
    def distance_dim(self) -> int:
        return dict(self.dims)["distance"]

    @property
    def memory_dim(self) -> int:
        """Width of one attention-memory row."""
        extra = self.distance_dim if self.question_method == "turn" else 0
        return self.hidden_dim + extra

    def to_dict(self) -> dict:
        return {
            "question_method": self.question_method,
            "sql_methods": sorted(self.sql_methods),
            "h": self.h,
            "dims": dict(self.dims),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ContextConfig":
        allowed = {"question_method", "sql_methods", "h", "dims"}
        unknown = set(data) - allowed
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        dims = dict(DEFAULT_DIMS)
        dims.update(data.get("dims", {}))
        return cls(
            question_method=data.get("question_method", "none"),
            sql_methods=frozenset(data.get("sql_methods", [])),
            h=data.get("h", 5),
            dims=tuple(sorted(dims.items())),
        )


def _manifest() -> dict:
    text = resources.files("dialsql").joinpath("configs/methods.json").read_text("utf-8")
    return json.loads(text)


def method_names() -> list[str]:
    """All registered configurations, 'none' first."""
    return list(_manifest())


def method_config(name: str, h: int = 5, dims: dict | None = None) -> ContextConfig:
    manifest = _manifest()
    if name not in manifest:
        raise ConfigError(f"unknown method {name!r}; choose from {', '.join(manifest)}")
    entry = dict(manifest[name])
    entry["h"] = h
    if dims is not None:
        entry["dims"] = dims
    return ContextConfig.from_dict(entry)


def config_hash(config: ContextConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


# ---------------------------------------------------------------------------
# Model assembly


@dataclass
class ModelBundle:
    """Everything a decode needs: parameters, config, vocabulary."""

    config: ContextConfig
    vocab: Vocabulary
    params: dict[str, Parameter]
    agnostic: tuple[Production, ...] = field(default=None)

    def __post_init__(self):
        if self.agnostic is None:
            self.agnostic = tuple(agnostic_productions(GrammarOptions()))
        self.agnostic_index = {p: k for k, p in enumerate(self.agnostic)}

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())


def _add_lstm(params: dict, rng, prefix: str, input_size: int, hidden: int) -> None:
    b = init_uniform(rng, (4 * hidden,))
    b[hidden:2 * hidden] = 1.0                 # forget-gate bias
    params[f"{prefix}.w_ih"] = Parameter(f"{prefix}.w_ih",
                                         init_uniform(rng, (4 * hidden, input_size)))
    params[f"{prefix}.w_hh"] = Parameter(f"{prefix}.w_hh",
                                         init_uniform(rng, (4 * hidden, hidden)))
    params[f"{prefix}.b"] = Parameter(f"{prefix}.b", b)


def _add(params: dict, rng, name: str, shape) -> None:
    params[name] = Parameter(name, init_uniform(rng, shape))


def build_model(config: ContextConfig, vocab: Vocabulary, seed: int) -> ModelBundle:
    """Instantiate exactly the parameters the configuration uses."""
    rng = np.random.default_rng(seed)
    e = config.embedding_dim
    hid = config.hidden_dim
    half = hid // 2
    mem = config.memory_dim
    agnostic = tuple(agnostic_productions(GrammarOptions()))

    params: dict[str, Parameter] = {}
    _add(params, rng, "word_emb", (len(vocab), e))
    _add(params, rng, "action_emb", (len(agnostic), e))
    _add(params, rng, "bos_emb", (e,))

    q_input = e + (hid if config.question_method == "turn" else 0)
    _add_lstm(params, rng, "q_enc.fwd", q_input, half)
    _add_lstm(params, rng, "q_enc.bwd", q_input, half)
    _add_lstm(params, rng, "schema_enc", e, e)

    if config.question_method == "turn":
        _add_lstm(params, rng, "turn_enc", hid, hid)
        _add(params, rng, "dist_emb", (config.h + 1, config.distance_dim))
    if config.question_method == "gate":
        _add(params, rng, "gate.u", (hid, hid))
        _add(params, rng, "gate.w", (hid, hid))
        _add(params, rng, "gate.v", (hid,))

    dec_input = e + mem + (hid if "sql_attn" in config.sql_methods else 0)
    _add_lstm(params, rng, "dec", dec_input, hid)
    _add(params, rng, "attn.we", (mem, hid))
    _add(params, rng, "out.wo", (hid + mem, e))
    params["link.w_exact"] = Parameter("link.w_exact", np.asarray(1.0))
    params["link.w_partial"] = Parameter("link.w_partial", np.asarray(0.5))

    if config.sql_methods:
        _add_lstm(params, rng, "sql_enc.fwd", e, half)
        _add_lstm(params, rng, "sql_enc.bwd", e, half)
    if "sql_attn" in config.sql_methods:
        _add(params, rng, "sql_attn.we", (hid, hid))
    if "action_copy" in config.sql_methods:
        _add(params, rng, "copy.wl", (hid, hid))
        _add(params, rng, "copy.wc", (hid,))
        params["copy.bc"] = Parameter("copy.bc", np.asarray(0.0))
    if "tree_copy" in config.sql_methods:
        _add(params, rng, "tree.wt", (hid, hid))

    return ModelBundle(config, vocab, params, agnostic)


# ---------------------------------------------------------------------------
# Per-turn input preparation


@dataclass
class TurnInputs:
    """What the encoders see for one turn."""

    segments: list[list[str]]        # token sequences, oldest first, current last
    distances: list[int]             # per segment: current turn index minus its own
    precedent: tuple[Production, ...] | None  # previous turn's query, if any


def prepare_inputs(dialogue: Dialogue, turn_index: int, config: ContextConfig,
                   gold_mode: bool = True,
                   predictions: dict[int, tuple[Production, ...] | None] | None = None,
                   ) -> TurnInputs:
    """Select the question window and the precedent query for one turn.

    In gold mode the precedent is the previous turn's gold actions
    (teacher forcing); otherwise it is the model's own prediction for
    that turn, read from ``predictions``.
    """
    n = len(dialogue.turns)
    if not 1 <= turn_index <= n:
        raise ContractError(f"turn {turn_index} outside dialogue of {n} turns")
    first = max(1, turn_index - config.h)
    window = [list(dialogue.turns[j - 1].question) for j in range(first, turn_index + 1)]

    if config.question_method == "concat":
        segments = [[t for seg in window for t in seg]]
        distances = [0]
    elif config.question_method in ("turn", "gate"):
        segments = window
        distances = [turn_index - j for j in range(first, turn_index + 1)]
    else:
        segments = [window[-1]]
        distances = [0]

    precedent: tuple[Production, ...] | None = None
    if config.sql_methods and turn_index > 1:
        if gold_mode:
            precedent = dialogue.turns[turn_index - 2].gold_actions
        elif predictions is not None:
            precedent = predictions.get(turn_index - 1)
    return TurnInputs(segments, distances, precedent)


# ---------------------------------------------------------------------------
# Checkpoints

_FORMAT = "dialsql-checkpoint-v1"


def save_checkpoint(bundle: ModelBundle, path: str | Path) -> None:
    """Write a fully deterministic JSON checkpoint (arrays as base64)."""
    arrays = {}
    for name, p in bundle.params.items():
        # ascontiguousarray promotes 0-d arrays to 1-d; keep the true shape
        data = np.ascontiguousarray(p.values)
        arrays[name] = {
            "shape": list(p.values.shape),
            "dtype": data.dtype.name,
            "data": base64.b64encode(data.tobytes()).decode("ascii"),
        }
    blob = {
        "format": _FORMAT,
        "precision": get_precision(),
        "config": bundle.config.to_dict(),
        "config_hash": config_hash(bundle.config),
        "vocab": bundle.vocab.to_list(),
        "params": arrays,
    }
    text = json.dumps(blob, sort_keys=True, separators=(",", ":"))
    Path(path).write_text(text, encoding="utf-8")


def load_checkpoint(path: str | Path) -> ModelBundle:
    """Rebuild a bundle; array bytes are restored exactly as saved."""
    try:
        blob = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: not a checkpoint ({err.msg})") from err
    if blob.get("format") != _FORMAT:
        raise ConfigError(f"{path}: unrecognized checkpoint format")
    config = ContextConfig.from_dict(blob["config"])
    vocab = Vocabulary.from_list(blob["vocab"])
    params: dict[str, Parameter] = {}
    for name, spec in blob["params"].items():
        raw = base64.b64decode(spec["data"])
        values = np.frombuffer(raw, dtype=np.dtype(spec["dtype"])).reshape(spec["shape"])
        p = Parameter(name, np.zeros(values.shape, dtype=values.dtype))
        p.values = values.copy()
        params[name] = p
    return ModelBundle(config, vocab, params)
