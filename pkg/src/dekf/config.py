"""Experiment configuration files (TOML).

A configuration names the model, the observation family, one block of prior
and drift hyperparameters per entity namespace, and the experiment settings.
Drift is given as a half-life in steps and a steady-state scale, so that the
per-step memory is ``alpha = exp(ln(0.5) / half_life_steps)`` and the drift
covariance ``Omega = (1 - alpha^2) * omega_scale * I``.

See ``dekf/configs/*.toml`` for complete examples.
"""

import copy
import json
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError

MODELS = ("glm", "mf", "tf", "fm")
FAMILIES = ("gaussian", "bernoulli", "poisson")
LINKS = ("canonical", "identity", "log", "logit")
METHODS = ("dekf", "dekf_noref", "static", "iekf", "adagrad")
POLICIES = ("thompson", "greedy", "random")

CONFIG_DIR = Path(__file__).parent / "configs"


@dataclass
class NamespaceConfig:
    name: str
    count: int
    pi: float
    Pi_trace: float
    half_life_steps: Optional[float] = None
    omega_scale: float = 0.0


@dataclass
class ExperimentConfig:
    name: str
    model: str
    namespaces: List[NamespaceConfig]
    family: str = "bernoulli"
    link: str = "canonical"
    dispersion: float = 1.0
    rank: int = 1
    fm_dims: List[int] = field(default_factory=lambda: [1])
    n_contexts: int = 100
    context_dim: int = 10
    horizon: int = 1000
    n_sims: int = 1
    seed: int = 0
    dynamic: bool = True
    reference_vectors: bool = True
    update: str = "dekf"
    methods: List[str] = field(default_factory=lambda: ["dekf"])
    prior_perturbation: float = 1e-3
    policies: List[str] = field(default_factory=lambda: list(POLICIES))
    candidates: int = 10
    adagrad_lr: float = 0.1
    adagrad_eps: float = 1e-8
    adagrad_lr_grid: List[float] = field(default_factory=lambda: [0.01, 0.05, 0.1, 0.5])

    def namespace(self, name):
        for ns in self.namespaces:
            if ns.name == name:
                return ns
        raise KeyError(name)

    def entity_dim(self):
        if self.model == "glm":
            return self.context_dim
        if self.model == "fm":
            return sum(self.fm_dims)
        return self.rank

    def replace(self, **changes):
        out = copy.deepcopy(self)
        for k, v in changes.items():
            if not hasattr(out, k):
                raise ConfigError(k, "unknown configuration field")
            setattr(out, k, v)
        return validate(out)

    def to_dict(self):
        return asdict(self)


def _get(table, key, kind, where, default=None, required=False):
    if key not in table:
        if required:
            raise ConfigError(f"{where}.{key}", "missing required field")
        return default
    val = table[key]
    if kind is float and isinstance(val, int) and not isinstance(val, bool):
        val = float(val)
    if kind is int and isinstance(val, float) and val.is_integer():
        val = int(val)
    if kind is not None and not isinstance(val, kind) or (kind in (int, float) and isinstance(val, bool)):
        raise ConfigError(f"{where}.{key}", f"expected {kind.__name__}, got {type(val).__name__}")
    return val


def _list(table, key, kind, where, default):
    val = table.get(key, default)
    if not isinstance(val, list):
        raise ConfigError(f"{where}.{key}", "expected a list")
    out = []
    for v in val:
        if kind is float and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        if not isinstance(v, kind) or isinstance(v, bool):
            raise ConfigError(f"{where}.{key}", f"list entries must be {kind.__name__}")
        out.append(v)
    return out


_KNOWN = {
    "experiment": {"name", "horizon", "n_sims", "seed", "dynamic", "reference_vectors", "update",
                   "methods", "prior_perturbation"},
    "model": {"class", "family", "link", "dispersion", "rank", "modes", "fm_dims", "n_contexts",
              "context_dim"},
    "bandit": {"policies", "candidates"},
    "adagrad": {"lr", "eps", "lr_grid"},
    "namespaces": None,
}
_NS_KEYS = {"count", "pi", "Pi_trace", "half_life_steps", "omega_scale"}


def from_dict(doc):
    """Build and validate an :class:`ExperimentConfig` from parsed TOML."""
    for section in doc:
        if section not in _KNOWN:
            raise ConfigError(section, "unknown section")
        keys = _KNOWN[section]
        if keys is not None:
            for key in doc[section]:
                if key not in keys:
                    raise ConfigError(f"{section}.{key}", "unknown field")
    exp = doc.get("experiment", {})
    model = doc.get("model", {})
    bandit = doc.get("bandit", {})
    ada = doc.get("adagrad", {})
    ns_tables = doc.get("namespaces", {})
    if not isinstance(ns_tables, dict) or not ns_tables:
        raise ConfigError("namespaces", "at least one namespace table is required")

    order = model.get("modes")
    if order is not None:
        if not isinstance(order, list) or sorted(order) != sorted(ns_tables):
            raise ConfigError("model.modes", "must list every namespace exactly once")
    else:
        order = list(ns_tables)
    namespaces = []
    for name in order:
        t = ns_tables[name]
        where = f"namespaces.{name}"
        if not isinstance(t, dict):
            raise ConfigError(where, "expected a table")
        for key in t:
            if key not in _NS_KEYS:
                raise ConfigError(f"{where}.{key}", "unknown field")
        namespaces.append(NamespaceConfig(
            name=name,
            count=_get(t, "count", int, where, required=True),
            pi=_get(t, "pi", float, where, required=True),
            Pi_trace=_get(t, "Pi_trace", float, where, required=True),
            half_life_steps=_get(t, "half_life_steps", float, where),
            omega_scale=_get(t, "omega_scale", float, where, default=0.0),
        ))

    cfg = ExperimentConfig(
        name=_get(exp, "name", str, "experiment", default="experiment"),
        model=_get(model, "class", str, "model", required=True),
        namespaces=namespaces,
        family=_get(model, "family", str, "model", default="bernoulli"),
        link=_get(model, "link", str, "model", default="canonical"),
        dispersion=_get(model, "dispersion", float, "model", default=1.0),
        rank=_get(model, "rank", int, "model", default=1),
        fm_dims=_list(model, "fm_dims", int, "model", [1]),
        n_contexts=_get(model, "n_contexts", int, "model", default=100),
        context_dim=_get(model, "context_dim", int, "model", default=10),
        horizon=_get(exp, "horizon", int, "experiment", default=1000),
        n_sims=_get(exp, "n_sims", int, "experiment", default=1),
        seed=_get(exp, "seed", int, "experiment", default=0),
        dynamic=_get(exp, "dynamic", bool, "experiment", default=True),
        reference_vectors=_get(exp, "reference_vectors", bool, "experiment", default=True),
        update=_get(exp, "update", str, "experiment", default="dekf"),
        methods=_list(exp, "methods", str, "experiment", ["dekf"]),
        prior_perturbation=_get(exp, "prior_perturbation", float, "experiment", default=1e-3),
        policies=_list(bandit, "policies", str, "bandit", list(POLICIES)),
        candidates=_get(bandit, "candidates", int, "bandit", default=10),
        adagrad_lr=_get(ada, "lr", float, "adagrad", default=0.1),
        adagrad_eps=_get(ada, "eps", float, "adagrad", default=1e-8),
        adagrad_lr_grid=_list(ada, "lr_grid", float, "adagrad", [0.01, 0.05, 0.1, 0.5]),
    )
    return validate(cfg)


def validate(cfg):
    if cfg.model not in MODELS:
        raise ConfigError("model.class", f"must be one of {MODELS}, got {cfg.model!r}")
    if cfg.family not in FAMILIES:
        raise ConfigError("model.family", f"must be one of {FAMILIES}, got {cfg.family!r}")
    if cfg.link not in LINKS:
        raise ConfigError("model.link", f"must be one of {LINKS}, got {cfg.link!r}")
    if not cfg.dispersion > 0:
        raise ConfigError("model.dispersion", "must be positive")
    if cfg.rank < 1:
        raise ConfigError("model.rank", "must be >= 1")
    if cfg.horizon < 1:
        raise ConfigError("experiment.horizon", "must be >= 1")
    if cfg.n_sims < 1:
        raise ConfigError("experiment.n_sims", "must be >= 1")
    if cfg.seed < 0:
        raise ConfigError("experiment.seed", "must be non-negative")
    if cfg.update not in ("dekf", "iekf"):
        raise ConfigError("experiment.update", "must be 'dekf' or 'iekf'")
    for m in cfg.methods:
        if m not in METHODS:
            raise ConfigError("experiment.methods", f"unknown method {m!r}; expected one of {METHODS}")
    for p in cfg.policies:
        if p not in POLICIES:
            raise ConfigError("bandit.policies", f"unknown policy {p!r}; expected one of {POLICIES}")
    if cfg.prior_perturbation < 0:
        raise ConfigError("experiment.prior_perturbation", "must be non-negative")
    if cfg.candidates < 1:
        raise ConfigError("bandit.candidates", "must be >= 1")
    if not cfg.adagrad_lr > 0 or not cfg.adagrad_eps > 0 or not all(v > 0 for v in cfg.adagrad_lr_grid):
        raise ConfigError("adagrad", "learning rates and eps must be positive")
    if cfg.model == "mf" and len(cfg.namespaces) != 2:
        raise ConfigError("namespaces", "matrix factorization needs exactly two namespaces (users, items)")
    if cfg.model == "tf" and len(cfg.namespaces) < 2:
        raise ConfigError("namespaces", "tensor factorization needs at least two namespaces (modes)")
    if cfg.model == "glm":
        if len(cfg.namespaces) != 1 or cfg.namespaces[0].count != 1:
            raise ConfigError("namespaces", "a GLM has a single weight entity (one namespace with count = 1)")
        if cfg.context_dim < 1:
            raise ConfigError("model.context_dim", "must be >= 1")
        if cfg.n_contexts < 1:
            raise ConfigError("model.n_contexts", "must be >= 1")
        if cfg.candidates > cfg.n_contexts:
            raise ConfigError("bandit.candidates", "cannot exceed model.n_contexts")
    if cfg.model == "fm" and (not cfg.fm_dims or cfg.fm_dims[0] != 1 or min(cfg.fm_dims) < 1):
        raise ConfigError("model.fm_dims", "must start with 1 and contain positive sizes")
    if cfg.family != "gaussian" and cfg.dispersion != 1.0:
        raise ConfigError("model.dispersion", "only the Gaussian family has a free dispersion")
    for ns in cfg.namespaces:
        where = f"namespaces.{ns.name}"
        if ns.count < 1:
            raise ConfigError(f"{where}.count", "must be >= 1")
        if not ns.Pi_trace > 0:
            raise ConfigError(f"{where}.Pi_trace", "must be positive")
        if not math.isfinite(ns.pi):
            raise ConfigError(f"{where}.pi", "must be finite")
        if ns.half_life_steps is not None and not ns.half_life_steps > 0:
            raise ConfigError(f"{where}.half_life_steps", "must be positive")
        if ns.omega_scale < 0:
            raise ConfigError(f"{where}.omega_scale", "must be non-negative")
        if ns.half_life_steps is None and ns.omega_scale > 0:
            raise ConfigError(f"{where}.half_life_steps", "required when omega_scale > 0")
    return cfg


def from_plain(d):
    """Inverse of :meth:`ExperimentConfig.to_dict` (used to re-run a manifest)."""
    d = dict(d)
    try:
        namespaces = [NamespaceConfig(**ns) for ns in d.pop("namespaces")]
        cfg = ExperimentConfig(namespaces=namespaces, **d)
    except (KeyError, TypeError) as exc:
        raise ConfigError("config", f"not a configuration record ({exc})") from None
    return validate(cfg)


def load(path):
    """Parse and validate a TOML configuration file (or the ``config`` of a JSON run manifest)."""
    path = Path(path)
    if path.suffix == ".json":
        with open(path, encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(str(path), f"not valid JSON ({exc})") from None
        return from_plain(doc.get("config", doc))
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(str(path), f"not valid TOML ({exc})") from None
    return from_dict(doc)


def builtin(name):
    """One of the shipped configurations: ``regression``, ``mf`` or ``tf``."""
    return load(CONFIG_DIR / f"{name}.toml")
