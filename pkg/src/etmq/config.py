"""Run configuration: one strict JSON file drives every pipeline stage.

Keys mirror the dataclass field names one-to-one and unknown keys are
rejected outright, so a typo fails the run instead of silently falling back
to a default.  Every stage also gets a canonical "scope hash" — a digest of
exactly the fields that influence its output — which the artifact manifest
uses to detect stale mixing (for example, changing the arena width
invalidates a previously trained table).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, fields

from .env import EnvConfig
from .planner import TrainConfig

TRIGGER_KINDS = ("full-comm", "exact", "svr", "never")


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


@dataclass(frozen=True)
class SvrParams:
    """Fit hyper-parameters for one sensitivity level."""

    alpha: float
    rho: float
    tau: float
    bandwidth: float | None = None

    def __post_init__(self) -> None:
        if self.rho <= 0 or self.tau <= 0:
            raise ConfigError(f"svr alpha={self.alpha}: rho and tau must be positive")
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ConfigError(f"svr alpha={self.alpha}: bandwidth must be positive")


@dataclass(frozen=True)
class SimConfig:
    """Batch-simulation settings; step_cap of None reuses the env cap."""

    n_games: int = 2000
    master_seed: int = 0
    step_cap: int | None = None

    def __post_init__(self) -> None:
        if self.n_games < 1:
            raise ConfigError(f"n_games must be >= 1, got {self.n_games}")
        if self.step_cap is not None and self.step_cap < 1:
            raise ConfigError(f"step_cap must be >= 1, got {self.step_cap}")


@dataclass(frozen=True)
class PathsConfig:
    artifacts: str = "artifacts"


@dataclass(frozen=True)
class RunConfig:
    env: EnvConfig
    train: TrainConfig
    gamma: float = 0.97
    alphas: tuple[float, ...] = (0.0, 0.2, 0.4)
    sample_size: int = 1000
    beta: float = 1e-3
    svr: tuple[SvrParams, ...] = ()
    sim: SimConfig = SimConfig()
    paths: PathsConfig = PathsConfig()

    def __post_init__(self) -> None:
        if not 0 < self.gamma < 1:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not self.alphas:
            raise ConfigError("alphas must be non-empty")
        if any(a < 0 for a in self.alphas):
            raise ConfigError("alphas must be >= 0")
        if any(b <= a for a, b in zip(self.alphas, self.alphas[1:])):
            raise ConfigError("alphas must be strictly ascending")
        if self.sample_size < 1:
            raise ConfigError(f"sample_size must be >= 1, got {self.sample_size}")
        if not 0 < self.beta < 1:
            raise ConfigError(f"beta must lie in (0, 1), got {self.beta}")
        seen = set()
        for p in self.svr:
            if self.alpha_index(p.alpha) is None:
                raise ConfigError(f"svr entry alpha={p.alpha} is not in alphas")
            if p.alpha in seen:
                raise ConfigError(f"duplicate svr entry for alpha={p.alpha}")
            seen.add(p.alpha)

    def alpha_index(self, alpha: float) -> int | None:
        for i, a in enumerate(self.alphas):
            if math.isclose(a, alpha, abs_tol=1e-12):
                return i
        return None

    def svr_for(self, alpha: float) -> SvrParams | None:
        for p in self.svr:
            if math.isclose(p.alpha, alpha, abs_tol=1e-12):
                return p
        return None

    def sim_step_cap(self) -> int:
        return self.sim.step_cap if self.sim.step_cap is not None else self.env.step_cap


def _take(section: str, data: dict, cls) -> dict:
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be an object")
    allowed = {f.name for f in fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(
            f"unknown key(s) in {section!r}: {', '.join(sorted(unknown))}"
        )
    return dict(data)


def parse_config(raw: dict) -> RunConfig:
    """Build a RunConfig from parsed JSON, rejecting unknown keys everywhere."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    top_allowed = {"env", "train", "gamma", "alphas", "sample_size", "beta",
                   "svr", "sim", "paths"}
    unknown = set(raw) - top_allowed
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")

    try:
        env = EnvConfig(**_take("env", raw.get("env", {}), EnvConfig))
        train = TrainConfig(**_take("train", raw.get("train", {}), TrainConfig))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc

    svr_raw = raw.get("svr", [])
    if not isinstance(svr_raw, list):
        raise ConfigError("section 'svr' must be a list of objects")
    svr = tuple(
        SvrParams(**_take(f"svr[{i}]", entry, SvrParams))
        for i, entry in enumerate(svr_raw)
    )

    alphas = raw.get("alphas", RunConfig.alphas)
    if not isinstance(alphas, (list, tuple)):
        raise ConfigError("'alphas' must be a list")

    return RunConfig(
        env=env,
        train=train,
        gamma=raw.get("gamma", 0.97),
        alphas=tuple(float(a) for a in alphas),
        sample_size=raw.get("sample_size", RunConfig.sample_size),
        beta=raw.get("beta", RunConfig.beta),
        svr=svr,
        sim=SimConfig(**_take("sim", raw.get("sim", {}), SimConfig)),
        paths=PathsConfig(**_take("paths", raw.get("paths", {}), PathsConfig)),
    )


def load_config(path) -> RunConfig:
    try:
        with open(str(path)) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return parse_config(raw)


# -- canonical hashing ---------------------------------------------------------

def _env_dict(env: EnvConfig) -> dict:
    return {f.name: getattr(env, f.name) for f in fields(EnvConfig)}


def _train_dict(train: TrainConfig) -> dict:
    return {f.name: getattr(train, f.name) for f in fields(TrainConfig)}


def config_dict(cfg: RunConfig) -> dict:
    return {
        "env": _env_dict(cfg.env),
        "train": _train_dict(cfg.train),
        "gamma": cfg.gamma,
        "alphas": list(cfg.alphas),
        "sample_size": cfg.sample_size,
        "beta": cfg.beta,
        "svr": [
            {"alpha": p.alpha, "rho": p.rho, "tau": p.tau, "bandwidth": p.bandwidth}
            for p in cfg.svr
        ],
        "sim": {"n_games": cfg.sim.n_games, "master_seed": cfg.sim.master_seed,
                "step_cap": cfg.sim.step_cap},
        "paths": {"artifacts": cfg.paths.artifacts},
    }


def _digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def config_hash(cfg: RunConfig) -> str:
    return _digest(config_dict(cfg))


def scope_hash(cfg: RunConfig, stage: str, alpha: float | None = None,
               trigger: str | None = None) -> str:
    """Digest of the config subset that determines one stage's artifacts.

    Downstream scopes embed upstream ones, so invalidation propagates: a new
    arena width changes the train scope, which changes every scope after it.
    """
    train_scope = {
        "env": _env_dict(cfg.env),
        "train": _train_dict(cfg.train),
        "gamma": cfg.gamma,
    }
    if stage == "train":
        return _digest(train_scope)
    if stage == "surrogate":
        return _digest({"base": train_scope, "alpha": alpha,
                        "sample_size": cfg.sample_size,
                        "master_seed": cfg.sim.master_seed})
    if stage == "fit":
        p = cfg.svr_for(alpha)
        return _digest({
            "base": scope_hash(cfg, "surrogate", alpha=alpha),
            "svr": None if p is None else [p.rho, p.tau, p.bandwidth],
            "beta": cfg.beta,
        })
    if stage == "simulate":
        scope = {
            "base": train_scope,
            "alpha": alpha,
            "trigger": trigger,
            "n_games": cfg.sim.n_games,
            "master_seed": cfg.sim.master_seed,
            "step_cap": cfg.sim_step_cap(),
        }
        if trigger == "svr":
            scope["fit"] = scope_hash(cfg, "fit", alpha=alpha)
        return _digest(scope)
    raise ConfigError(f"unknown stage {stage!r}")
