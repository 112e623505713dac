"""HTTP gateway: routed inference over a general + reasoning backend pair.

Endpoints:
    POST /v1/route   {question, threshold?} -> {answer, path, probability,
                      tokens: {probe, prompt, completion}, router_layer}
    GET  /v1/health  -> {status}
    GET  /v1/stats   -> {short_count, long_count, mean_probe_tokens,
                      mean_completion_tokens}

Configuration is one JSON file; SELFROUTE_-prefixed environment variables
override scalar fields.  The router model is loaded once at startup and
validated against the general backend's advertised shape (fail fast);
per-request threshold overrides are allowed, per-request routers are not.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from fastapi import Body, FastAPI
from fastapi.responses import JSONResponse

from .backend import (
    Backend,
    BackendSpec,
    GENERAL,
    REASONING,
    SYNTHETIC_ENDPOINT,
    SyntheticBackendConfig,
    make_backend,
)
from .core import Query
from .errors import (
    ConfigError,
    DomainError,
    SelfRouteError,
    TransportError,
)
from .policy import RoutePolicyConfig, answer
from .preinference import PreinferenceConfig
from .router import load_router

__all__ = [
    "GatewayConfig",
    "gateway_config_to_dict",
    "gateway_config_from_dict",
    "load_gateway_config",
    "save_gateway_config",
    "build_policy_config",
    "create_app",
    "serve",
    "ENV_PREFIX",
]

logger = logging.getLogger(__name__)

ENV_PREFIX = "SELFROUTE_"

_SCALAR_ENV_FIELDS = {
    "LISTEN": ("listen", str),
    "ROUTER_PATH": ("router_path", str),
    "ROUTE_THRESHOLD": ("route_threshold", float),
    "CONCURRENCY_LIMIT": ("concurrency_limit", int),
    "LOG_LEVEL": ("log_level", str),
}


@dataclass(frozen=True)
class GatewayConfig:
    general: BackendSpec
    reasoning: BackendSpec
    router_path: str
    listen: str = "127.0.0.1:8080"
    preinference: PreinferenceConfig = field(default_factory=PreinferenceConfig)
    route_threshold: float = 0.5
    concurrency_limit: int = 8
    log_level: str = "info"
    general_synthetic: SyntheticBackendConfig | None = None
    reasoning_synthetic: SyntheticBackendConfig | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.route_threshold <= 1.0:
            raise ConfigError("route_threshold must be in [0,1]")
        if self.concurrency_limit < 1:
            raise ConfigError("concurrency_limit must be >= 1")
        host, _, port = self.listen.rpartition(":")
        if not host or not port.isdigit():
            raise ConfigError(f"listen must be host:port, got {self.listen!r}")
        if self.general.kind != GENERAL or self.reasoning.kind != REASONING:
            raise ConfigError("backend kinds must be general + reasoning")

    @property
    def host(self) -> str:
        return self.listen.rpartition(":")[0]

    @property
    def port(self) -> int:
        return int(self.listen.rpartition(":")[2])


# --------------------------------------------------------------------------
# Config (de)serialization
# --------------------------------------------------------------------------


def _backend_spec_to_dict(spec: BackendSpec) -> dict:
    return {
        "name": spec.name,
        "kind": spec.kind,
        "endpoint": spec.endpoint,
        "default_max_tokens": spec.default_max_tokens,
        "request_timeout": spec.request_timeout,
    }


def _backend_spec_from_dict(obj: dict) -> BackendSpec:
    return BackendSpec(
        name=obj["name"],
        kind=obj["kind"],
        endpoint=obj.get("endpoint", SYNTHETIC_ENDPOINT),
        default_max_tokens=int(obj.get("default_max_tokens", 4096)),
        request_timeout=float(obj.get("request_timeout", 30.0)),
    )


def _synthetic_to_dict(config: SyntheticBackendConfig | None) -> dict | None:
    if config is None:
        return None
    return {
        "per_level_accuracy": {str(k): v for k, v in sorted(config.per_level_accuracy.items())},
        "short_token_mean": {str(k): v for k, v in sorted(config.short_token_mean.items())},
        "long_token_mean": {str(k): v for k, v in sorted(config.long_token_mean.items())},
        "probe_token_mean": config.probe_token_mean,
        "embedding_dim": config.embedding_dim,
        "embedding_layers": config.embedding_layers,
        "signal_layers": list(config.signal_layers),
        "class_separation": config.class_separation,
        "seed": config.seed,
    }


def _synthetic_from_dict(obj: dict | None) -> SyntheticBackendConfig | None:
    if obj is None:
        return None
    return SyntheticBackendConfig(
        per_level_accuracy={int(k): float(v) for k, v in obj["per_level_accuracy"].items()},
        short_token_mean={int(k): float(v) for k, v in obj["short_token_mean"].items()},
        long_token_mean={int(k): float(v) for k, v in obj["long_token_mean"].items()},
        probe_token_mean=float(obj.get("probe_token_mean", 120.0)),
        embedding_dim=int(obj.get("embedding_dim", 64)),
        embedding_layers=int(obj.get("embedding_layers", 8)),
        signal_layers=tuple(obj.get("signal_layers", (5, 6))),
        class_separation=float(obj.get("class_separation", 4.0)),
        seed=int(obj.get("seed", 0)),
    )


def gateway_config_to_dict(config: GatewayConfig) -> dict:
    return {
        "listen": config.listen,
        "router_path": config.router_path,
        "route_threshold": config.route_threshold,
        "concurrency_limit": config.concurrency_limit,
        "log_level": config.log_level,
        "general": _backend_spec_to_dict(config.general),
        "reasoning": _backend_spec_to_dict(config.reasoning),
        "preinference": {
            "prompt_template": config.preinference.prompt_template,
            "budget_tokens": config.preinference.budget_tokens,
            "layer_selection": config.preinference.layer_selection,
        },
        "general_synthetic": _synthetic_to_dict(config.general_synthetic),
        "reasoning_synthetic": _synthetic_to_dict(config.reasoning_synthetic),
    }


def gateway_config_from_dict(obj: dict) -> GatewayConfig:
    try:
        pre = obj.get("preinference", {})
        return GatewayConfig(
            general=_backend_spec_from_dict(obj["general"]),
            reasoning=_backend_spec_from_dict(obj["reasoning"]),
            router_path=obj["router_path"],
            listen=obj.get("listen", "127.0.0.1:8080"),
            preinference=PreinferenceConfig(
                prompt_template=pre.get(
                    "prompt_template", PreinferenceConfig().prompt_template
                ),
                budget_tokens=int(pre.get("budget_tokens", 256)),
                layer_selection=pre.get("layer_selection"),
            ),
            route_threshold=float(obj.get("route_threshold", 0.5)),
            concurrency_limit=int(obj.get("concurrency_limit", 8)),
            log_level=obj.get("log_level", "info"),
            general_synthetic=_synthetic_from_dict(obj.get("general_synthetic")),
            reasoning_synthetic=_synthetic_from_dict(obj.get("reasoning_synthetic")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed gateway config: {exc}") from exc


def load_gateway_config(
    path: str | Path, env: Mapping[str, str] | None = None
) -> GatewayConfig:
    """Read a JSON config file and apply SELFROUTE_* scalar overrides."""
    try:
        obj = json.loads(Path(path).read_text("utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"gateway config not found: {path}") from None
    except (OSError, ValueError) as exc:
        raise ConfigError(f"gateway config unreadable: {path}: {exc}") from exc
    env = os.environ if env is None else env
    for suffix, (key, cast) in _SCALAR_ENV_FIELDS.items():
        raw = env.get(ENV_PREFIX + suffix)
        if raw is not None:
            try:
                obj[key] = cast(raw)
            except ValueError as exc:
                raise ConfigError(f"bad {ENV_PREFIX}{suffix} value {raw!r}") from exc
    return gateway_config_from_dict(obj)


def save_gateway_config(path: str | Path, config: GatewayConfig) -> None:
    Path(path).write_text(
        json.dumps(gateway_config_to_dict(config), sort_keys=True, indent=2) + "\n",
        "utf-8",
    )


# --------------------------------------------------------------------------
# Service
# --------------------------------------------------------------------------


def build_policy_config(config: GatewayConfig) -> RoutePolicyConfig:
    """Construct backends and router, health-checking everything up front.

    Raises ConfigError (bad router file, shape mismatch) or TransportError
    (backend unreachable) rather than starting a broken service.
    """
    router = load_router(config.router_path)
    general = make_backend(config.general, config.general_synthetic)
    reasoning = make_backend(config.reasoning, config.reasoning_synthetic)
    card = general.advertise()
    if not card.probe_capable:
        raise ConfigError(f"general backend {config.general.name} cannot serve probes")
    if router.dim != card.dim:
        raise ConfigError(
            f"router dim {router.dim} != general backend dim {card.dim}"
        )
    if router.layer > card.layers:
        raise ConfigError(
            f"router layer {router.layer} exceeds backend layers {card.layers}"
        )
    reasoning.advertise()
    return RoutePolicyConfig(
        router=router,
        general=general,
        reasoning=reasoning,
        preinference=config.preinference,
        route_threshold=config.route_threshold,
    )


class _Stats:
    """Linearizable rolling counters for /v1/stats."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.short_count = 0
        self.long_count = 0
        self._probe_total = 0
        self._completion_total = 0

    def record(self, path: str, probe_tokens: int, completion_tokens: int) -> None:
        with self._lock:
            if path == "short":
                self.short_count += 1
            else:
                self.long_count += 1
            self._probe_total += probe_tokens
            self._completion_total += completion_tokens

    def snapshot(self) -> dict:
        with self._lock:
            total = self.short_count + self.long_count
            return {
                "short_count": self.short_count,
                "long_count": self.long_count,
                "mean_probe_tokens": self._probe_total / total if total else 0.0,
                "mean_completion_tokens": self._completion_total / total if total else 0.0,
            }


def _question_query(question: str) -> Query:
    digest = hashlib.blake2b(question.encode("utf-8"), digest_size=6).hexdigest()
    return Query(id=f"q-{digest}", text=question, source="gateway")


def create_app(config: GatewayConfig) -> FastAPI:
    """Build the ASGI app; raises instead of serving on startup problems."""
    policy_config = build_policy_config(config)
    stats = _Stats()
    gate = threading.BoundedSemaphore(config.concurrency_limit)
    app = FastAPI(title="selfroute gateway")

    def error_response(exc: SelfRouteError, status: int) -> JSONResponse:
        return JSONResponse(
            status_code=status,
            content={
                "error": type(exc).__name__,
                "stage": exc.stage,
                "detail": str(exc),
            },
        )

    @app.post("/v1/route")
    def route(payload: dict = Body(...)):  # noqa: ANN202 - FastAPI handler
        question = payload.get("question")
        if not isinstance(question, str) or not question.strip():
            return JSONResponse(
                status_code=400,
                content={"error": "DomainError", "detail": "question must be a non-empty string"},
            )
        threshold = payload.get("threshold")
        if threshold is not None and not isinstance(threshold, (int, float)):
            return JSONResponse(
                status_code=400,
                content={"error": "DomainError", "detail": "threshold must be a number"},
            )
        query = _question_query(question)
        try:
            with gate:
                result = answer(query, policy_config, threshold=threshold)
        except (DomainError, ConfigError) as exc:
            return error_response(exc, 400)
        except TransportError as exc:
            return error_response(exc, 502)
        except SelfRouteError as exc:
            return error_response(exc, 502)
        ledger = result.ledger
        stats.record(ledger.path, ledger.probe_tokens, ledger.answer_completion_tokens)
        logger.info(
            "route query=%s path=%s p=%.4f tokens=%d/%d/%d",
            query.id,
            ledger.path,
            ledger.probability,
            ledger.probe_tokens,
            ledger.answer_prompt_tokens,
            ledger.answer_completion_tokens,
        )
        return {
            "answer": result.text,
            "path": ledger.path,
            "probability": ledger.probability,
            "tokens": {
                "probe": ledger.probe_tokens,
                "prompt": ledger.answer_prompt_tokens,
                "completion": ledger.answer_completion_tokens,
            },
            "router_layer": result.outcome.router_layer,
        }

    @app.get("/v1/health")
    def health():  # noqa: ANN202
        return {"status": "ok"}

    @app.get("/v1/stats")
    def stats_endpoint():  # noqa: ANN202
        return stats.snapshot()

    return app


def serve(config: GatewayConfig) -> None:
    """Run the gateway until interrupted (blocking)."""
    import uvicorn

    logging.basicConfig(
        level=config.log_level.upper(),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    app = create_app(config)
    logger.info("gateway listening on %s", config.listen)
    uvicorn.run(app, host=config.host, port=config.port, log_level=config.log_level)
