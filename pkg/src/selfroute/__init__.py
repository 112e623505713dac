"""Per-query routing between short- and long-chain-of-thought backends.

A budget-limited probe on the cheap general backend yields per-layer
last-token hidden states (the capability embedding); a linear router
scores the probability that the general backend solves the query, and
the query is dispatched accordingly.  See README.md for the pipeline.
"""

from .core import (
    CapabilityEmbedding,
    GenerationResult,
    Label,
    Query,
    RunSeed,
    derive_rng,
    derive_seed,
    grade,
    normalize_answer,
)
from .backend import (
    Backend,
    BackendCard,
    BackendSpec,
    ProbeResult,
    SyntheticBackend,
    SyntheticBackendConfig,
    WireBackend,
    make_backend,
)
from .dataset import (
    DifficultyRecord,
    GradientDataset,
    LabeledExample,
    assign_level,
    build_gradient,
    collect_labeled_examples,
    estimate_accuracy,
    label_solvable,
)
from .preinference import PreinferenceConfig, collect_embedding, render_prompt
from .router import (
    RouterMetrics,
    RouterModel,
    TrainConfig,
    TrainResult,
    evaluate_router,
    gradient,
    load_router,
    loss,
    predict,
    save_router,
    sweep_layers,
    train,
)
from .policy import (
    AnswerResult,
    EvalReport,
    RoutePolicyConfig,
    TokenLedger,
    answer,
    decide,
    overhead_ratio,
    reduction_percent,
    report,
)
from .simulator import (
    RouterPolicy,
    World,
    WorldSpec,
    fit_router_for_world,
    make_world,
    run_comparison,
    run_policy,
    solvable_fraction,
)
from .gateway import GatewayConfig, create_app, load_gateway_config, serve
from .errors import SelfRouteError

__version__ = "0.1.0"
