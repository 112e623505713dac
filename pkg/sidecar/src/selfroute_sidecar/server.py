"""HTTP surface: /v1/generate, /v1/probe, /v1/card.

Request bodies are validated strictly (unknown fields rejected) so a
drifting client fails loudly here instead of silently degrading routing
upstream. A `seed` field is accepted for interface compatibility;
decoding is greedy, so it never changes the output.
"""

from __future__ import annotations

import argparse
import logging
import sys

import torch
from fastapi import Body, FastAPI
from fastapi.responses import JSONResponse

from .engine import ContextOverflowError, DecodeResult, ProbeEngine

logger = logging.getLogger(__name__)

_ALLOWED_FIELDS = {"prompt", "max_tokens", "seed"}
_OOM_ERRORS = (
    MemoryError,
    getattr(torch, "OutOfMemoryError", torch.cuda.OutOfMemoryError),
)


def _parse_request(payload: dict) -> tuple[str, int] | JSONResponse:
    def bad(detail: str) -> JSONResponse:
        return JSONResponse(
            status_code=400, content={"error": "bad_request", "detail": detail}
        )

    unknown = set(payload) - _ALLOWED_FIELDS
    if unknown:
        return bad(f"unknown fields: {sorted(unknown)}")
    prompt = payload.get("prompt")
    if not isinstance(prompt, str):
        return bad("prompt must be a string")
    max_tokens = payload.get("max_tokens")
    if isinstance(max_tokens, bool) or not isinstance(max_tokens, int) or max_tokens < 1:
        return bad("max_tokens must be a positive integer")
    seed = payload.get("seed")
    if seed is not None and (isinstance(seed, bool) or not isinstance(seed, int)):
        return bad("seed must be an integer or null")
    return prompt, max_tokens


def _generation_fields(result: DecodeResult) -> dict:
    return {
        "text": result.text,
        "prompt_tokens": result.prompt_tokens,
        "completion_tokens": result.completion_tokens,
        "truncated": result.truncated,
    }


def create_app(engine: ProbeEngine) -> FastAPI:
    app = FastAPI(title="selfroute probe sidecar")

    def run(payload: dict, capture_hidden: bool):
        parsed = _parse_request(payload)
        if isinstance(parsed, JSONResponse):
            return parsed
        prompt, max_tokens = parsed
        try:
            result = engine.decode(prompt, max_tokens, capture_hidden=capture_hidden)
        except ContextOverflowError as exc:
            return JSONResponse(
                status_code=400,
                content={"error": "context_overflow", "detail": str(exc)},
            )
        except _OOM_ERRORS as exc:
            return JSONResponse(
                status_code=500,
                content={
                    "error": "out_of_memory",
                    "detail": str(exc),
                    "card": engine.card.to_dict(),
                },
            )
        body = _generation_fields(result)
        if capture_hidden:
            body["layers"] = [[float(x) for x in vec] for vec in result.layers]
        return body

    @app.post("/v1/generate")
    def generate(payload: dict = Body(...)):  # noqa: ANN202 - FastAPI handler
        return run(payload, capture_hidden=False)

    @app.post("/v1/probe")
    def probe(payload: dict = Body(...)):  # noqa: ANN202
        return run(payload, capture_hidden=True)

    @app.get("/v1/card")
    def card():  # noqa: ANN202
        return engine.card.to_dict()

    return app


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="selfroute-sidecar",
        description="Serve a local causal LM over the selfroute wire protocol.",
    )
    parser.add_argument("--model", required=True, help="local model directory")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8700)
    parser.add_argument(
        "--max-context", type=int, default=None,
        help="cap the usable context below the model's own limit",
    )
    args = parser.parse_args(argv)

    import uvicorn

    logging.basicConfig(level=logging.INFO)
    engine = ProbeEngine(args.model, max_context=args.max_context)
    logger.info(
        "serving %s (%d layers x %d dim) on %s:%d",
        engine.card.model_name, engine.card.layers, engine.card.dim,
        args.host, args.port,
    )
    uvicorn.run(create_app(engine), host=args.host, port=args.port)
    return 0


def entry() -> None:
    sys.exit(main())
