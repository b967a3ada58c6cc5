"""ETSI-GS-QKD-014-style REST surface over the KME service.

Routes (JSON bodies, key bytes base64-encoded):

    GET  /api/v1/keys/{slave_SAE_ID}/status
    POST /api/v1/keys/{slave_SAE_ID}/enc_keys   {"number": n, "size": bits}
    POST /api/v1/keys/{master_SAE_ID}/dec_keys  {"key_IDs": [{"key_ID": id}]}

Error responses carry ``{"message": ..., "code": ...}`` with the
machine-readable codes below; HTTP 503 marks retryable conditions.
When SAE authentication is enabled, callers identify themselves with an
``X-SAE-ID`` header.
"""

from __future__ import annotations

import base64

from fastapi import FastAPI, Header
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .service import (
    InsufficientKeysError,
    InvalidSizeError,
    KeyNotReservedError,
    KmeService,
    OversizeRequestError,
    PeerUnavailableError,
    TooManyKeysError,
    UnauthorizedSaeError,
    UnknownKeyError,
    UnknownSaeError,
)

__all__ = ["make_app", "StatusResponse", "EncKeysRequest", "DecKeysRequest", "KeyContainer"]


class StatusResponse(BaseModel):
    source_KME_ID: str
    target_KME_ID: str
    master_SAE_ID: str
    slave_SAE_ID: str
    key_size: int
    stored_key_count: int
    max_key_count: int
    max_key_per_request: int
    max_key_size: int
    min_key_size: int


class EncKeysRequest(BaseModel):
    number: int = Field(default=1, ge=1)
    size: int | None = Field(default=None, ge=1)


class KeyId(BaseModel):
    key_ID: str


class DecKeysRequest(BaseModel):
    key_IDs: list[KeyId]


class KeyObject(BaseModel):
    key_ID: str
    key: str  # base64


class KeyContainer(BaseModel):
    keys: list[KeyObject]


class ErrorBody(BaseModel):
    message: str
    code: str


_ERROR_MAP: list[tuple[type[Exception], int, str]] = [
    (OversizeRequestError, 400, "OVERSIZE_REQUEST"),
    (InvalidSizeError, 400, "INVALID_SIZE"),
    (TooManyKeysError, 400, "TOO_MANY_KEYS"),
    (UnknownSaeError, 404, "UNKNOWN_SAE"),
    (UnknownKeyError, 404, "UNKNOWN_KEY_ID"),
    (KeyNotReservedError, 409, "KEY_NOT_RESERVED"),
    (UnauthorizedSaeError, 401, "UNAUTHORIZED_SAE"),
    (InsufficientKeysError, 503, "INSUFFICIENT_KEYS"),
    (PeerUnavailableError, 503, "PEER_UNAVAILABLE"),
]


def _error_response(exc: Exception) -> JSONResponse:
    for etype, status, code in _ERROR_MAP:
        if isinstance(exc, etype):
            return JSONResponse(
                status_code=status,
                content=ErrorBody(message=str(exc), code=code).model_dump(),
            )
    raise exc


def _key_container(keys: list[dict[str, str | bytes]]) -> KeyContainer:
    return KeyContainer(
        keys=[
            KeyObject(key_ID=str(k["key_ID"]), key=base64.b64encode(k["key"]).decode("ascii"))
            for k in keys
        ]
    )


def make_app(service: KmeService) -> FastAPI:
    app = FastAPI(title="qkdlink KME", version="1.0")
    app.state.service = service

    for etype, _, _ in _ERROR_MAP:
        app.add_exception_handler(etype, lambda request, exc: _error_response(exc))

    @app.get("/api/v1/keys/{slave_sae_id}/status", response_model=StatusResponse)
    def get_status(slave_sae_id: str, x_sae_id: str | None = Header(default=None)):
        service.check_caller(x_sae_id)
        st = service.get_status(slave_sae_id)
        return StatusResponse(
            source_KME_ID=st.source_kme_id,
            target_KME_ID=st.target_kme_id,
            master_SAE_ID=st.master_sae_id,
            slave_SAE_ID=st.slave_sae_id,
            key_size=st.key_size,
            stored_key_count=st.stored_key_count,
            max_key_count=st.max_key_count,
            max_key_per_request=st.max_key_per_request,
            max_key_size=st.max_key_size,
            min_key_size=st.min_key_size,
        )

    @app.post("/api/v1/keys/{slave_sae_id}/enc_keys", response_model=KeyContainer)
    def enc_keys(
        slave_sae_id: str,
        body: EncKeysRequest | None = None,
        x_sae_id: str | None = Header(default=None),
    ):
        service.check_caller(x_sae_id)
        body = body or EncKeysRequest()
        keys = service.get_enc_keys(slave_sae_id, number=body.number, size_bits=body.size)
        return _key_container(keys)

    @app.post("/api/v1/keys/{master_sae_id}/dec_keys", response_model=KeyContainer)
    def dec_keys(
        master_sae_id: str,
        body: DecKeysRequest,
        x_sae_id: str | None = Header(default=None),
    ):
        service.check_caller(x_sae_id)
        keys = service.get_dec_keys(master_sae_id, [k.key_ID for k in body.key_IDs])
        return _key_container(keys)

    return app
