"""Thin HTTP client for the KME delivery API."""

from __future__ import annotations

import base64
import time

import httpx

__all__ = ["EtsiClient", "KmsClientError", "KmsInsufficientKeys"]


class KmsClientError(Exception):
    pass


class KmsInsufficientKeys(KmsClientError):
    """The KME has no key material right now; retry after replenishment."""


class EtsiClient:
    """Client for one KME endpoint, acting as a fixed SAE.

    ``http`` may inject any httpx.Client-compatible object (such as
    FastAPI's TestClient) for in-process use.
    """

    def __init__(self, base_url: str, sae_id: str, timeout_s: float = 10.0, http=None) -> None:
        self.base_url = base_url.rstrip("/")
        self.sae_id = sae_id
        self._client = http or httpx.Client(base_url=self.base_url, timeout=timeout_s)

    @property
    def _headers(self) -> dict[str, str]:
        return {"X-SAE-ID": self.sae_id}

    def close(self) -> None:
        self._client.close()

    def _keys_from(self, payload: dict) -> list[dict[str, str | bytes]]:
        return [
            {"key_ID": k["key_ID"], "key": base64.b64decode(k["key"])}
            for k in payload["keys"]
        ]

    def _raise_for(self, resp: httpx.Response) -> None:
        if resp.status_code == 200:
            return
        try:
            body = resp.json()
        except ValueError:
            body = {"message": resp.text, "code": "HTTP_%d" % resp.status_code}
        if body.get("code") in ("INSUFFICIENT_KEYS", "PEER_UNAVAILABLE"):
            raise KmsInsufficientKeys(body.get("message", ""))
        raise KmsClientError(f"{body.get('code')}: {body.get('message')}")

    def get_status(self, slave_sae_id: str) -> dict:
        resp = self._client.get(f"/api/v1/keys/{slave_sae_id}/status", headers=self._headers)
        self._raise_for(resp)
        return resp.json()

    def get_enc_keys(self, slave_sae_id: str, number: int = 1, size: int | None = None) -> list[dict]:
        body: dict = {"number": number}
        if size is not None:
            body["size"] = size
        resp = self._client.post(
            f"/api/v1/keys/{slave_sae_id}/enc_keys", json=body, headers=self._headers
        )
        self._raise_for(resp)
        return self._keys_from(resp.json())

    def get_dec_keys(self, master_sae_id: str, key_ids: list[str]) -> list[dict]:
        resp = self._client.post(
            f"/api/v1/keys/{master_sae_id}/dec_keys",
            json={"key_IDs": [{"key_ID": k} for k in key_ids]},
            headers=self._headers,
        )
        self._raise_for(resp)
        return self._keys_from(resp.json())

    def wait_enc_key(
        self, slave_sae_id: str, size: int = 256, retry_s: float = 0.25, timeout_s: float = 60.0
    ) -> dict:
        """Fetch one key, retrying with backoff while the KME is starved."""
        deadline = time.monotonic() + timeout_s
        delay = retry_s
        while True:
            try:
                return self.get_enc_keys(slave_sae_id, number=1, size=size)[0]
            except KmsInsufficientKeys:
                if time.monotonic() >= deadline:
                    raise
                time.sleep(min(delay, max(deadline - time.monotonic(), 0.01)))
                delay = min(delay * 2.0, 2.0)
