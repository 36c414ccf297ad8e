"""Authentication: local salted-hash credentials plus signed session tokens.

The credential provider is pluggable; deployments that authenticate against
an external identity service implement ExternalAuthProvider and skip local
passwords entirely.
"""

from __future__ import annotations

import base64
import hashlib
import hmac
import json
import os
import threading
import time
from dataclasses import dataclass
from typing import Optional

_PBKDF2_ITERATIONS = 60_000


class AuthError(Exception):
    pass


class InvalidToken(AuthError):
    pass


def hash_credential(password: str) -> str:
    salt = os.urandom(16)
    digest = hashlib.pbkdf2_hmac("sha256", password.encode("utf-8"), salt, _PBKDF2_ITERATIONS)
    return f"pbkdf2${_PBKDF2_ITERATIONS}${salt.hex()}${digest.hex()}"


def verify_credential(password: str, stored: str) -> bool:
    try:
        scheme, iterations, salt_hex, digest_hex = stored.split("$")
        if scheme != "pbkdf2":
            return False
        candidate = hashlib.pbkdf2_hmac(
            "sha256", password.encode("utf-8"), bytes.fromhex(salt_hex), int(iterations)
        )
        return hmac.compare_digest(candidate.hex(), digest_hex)
    except (ValueError, TypeError):
        return False


@dataclass(frozen=True)
class TokenClaims:
    user_id: str
    role: str
    expiry: float
    token_id: str


class TokenSigner:
    """HMAC-signed opaque session tokens with logout revocation."""

    def __init__(self, secret: str, default_ttl: float = 12 * 3600):
        self._key = secret.encode("utf-8")
        self.default_ttl = default_ttl
        self._revoked: set[str] = set()
        self._lock = threading.Lock()

    def issue(self, user_id: str, role: str, ttl: Optional[float] = None) -> str:
        claims = {
            "user_id": user_id,
            "role": role,
            "exp": time.time() + (ttl if ttl is not None else self.default_ttl),
            "jti": os.urandom(8).hex(),
        }
        payload = base64.urlsafe_b64encode(json.dumps(claims).encode("utf-8"))
        sig = hmac.new(self._key, payload, hashlib.sha256).hexdigest()
        return f"{payload.decode('ascii')}.{sig}"

    def verify(self, token: str) -> TokenClaims:
        try:
            payload_b64, sig = token.rsplit(".", 1)
        except ValueError:
            raise InvalidToken("malformed token") from None
        expected = hmac.new(self._key, payload_b64.encode("ascii"), hashlib.sha256).hexdigest()
        if not hmac.compare_digest(expected, sig):
            raise InvalidToken("bad signature")
        try:
            claims = json.loads(base64.urlsafe_b64decode(payload_b64.encode("ascii")))
        except (ValueError, TypeError):
            raise InvalidToken("bad payload") from None
        if claims["exp"] < time.time():
            raise InvalidToken("token expired")
        with self._lock:
            if claims["jti"] in self._revoked:
                raise InvalidToken("token revoked")
        return TokenClaims(claims["user_id"], claims["role"], claims["exp"], claims["jti"])

    def revoke(self, token: str) -> None:
        try:
            claims = self.verify(token)
        except InvalidToken:
            return
        with self._lock:
            self._revoked.add(claims.token_id)


class ExternalAuthProvider:
    """Adapter seam for identity services; implementations exchange the
    service's assertion for (external_id, username, email)."""

    provider_name: str = "external"

    def authenticate(self, assertion: str) -> tuple[str, str, str]:
        raise NotImplementedError
