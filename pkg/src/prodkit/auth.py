"""Credentials and passkeys.

Users authenticate with a username/secret pair checked against a
file-backed store of salted, iterated hashes. Pilots authenticate with a
per-job passkey: a 128-bit random token minted at submission and rotated
on every reset, so stale pilots cannot touch reassigned jobs.
"""

from __future__ import annotations

import getpass
import hashlib
import hmac
import os
import secrets
import sys
import time
from dataclasses import dataclass, field


class AuthFailed(Exception):
    """Uniform failure: unknown user and wrong secret are indistinguishable."""


@dataclass(frozen=True)
class UserCredential:
    username: str
    secret: str


@dataclass(frozen=True)
class Principal:
    username: str


@dataclass(frozen=True)
class Passkey:
    token: str
    job_key: tuple = ()
    issued_at: float = field(default_factory=time.time)


def new_passkey_token() -> str:
    """128 bits from the OS CSPRNG, as 32 hex chars."""
    return secrets.token_hex(16)


def tokens_match(a: str, b: str) -> bool:
    return hmac.compare_digest(a.encode("utf-8"), b.encode("utf-8"))


_ITERATIONS = 60_000
_DUMMY_SALT = bytes(16)
_DUMMY_HASH = hashlib.pbkdf2_hmac("sha256", b"*", _DUMMY_SALT, _ITERATIONS)


def hash_secret(secret: str, salt: bytes, iterations: int = _ITERATIONS) -> bytes:
    return hashlib.pbkdf2_hmac("sha256", secret.encode("utf-8"), salt, iterations)


class CredentialStore:
    """One line per user: name:iterations:salt_hex:hash_hex."""

    def __init__(self, path):
        self.path = str(path)

    def _load(self):
        users = {}
        if not os.path.exists(self.path):
            return users
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                name, iterations, salt_hex, hash_hex = line.split(":")
                users[name] = (int(iterations), bytes.fromhex(salt_hex), bytes.fromhex(hash_hex))
        return users

    def set_user(self, username: str, secret: str):
        if not username or ":" in username:
            raise ValueError("bad username %r" % username)
        users = self._load()
        salt = secrets.token_bytes(16)
        users[username] = (_ITERATIONS, salt, hash_secret(secret, salt))
        tmp = self.path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            for name, (iterations, s, h) in sorted(users.items()):
                fh.write("%s:%d:%s:%s\n" % (name, iterations, s.hex(), h.hex()))
        os.replace(tmp, self.path)

    def remove_user(self, username: str):
        users = self._load()
        users.pop(username, None)
        tmp = self.path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            for name, (iterations, s, h) in sorted(users.items()):
                fh.write("%s:%d:%s:%s\n" % (name, iterations, s.hex(), h.hex()))
        os.replace(tmp, self.path)

    def verify(self, username: str, secret: str) -> bool:
        entry = self._load().get(username)
        if entry is None:
            # equalize timing for unknown users
            hmac.compare_digest(hash_secret(secret, _DUMMY_SALT), _DUMMY_HASH)
            return False
        iterations, salt, expected = entry
        return hmac.compare_digest(hash_secret(secret, salt, iterations), expected)


def authenticate(cred: UserCredential, store: CredentialStore) -> Principal:
    """Principal on success; uniform AuthFailed otherwise."""
    if not cred.username or not store.verify(cred.username, cred.secret):
        raise AuthFailed("authentication failed")
    return Principal(username=cred.username)


def passwd_main(argv=None):
    """prodkit-passwd <store-file> set|remove <username> — manage users."""
    argv = list(sys.argv[1:] if argv is None else argv)
    if len(argv) != 3 or argv[1] not in ("set", "remove"):
        print("usage: prodkit-passwd <store-file> set|remove <username>", file=sys.stderr)
        return 2
    path, action, username = argv
    store = CredentialStore(path)
    if action == "remove":
        store.remove_user(username)
        return 0
    secret = getpass.getpass("secret for %s: " % username)
    store.set_user(username, secret)
    return 0
