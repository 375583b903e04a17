"""Filesystem registry: one shared frozen base, versioned heads per user.

Layout::

    root/base.pibm
    root/users/<id>/v<N>.piph
    root/index.json          (cache; rebuilt from a disk scan on open)
"""

from __future__ import annotations

import json
import re
import struct
import threading
from pathlib import Path
from typing import Sequence

import numpy as np
from filelock import FileLock

from . import autodiff as ad
from .autodiff import Tensor
from .base_lm import BaseLM, freeze, load_base, save_base
from .data import Prediction, pair_ids, predict_class, verbalize
from .encoder import pad_batch
from .errors import ConfigError, NotFoundError, ValidationError
from .head import HEAD_MAGIC, PersonalizationHead, PHConfig, confidences, dumps_head, load_head
from .serialization import atomic_write

_USER_RE = re.compile(r"^[A-Za-z0-9._-]+$")
_VERSION_RE = re.compile(r"^v(\d+)\.piph$")


def validate_user(user: str) -> str:
    if not isinstance(user, str) or not _USER_RE.match(user) or user in (".", ".."):
        raise ValidationError(f"invalid user id {user!r}: allowed charset is [A-Za-z0-9._-]")
    return user


def _read_head_config(path: Path) -> PHConfig:
    with path.open("rb") as fh:
        head = fh.read(32)
    if len(head) < 32 or head[:4] != HEAD_MAGIC:
        raise ValidationError(f"{path} is not a head file")
    d_model, d_ff, n_heads = struct.unpack("<III", head[8:20])
    (dropout,) = struct.unpack("<f", head[20:24])
    (seed,) = struct.unpack("<Q", head[24:32])
    return PHConfig(d_model, d_ff, n_heads, round(dropout, 6), seed)


class Registry:
    def __init__(self, root, base: BaseLM):
        if not base.frozen:
            raise ConfigError("registry base model must be frozen")
        self.root = Path(root)
        self.base = base
        self._heads: dict[tuple[str, int], PersonalizationHead] = {}
        self._cache_lock = threading.Lock()
        self._user_locks: dict[str, threading.Lock] = {}
        self.index = self.rescan()

    @property
    def base_path(self) -> Path:
        return self.root / "base.pibm"

    @classmethod
    def create(cls, root, base: BaseLM, overwrite: bool = False) -> "Registry":
        root = Path(root)
        freeze(base)
        if (root / "base.pibm").exists() and not overwrite:
            raise ConfigError(f"{root} already holds a base model")
        if overwrite and any((root / "users").glob("*/v*.piph")):
            raise ConfigError(f"{root} has stored heads; refusing to replace their base")
        save_base(base, root / "base.pibm")
        return cls(root, base)

    @classmethod
    def open(cls, root) -> "Registry":
        root = Path(root)
        if not (root / "base.pibm").exists():
            raise NotFoundError(f"no base model at {root / 'base.pibm'}")
        return cls(root, load_base(root / "base.pibm"))

    # ------------------------------------------------------------------
    def _user_dir(self, user: str) -> Path:
        return self.root / "users" / validate_user(user)

    def _versions(self, user: str) -> dict[int, Path]:
        d = self._user_dir(user)
        if not d.is_dir():
            return {}
        out = {}
        for f in d.iterdir():
            m = _VERSION_RE.match(f.name)
            if m:
                out[int(m.group(1))] = f
        return out

    def rescan(self) -> dict:
        users: dict[str, dict] = {}
        udir = self.root / "users"
        if udir.is_dir():
            for d in sorted(udir.iterdir()):
                if not d.is_dir() or not _USER_RE.match(d.name):
                    continue
                versions = self._versions(d.name)
                if not versions:
                    continue
                users[d.name] = {
                    "latest": max(versions),
                    "versions": {str(v): {"path": str(p.relative_to(self.root)),
                                          "config": vars(_read_head_config(p))}
                                 for v, p in sorted(versions.items())},
                }
        return {"base": {"path": "base.pibm", "checksum": f"{self.base.weights_checksum:016x}",
                         "d_model": self.base.d_model},
                "users": users}

    def _write_index(self) -> None:
        self.index = self.rescan()
        atomic_write(self.root / "index.json", json.dumps(self.index, indent=2, sort_keys=True).encode())

    def users(self) -> list[str]:
        return sorted(self.index["users"])

    def _lock(self, user: str) -> threading.Lock:
        with self._cache_lock:
            return self._user_locks.setdefault(user, threading.Lock())

    def put_head(self, user: str, head: PersonalizationHead) -> int:
        validate_user(user)
        if head.d_model != self.base.d_model:
            raise ConfigError(f"head d_model {head.d_model} does not match base d_model {self.base.d_model}")
        d = self._user_dir(user)
        d.mkdir(parents=True, exist_ok=True)
        with self._lock(user), FileLock(str(d / ".lock")):
            version = max(self._versions(user), default=0) + 1
            atomic_write(d / f"v{version}.piph", dumps_head(head))
            self._write_index()
        return version

    def get_head(self, user: str, version: int | None = None) -> PersonalizationHead:
        versions = self._versions(user)
        if not versions:
            raise NotFoundError(f"unknown user {user!r}")
        v = max(versions) if version is None else version
        if v not in versions:
            raise NotFoundError(f"user {user!r} has no version {v}")
        key = (user, v)
        with self._cache_lock:
            cached = self._heads.get(key)
        if cached is not None:
            return cached
        head = load_head(versions[v])
        with self._cache_lock:
            self._heads[key] = head
        return head

    def serve_predict(self, user: str, text: str, classes: Sequence[str],
                      version: int | None = None) -> Prediction:
        head = self.get_head(user, version)
        classes = list(classes)
        scores = confidence_scores(self.base, head, text, classes)
        lookup = dict(zip(classes, scores))
        return predict_class(lambda c, _x: lookup[c], text, classes)

    def stats(self) -> dict:
        per_user = []
        all_versions = 0
        for user in self.users():
            versions = self._versions(user)
            per_user.append(versions[max(versions)].stat().st_size)
            all_versions += sum(p.stat().st_size for p in versions.values())
        return {"n_users": len(per_user), "total_head_bytes": sum(per_user),
                "all_versions_bytes": all_versions, "base_bytes": self.base_path.stat().st_size,
                "bytes_per_user": per_user}


def confidence_scores(base: BaseLM, head, text: str, classes: Sequence[str]) -> np.ndarray:
    """Eval-mode P(True) for ``text`` against each class label."""
    seqs = [pair_ids(verbalize(c), text, base.vocab) for c in classes]
    states = [e.hidden for e in base.encode_many(seqs)]
    h, mask = pad_batch(states, 0.0)
    with ad.no_grad():
        return confidences(head.logits(Tensor(h), mask, training=False).data)


def put_head(reg: Registry, user: str, head: PersonalizationHead) -> int:
    return reg.put_head(user, head)


def get_head(reg: Registry, user: str, version: int | None = None) -> PersonalizationHead:
    return reg.get_head(user, version)


def serve_predict(reg: Registry, user: str, text: str, classes: Sequence[str]) -> Prediction:
    return reg.serve_predict(user, text, classes)


def registry_stats(reg: Registry) -> dict:
    return reg.stats()
