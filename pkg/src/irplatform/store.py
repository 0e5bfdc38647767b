"""Store-root layout and content-hashing helpers."""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import stat
import tempfile
from pathlib import Path
from typing import Any, Iterable

STORE_ENV = "IRPLATFORM_STORE"
CONFIG_NAME = "config.json"
CHUNK = 1 << 20

# Directories whose contents never count towards the store digest.
VOLATILE_DIRS = ("locks", "tmp")


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        while chunk := fh.read(CHUNK):
            h.update(chunk)
    return h.hexdigest()


def canonical_json(obj: Any) -> bytes:
    """Byte-stable JSON used for everything that gets hashed."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode()


def pretty_json(obj: Any, sort_keys: bool = True) -> str:
    return json.dumps(obj, indent=2, sort_keys=sort_keys, ensure_ascii=False) + "\n"


def iter_files(root: Path, exclude: Iterable[str] = ()) -> list[tuple[str, Path]]:
    """All regular files below root as sorted (posix relpath, path) pairs."""
    excluded = set(exclude)
    out = []
    for dirpath, dirnames, filenames in os.walk(root):
        rel_dir = Path(dirpath).relative_to(root)
        if rel_dir == Path(".") and excluded:
            dirnames[:] = [d for d in dirnames if d not in excluded]
        for name in filenames:
            p = Path(dirpath) / name
            if p.is_symlink() or not p.is_file():
                continue
            out.append(((rel_dir / name).as_posix(), p))
    out.sort(key=lambda item: item[0])
    return out


def tree_digest(root: str | os.PathLike, exclude: Iterable[str] = ()) -> str:
    """Digest over sorted relative paths and file-content hashes."""
    h = hashlib.sha256()
    for rel, path in iter_files(Path(root), exclude):
        h.update(rel.encode())
        h.update(b"\0")
        h.update(sha256_file(path).encode())
        h.update(b"\n")
    return h.hexdigest()


def make_readonly(root: Path) -> None:
    for dirpath, _dirnames, filenames in os.walk(root):
        for name in filenames:
            p = Path(dirpath) / name
            if not p.is_symlink():
                p.chmod(stat.S_IRUSR | stat.S_IRGRP | stat.S_IROTH)
    for dirpath, _dirnames, _ in os.walk(root, topdown=False):
        Path(dirpath).chmod(0o555)


def make_writable(root: Path) -> None:
    if not root.exists():
        return
    root.chmod(0o755)
    for dirpath, dirnames, filenames in os.walk(root):
        for d in dirnames:
            (Path(dirpath) / d).chmod(0o755)
        for f in filenames:
            p = Path(dirpath) / f
            if not p.is_symlink():
                p.chmod(0o644)


def remove_tree(root: Path) -> None:
    make_writable(root)
    shutil.rmtree(root, ignore_errors=True)


def atomic_write(path: Path, data: bytes | str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def store_digest(root: str | os.PathLike) -> str:
    return tree_digest(root, exclude=VOLATILE_DIRS)


def default_store_root() -> Path:
    return Path(os.environ.get(STORE_ENV, "./irp-store")).resolve()
