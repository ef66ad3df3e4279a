"""Locked, atomic writes for everything diffpose puts on disk."""
import contextlib
import os
import sys
import tempfile
import time
from pathlib import Path
from typing import IO, Iterator, Union

import filelock

# Seconds between "still waiting" notices while another process holds a lock
LOCK_NOTIFICATION_INTERVAL_SEC = 5.0


@contextlib.contextmanager
def lock_with_feedback(
    lock_path: Union[str, Path],
    what: str,
    notify_every: float = LOCK_NOTIFICATION_INTERVAL_SEC,
) -> Iterator[float]:
    """Hold ``lock_path`` for the duration of the block; yields the seconds spent waiting.

    While another process holds the lock a notice naming ``what`` goes to stderr
    every ``notify_every`` seconds.
    """
    lock = filelock.FileLock(str(lock_path))
    started = time.monotonic()
    while True:
        try:
            lock.acquire(timeout=notify_every)
            break
        except filelock.Timeout:
            print(
                f"Waiting for {what}, locked by another process ({time.monotonic() - started:.1f}s)",
                file=sys.stderr,
            )
    waited = time.monotonic() - started
    if waited > 0.1:
        print(f"Acquired {what} after {waited:.1f}s", file=sys.stderr)
    try:
        yield waited
    finally:
        lock.release()


@contextlib.contextmanager
def new_file(target: Path) -> Iterator[IO[bytes]]:
    """Binary handle whose content replaces ``target`` only once the block completes.

    Readers never observe a partial file and concurrent writers are serialised
    through ``<target>.lock``.
    """
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    with lock_with_feedback(f"{target}.lock", f"write lock on {target}"):
        fd, staging = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.")
        try:
            with os.fdopen(fd, "wb") as fo:
                yield fo
            os.replace(staging, target)
        finally:
            if os.path.exists(staging):
                os.unlink(staging)


def write_bytes(target: Path, data: bytes) -> Path:
    with new_file(target) as fo:
        fo.write(data)
    return Path(target)


def write_text(target: Path, text: str) -> Path:
    return write_bytes(target, text.encode("utf-8"))
