"""Small persistent prefetch buffer for fetched-but-unused tunnel keys.

Keys are removed the moment they are taken for an epoch, so a key never
survives its first use; persistence only covers fetched-ahead material
across restarts.
"""

from __future__ import annotations

import sqlite3
import threading

__all__ = ["PrefetchPool"]


class PrefetchPool:
    def __init__(self, path: str | None = None) -> None:
        self._db = sqlite3.connect(path or ":memory:", check_same_thread=False)
        self._db.execute(
            "CREATE TABLE IF NOT EXISTS pool ("
            " seq INTEGER PRIMARY KEY AUTOINCREMENT,"
            " key_id TEXT UNIQUE NOT NULL,"
            " material BLOB NOT NULL)"
        )
        self._db.commit()
        self._lock = threading.Lock()

    def __len__(self) -> int:
        with self._lock:
            (n,) = self._db.execute("SELECT COUNT(*) FROM pool").fetchone()
            return int(n)

    def put(self, key_id: str, material: bytes) -> None:
        with self._lock:
            self._db.execute(
                "INSERT OR IGNORE INTO pool (key_id, material) VALUES (?, ?)", (key_id, material)
            )
            self._db.commit()

    def take(self) -> tuple[str, bytes] | None:
        """Pop the oldest key; the row is deleted before the key is used."""
        with self._lock:
            row = self._db.execute(
                "SELECT seq, key_id, material FROM pool ORDER BY seq LIMIT 1"
            ).fetchone()
            if row is None:
                return None
            seq, key_id, material = row
            self._db.execute("DELETE FROM pool WHERE seq = ?", (seq,))
            self._db.commit()
            return key_id, bytes(material)

    def close(self) -> None:
        self._db.close()
