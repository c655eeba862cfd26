"""Key-value map from database image id to its precomputed softmax vector."""
from __future__ import annotations

import struct

import numpy as np

STORE_MAGIC = b"KSKV0001"
STORE_HEADER = struct.Struct("<8sIQ")
SUM_TOL = 1e-5


class NotFound(KeyError):
    """Raised when an id has no stored prediction."""


class PredictionStore:
    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        self.num_classes = num_classes
        self._rows = {}

    def __len__(self):
        return len(self._rows)

    def __contains__(self, id_):
        return int(id_) in self._rows

    def ids(self) -> np.ndarray:
        return np.array(sorted(self._rows), dtype=np.uint64)

    def put(self, id_, softmax):
        s = np.array(softmax, dtype=np.float32).reshape(-1)
        if s.shape != (self.num_classes,):
            raise ValueError(f"softmax has {s.size} entries, store holds {self.num_classes} classes")
        if abs(float(s.astype(np.float64).sum()) - 1.0) > SUM_TOL or s.min() < 0:
            raise ValueError(f"softmax for id {id_} is not a probability vector (sum {s.sum():.7f})")
        s.setflags(write=False)
        self._rows[int(id_)] = s

    def put_many(self, ids, softmaxes):
        for id_, s in zip(np.asarray(ids).tolist(), softmaxes):
            self.put(id_, s)
        return self

    def get(self, id_):
        """Return ``(softmax, hard_label)``; hard label is the lowest-index argmax."""
        try:
            s = self._rows[int(id_)]
        except KeyError:
            raise NotFound(f"no stored prediction for id {id_}") from None
        return s, int(np.argmax(s))

    def get_many(self, ids) -> np.ndarray:
        try:
            return np.stack([self._rows[int(i)] for i in ids]) if len(ids) else \
                np.zeros((0, self.num_classes), np.float32)
        except KeyError as exc:
            raise NotFound(f"no stored prediction for id {exc.args[0]}") from None

    def check_covers(self, ids):
        missing = [int(i) for i in np.asarray(ids).tolist() if int(i) not in self._rows]
        if missing:
            raise ValueError(f"prediction store misses {len(missing)} indexed ids, e.g. {missing[:5]}")

    def to_bytes(self) -> bytes:
        ids = sorted(self._rows)
        parts = [STORE_HEADER.pack(STORE_MAGIC, self.num_classes, len(ids))]
        for i in ids:
            parts.append(struct.pack("<Q", i))
            parts.append(self._rows[i].astype("<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "PredictionStore":
        if blob[:8] != STORE_MAGIC:
            raise ValueError("not a prediction store file (bad magic)")
        if len(blob) < STORE_HEADER.size:
            raise ValueError("prediction store truncated in header")
        _, classes, count = STORE_HEADER.unpack_from(blob)
        rec = 8 + 4 * classes
        if len(blob) != STORE_HEADER.size + count * rec:
            raise ValueError(f"prediction store has {len(blob)} bytes, expected "
                             f"{STORE_HEADER.size + count * rec}")
        store = cls(classes)
        raw = np.frombuffer(blob, np.uint8, offset=STORE_HEADER.size).reshape(count, rec)
        ids = raw[:, :8].copy().view("<u8").reshape(-1)
        vals = raw[:, 8:].copy().view("<f4").reshape(count, classes)
        for i, s in zip(ids.tolist(), vals):
            store.put(i, s)
        return store

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "PredictionStore":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def hard_label(softmax) -> int:
    return int(np.argmax(softmax))
