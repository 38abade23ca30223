"""Flat parameter container shared by training, federation and privacy code."""
import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from ..errors import IncompatibleWeightsError, ReportIOError

MAGIC = b"FMWB"
FORMAT_VERSION = 1


def layout_fingerprint(layout):
    """64-bit hash of the ordered (name, shape) layout."""
    text = json.dumps([[name, list(shape)] for name, shape in layout], separators=(",", ":"))
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


@dataclass
class WeightBundle:
    """Ordered named tensors stored back to back in one float64 vector.

    Bundles are treated as values: operations build new bundles instead of
    mutating ``values`` in place.
    """

    layout: Tuple[Tuple[str, Tuple[int, ...]], ...]
    values: np.ndarray
    version: int = 0
    fingerprint: int = field(init=False)

    def __post_init__(self):
        self.layout = tuple((str(n), tuple(int(d) for d in s)) for n, s in self.layout)
        self.values = np.ascontiguousarray(self.values, dtype=np.float64).reshape(-1)
        expected = sum(int(np.prod(s)) for _, s in self.layout)
        if self.values.size != expected:
            raise IncompatibleWeightsError(
                f"layout holds {expected} parameters but {self.values.size} values were given")
        self.fingerprint = layout_fingerprint(self.layout)

    @classmethod
    def zeros(cls, layout, version=0):
        n = sum(int(np.prod(s)) for _, s in layout)
        return cls(layout, np.zeros(n), version)

    @classmethod
    def from_arrays(cls, named_arrays, version=0):
        layout = [(name, np.shape(a)) for name, a in named_arrays]
        flat = np.concatenate([np.ravel(np.asarray(a, dtype=np.float64)) for _, a in named_arrays]) \
            if named_arrays else np.zeros(0)
        return cls(layout, flat, version)

    @property
    def n_params(self):
        return int(self.values.size)

    @property
    def names(self):
        return [n for n, _ in self.layout]

    def offsets(self):
        out, pos = {}, 0
        for name, shape in self.layout:
            size = int(np.prod(shape))
            out[name] = (pos, pos + size, shape)
            pos += size
        return out

    def arrays(self):
        """Dict of name -> reshaped *view* into ``values``."""
        return {name: self.values[a:b].reshape(shape)
                for name, (a, b, shape) in self.offsets().items()}

    def layer(self, name):
        a, b, shape = self.offsets()[name]
        return self.values[a:b].reshape(shape)

    def layers(self):
        """Yield ``(name, shape, flat_values)`` in layout order."""
        for name, (a, b, shape) in self.offsets().items():
            yield name, shape, self.values[a:b]

    def with_values(self, values, version=None):
        return WeightBundle(self.layout, values, self.version if version is None else version)

    def copy(self):
        return WeightBundle(self.layout, self.values.copy(), self.version)

    def check_compatible(self, other):
        if self.fingerprint != other.fingerprint:
            raise IncompatibleWeightsError(
                f"weight layouts differ (fingerprint {self.fingerprint:016x} "
                f"vs {other.fingerprint:016x})")

    def identical(self, other):
        """Bit-for-bit equality of layout and values."""
        return (self.fingerprint == other.fingerprint
                and self.values.tobytes() == other.values.tobytes())

    def layout_json(self):
        return {
            "fingerprint": f"{self.fingerprint:016x}",
            "version": self.version,
            "n_params": self.n_params,
            "layers": [{"name": n, "shape": list(s)} for n, s in self.layout],
        }


def check_same_layout(bundles):
    if not bundles:
        return
    first = bundles[0]
    for b in bundles[1:]:
        first.check_compatible(b)


def save_bundle(bundle, path, sidecar=True):
    """Write ``MAGIC | u16 format | u32 header_len | header JSON | <f8 values``.

    A ``<path>.json`` sidecar with the same layout header is written for
    inspection unless ``sidecar`` is False.
    """
    header = json.dumps(bundle.layout_json(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<HI", FORMAT_VERSION, len(header)))
            fh.write(header)
            fh.write(bundle.values.astype("<f8").tobytes())
        if sidecar:
            with open(str(path) + ".json", "w", encoding="utf-8") as fh:
                json.dump(bundle.layout_json(), fh, indent=2, sort_keys=True)
                fh.write("\n")
    except OSError as exc:
        raise ReportIOError(f"cannot write weight bundle {path}: {exc}") from exc


def load_bundle(path):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise ReportIOError(f"cannot read weight bundle {path}: {exc}") from exc
    if blob[:4] != MAGIC:
        raise IncompatibleWeightsError(f"{path}: not a weight bundle file")
    fmt, hlen = struct.unpack("<HI", blob[4:10])
    if fmt != FORMAT_VERSION:
        raise IncompatibleWeightsError(f"{path}: unsupported bundle format {fmt}")
    header = json.loads(blob[10:10 + hlen].decode("utf-8"))
    values = np.frombuffer(blob[10 + hlen:], dtype="<f8").astype(np.float64)
    layout = [(d["name"], tuple(d["shape"])) for d in header["layers"]]
    bundle = WeightBundle(layout, values, header["version"])
    if f"{bundle.fingerprint:016x}" != header["fingerprint"]:
        raise IncompatibleWeightsError(f"{path}: fingerprint does not match layout")
    return bundle
