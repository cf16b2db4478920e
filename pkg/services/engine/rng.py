"""
Deterministic random streams

Every consumer of randomness (weight init, data order, scene synthesis,
perceptual features) draws from its own Philox stream keyed by
(run seed, label). Streams are independent of each other and of the order
in which they are created, and their state serialises to JSON for
checkpoints.
"""

import hashlib
import json
import logging
from typing import Dict

import numpy as np

from services.common.exceptions import FormatError

logger = logging.getLogger(__name__)


def stream_key(seed: int, label: str) -> int:
    """128-bit Philox key derived from the seed and stream label"""
    digest = hashlib.blake2b(f"{int(seed)}:{label}".encode("utf-8"), digest_size=16).digest()
    return int.from_bytes(digest, "little")


def make_stream(seed: int, label: str) -> np.random.Generator:
    """Fresh generator positioned at the start of the (seed, label) stream"""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, label)))


class Rng:
    """
    Seeded bank of named random streams

    `stream(label)` returns the same persistent generator on every call so
    consumers such as the data-order shuffle advance across epochs;
    `fresh(label)` always restarts the stream.

    Example:
        rng = Rng(7)
        order = rng.stream("data-order").permutation(160)
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: Dict[str, np.random.Generator] = {}

    def stream(self, label: str) -> np.random.Generator:
        if label not in self._streams:
            self._streams[label] = make_stream(self.seed, label)
        return self._streams[label]

    def fresh(self, label: str) -> np.random.Generator:
        return make_stream(self.seed, label)

    def get_state(self, label: str) -> dict:
        return _encode_state(self.stream(label).bit_generator.state)

    def set_state(self, label: str, state: dict) -> None:
        self.stream(label).bit_generator.state = _decode_state(state)

    # ---- serialisation ----

    def to_json(self) -> str:
        payload = {
            "seed": self.seed,
            "streams": {label: _encode_state(gen.bit_generator.state)
                        for label, gen in sorted(self._streams.items())},
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Rng":
        try:
            payload = json.loads(text)
            rng = cls(payload["seed"])
            for label, state in payload["streams"].items():
                rng.set_state(label, state)
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"Invalid RNG state: {exc}", offset=0) from exc
        logger.debug(f"Restored {len(rng._streams)} RNG streams for seed {rng.seed}")
        return rng


def _encode_state(state: dict) -> dict:
    out = {}
    for key, value in state.items():
        if isinstance(value, dict):
            out[key] = _encode_state(value)
        elif isinstance(value, np.ndarray):
            out[key] = {"__array__": [int(v) for v in value], "dtype": str(value.dtype)}
        elif isinstance(value, np.integer):
            out[key] = int(value)
        else:
            out[key] = value
    return out


def _decode_state(state: dict) -> dict:
    out = {}
    for key, value in state.items():
        if isinstance(value, dict) and "__array__" in value:
            out[key] = np.array(value["__array__"], dtype=value["dtype"])
        elif isinstance(value, dict):
            out[key] = _decode_state(value)
        else:
            out[key] = value
    return out
