"""Data descriptions and the plaintext formats of every protocol message.

Each message is a compact JSON object (sorted keys, base64 byte fields) that
is then hybrid-encrypted to its recipient:

=============  ==========  ======================================
message        recipient   fields
=============  ==========  ======================================
sell request   broker      dd, cert, id_s, ku_seller
buy request    broker      dd, id_b, ku_buyer
invoice        buyer       trade_id, price, pay_to
match notice   seller      ku_buyer, id_b, id_s
delivery       buyer       id_b, address, k_s
routing tag    broker      id_s  (prefixed to a forwarded delivery)
payment memo   broker      trade_id
score          broker      trade_id, score
offer          seller      trade_id, id_s, price  (seller-choice round)
confirm        broker      trade_id, id_s, accept
=============  ==========  ======================================
"""

from __future__ import annotations

import base64
import enum
import json
from dataclasses import dataclass
from typing import Any

from .errors import DecryptFailure, InvalidDD

WILDCARD_REGION = "*"


class SensorType(str, enum.Enum):
    TEMPERATURE = "temperature"
    HUMIDITY = "humidity"
    AIR_QUALITY = "air_quality"
    TRAFFIC = "traffic"
    ENERGY = "energy"
    GENERIC = "generic"


# plausible sample ranges per sensor type (inclusive)
PLAUSIBLE_RANGES: dict[SensorType, tuple[float, float]] = {
    SensorType.TEMPERATURE: (-40.0, 60.0),
    SensorType.HUMIDITY: (0.0, 100.0),
    SensorType.AIR_QUALITY: (0.0, 500.0),
    SensorType.TRAFFIC: (0.0, 10_000.0),
    SensorType.ENERGY: (0.0, 1_000_000.0),
    SensorType.GENERIC: (-1e9, 1e9),
}

DEFAULT_PRICES: dict[SensorType, int] = {
    SensorType.TEMPERATURE: 2,
    SensorType.HUMIDITY: 2,
    SensorType.AIR_QUALITY: 5,
    SensorType.TRAFFIC: 4,
    SensorType.ENERGY: 3,
    SensorType.GENERIC: 1,
}


@dataclass(frozen=True)
class DataDescription:
    """What a seller collected or a buyer wants."""

    sensor_type: SensorType
    region: str
    volume: int
    time_window: tuple[int, int]

    def __post_init__(self):
        object.__setattr__(self, "sensor_type", SensorType(self.sensor_type))
        object.__setattr__(self, "time_window", tuple(self.time_window))

    def validate(self) -> "DataDescription":
        if not isinstance(self.volume, int) or self.volume <= 0:
            raise InvalidDD(f"volume must be a positive integer, got {self.volume!r}")
        start, end = self.time_window
        if start > end:
            raise InvalidDD(f"time window {self.time_window} not ordered")
        return self

    def to_dict(self) -> dict:
        return {"t": self.sensor_type.value, "r": self.region, "v": self.volume,
                "w": list(self.time_window)}

    @classmethod
    def from_dict(cls, d: dict) -> "DataDescription":
        return cls(SensorType(d["t"]), d["r"], d["v"], tuple(d["w"]))


def b64(b: bytes) -> str:
    return base64.b64encode(b).decode("ascii")


def unb64(s: str) -> bytes:
    return base64.b64decode(s.encode("ascii"), validate=True)


def encode(kind: str, **fields: Any) -> bytes:
    """Serialize a message; bytes values become base64 strings."""
    body = {"k": kind}
    for name, value in fields.items():
        body[name] = b64(value) if isinstance(value, (bytes, bytearray)) else value
    return json.dumps(body, sort_keys=True, separators=(",", ":")).encode()


def decode(data: bytes, kind: str) -> dict:
    try:
        body = json.loads(data.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DecryptFailure("malformed plaintext") from exc
    if not isinstance(body, dict) or body.get("k") != kind:
        raise DecryptFailure(f"expected {kind} message")
    return body
