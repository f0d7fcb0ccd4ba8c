"""Simulated broadcast medium with deterministic noise and link asymmetry.

Every broadcast is delivered to all other registered nodes within range; the
reception RSSI is the path-loss model value plus a per-ordered-link jitter
(fixed for the whole run, bounding pairwise asymmetry) plus per-reception
Gaussian noise. All randomness is derived from the run seed, so a given call
sequence always produces the same delivery list.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field
from .localization import PathLossModel, rssi_value_from_distance
from .messages import Location, Message, NodeId, RSSI_MAX, RSSI_MIN, Rssi

MAX_ASYMMETRY_JITTER = 2.5  # keeps |RSSI_AB - RSSI_BA| <= 5 dB before noise


class UnknownNodeError(KeyError):
    """Channel operation referenced an unregistered node."""


@dataclass(frozen=True)
class ChannelConfig:
    model: PathLossModel = field(default_factory=PathLossModel)
    noise_sigma: float = 1.0
    asymmetry_jitter: float = 1.0
    range: float = 30.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not (0.0 <= self.asymmetry_jitter <= MAX_ASYMMETRY_JITTER):
            raise ValueError(f"asymmetry_jitter must be in [0, {MAX_ASYMMETRY_JITTER}]")
        if self.range <= 0:
            raise ValueError("range must be positive")


class RadioChannel:
    """Single-owner broadcast medium; all PRNG draws are sequenced."""

    def __init__(self, config: ChannelConfig):
        self.config = config
        self._positions: dict[NodeId, Location] = {}
        self._noise = random.Random(config.seed ^ 0x5EED_0F_0C_EA_11)
        self._jitter_cache: dict[tuple[NodeId, NodeId], float] = {}
        self._order: list[NodeId] = []

    def register(self, node: NodeId, position: Location) -> None:
        self._positions[node] = position
        self._order = sorted(self._positions)

    def position(self, node: NodeId) -> Location:
        try:
            return self._positions[node]
        except KeyError:
            raise UnknownNodeError(str(node)) from None

    def move(self, node: NodeId, to: Location, now: int = 0) -> None:
        if node not in self._positions:
            raise UnknownNodeError(str(node))
        self._positions[node] = to

    def link_jitter(self, sender: NodeId, receiver: NodeId) -> float:
        """Fixed asymmetry offset of the ordered link, in [-J, +J].

        Derived by hashing (seed, sender, receiver) so it is stable across the
        run and independent of call order.
        """
        j = self.config.asymmetry_jitter
        if j == 0.0:
            return 0.0
        key = (sender, receiver)
        cached = self._jitter_cache.get(key)
        if cached is None:
            material = self.config.seed.to_bytes(8, "little", signed=True) + sender.mac + receiver.mac
            h = int.from_bytes(hashlib.blake2b(material, digest_size=8).digest(), "little")
            cached = (h / 2**64 * 2.0 - 1.0) * j
            self._jitter_cache[key] = cached
        return cached

    def broadcast(self, sender: NodeId, msg: Message, now: int) -> list[tuple[NodeId, Rssi]]:
        """Deliver `msg` to every other registered node within range.

        Returns (receiver, reception RSSI) pairs in ascending receiver order.
        The sender is the physical transmitter; the message's claimed sender
        field may differ (identity spoofing).
        """
        origin = self.position(sender)
        deliveries: list[tuple[NodeId, Rssi]] = []
        for receiver in self._order:
            if receiver == sender:
                continue
            d = origin.distance_to(self._positions[receiver])
            if d > self.config.range:
                continue
            level = rssi_value_from_distance(self.config.model, max(d, 1e-9))
            level += self.link_jitter(sender, receiver)
            if self.config.noise_sigma > 0:
                level += self._noise.gauss(0.0, self.config.noise_sigma)
            level = min(RSSI_MAX, max(RSSI_MIN, level))
            deliveries.append((receiver, Rssi(level)))
        return deliveries
