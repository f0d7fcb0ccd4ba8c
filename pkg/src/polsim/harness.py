"""Discrete-time event loop binding protocol nodes to the radio channel.

One tick is one protocol round: due movements and attacks are applied, due
payload emissions and the previous tick's protocol messages are broadcast,
the channel delivers them, every node runs its round, and the resulting
send actions queue for the next tick. The whole run is a pure function of
the scenario (seed included); traces are byte-stable across runs.

Trace outputs (written when an output directory is given):
  rssi.csv     one row per reception: tick,receiver,sender,rssi_raw,rssi_smoothed
  events.jsonl one JSON object per node action: {tick, node, action, details}
  metrics.json run summary, cross-checked against the event log
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

from .messages import (
    AlertMessage,
    BftMessage,
    Location,
    Message,
    NodeId,
    PayloadMessage,
    Rssi,
    location_key,
)
from .channel import RadioChannel
from .protocol import (
    Action,
    Ignore,
    NodeState,
    SendAlert,
    SendBft,
    SendPayload,
    StoreTrusted,
)
from .scenario import AttackKind, AttackSpec, Scenario
from .topology import PeerRecord

TRACE_VERSION = 1
MOVEMENT_SETTLE_WINDOW = 120  # ticks after a movement not counted as static


@dataclass
class TraceEvent:
    tick: int
    node: str
    action: str
    details: dict[str, Any]

    def to_json(self) -> str:
        return json.dumps(
            {"tick": self.tick, "node": self.node, "action": self.action, "details": self.details},
            sort_keys=True,
            separators=(",", ":"),
        )


@dataclass
class RssiRow:
    tick: int
    receiver: str
    sender: str
    raw: float
    smoothed: Optional[float]

    def to_csv(self) -> str:
        smooth = f"{self.smoothed:.6f}" if self.smoothed is not None else ""
        return f"{self.tick},{self.receiver},{self.sender},{self.raw:.6f},{smooth}"


_COUNT_KEYS = (
    "payload_sent", "bft_sent", "alert_sent",
    "payload_recv", "bft_recv", "alert_recv",
    "trusted_stored", "ignored",
)


@dataclass
class RunMetrics:
    """Aggregated counters and series of one simulation run."""

    scenario: str
    seed: int
    duration: int
    counts: dict[str, dict[str, int]]
    bft_latency: list[dict[str, Any]]
    static_false_positive_bft: int
    trust_final: dict[str, dict[str, float]]
    trust_timeline: list[tuple[int, str, str, float]]
    movements: list[dict[str, Any]]
    attacks: list[dict[str, Any]]

    def to_dict(self) -> dict[str, Any]:
        return {
            "trace_version": TRACE_VERSION,
            "scenario": self.scenario,
            "seed": self.seed,
            "duration": self.duration,
            "counts": self.counts,
            "bft_latency": self.bft_latency,
            "static_false_positive_bft": self.static_false_positive_bft,
            "trust_final": self.trust_final,
            "trust_timeline": [list(t) for t in self.trust_timeline],
            "movements": self.movements,
            "attacks": self.attacks,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass
class RunResult:
    metrics: RunMetrics
    events: list[TraceEvent]
    rssi_rows: list[RssiRow]
    nodes: dict[str, NodeState]

    def bft_events(self) -> list[TraceEvent]:
        return [e for e in self.events if e.action == "send_bft"]

    def alert_events(self) -> list[TraceEvent]:
        return [e for e in self.events if e.action == "send_alert"]

    def verify_counts(self) -> None:
        """Cross-check metric counters against the event log; raises on drift."""
        derived: dict[str, dict[str, int]] = {
            label: dict.fromkeys(_COUNT_KEYS, 0) for label in self.metrics.counts
        }
        action_to_key = {
            "send_payload": "payload_sent",
            "send_bft": "bft_sent",
            "send_alert": "alert_sent",
            "store_trusted": "trusted_stored",
            "ignore": "ignored",
        }
        for event in self.events:
            derived[event.node][action_to_key[event.action]] += 1
        for label, counts in self.metrics.counts.items():
            for key in ("payload_sent", "bft_sent", "alert_sent", "trusted_stored", "ignored"):
                if counts[key] != derived[label][key]:
                    raise AssertionError(
                        f"{label}.{key}: metrics={counts[key]} events={derived[label][key]}"
                    )


def sensor_reading(node_index: int, tick: int) -> bytes:
    """Deterministic fake temperature for payload bodies."""
    value = 20.0 + 2.0 * math.sin(2.0 * math.pi * tick / 300.0 + node_index)
    return struct.pack("<d", value)


class _AttackDriver:
    """Expands an attack spec into per-tick injected broadcasts."""

    def __init__(self, spec: AttackSpec, scenario: Scenario, index: int):
        self.spec = spec
        self.kind = spec.kind
        self.params = spec.params
        self.at = spec.at
        self.until = spec.params.get("until", scenario.duration)
        self.counter = 0
        self.victim = scenario.node(spec.params["victim"])
        self.grid = scenario.protocol.location_grid
        if self.kind in (AttackKind.IDENTITY_SPOOF, AttackKind.REPLAY):
            # physical transmitter registered in the channel, invisible to nodes
            self.phys_id = NodeId(bytes([0x02, 0, 0, 0, 0xAA, 0xF0 + index]))
            self.position = Location(*[float(c) for c in spec.params["attacker_position"]])
            self.label = f"attacker{index}"
        else:
            attacker = scenario.node(spec.params["attacker"])
            self.phys_id = attacker.mac
            self.position = attacker.position
            self.label = attacker.label
        self.captured: Optional[PayloadMessage] = None
        self.capture_at = spec.params.get("capture_at")

    def active(self, tick: int) -> bool:
        period = int(self.params.get("period", 1))
        if tick < self.at or tick > self.until:
            return False
        if self.kind is AttackKind.REPLAY:
            count = self.params.get("count")
            if count is not None and self.counter >= count:
                return False
        return (tick - self.at) % period == 0

    def suppresses_payload_of(self, label: str, tick: int) -> bool:
        return (
            self.kind is AttackKind.IDENTITY_SPOOF
            and bool(self.params.get("suppress_victim", True))
            and label == self.victim.label
            and tick >= self.at
        )

    def emit(self, tick: int, victim_index: int) -> Optional[Message]:
        if not self.active(tick):
            return None
        self.counter += 1
        if self.kind is AttackKind.IDENTITY_SPOOF:
            payload = sensor_reading(victim_index, tick)
            return PayloadMessage(
                sender=self.victim.mac,
                seq=1_000_000 + self.counter,
                sensor_type=self.victim.sensor_type,
                payload=payload,
                signed_payload=location_key(self.victim.position, payload, self.grid),
                timestamp=tick,
            )
        if self.kind is AttackKind.MALICIOUS_BFT:
            return BftMessage(
                sender=self.phys_id,
                sender_location=self.position,
                subject=self.victim.mac,
                measured_rssi=Rssi(float(self.params.get("fake_rssi", -90.0))),
                ref_seq=None,
                timestamp=tick,
            )
        # replay: re-broadcast the captured message unmodified
        return self.captured


def run(scenario: Scenario, out_dir: Optional[str] = None, collect_rssi: bool = True) -> RunResult:
    """Execute a scenario; optionally write the trace files into `out_dir`."""
    labels: dict[NodeId, str] = {spec.mac: spec.label for spec in scenario.nodes}
    index_of = {spec.label: i for i, spec in enumerate(scenario.nodes)}

    def label_of(node: NodeId) -> str:
        lab = labels.get(node)
        return lab if lab is not None else str(node)

    channel = RadioChannel(scenario.channel)
    nodes: dict[NodeId, NodeState] = {}
    for spec in scenario.nodes:
        state = NodeState(
            self_id=spec.mac,
            self_location=spec.position,
            sensor_type=spec.sensor_type,
            params=scenario.protocol,
            filter_params=scenario.filters,
            model=scenario.channel.model,
        )
        # initialisation phase result: every node knows every identity row
        for other in scenario.nodes:
            if other.mac != spec.mac:
                state.store.add_peer(
                    PeerRecord(
                        id=other.mac,
                        sensor_type=other.sensor_type,
                        location=other.position,
                    )
                )
        nodes[spec.mac] = state
        channel.register(spec.mac, spec.position)

    drivers = [_AttackDriver(spec, scenario, i) for i, spec in enumerate(scenario.attacks)]
    for driver in drivers:
        if driver.kind in (AttackKind.IDENTITY_SPOOF, AttackKind.REPLAY):
            channel.register(driver.phys_id, driver.position)
    replay_drivers = [d for d in drivers if d.kind is AttackKind.REPLAY]

    movements_by_tick: dict[int, list] = {}
    for mv in scenario.movements:
        movements_by_tick.setdefault(mv.at, []).append(mv)

    events: list[TraceEvent] = []
    rssi_rows: list[RssiRow] = []
    counts = {spec.label: dict.fromkeys(_COUNT_KEYS, 0) for spec in scenario.nodes}
    for driver in drivers:
        counts.setdefault(driver.label, dict.fromkeys(_COUNT_KEYS, 0))
    trust_timeline: list[tuple[int, str, str, float]] = []
    trust_snapshot: dict[str, dict[str, float]] = {spec.label: {} for spec in scenario.nodes}
    node_order = sorted(nodes)

    def record_action(tick: int, node_label: str, action: Action) -> None:
        if isinstance(action, SendPayload):
            events.append(TraceEvent(tick, node_label, "send_payload", {"seq": action.message.seq}))
            counts[node_label]["payload_sent"] += 1
        elif isinstance(action, SendBft):
            m = action.message
            events.append(
                TraceEvent(
                    tick, node_label, "send_bft",
                    {
                        "subject": label_of(m.subject),
                        "measured_rssi": round(m.measured_rssi.value, 6),
                        "ref_seq": m.ref_seq,
                    },
                )
            )
            counts[node_label]["bft_sent"] += 1
        elif isinstance(action, SendAlert):
            m = action.message
            obj = label_of(m.object) if isinstance(m.object, NodeId) else m.object.hex()
            ref = None
            if m.ref_bft is not None:
                ref = {
                    "sender": label_of(m.ref_bft.sender),
                    "subject": label_of(m.ref_bft.subject),
                    "timestamp": m.ref_bft.timestamp,
                }
            events.append(
                TraceEvent(
                    tick, node_label, "send_alert",
                    {"alert_type": m.alert_type.name.lower(), "object": obj, "ref_bft": ref},
                )
            )
            counts[node_label]["alert_sent"] += 1
        elif isinstance(action, StoreTrusted):
            m = action.message
            events.append(
                TraceEvent(
                    tick, node_label, "store_trusted",
                    {"sender": label_of(m.sender), "seq": m.seq},
                )
            )
            counts[node_label]["trusted_stored"] += 1
        elif isinstance(action, Ignore):
            events.append(
                TraceEvent(
                    tick, node_label, "ignore",
                    {"reason": action.reason, "context": action.context},
                )
            )
            counts[node_label]["ignored"] += 1

    pending: list[tuple[NodeId, Message]] = []  # broadcasts queued for next tick

    for tick in range(scenario.duration):
        # 1. movements and attack captures
        for mv in movements_by_tick.get(tick, ()):
            mac = scenario.node(mv.node).mac
            channel.move(mac, mv.to, tick)
            nodes[mac].on_moved(mv.to, tick, mv.announce)

        # 2. collect this tick's broadcasts: payloads, queued actions, attacks
        broadcasts: list[tuple[NodeId, Message]] = []
        for spec in scenario.nodes:
            if tick % spec.payload_period != 0:
                continue
            if any(d.suppresses_payload_of(spec.label, tick) for d in drivers):
                continue
            state = nodes[spec.mac]
            for action in state.emit_payload(sensor_reading(index_of[spec.label], tick), tick):
                assert isinstance(action, SendPayload)
                record_action(tick, spec.label, action)
                broadcasts.append((spec.mac, action.message))
                if replay_drivers:
                    for d in replay_drivers:
                        if d.victim.mac == spec.mac:
                            cap_at = d.capture_at if d.capture_at is not None else 0
                            if tick <= cap_at or d.captured is None:
                                d.captured = action.message
        broadcasts.extend(pending)
        pending = []
        for driver in drivers:
            injected = driver.emit(tick, index_of[driver.victim.label])
            if injected is not None:
                broadcasts.append((driver.phys_id, injected))
                if isinstance(injected, BftMessage):
                    record_action(tick, driver.label, SendBft(injected))
                elif isinstance(injected, PayloadMessage):
                    record_action(tick, driver.label, SendPayload(injected))

        # 3. channel delivery
        inboxes: dict[NodeId, list[tuple[Message, Rssi]]] = {mac: [] for mac in node_order}
        for phys_sender, msg in broadcasts:
            for receiver, rssi in channel.broadcast(phys_sender, msg, tick):
                if receiver in inboxes:
                    inboxes[receiver].append((msg, rssi))

        # 4. protocol rounds, ascending node id
        for mac in node_order:
            state = nodes[mac]
            node_label = labels[mac]
            inbox = inboxes[mac]
            for msg, _rssi in inbox:
                if isinstance(msg, PayloadMessage):
                    counts[node_label]["payload_recv"] += 1
                elif isinstance(msg, BftMessage):
                    counts[node_label]["bft_recv"] += 1
                elif isinstance(msg, AlertMessage):
                    counts[node_label]["alert_recv"] += 1
            for action in state.tick(inbox, None, tick):
                record_action(tick, node_label, action)
                if isinstance(action, (SendBft, SendAlert)):
                    pending.append((mac, action.message))
            if collect_rssi:
                for msg, rssi in inbox:
                    rssi_rows.append(
                        RssiRow(
                            tick,
                            node_label,
                            label_of(msg.sender),
                            rssi.value,
                            state.smoothed_rssi(msg.sender),
                        )
                    )

        # 5. trust timeline
        for mac in node_order:
            observer = labels[mac]
            snap = trust_snapshot[observer]
            for peer_id, rec in nodes[mac].store.peers.items():
                if peer_id == mac:
                    continue
                peer_label = label_of(peer_id)
                value = rec.trust.value
                if snap.get(peer_label) != value:
                    snap[peer_label] = value
                    trust_timeline.append((tick, observer, peer_label, value))

    metrics = _build_metrics(scenario, events, counts, trust_snapshot, trust_timeline)
    result = RunResult(metrics=metrics, events=events, rssi_rows=rssi_rows, nodes={
        labels[mac]: nodes[mac] for mac in node_order
    })
    result.verify_counts()
    if out_dir is not None:
        write_traces(result, out_dir)
    return result


def _build_metrics(
    scenario: Scenario,
    events: list[TraceEvent],
    counts: dict[str, dict[str, int]],
    trust_snapshot: dict[str, dict[str, float]],
    trust_timeline: list[tuple[int, str, str, float]],
) -> RunMetrics:
    bft_sends = [e for e in events if e.action == "send_bft"]

    latency: list[dict[str, Any]] = []
    for mv in scenario.movements:
        for spec in scenario.nodes:
            if spec.label == mv.node:
                continue
            first = next(
                (
                    e.tick
                    for e in bft_sends
                    if e.node == spec.label
                    and e.details["subject"] == mv.node
                    and mv.at < e.tick <= mv.at + MOVEMENT_SETTLE_WINDOW
                ),
                None,
            )
            latency.append(
                {
                    "movement_tick": mv.at,
                    "mover": mv.node,
                    "observer": spec.label,
                    "first_bft_tick": first,
                    "latency": (first - mv.at) if first is not None else None,
                }
            )

    def in_disturbed_window(tick: int) -> bool:
        for mv in scenario.movements:
            if mv.at < tick <= mv.at + MOVEMENT_SETTLE_WINDOW:
                return True
        for attack in scenario.attacks:
            if tick > attack.at:
                return True
        return False

    static_fp = sum(1 for e in bft_sends if not in_disturbed_window(e.tick))

    return RunMetrics(
        scenario=scenario.name,
        seed=scenario.seed,
        duration=scenario.duration,
        counts=counts,
        bft_latency=latency,
        static_false_positive_bft=static_fp,
        trust_final={obs: dict(sorted(snap.items())) for obs, snap in trust_snapshot.items()},
        trust_timeline=trust_timeline,
        movements=[
            {"node": m.node, "at": m.at, "to": list(m.to.as_tuple()), "announce": m.announce}
            for m in scenario.movements
        ],
        attacks=[{"type": a.kind.value, "at": a.at, "params": dict(a.params)} for a in scenario.attacks],
    )


def write_traces(result: RunResult, out_dir: str) -> dict[str, Path]:
    """Write rssi.csv, events.jsonl and metrics.json; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "rssi": out / "rssi.csv",
        "events": out / "events.jsonl",
        "metrics": out / "metrics.json",
    }
    with open(paths["rssi"], "w", encoding="utf-8", newline="\n") as fh:
        fh.write("tick,receiver,sender,rssi_raw,rssi_smoothed\n")
        for row in result.rssi_rows:
            fh.write(row.to_csv() + "\n")
    with open(paths["events"], "w", encoding="utf-8", newline="\n") as fh:
        for event in result.events:
            fh.write(event.to_json() + "\n")
    with open(paths["metrics"], "w", encoding="utf-8", newline="\n") as fh:
        fh.write(result.metrics.to_json() + "\n")
    return paths
