"""Radio channel: delivery, noise determinism, asymmetry bounds."""

import math

import pytest

from polsim.channel import ChannelConfig, RadioChannel, UnknownNodeError
from polsim.localization import PathLossModel
from polsim.messages import Location, NodeId, PayloadMessage, LocationKey, SensorType

A = NodeId.from_str("02:00:00:00:00:01")
B = NodeId.from_str("02:00:00:00:00:02")
C = NodeId.from_str("02:00:00:00:00:03")

MSG = PayloadMessage(A, 1, SensorType.GENERIC, b"x", LocationKey(bytes(32)), 0)


def quiet_channel(**overrides) -> RadioChannel:
    cfg = dict(noise_sigma=0.0, asymmetry_jitter=0.0, range=30.0, seed=1)
    cfg.update(overrides)
    return RadioChannel(ChannelConfig(model=PathLossModel(), **cfg))


class TestBroadcast:
    def test_reference_distance_delivery(self):
        ch = quiet_channel()
        ch.register(A, Location(0.0, 0.0, 0.0))
        ch.register(B, Location(1.0, 0.0, 0.0))
        deliveries = ch.broadcast(A, MSG, 0)
        assert len(deliveries) == 1
        receiver, rssi = deliveries[0]
        assert receiver == B
        assert rssi.value == pytest.approx(-40.0)

    def test_out_of_range_dropped(self):
        ch = quiet_channel(range=5.0)
        ch.register(A, Location(0.0, 0.0, 0.0))
        ch.register(B, Location(1.0, 0.0, 0.0))
        ch.register(C, Location(50.0, 0.0, 0.0))
        receivers = [r for r, _ in ch.broadcast(A, MSG, 0)]
        assert receivers == [B]

    def test_unregistered_sender_errors(self):
        ch = quiet_channel()
        with pytest.raises(UnknownNodeError):
            ch.broadcast(A, MSG, 0)

    def test_same_seed_same_deliveries(self):
        def one_run():
            ch = RadioChannel(ChannelConfig(seed=99))
            ch.register(A, Location(0.0, 0.0, 0.0))
            ch.register(B, Location(1.0, 0.0, 0.0))
            ch.register(C, Location(2.0, 0.0, 0.0))
            out = []
            for t in range(20):
                out.append([(str(r), rssi.value) for r, rssi in ch.broadcast(A, MSG, t)])
            return out

        assert one_run() == one_run()

    def test_sender_not_delivered_to_itself(self):
        ch = quiet_channel()
        ch.register(A, Location(0.0, 0.0, 0.0))
        ch.register(B, Location(1.0, 0.0, 0.0))
        assert all(r != A for r, _ in ch.broadcast(A, MSG, 0))


class TestMove:
    def test_move_changes_rssi_exactly(self):
        ch = quiet_channel()
        ch.register(A, Location(0.0, 0.0, 0.0))
        ch.register(B, Location(1.0, 0.0, 0.0))
        before = ch.broadcast(A, MSG, 0)[0][1].value
        ch.move(B, Location(2.0, 0.0, 0.0), 1)
        after = ch.broadcast(A, MSG, 1)[0][1].value
        assert before == pytest.approx(-40.0)
        # doubling the distance with n=2 drops the level by 20*log10(2)
        assert before - after == pytest.approx(20.0 * math.log10(2.0), abs=1e-9)

    def test_move_to_same_position_no_change(self):
        ch = quiet_channel()
        ch.register(A, Location(0.0, 0.0, 0.0))
        ch.register(B, Location(1.5, 0.0, 0.0))
        before = ch.broadcast(A, MSG, 0)[0][1].value
        ch.move(B, Location(1.5, 0.0, 0.0), 1)
        assert ch.broadcast(A, MSG, 1)[0][1].value == pytest.approx(before)

    def test_unknown_node_errors(self):
        ch = quiet_channel()
        with pytest.raises(UnknownNodeError):
            ch.move(A, Location(0.0, 0.0, 0.0), 0)


class TestAsymmetry:
    def test_pairwise_spread_bounded_without_noise(self):
        ch = RadioChannel(
            ChannelConfig(noise_sigma=0.0, asymmetry_jitter=1.0, range=30.0, seed=5)
        )
        positions = {
            A: Location(0.0, 0.0, 0.0),
            B: Location(1.0, 1.0, 0.0),
            C: Location(2.0, 0.0, 1.0),
        }
        for node, pos in positions.items():
            ch.register(node, pos)
        for x in (A, B, C):
            for y in (A, B, C):
                if x == y:
                    continue
                fwd = dict(ch.broadcast(x, MSG, 0))[y].value
                rev = dict(ch.broadcast(y, MSG, 0))[x].value
                assert abs(fwd - rev) <= 5.0
                assert abs(fwd - rev) <= 2.0  # 2 * jitter bound

    def test_jitter_fixed_per_link(self):
        ch = RadioChannel(ChannelConfig(noise_sigma=0.0, asymmetry_jitter=1.5, seed=7))
        ch.register(A, Location(0.0, 0.0, 0.0))
        ch.register(B, Location(1.0, 0.0, 0.0))
        values = {ch.broadcast(A, MSG, t)[0][1].value for t in range(10)}
        assert len(values) == 1  # no per-reception variation without noise

    def test_jitter_bound_enforced(self):
        with pytest.raises(ValueError):
            ChannelConfig(asymmetry_jitter=3.0)


class TestMonotonicity:
    def test_farther_is_weaker(self):
        ch = quiet_channel(range=100.0)
        ch.register(A, Location(0.0, 0.0, 0.0))
        previous = 0.0
        for i, d in enumerate((1.0, 2.0, 4.0, 8.0, 16.0)):
            node = NodeId(bytes([3, 0, 0, 0, 0, i]))
            ch.register(node, Location(d, 0.0, 0.0))
        levels = [rssi.value for _, rssi in ch.broadcast(A, MSG, 0)]
        assert levels == sorted(levels, reverse=True)
        assert len(set(levels)) == len(levels)
