"""Tests for the wire codec, bandwidth ledger, link latency and policies."""

import logging
import math

import numpy as np
import pytest

from config.constants import MessageKind
from models.tensors import PseudoImage
from services.attention_comm import AttentionState
from services.netsim import (
    HEADER, BandwidthLedger, CombAll, FeaturePayload, FeatureRequest, FixedSelect,
    FrameImages, Learn2com, LinkModel, LocVehicle, NetworkSimulator, ProtocolMessage,
    QueryBroadcast, RandSelect, ScoreReply, decode_message, encode_message, frame_latency,
    latency_trace, policy_from_name, read_trace, run_frame, trace_from_bytes, trace_to_bytes,
    write_trace
)
from services.pillars import PillarEncoder
from tests.conftest import empty_frame, random_images
from utils.errors import ProtocolError, ShapeError, ValidationError

FULL_SHAPE = (64, 128, 144)
FULL_PAYLOAD_BYTES = 64 * 128 * 144 * 4


def zero_images(num_infrastructures, shape=FULL_SHAPE):
    return FrameImages(PseudoImage.zeros(*shape), [PseudoImage.zeros(*shape) for _ in range(num_infrastructures)])


def simulator(links):
    return NetworkSimulator(PillarEncoder(), links)


@pytest.fixture
def small_state():
    return AttentionState.seeded(channels=4, query_size=4, key_size=8, seed=3)


@pytest.fixture
def full_state():
    return AttentionState.seeded(seed=0)


class TestCodec:
    def test_header_is_sixteen_bytes(self):
        assert HEADER.size == 16

    def test_score_reply_layout(self):
        data = encode_message(ProtocolMessage.build(ScoreReply(0.5), frame_id=7, sender_id=2))
        assert data[:4] == b'CP3D'
        assert data[4] == 1
        assert data[5] == int(MessageKind.SCORE_REPLY)
        assert int.from_bytes(data[6:10], 'little') == 7
        assert int.from_bytes(data[10:12], 'little') == 2
        assert int.from_bytes(data[12:16], 'little') == 4
        assert len(data) == 20

    def test_query_broadcast_round_trip(self):
        body = QueryBroadcast((0.25, -1.5, 3.0), (1.0, 2.0, 0.5, math.pi / 2))
        message = decode_message(encode_message(ProtocolMessage.build(body, 3, 0)))
        decoded = message.body()
        assert message.kind is MessageKind.QUERY_BROADCAST
        np.testing.assert_allclose(decoded.query, body.query, rtol=1e-6)
        np.testing.assert_allclose(decoded.pose, body.pose, rtol=1e-6)

    def test_feature_payload_round_trip(self):
        image = PseudoImage(np.random.default_rng(0).normal(size=(3, 5, 7)))
        data = encode_message(ProtocolMessage.build(FeaturePayload(image), 1, 2))
        assert decode_message(data).body().image == image

    def test_feature_request_is_header_only(self):
        message = ProtocolMessage.build(FeatureRequest(), 0, 0)
        assert message.size == 16
        assert message.counted_bytes == 0
        assert isinstance(decode_message(encode_message(message)).body(), FeatureRequest)

    def test_full_feature_payload_counts_4608_kb(self):
        message = ProtocolMessage.build(FeaturePayload(PseudoImage.zeros(*FULL_SHAPE)), 0, 1)
        assert message.counted_bytes == FULL_PAYLOAD_BYTES == 4718592
        assert message.counted_bytes / 1024 == 4608
        assert message.size == 16 + 12 + FULL_PAYLOAD_BYTES

    def test_query_counts_values_only(self):
        message = ProtocolMessage.build(QueryBroadcast(tuple([0.1] * 16), (0, 0, 0, 0)), 0, 0)
        assert message.counted_bytes == 64
        assert message.size == 16 + 64 + 16

    def test_score_reply_not_counted(self):
        assert ProtocolMessage.build(ScoreReply(0.1), 0, 1).counted_bytes == 0


class TestDecodeErrors:
    @pytest.fixture
    def reply(self):
        return encode_message(ProtocolMessage.build(ScoreReply(0.25), 4, 1))

    def test_truncated_header(self, reply):
        with pytest.raises(ProtocolError) as info:
            decode_message(reply[:10])
        assert info.value.offset == 10

    def test_bad_magic(self, reply):
        with pytest.raises(ProtocolError) as info:
            decode_message(b'XXXX' + reply[4:])
        assert info.value.offset == 0

    def test_unsupported_version(self, reply):
        data = bytearray(reply)
        data[4] = 2
        with pytest.raises(ProtocolError) as info:
            decode_message(bytes(data))
        assert info.value.offset == 4

    def test_unknown_kind(self, reply):
        data = bytearray(reply)
        data[5] = 9
        with pytest.raises(ProtocolError) as info:
            decode_message(bytes(data))
        assert info.value.offset == 5

    def test_truncated_payload(self, reply):
        with pytest.raises(ProtocolError) as info:
            decode_message(reply[:-1])
        assert info.value.offset == len(reply) - 1

    def test_trailing_bytes(self, reply):
        with pytest.raises(ProtocolError) as info:
            decode_message(reply + b'\x00')
        assert info.value.offset == len(reply)

    def test_payload_does_not_fit_kind(self):
        data = encode_message(ProtocolMessage(MessageKind.SCORE_REPLY, 0, 1, b'\x00' * 8))
        with pytest.raises(ProtocolError) as info:
            decode_message(data)
        assert info.value.offset == 16

    def test_feature_dims_mismatch(self):
        payload = (2).to_bytes(4, 'little') * 3 + b'\x00' * 16
        data = encode_message(ProtocolMessage(MessageKind.FEATURE_PAYLOAD, 0, 1, payload))
        with pytest.raises(ProtocolError) as info:
            decode_message(data)
        assert info.value.offset == 28

    def test_header_overflow_raises(self):
        with pytest.raises(ProtocolError):
            encode_message(ProtocolMessage(MessageKind.FEATURE_REQUEST, 2 ** 32, 0))
        with pytest.raises(ProtocolError):
            encode_message(ProtocolMessage(MessageKind.FEATURE_REQUEST, 0, 2 ** 16))

    def test_random_bytes_never_crash(self):
        rng = np.random.default_rng(11)
        valid = encode_message(ProtocolMessage.build(ScoreReply(0.5), 1, 1))
        for _ in range(100_000):
            data = bytearray(valid)
            position = int(rng.integers(len(data)))
            data[position] = int(rng.integers(256))
            try:
                decode_message(bytes(data[:int(rng.integers(len(data) + 1))]))
            except ProtocolError as e:
                assert e.offset is not None

    def test_protocol_error_is_value_error(self):
        assert issubclass(ProtocolError, ValueError)


class TestTrace:
    def test_trace_file_round_trip(self, tmp_path):
        messages = [
            ProtocolMessage.build(FeatureRequest(), 0, 0),
            ProtocolMessage.build(ScoreReply(-0.5), 0, 3),
        ]
        path = tmp_path / 'trace.bin'
        write_trace(path, messages)
        assert read_trace(path) == messages

    def test_truncated_trace(self):
        data = trace_to_bytes([ProtocolMessage.build(ScoreReply(0.1), 0, 1)])
        with pytest.raises(ProtocolError):
            trace_from_bytes(data[:-2])
        with pytest.raises(ProtocolError) as info:
            trace_from_bytes(data + b'\x01')
        assert info.value.offset == len(data)


class TestLinkModel:
    @pytest.mark.parametrize('kwargs', [
        {'capacity': 0},
        {'capacity': -1.0},
        {'capacity': 1.0, 'latency': -0.1},
        {'capacity': 1.0, 'loss_probability': 1.5},
    ])
    def test_invalid_links(self, kwargs):
        with pytest.raises(ValidationError):
            LinkModel(**kwargs)

    def test_transfer_time(self):
        assert LinkModel(1e6, 0.01).transfer_time(500000) == pytest.approx(0.51)


class TestLedger:
    def test_learn2com_three_infrastructures(self, full_state):
        result = simulator(LinkModel(12.5e6)).run_frame(empty_frame(3), Learn2com(full_state), zero_images(3))
        assert result.ledger.total_bytes == 64 + FULL_PAYLOAD_BYTES
        assert result.ledger.total_kb == pytest.approx(4608.0625)
        by_kind = result.ledger.bytes_by_kind()
        assert by_kind[MessageKind.QUERY_BROADCAST] == 64
        assert by_kind[MessageKind.SCORE_REPLY] == 0
        assert by_kind[MessageKind.FEATURE_REQUEST] == 0
        assert by_kind[MessageKind.FEATURE_PAYLOAD] == FULL_PAYLOAD_BYTES

    @pytest.mark.parametrize('num_infrastructures, expected_kb', [(3, 13824), (2, 9216)])
    def test_comb_all(self, num_infrastructures, expected_kb):
        result = simulator(LinkModel(12.5e6)).run_frame(
            empty_frame(num_infrastructures), CombAll(), zero_images(num_infrastructures)
        )
        assert result.ledger.total_kb == expected_kb
        assert result.participants == list(range(num_infrastructures + 1))

    def test_loc_vehicle_sends_nothing(self):
        result = simulator(LinkModel(12.5e6)).run_frame(empty_frame(3), LocVehicle(), zero_images(3))
        assert result.ledger.total_bytes == 0
        assert result.ledger.gross_bytes == 0
        assert result.messages == []
        assert result.latency == 0.0

    def test_rand_select_one_payload(self):
        result = simulator(LinkModel(12.5e6)).run_frame(empty_frame(3), RandSelect(5), zero_images(3))
        assert result.ledger.total_kb == 4608
        assert len(result.messages) == 2

    def test_policy_ordering(self, full_state):
        sim = simulator(LinkModel(12.5e6))
        images = zero_images(3)
        totals = {
            policy.name: sim.run_frame(empty_frame(3), policy, images).ledger.total_bytes
            for policy in (LocVehicle(), RandSelect(), Learn2com(full_state), CombAll())
        }
        assert totals['LocVehicle'] < totals['RandSelect'] < totals['Learn2com'] < totals['CombAll']

    def test_gross_bytes_include_headers(self, small_state):
        result = simulator(LinkModel(1e6)).run_frame(empty_frame(3), Learn2com(small_state), random_images(3))
        # 1 broadcast, 3 replies, 1 request, 1 payload
        assert len(result.messages) == 6
        assert result.ledger.gross_bytes == sum(len(m) for m in result.messages)
        assert result.ledger.gross_bytes - result.ledger.total_bytes == 6 * 16 + 16 + 3 * 4 + 12

    def test_rows_per_kind(self):
        ledger = BandwidthLedger()
        ledger.record(ProtocolMessage.build(FeaturePayload(PseudoImage.zeros(1, 2, 2)), 0, 1), 0)
        rows = ledger.rows(frame_id=4, policy='RandSelect')
        assert len(rows) == len(MessageKind)
        payload_row = next(row for row in rows if row['kind'] == 'FEATURE_PAYLOAD')
        assert payload_row == {'frame': 4, 'policy': 'RandSelect', 'kind': 'FEATURE_PAYLOAD',
                               'bytes': 16, 'kb': 16 / 1024}


class TestLatency:
    def test_empty_ledger(self):
        assert latency_trace(BandwidthLedger(), LinkModel(1e6)) == []
        assert frame_latency(BandwidthLedger(), LinkModel(1e6)) == 0.0

    def test_full_payload_at_one_megabyte_per_second(self):
        result = simulator(LinkModel(1e6)).run_frame(empty_frame(3), FixedSelect(1), zero_images(3))
        assert result.latency_trace == [('FEATURE_REQUEST', 0.0), ('FEATURE_PAYLOAD', pytest.approx(4.718592))]
        assert result.latency == pytest.approx(4.718592)

    def test_propagation_only_for_uncounted_messages(self):
        result = simulator(LinkModel(1e6, 0.005)).run_frame(
            empty_frame(3), FixedSelect(0), zero_images(3, shape=(1, 1, 1))
        )
        assert dict(result.latency_trace)['FEATURE_REQUEST'] == pytest.approx(0.005)
        assert result.latency == pytest.approx(0.005 + 0.005 + 4 / 1e6)

    def test_doubling_capacity_halves_transfer(self):
        slow = simulator(LinkModel(1e6)).run_frame(empty_frame(2), CombAll(), zero_images(2))
        fast = simulator(LinkModel(2e6)).run_frame(empty_frame(2), CombAll(), zero_images(2))
        assert fast.latency == pytest.approx(slow.latency / 2)

    def test_broadcast_waits_for_slowest_link(self, small_state):
        links = {0: LinkModel(1e6, 0.001), 1: LinkModel(1e6, 0.004), 2: LinkModel(1e6, 0.002)}
        result = simulator(links).run_frame(empty_frame(3), Learn2com(small_state), random_images(3))
        phases = dict(result.latency_trace)
        assert phases['QUERY_BROADCAST'] == pytest.approx(0.004 + 16 / 1e6)
        assert phases['SCORE_REPLY'] == pytest.approx(0.004)
        assert result.latency == pytest.approx(sum(phases.values()))

    def test_missing_link_rejected(self):
        with pytest.raises(ValidationError):
            simulator({0: LinkModel(1e6)}).run_frame(empty_frame(2), FixedSelect(1), random_images(2))


class TestPolicies:
    def test_no_infrastructure_warns_and_stays_local(self, small_state, caplog):
        images = random_images(0)
        for policy in (RandSelect(), CombAll(), Learn2com(small_state)):
            with caplog.at_level(logging.WARNING):
                result = simulator(LinkModel(1e6)).run_frame(empty_frame(0), policy, images)
            assert f"{policy.name} has no infrastructure to talk to" in caplog.text
            assert result.ledger.total_bytes == 0
            assert result.participants == [0]
            assert result.fused.channels == 8
            np.testing.assert_array_equal(result.fused.data[4:], 0.0)

    def test_loc_vehicle_no_warning_without_infrastructure(self, caplog):
        with caplog.at_level(logging.WARNING):
            simulator(LinkModel(1e6)).run_frame(empty_frame(0), LocVehicle(), random_images(0))
        assert 'no infrastructure' not in caplog.text

    def test_fused_layout(self, small_state):
        images = random_images(3)
        result = simulator(LinkModel(1e6)).run_frame(empty_frame(3), Learn2com(small_state), images)
        best = result.selected
        weight = result.scores.weight_of(best)
        np.testing.assert_array_equal(result.fused.data[:4], images.vehicle.data)
        np.testing.assert_allclose(result.fused.data[4:], weight * images.infrastructures[best].data, rtol=1e-6)
        assert result.participants == [0, best + 1]
        assert result.scores.normalized.sum() == pytest.approx(1.0)

    def test_learn2com_selects_highest_raw_score(self, small_state):
        result = simulator(LinkModel(1e6)).run_frame(empty_frame(3), Learn2com(small_state), random_images(3))
        raw = result.scores.raw
        assert result.selected == int(np.flatnonzero(raw == raw.max())[0])

    def test_learn2com_lost_broadcast_falls_back(self, small_state, caplog):
        images = random_images(3)
        with caplog.at_level(logging.WARNING):
            result = simulator(LinkModel(1e6, loss_probability=1.0)).run_frame(
                empty_frame(3), Learn2com(small_state), images
            )
        assert 'no score replies arrived' in caplog.text
        assert result.selected is None
        assert result.ledger.total_bytes == 16
        np.testing.assert_array_equal(result.fused.data[:4], images.vehicle.data)
        np.testing.assert_array_equal(result.fused.data[4:], 0.0)

    def test_comb_all_all_lost_still_charged(self, caplog):
        with caplog.at_level(logging.WARNING):
            result = simulator(LinkModel(1e6, loss_probability=1.0)).run_frame(
                empty_frame(3), CombAll(), random_images(3)
            )
        assert 'all feature payloads lost' in caplog.text
        assert result.ledger.total_bytes == 3 * 4 * 8 * 8 * 4
        assert result.participants == [0]

    def test_loss_draws_are_reproducible(self):
        link = LinkModel(1e6, loss_probability=0.5)
        outcomes = [
            [NetworkSimulator(PillarEncoder(), link, loss_seed=9).run_frame(
                empty_frame(3, frame_id=f), CombAll(), random_images(3)).participants for f in range(10)]
            for _ in range(2)
        ]
        assert outcomes[0] == outcomes[1]

    def test_comb_all_equal_weights(self):
        images = random_images(3)
        result = simulator(LinkModel(1e6)).run_frame(empty_frame(3), CombAll(), images)
        np.testing.assert_allclose(result.scores.normalized, [1 / 3] * 3)
        expected = sum(image.data for image in images.infrastructures) / 3
        np.testing.assert_allclose(result.fused.data[4:], expected, rtol=1e-6)

    def test_rand_select_reproducible_per_frame(self):
        sim = simulator(LinkModel(1e6))
        images = random_images(3)
        first = [sim.run_frame(empty_frame(3, f), RandSelect(4), images).selected for f in range(50)]
        second = [sim.run_frame(empty_frame(3, f), RandSelect(4), images).selected for f in range(50)]
        assert first == second
        assert set(first) == {0, 1, 2}

    def test_fixed_select_out_of_range(self):
        with pytest.raises(ValidationError):
            simulator(LinkModel(1e6)).run_frame(empty_frame(2), FixedSelect(2), random_images(2))

    def test_image_count_must_match_frame(self):
        with pytest.raises(ShapeError):
            simulator(LinkModel(1e6)).run_frame(empty_frame(3), LocVehicle(), random_images(2))

    def test_messages_decode_in_handshake_order(self, small_state):
        result = run_frame(empty_frame(3, frame_id=12), Learn2com(small_state), LinkModel(1e6),
                           images=random_images(3))
        decoded = trace_from_bytes(trace_to_bytes(result.messages))
        assert [m.kind for m in decoded] == [
            MessageKind.QUERY_BROADCAST,
            MessageKind.SCORE_REPLY, MessageKind.SCORE_REPLY, MessageKind.SCORE_REPLY,
            MessageKind.FEATURE_REQUEST, MessageKind.FEATURE_PAYLOAD,
        ]
        assert all(m.frame_id == 12 for m in decoded)
        assert [m.sender_id for m in decoded[1:4]] == [1, 2, 3]
        assert decoded[-1].sender_id == result.selected + 1


class TestPolicyFromName:
    def test_known_names(self, small_state):
        assert isinstance(policy_from_name('LocVehicle'), LocVehicle)
        assert isinstance(policy_from_name('RandSelect', seed=2), RandSelect)
        assert isinstance(policy_from_name('CombAll'), CombAll)
        assert isinstance(policy_from_name('Learn2com', small_state), Learn2com)

    def test_unknown_name(self):
        with pytest.raises(ValidationError, match='unknown policy'):
            policy_from_name('Broadcast')

    def test_learn2com_needs_state(self):
        with pytest.raises(ValidationError):
            policy_from_name('Learn2com')
