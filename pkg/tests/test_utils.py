"""Seed streams, hashing, validators and decorators."""

import logging

import numpy as np
import pytest

from config.constants import PolicyName
from utils.common import content_hash, derive_seed, format_kb, mix64, splitmix64_stream, uniform_stream
from utils.decorators import log_execution_time, validate_input
from utils.errors import ValidationError
from utils.validators import (
    require, validate_count, validate_policy_names, validate_positive,
    validate_probability, validate_range,
)


class TestSeeds:
    def test_splitmix_reference_output(self):
        assert int(splitmix64_stream(0, 1)[0]) == 0xE220A8397B1DCDAF
        assert mix64(0x9E3779B97F4A7C15) == 0xE220A8397B1DCDAF

    def test_stream_matches_scalar_mixer(self):
        stream = splitmix64_stream(42, 5)
        expected = [mix64(42 + (k + 1) * 0x9E3779B97F4A7C15) for k in range(5)]
        assert [int(v) for v in stream] == expected

    def test_stream_prefix_is_stable(self):
        assert np.array_equal(splitmix64_stream(3, 10)[:4], splitmix64_stream(3, 4))

    def test_uniform_bounds(self):
        values = uniform_stream(9, 10_000, -2.0, 5.0)
        assert values.min() >= -2.0
        assert values.max() < 5.0
        assert abs(values.mean() - 1.5) < 0.1

    def test_derive_seed_separates_keys(self):
        seeds = {derive_seed(7, f) for f in range(1000)}
        assert len(seeds) == 1000
        assert derive_seed(7, 1, 2) != derive_seed(7, 2, 1)
        assert derive_seed(7) == 7

    def test_derive_seed_is_deterministic(self):
        assert derive_seed(123, 4, 5) == derive_seed(123, 4, 5)


class TestContentHash:
    def test_order_independent(self):
        rows = np.random.default_rng(0).uniform(-1, 1, (50, 4))
        hashes = content_hash(rows)
        permutation = np.random.default_rng(1).permutation(50)
        assert np.array_equal(content_hash(rows[permutation]), hashes[permutation])

    def test_distinguishes_rows(self):
        rows = np.array([[1.0, 2.0], [2.0, 1.0], [1.0, 2.0]])
        hashes = content_hash(rows)
        assert hashes[0] == hashes[2]
        assert hashes[0] != hashes[1]


def test_format_kb():
    assert format_kb(4718656) == '4608.06'
    assert format_kb(4718592) == '4608.00'
    assert format_kb(4718656, digits=4) == '4608.0625'


class TestValidators:
    @pytest.mark.parametrize('value,ok', [(0.56, True), (0, False), (-1, False), (float('nan'), False), ('x', False)])
    def test_positive(self, value, ok):
        assert validate_positive(value)[0] is ok

    def test_positive_allow_zero(self):
        assert validate_positive(0, allow_zero=True) == (True, 0)

    @pytest.mark.parametrize('value,ok', [(100, True), (2.0, True), (1.5, False), (-1, False), ('ten', False)])
    def test_count(self, value, ok):
        assert validate_count(value)[0] is ok

    def test_count_minimum(self):
        assert validate_count(0, minimum=1) == (False, 'must be >= 1, got 0')

    @pytest.mark.parametrize('value,ok', [(0.0, True), (1.0, True), (0.8, True), (1.01, False), (-0.1, False)])
    def test_probability(self, value, ok):
        assert validate_probability(value)[0] is ok

    def test_range(self):
        assert validate_range((-3, 1)) == (True, (-3.0, 1.0))
        assert validate_range((1, 1))[0] is False
        assert validate_range((1,))[0] is False

    def test_policy_names(self):
        ok, policies = validate_policy_names(['Learn2com', 'CombAll'])
        assert ok
        assert policies == [PolicyName.LEARN2COM, PolicyName.COMB_ALL]

    def test_unknown_policy_lists_valid_names(self):
        ok, message = validate_policy_names(['Broadcast'])
        assert not ok
        assert 'Learn2com' in message

    def test_require_names_the_field(self):
        assert require('grid.omega', validate_count(100, minimum=1)) == 100
        with pytest.raises(ValidationError, match='grid.omega'):
            require('grid.omega', validate_count(0, minimum=1))


class TestDecorators:
    def test_validate_input_rejects(self):
        @validate_input(lr=validate_positive)
        def train(lr: float = 0.1):
            return lr

        assert train() == 0.1
        assert train(lr=0.5) == 0.5
        with pytest.raises(ValidationError, match='Invalid lr for train'):
            train(0)

    def test_log_execution_time(self, caplog):
        @log_execution_time()
        def step():
            return 3

        with caplog.at_level(logging.INFO):
            assert step() == 3
        assert any('step' in record.getMessage() for record in caplog.records)
