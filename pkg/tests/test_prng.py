import numpy as np

from biomx._prng import SplitMix64, splitmix64, uniform_block


def test_reference_vectors_seed_1234567():
    rng = SplitMix64(1234567)
    got = [rng.next_u64() for _ in range(5)]
    assert got == [
        6457827717110365317,
        3203168211198807973,
        9817491932198370423,
        4593380528125082431,
        16408922859458223821,
    ]


def test_zero_seed():
    assert SplitMix64(0).next_u64() == 0xE220A8397B1DCDAF
    assert splitmix64(0) == 0xE220A8397B1DCDAF


def test_block_matches_scalar_stream():
    rng = SplitMix64(99)
    scalar = [rng.random() for _ in range(20)]
    np.testing.assert_array_equal(uniform_block(99, 0, 20), scalar)
    np.testing.assert_array_equal(uniform_block(99, 7, 5), scalar[7:12])


def test_uniform_range():
    u = uniform_block(2**64 - 1, 0, 10_000)
    assert u.min() >= 0.0 and u.max() < 1.0
