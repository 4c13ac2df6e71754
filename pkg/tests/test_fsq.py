import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxwm.errors import ConfigError, DimensionError
from ctxwm.fsq import (
    FsqConfig,
    codes_from_bytes,
    codes_to_bytes,
    decode,
    pack,
    quantize,
    to_channels,
)

from oracles import fsq_scalar, mixed_radix

CFG = FsqConfig((5, 3), 64)


def test_config_validation():
    assert CFG.positions == 32 and CFG.codebook_size == 15
    with pytest.raises(ConfigError):
        FsqConfig((4, 3), 64)
    with pytest.raises(ConfigError):
        FsqConfig((5, 3), 63)
    with pytest.raises(ConfigError):
        FsqConfig((1,), 4)


def test_zero_input():
    values, codes = quantize(torch.zeros(64), CFG)
    assert torch.equal(values, torch.zeros(64))
    zero_code = mixed_radix_index([0, 0])
    assert torch.equal(codes, torch.full((32,), zero_code))


def mixed_radix_index(values, levels=(5, 3)):
    idx, radix = 0, 1
    for v, l in zip(values, levels):
        idx += (v + l // 2) * radix
        radix *= l
    return idx


def test_saturation_examples():
    cfg5, cfg3 = FsqConfig((5,), 1), FsqConfig((3,), 1)
    assert float(quantize(torch.tensor([10.0]), cfg5)[0]) == 2.0
    assert float(quantize(torch.tensor([-10.0]), cfg3)[0]) == -1.0


def test_index_14_decodes_to_2_1():
    cfg = FsqConfig((5, 3), 2)
    assert decode(torch.tensor([14]), cfg).tolist() == [2.0, 1.0]
    assert mixed_radix(14, (5, 3)) == [2, 1]


def test_blocked_layout():
    x = torch.arange(64.0)
    ch = to_channels(x, CFG)
    assert ch.shape == (32, 2)
    assert ch[3, 0] == 3 and ch[3, 1] == 35


def test_quantize_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    x = rng.normal(scale=2.0, size=(50, 64))
    values, codes = quantize(torch.tensor(x, dtype=torch.float64), CFG)
    for r in range(5):
        for p in range(32):
            grid = [fsq_scalar(x[r, p], 5), fsq_scalar(x[r, 32 + p], 3)]
            assert values[r, p] == grid[0] and values[r, 32 + p] == grid[1]
            assert int(codes[r, p]) == mixed_radix_index(grid)


def test_ste_gradient():
    x = torch.zeros(64, requires_grad=True)
    values, _ = quantize(x, CFG)
    values.sum().backward()
    assert torch.allclose(x.grad[:32], torch.full((32,), 2.0))
    assert torch.allclose(x.grad[32:], torch.full((32,), 1.0))

    x = torch.randn(64, requires_grad=True)
    v, _ = quantize(x, CFG)
    (v * 0).sum().backward()
    assert torch.equal(x.grad, torch.zeros(64))


def test_ste_matches_surrogate_finite_differences():
    torch.manual_seed(0)
    x = torch.randn(64, dtype=torch.float64, requires_grad=True)
    w = torch.randn(64, dtype=torch.float64)
    v, _ = quantize(x, CFG)
    (v * w).sum().backward()
    half = torch.tensor([2.0] * 32 + [1.0] * 32, dtype=torch.float64)
    h = 1e-6
    xd = x.detach()
    for i in range(0, 64, 7):
        e = torch.zeros(64, dtype=torch.float64)
        e[i] = h
        sur = lambda y: float((half * torch.tanh(y) * w).sum())
        num = (sur(xd + e) - sur(xd - e)) / (2 * h)
        assert abs(num - float(x.grad[i])) <= 1e-3 * max(1.0, abs(num))


def test_decode_roundtrip_and_bounds():
    torch.manual_seed(1)
    x = torch.randn(1000, 64) * 3
    values, codes = quantize(x, CFG)
    assert torch.equal(decode(codes, CFG), values)
    ch = to_channels(values, CFG)
    assert ch[..., 0].abs().max() <= 2 and ch[..., 1].abs().max() <= 1


def test_every_code_roundtrips_through_pack():
    cfg = FsqConfig((5, 3), 60)
    codes = torch.arange(15).repeat(2)[None]
    grid = to_channels(decode(codes, cfg), cfg)
    assert torch.equal(pack(grid, cfg), codes)


def test_surjective_for_large_inputs():
    xs = []
    for v0 in (-2, -1, 0, 1, 2):
        for v1 in (-1, 0, 1):
            xs.append((math.atanh(v0 / 2 * 0.999) if abs(v0) < 2 else 10.0 * np.sign(v0),
                       math.atanh(v1 * 0.999) if v1 else 0.0))
    x = torch.tensor(xs, dtype=torch.float64)
    _, codes = quantize(x, FsqConfig((5, 3), 2))
    assert sorted(codes.squeeze(-1).tolist()) == list(range(15))


def test_decode_errors():
    with pytest.raises(ValueError):
        decode(torch.full((32,), 15), CFG)
    with pytest.raises(DimensionError):
        decode(torch.zeros(31, dtype=torch.long), CFG)
    with pytest.raises(DimensionError):
        quantize(torch.zeros(63), CFG)


def test_code_bytes_little_endian():
    codes = np.array([[1, 14, 256]])
    raw = codes_to_bytes(codes)
    assert raw == bytes([1, 0, 14, 0, 0, 1])
    assert np.array_equal(codes_from_bytes(raw, 3), codes)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=64, max_size=64))
def test_grid_values_bounded(vals):
    values, codes = quantize(torch.tensor(vals, dtype=torch.float64), CFG)
    ch = to_channels(values, CFG)
    assert ch[:, 0].abs().max() <= 2 and ch[:, 1].abs().max() <= 1
    assert codes.min() >= 0 and codes.max() < 15
