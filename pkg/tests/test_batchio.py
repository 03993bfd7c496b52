import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import make_call
from ttkit import batchio
from ttkit.errors import CorruptBatchFile
from ttkit.packing import NormalizationMode, dfs_flatten
from ttkit.synth import random_tree_calls
from ttkit.trajectory import build_tree


def sample_batch(mode=NormalizationMode.PATH_SUM):
    calls = [make_call("a", [1, 2, 3, 4], n_prompt=1), make_call("b", [1, 2, 5], n_prompt=1)]
    return dfs_flatten(build_tree(calls), mode)


def test_header_layout():
    data = batchio.to_bytes(sample_batch(NormalizationMode.PATH_MEAN))
    assert data[:4] == b"TTK1"
    assert int.from_bytes(data[4:8], "little") == 1
    assert int.from_bytes(data[8:16], "little") == 5
    assert int.from_bytes(data[16:24], "little") == 3
    assert data[24] == 1
    assert data[25:45] == np.array([1, 2, 3, 4, 5], dtype="<u4").tobytes()


def test_binary_and_json_roundtrip(tmp_path):
    b = sample_batch()
    assert batchio.from_bytes(batchio.to_bytes(b)).equals(b)
    assert batchio.from_json(batchio.to_json(b)).equals(b)
    batchio.write_batch(tmp_path / "x.ttk", b)
    assert batchio.read_batch(tmp_path / "x.ttk").equals(b)
    (tmp_path / "x.json").write_text(batchio.to_json(b))
    assert batchio.read_batch(tmp_path / "x.json").equals(b)


def test_prompt_logprobs_stay_absent():
    b = batchio.from_bytes(batchio.to_bytes(sample_batch()))
    assert np.isnan(b.rollout_logprobs[0])
    assert not np.isnan(b.rollout_logprobs[1:]).any()


@pytest.mark.parametrize("cut", [0, 3, 24, 40, -1])
def test_truncated_file_is_rejected(cut):
    data = batchio.to_bytes(sample_batch())
    with pytest.raises(CorruptBatchFile):
        batchio.from_bytes(data[:cut])


def test_trailing_bytes_and_bad_magic_rejected():
    data = batchio.to_bytes(sample_batch())
    with pytest.raises(CorruptBatchFile):
        batchio.from_bytes(data + b"\0")
    with pytest.raises(CorruptBatchFile):
        batchio.from_bytes(b"XXXX" + data[4:])
    with pytest.raises(CorruptBatchFile):
        batchio.from_json('{"format": "other"}')


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(list(NormalizationMode)))
def test_random_roundtrip_bitexact(seed, mode):
    b = dfs_flatten(build_tree(random_tree_calls(np.random.default_rng(seed))), mode)
    data = batchio.to_bytes(b)
    back = batchio.from_bytes(data)
    assert back.equals(b)
    assert batchio.to_bytes(back) == data
    assert batchio.to_bytes(batchio.from_json(batchio.to_json(b))) == data
