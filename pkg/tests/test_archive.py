import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facelivt import (
    ArchiveFormatError,
    FusionOptions,
    build_model,
    forward,
    load_model,
    reparameterize_model,
    save_model,
    variant_config,
)
from facelivt.archive import MAGIC, model_to_entries, read_archive, write_archive

from conftest import rng


def test_round_trip_preserves_entries(tmp_path):
    g = rng(0)
    entries = [
        ("a", g.uniform(-1, 1, (2, 3)).astype(np.float32)),
        ("b/nested.name", g.uniform(-1, 1, (4,)).astype(np.float32)),
        ("scalarish", g.uniform(-1, 1, (1,)).astype(np.float32)),
        ("rank4", g.uniform(-1, 1, (2, 1, 3, 3)).astype(np.float32)),
    ]
    path = tmp_path / "w.flvt"
    write_archive(path, entries)
    loaded = read_archive(path)
    assert [n for n, _ in loaded] == [n for n, _ in entries]
    for (_, a), (_, b) in zip(entries, loaded):
        assert a.shape == b.shape
        np.testing.assert_array_equal(a, b)


def test_write_read_write_is_byte_identical(tmp_path):
    g = rng(1)
    entries = [(f"t{i}", g.uniform(-1, 1, (i + 1, 2)).astype(np.float32)) for i in range(5)]
    first = tmp_path / "first.flvt"
    second = tmp_path / "second.flvt"
    write_archive(first, entries)
    write_archive(second, read_archive(first))
    assert first.read_bytes() == second.read_bytes()


@settings(max_examples=25, deadline=None)
@given(
    names=st.lists(
        st.text(st.characters(min_codepoint=33, max_codepoint=126), min_size=1, max_size=12),
        min_size=1,
        max_size=6,
        unique=True,
    ),
    seed=st.integers(0, 2**31),
)
def test_round_trip_random_entries(tmp_path_factory, names, seed):
    g = rng(seed)
    entries = []
    for name in names:
        rank = int(g.integers(1, 4))
        shape = tuple(int(g.integers(1, 4)) for _ in range(rank))
        entries.append((name, g.uniform(-1, 1, shape).astype(np.float32)))
    path = tmp_path_factory.mktemp("arch") / "w.flvt"
    write_archive(path, entries)
    for (na, a), (nb, b) in zip(entries, read_archive(path)):
        assert na == nb
        np.testing.assert_array_equal(a, b)


def test_duplicate_names_rejected_on_write(tmp_path):
    entries = [("x", np.zeros(1, np.float32)), ("x", np.ones(1, np.float32))]
    with pytest.raises(ArchiveFormatError, match="duplicate"):
        write_archive(tmp_path / "dup.flvt", entries)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.flvt"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
    with pytest.raises(ArchiveFormatError, match="magic"):
        read_archive(path)


def test_truncated_archive_rejected(tmp_path):
    g = rng(2)
    path = tmp_path / "w.flvt"
    write_archive(path, [("x", g.uniform(-1, 1, (4, 4)).astype(np.float32))])
    blob = path.read_bytes()
    path.write_bytes(blob[:-7])
    with pytest.raises(ArchiveFormatError, match="truncated"):
        read_archive(path)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "w.flvt"
    write_archive(path, [("x", np.zeros((2, 2), np.float32))])
    path.write_bytes(path.read_bytes() + b"junk")
    with pytest.raises(ArchiveFormatError, match="trailing"):
        read_archive(path)


def test_empty_archive_round_trips(tmp_path):
    path = tmp_path / "empty.flvt"
    write_archive(path, [])
    assert read_archive(path) == []
    assert path.read_bytes() == MAGIC + struct.pack("<I", 0)


# ---------------------------------------------------------------------------
# model serialization
# ---------------------------------------------------------------------------


def test_model_save_load_bitwise(tmp_path, tiny_config):
    model = build_model(tiny_config, seed=3)
    path = tmp_path / "m.flvt"
    save_model(path, model)
    loaded = load_model(path)
    assert loaded.config == model.config
    assert loaded.form == model.form
    for (na, a), (nb, b) in zip(model_to_entries(model), model_to_entries(loaded)):
        assert na == nb
        np.testing.assert_array_equal(a, b)
    x = rng(3).uniform(-1, 1, (1, 3, 112, 112)).astype(np.float32)
    np.testing.assert_array_equal(forward(model, x), forward(loaded, x))


def test_deploy_model_round_trip(tmp_path, tiny_config):
    model = build_model(tiny_config, seed=4)
    deploy, _ = reparameterize_model(model, probes=0)
    path = tmp_path / "d.flvt"
    save_model(path, deploy)
    loaded = load_model(path)
    assert loaded.form == "deploy"
    mixer = loaded.stages[0][0].mixer
    assert mixer.conv_1x1 is None and mixer.bn is None and mixer.residual_folded
    x = rng(4).uniform(-1, 1, (1, 3, 112, 112)).astype(np.float32)
    np.testing.assert_array_equal(forward(deploy, x), forward(loaded, x))


def test_partially_fused_round_trip(tmp_path, tiny_config):
    model = build_model(tiny_config, seed=5)
    deploy, _ = reparameterize_model(model, options=FusionOptions(fuse_bn=False), probes=0)
    path = tmp_path / "p.flvt"
    save_model(path, deploy)
    loaded = load_model(path)
    mixer = loaded.stages[0][0].mixer
    assert mixer.bn is not None and not mixer.residual_folded
    assert loaded.stages[0][0].channel_mixer.bn_inner is not None
    x = rng(5).uniform(-1, 1, (1, 3, 112, 112)).astype(np.float32)
    np.testing.assert_array_equal(forward(deploy, x), forward(loaded, x))


def test_missing_entry_rejected(tmp_path, tiny_config):
    model = build_model(tiny_config, seed=6)
    entries = [e for e in model_to_entries(model) if e[0] != "head.bias"]
    path = tmp_path / "broken.flvt"
    write_archive(path, entries)
    with pytest.raises(ArchiveFormatError, match="head.bias"):
        load_model(path)


def test_heads_override_round_trips(tmp_path):
    config = variant_config("s-li").with_heads(8)
    model = build_model(config, seed=7)
    path = tmp_path / "he8.flvt"
    save_model(path, model)
    assert load_model(path).config.heads == 8
