"""Checkpoint container format, run configuration, and artifact writers."""

import os

import numpy as np
import pytest

from vfpt import io as vio
from vfpt.errors import ConfigError, FormatError
from vfpt.tensor import Tensor


@pytest.fixture
def named_tensors():
    rng = np.random.default_rng(0)
    return {
        "prompt.layer1": rng.standard_normal((4, 8)),
        "head.weight": rng.standard_normal((8, 3)),
        "head.bias": np.zeros(3),
        "meta.scalar": np.array(7.25),
    }


def test_round_trip_bit_exact(named_tensors, tmp_path):
    path = tmp_path / "model.ckpt"
    vio.save(path, named_tensors)
    back = vio.load(path)
    assert set(back) == set(named_tensors)
    for name, arr in named_tensors.items():
        assert back[name].shape == np.asarray(arr).shape
        assert back[name].tobytes() == np.asarray(arr, dtype=np.float64).tobytes()
    assert vio.checksum_tensors(back) == vio.checksum_tensors(named_tensors)


def test_round_trip_accepts_tensor_values(tmp_path):
    path = tmp_path / "t.ckpt"
    vio.save(path, {"x": Tensor(np.arange(6.0).reshape(2, 3))})
    assert np.array_equal(vio.load(path)["x"], np.arange(6.0).reshape(2, 3))


def test_empty_container_valid(tmp_path):
    path = tmp_path / "empty.ckpt"
    vio.save(path, {})
    assert vio.load(path) == {}


def test_truncation_reports_offset(named_tensors):
    payload = vio.serialize_tensors(named_tensors)
    for cut in (2, 7, 11, 30, len(payload) - 3):
        with pytest.raises(FormatError) as err:
            vio.deserialize_tensors(payload[:cut])
        assert err.value.offset is not None
        assert err.value.offset <= cut


def test_bad_magic_rejected(named_tensors):
    payload = vio.serialize_tensors(named_tensors)
    with pytest.raises(FormatError, match="magic"):
        vio.deserialize_tensors(b"NOPE" + payload[4:])


def test_bad_version_rejected(named_tensors):
    payload = bytearray(vio.serialize_tensors(named_tensors))
    payload[4] = 99
    with pytest.raises(FormatError, match="version"):
        vio.deserialize_tensors(bytes(payload))


def test_duplicate_names_rejected():
    # a container carrying the same name twice is malformed on read
    single = vio.serialize_tensors({"x": np.zeros(2)})
    body = single[12:]  # strip magic + version + count
    doubled = single[:8] + (2).to_bytes(4, "little") + body + body
    with pytest.raises(FormatError, match="duplicate"):
        vio.deserialize_tensors(doubled)


def test_trailing_bytes_rejected(named_tensors):
    payload = vio.serialize_tensors(named_tensors)
    with pytest.raises(FormatError, match="trailing"):
        vio.deserialize_tensors(payload + b"\x00")


def test_atomic_write_leaves_no_temp_files(tmp_path):
    target = tmp_path / "artifact.bin"
    vio.atomic_write_bytes(target, b"payload")
    assert target.read_bytes() == b"payload"
    leftovers = [p for p in os.listdir(tmp_path) if p != "artifact.bin"]
    assert leftovers == []


def test_config_defaults_and_overrides():
    cfg = vio.parse_config_text("[train]\nepochs = 7\n[prompt]\nalpha = 0.3\n")
    assert cfg["train"]["epochs"] == 7
    assert cfg["prompt"]["alpha"] == 0.3
    assert cfg["prompt"]["prompts_per_layer"] == 10  # documented default
    assert cfg["run"]["seed"] == 0


def test_config_unknown_key_is_fatal():
    with pytest.raises(ConfigError, match="epoch_count"):
        vio.parse_config_text("[train]\nepoch_count = 7\n")


def test_config_unknown_section_is_fatal():
    with pytest.raises(ConfigError, match="extras"):
        vio.parse_config_text("[extras]\nx = 1\n")


def test_config_bad_value_is_fatal():
    with pytest.raises(ConfigError, match="epochs"):
        vio.parse_config_text("[train]\nepochs = many\n")


def test_config_round_trips_through_text():
    cfg = vio.default_config()
    cfg["train"]["epochs"] = 3
    text = vio.config_to_text(cfg)
    assert vio.parse_config_text(text) == cfg


def test_number_list_parsing():
    assert vio.parse_number_list("1.0,0.5") == (1.0, 0.5)
    assert vio.parse_number_list("3", int) == (3,)
    assert vio.parse_number_list("") == ()
    with pytest.raises(ConfigError):
        vio.parse_number_list("1.0,x")


def test_write_csv_deterministic_bytes(tmp_path):
    rows = [(1, 0.1, 0.25), (2, 0.2, 1.0 / 3.0)]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    vio.write_csv(a, ["epoch", "loss", "acc"], rows)
    vio.write_csv(b, ["epoch", "loss", "acc"], rows)
    assert a.read_bytes() == b.read_bytes()
    text = a.read_text()
    assert text.startswith("epoch,loss,acc\n")
    assert repr(1.0 / 3.0) in text  # full precision floats


def test_pgm_writer(tmp_path):
    matrix = np.linspace(0, 1, 12).reshape(3, 4)
    path = tmp_path / "img.pgm"
    vio.write_pgm(path, matrix)
    payload = path.read_bytes()
    assert payload.startswith(b"P5\n4 3\n255\n")
    pixels = np.frombuffer(payload.split(b"255\n", 1)[1], dtype=np.uint8)
    assert pixels.min() == 0 and pixels.max() == 255
    sidecar = (str(path) + ".txt")
    assert os.path.exists(sidecar)
    assert "min = 0.0" in open(sidecar).read()


def test_manifest_contains_hashes(tmp_path):
    artifact = tmp_path / "data.csv"
    vio.write_csv(artifact, ["x"], [(1,)])
    manifest = tmp_path / "manifest.json"
    vio.write_manifest(manifest, "test", {"run": {"seed": 0}}, 0,
                       {"data.csv": str(artifact)})
    import json
    doc = json.loads(manifest.read_text())
    assert doc["command"] == "test"
    assert doc["artifacts"]["data.csv"] == vio.sha256_file(artifact)
    assert "build_id" in doc
