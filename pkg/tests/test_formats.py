import numpy as np
import pytest

from bye import formats
from bye.mapping import build_instance_map, generate_dataset
from bye.membank import MemoryBank
from bye.simulator import TrajectorySpec, emit_semantic_features, generate_scene, render_trial


@pytest.fixture(scope="module")
def sim():
    scene = generate_scene(4, 2, seed=5)
    trial = render_trial(scene, TrajectorySpec(frames=3, width=64, height=48, fx=52, fy=52), "fmt")
    return scene, trial


def test_trial_round_trip(sim, tmp_path):
    _, trial = sim
    formats.write_trial(trial, tmp_path / "t")
    back = formats.read_trial(tmp_path / "t")
    assert back.trial_id == "fmt" and back.intrinsics == trial.intrinsics
    for a, b in zip(trial.frames, back.frames):
        np.testing.assert_array_equal(a.depth, b.depth)
        np.testing.assert_array_equal(a.mask, b.mask)
        np.testing.assert_array_equal(a.color, b.color)
        np.testing.assert_array_equal(a.pose.matrix(), b.pose.matrix())  # %.17g is exact


def test_trial_errors(sim, tmp_path):
    _, trial = sim
    with pytest.raises(formats.FormatError, match="manifest.json missing"):
        formats.read_trial(tmp_path)
    formats.write_trial(trial, tmp_path / "t")
    (tmp_path / "t" / "frames" / "000001.mask.u16").write_bytes(b"\0\0")
    with pytest.raises(formats.FormatError, match="sizes"):
        formats.read_trial(tmp_path / "t")
    (tmp_path / "t" / "frames" / "000001.mask.u16").unlink()
    with pytest.raises(formats.FormatError, match="missing frame file"):
        formats.read_trial(tmp_path / "t")


def test_dataset_round_trip(sim, tmp_path):
    _, trial = sim
    ds = generate_dataset(trial)
    formats.write_dataset(ds, tmp_path / "d", trial.trial_id)
    back = formats.read_dataset(tmp_path / "d")
    assert [(s.label, s.frame_index) for s in back] == [(s.label, s.frame_index) for s in ds]
    for a, b in zip(ds, back):
        np.testing.assert_array_equal(a.cloud.points, b.cloud.points)
    formats.write_dataset(back, tmp_path / "d2", trial.trial_id)
    assert (tmp_path / "d" / "points.f32").read_bytes() == (tmp_path / "d2" / "points.f32").read_bytes()
    assert (tmp_path / "d" / "index.json").read_text() == (tmp_path / "d2" / "index.json").read_text()


def test_binary_round_trips_are_byte_exact(sim, tmp_path):
    scene, trial = sim
    imap = build_instance_map(trial)
    data = formats.instance_map_bytes(imap)
    formats.write_instance_map(imap, tmp_path / "m")
    assert formats.instance_map_bytes(formats.read_instance_map(tmp_path / "m")) == data

    rng = np.random.default_rng(0)
    bank = MemoryBank(rng.normal(size=(30, 8)), rng.integers(1, 5, 30), [1, 2, 3, 4, 9])
    formats.write_bank(bank, tmp_path / "b")
    back = formats.read_bank(tmp_path / "b")
    assert formats.bank_bytes(back) == formats.bank_bytes(bank)
    assert back.ref_ids == [1, 2, 3, 4, 9]

    feats = emit_semantic_features(scene, trial, dim=8)
    formats.write_features(feats, tmp_path / "f")
    assert formats.features_bytes(formats.read_features(tmp_path / "f")) == (tmp_path / "f").read_bytes()


@pytest.mark.parametrize("writer,reader,magic", [
    ("write_bank", "read_bank", b"BYEB"),
    ("write_instance_map", "read_instance_map", b"BYEM"),
])
def test_binary_errors(sim, tmp_path, writer, reader, magic):
    _, trial = sim
    obj = build_instance_map(trial) if magic == b"BYEM" else MemoryBank(np.eye(3), [1, 2, 3])
    path = tmp_path / "x"
    getattr(formats, writer)(obj, path)
    data = path.read_bytes()
    path.write_bytes(data[:-1])
    with pytest.raises(formats.FormatError, match="truncated"):
        getattr(formats, reader)(path)
    path.write_bytes(data + b"\0")
    with pytest.raises(formats.FormatError, match="trailing"):
        getattr(formats, reader)(path)
    path.write_bytes(b"NOPE" + data[4:])
    with pytest.raises(formats.FormatError, match="bad magic"):
        getattr(formats, reader)(path)
    path.write_bytes(data[:4] + (7).to_bytes(4, "little") + data[8:])
    with pytest.raises(formats.FormatError, match="version"):
        getattr(formats, reader)(path)
