import numpy as np
import pytest

from pointedge.checkpoint import CheckpointError, check_compatible, load_checkpoint, save_checkpoint
from pointedge.config import load_config
from pointedge.geom import sample_block
from pointedge.pipeline import load_split
from pointedge.point_branch import forward, init_params


@pytest.fixture
def cfg():
    return load_config("gradcheck")


def test_roundtrip_gives_identical_forward(cfg, tmp_path):
    params = init_params(cfg.network, 3)
    path = tmp_path / "m.ckpt"
    save_checkpoint(params, path)
    loaded = load_checkpoint(path)
    assert list(loaded) == list(params)
    for k in params:
        assert loaded[k].data.tobytes() == params[k].data.tobytes()
    block = sample_block(load_split(cfg, "train")[0], 2.0, 0.1, cfg.n_points, 0)
    a = forward(cfg.network, block, params).refined.data
    b = forward(cfg.network, block, loaded).refined.data
    assert a.tobytes() == b.tobytes()


def test_save_is_byte_stable(cfg, tmp_path):
    save_checkpoint(init_params(cfg.network, 0), tmp_path / "a")
    save_checkpoint(init_params(cfg.network, 0), tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_bad_magic(tmp_path):
    f = tmp_path / "x.ckpt"
    f.write_bytes(b"NOTACKPT" + bytes(16))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(f)


@pytest.mark.parametrize("cut", [12, 40, -8, -1])
def test_truncated(cfg, tmp_path, cut):
    f = tmp_path / "m.ckpt"
    save_checkpoint(init_params(cfg.network, 0), f)
    blob = f.read_bytes()
    f.write_bytes(blob[:cut])
    with pytest.raises(CheckpointError):
        load_checkpoint(f)


def test_trailing_bytes(cfg, tmp_path):
    f = tmp_path / "m.ckpt"
    save_checkpoint(init_params(cfg.network, 0), f)
    f.write_bytes(f.read_bytes() + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(f)


def test_incompatible_lists_every_problem(cfg):
    small = init_params(cfg.network, 0)
    wider = init_params(cfg.network.__class__(**{**cfg.network.__dict__, "point_widths": (8, 6, 6)}), 0)
    with pytest.raises(CheckpointError) as err:
        check_compatible(small, wider)
    msg = str(err.value)
    changed = [k for k in wider if wider[k].shape != small[k].shape]
    assert changed and all(k in msg for k in changed)


def test_missing_and_unexpected(cfg):
    params = init_params(cfg.network, 0)
    loaded = dict(params)
    name = next(iter(loaded))
    loaded["extra.weight"] = loaded.pop(name)
    with pytest.raises(CheckpointError) as err:
        check_compatible(loaded, params)
    assert f"missing {name}" in str(err.value) and "unexpected extra.weight" in str(err.value)
    check_compatible(params, init_params(cfg.network, 1))
