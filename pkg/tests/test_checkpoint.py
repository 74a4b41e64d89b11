import numpy as np
import pytest

from acanet.checkpoint import load_checkpoint, save_checkpoint
from acanet.container import MAGIC, ContainerError, read_container, write_container
from acanet.model import AcaNet, ModelConfig
from acanet.training import calibrate_batchnorm

CFG = ModelConfig(channels=16, embedding_size=8, ffn_size=16, n_latent_blocks=2, num_heads=2, n_filters=10)


def test_container_round_trip(tmp_path):
    arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([], dtype=np.float32), "c": np.float32(2.5)}
    write_container(tmp_path / "x", "things", arrays, {"k": [1, 2]})
    back, meta = read_container(tmp_path / "x", kind="things")
    assert meta == {"k": [1, 2]}
    for k, v in arrays.items():
        assert back[k].shape == np.shape(v) and np.array_equal(back[k], v)


def test_container_rejects_bad_files(tmp_path):
    p = tmp_path / "x"
    write_container(p, "things", {"a": np.ones(4)})
    raw = p.read_bytes()
    with pytest.raises(ContainerError, match="expected a 'other'"):
        read_container(p, kind="other")
    p.write_bytes(b"NOTMAGIC" + raw[8:])
    with pytest.raises(ContainerError, match="magic"):
        read_container(p)
    p.write_bytes(raw[:-4])
    with pytest.raises(ContainerError, match="truncated"):
        read_container(p)
    p.write_bytes(MAGIC + raw[8:16])
    with pytest.raises(ContainerError, match="truncated header"):
        read_container(p)
    with pytest.raises(FileNotFoundError):
        read_container(tmp_path / "missing")


def test_container_leaves_no_temp_files(tmp_path):
    write_container(tmp_path / "x", "k", {"a": np.ones(2)})
    assert [p.name for p in tmp_path.iterdir()] == ["x"]


def _net(weight_sharing=False):
    net = AcaNet(CFG.replace(weight_sharing=weight_sharing), seed=2)
    rng = np.random.default_rng(0)
    calibrate_batchnorm(net, [rng.normal(size=(10, 30)).astype(np.float32) for _ in range(3)])
    return net


@pytest.mark.parametrize("sharing", [False, True])
def test_save_load_save_is_bit_identical(tmp_path, sharing):
    net = _net(sharing)
    save_checkpoint(net, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(back, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    x = np.random.default_rng(5).normal(size=(10, 44)).astype(np.float32)
    assert np.array_equal(net.embed(x), back.embed(x))
    assert back.cfg == net.cfg and back.aliases == net.aliases


def test_checkpoint_missing_parameter(tmp_path):
    net = _net()
    save_checkpoint(net, tmp_path / "a.ckpt")
    arrays, meta = read_container(tmp_path / "a.ckpt")
    name = next(iter(net.unique_params()))
    del arrays[name]
    write_container(tmp_path / "b.ckpt", "checkpoint", arrays, meta)
    with pytest.raises(ContainerError, match=name):
        load_checkpoint(tmp_path / "b.ckpt")
    write_container(tmp_path / "c.ckpt", "embeddings", {})
    with pytest.raises(ContainerError, match="checkpoint"):
        load_checkpoint(tmp_path / "c.ckpt")
