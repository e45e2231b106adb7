import numpy as np
import pytest

from src import numerics as nx
from src.checkpoint import load_checkpoint, restore_rng, save_checkpoint
from src.errors import CorruptRecord, VersionMismatch
from src.optim import OptimizerState, adamw_step
from src.records import pack_record, unpack_record

MAGIC = b'TESTREC\x00'


def test_record_roundtrip_and_validation():
    raw = pack_record(MAGIC, 3, b'payload')
    assert unpack_record(raw, MAGIC, 3) == b'payload'
    with pytest.raises(CorruptRecord):
        unpack_record(raw, b'OTHERREC', 3)
    with pytest.raises(VersionMismatch):
        unpack_record(raw, MAGIC, 4)
    with pytest.raises(CorruptRecord):
        unpack_record(raw[:-5], MAGIC, 3)
    tampered = bytearray(raw)
    tampered[22] ^= 0xFF
    with pytest.raises(CorruptRecord):
        unpack_record(bytes(tampered), MAGIC, 3)
    with pytest.raises(ValueError):
        pack_record(b'short', 1, b'')


def test_checkpoint_roundtrip_with_optimizer_and_rng(tmp_path):
    rng = np.random.default_rng(7)
    params = {'b.weight': nx.parameter(rng.normal(size=(3, 2))), 'a.bias': nx.parameter(np.zeros(2))}
    state = OptimizerState(lr=0.01, weight_decay=0.1)
    adamw_step(state, params, {k: np.ones_like(p.data) for k, p in params.items()})
    path = save_checkpoint(str(tmp_path / 'm.ckpt'), params, {'stage': 'test', 'K': 2}, state, rng)

    loaded = load_checkpoint(path)
    assert loaded['manifest'] == {'stage': 'test', 'K': 2}
    for name, p in params.items():
        np.testing.assert_array_equal(loaded['params'][name], p.data)
    opt = loaded['optimizer']
    assert opt.step == 1 and opt.lr == 0.01 and opt.weight_decay == 0.1
    np.testing.assert_array_equal(opt.m['a.bias'], state.m['a.bias'])

    restored = restore_rng(loaded['rng_state'])
    assert restored.random() == rng.random()


def test_checkpoint_bytes_are_deterministic(tmp_path):
    params = {'x': nx.parameter(np.arange(4.0)), 'y': nx.parameter([[1.0]])}
    a = save_checkpoint(str(tmp_path / 'a.ckpt'), params, {'k': 1})
    b = save_checkpoint(str(tmp_path / 'b.ckpt'), dict(reversed(list(params.items()))), {'k': 1})
    assert open(a, 'rb').read() == open(b, 'rb').read()


def test_truncated_checkpoint_is_corrupt(tmp_path):
    path = save_checkpoint(str(tmp_path / 'c.ckpt'), {'x': nx.parameter(np.ones(8))})
    data = open(path, 'rb').read()
    (tmp_path / 'c.ckpt').write_bytes(data[:len(data) // 2])
    with pytest.raises(CorruptRecord):
        load_checkpoint(path)


def test_restore_rng_without_state_uses_seed():
    assert restore_rng(None, 5).random() == np.random.default_rng(5).random()
