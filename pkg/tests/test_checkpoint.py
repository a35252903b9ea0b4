"""On-disk checkpoint format: bit-exact round trips and named failure modes."""

from types import SimpleNamespace

import numpy as np
import pytest

from uggfuse.checkpoint import (
    CHECKPOINT_MAGIC,
    load_checkpoint,
    save_checkpoint,
    write_history_csv,
)
from uggfuse.errors import (
    BadMagicError,
    ContractViolationError,
    MissingCheckpointError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from uggfuse.numerics import RngStream
from uggfuse.objective import HISTORY_COLUMNS, TrainConfig, fit


def tiny_checkpoint(seed=1, epochs=1):
    rng = RngStream.named(7, "ckpt-data")
    tokens = rng.standard_normal((16, 3, 4, 6))
    labels = np.repeat(np.arange(4), 4)
    cfg = TrainConfig(seed=seed, variant="e", dim=6, n_local=3, c=3, k=1,
                      epochs=epochs, p_ids=4, k_inst=2)
    return cfg, fit(cfg, SimpleNamespace(tokens=tokens, labels=labels))


def test_round_trip_is_bit_exact(tmp_path):
    _, ck = tiny_checkpoint()
    path = tmp_path / "model.uggc"
    save_checkpoint(ck, path)
    back = load_checkpoint(path)
    assert back.config == ck.config
    assert back.epoch == ck.epoch and back.adam_t == ck.adam_t
    assert back.rng == ck.rng
    assert np.array_equal(back.history, ck.history)
    for group in ("params", "adam_m", "adam_v"):
        a, b = getattr(ck, group), getattr(back, group)
        assert set(a) == set(b)
        for name in a:
            assert np.array_equal(a[name], b[name]), name


def test_serialization_is_deterministic(tmp_path):
    _, ck = tiny_checkpoint()
    p1, p2 = tmp_path / "a.uggc", tmp_path / "b.uggc"
    save_checkpoint(ck, p1)
    save_checkpoint(ck, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_identical_training_runs_serialize_identically(tmp_path):
    _, ck1 = tiny_checkpoint()
    _, ck2 = tiny_checkpoint()
    p1, p2 = tmp_path / "a.uggc", tmp_path / "b.uggc"
    save_checkpoint(ck1, p1)
    save_checkpoint(ck2, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_loaded_checkpoint_resumes_training(tmp_path):
    cfg_half, half = tiny_checkpoint(epochs=1)
    rng = RngStream.named(7, "ckpt-data")
    tokens = rng.standard_normal((16, 3, 4, 6))
    labels = np.repeat(np.arange(4), 4)
    ds = SimpleNamespace(tokens=tokens, labels=labels)
    path = tmp_path / "half.uggc"
    save_checkpoint(half, path)
    resumed = fit(TrainConfig(**{**cfg_half.__dict__, "epochs": 2}), ds,
                  resume=load_checkpoint(path))
    full = fit(TrainConfig(**{**cfg_half.__dict__, "epochs": 2}), ds)
    assert np.array_equal(full.history, resumed.history)
    for name in full.params:
        assert np.array_equal(full.params[name], resumed.params[name])


def test_missing_file_has_dedicated_error(tmp_path):
    with pytest.raises(MissingCheckpointError):
        load_checkpoint(tmp_path / "absent.uggc")


def test_bad_magic_rejected(tmp_path):
    _, ck = tiny_checkpoint()
    path = tmp_path / "model.uggc"
    save_checkpoint(ck, path)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"NOPE"
    path.write_bytes(bytes(blob))
    with pytest.raises(BadMagicError):
        load_checkpoint(path)


def test_version_mismatch_rejected(tmp_path):
    _, ck = tiny_checkpoint()
    path = tmp_path / "model.uggc"
    save_checkpoint(ck, path)
    blob = bytearray(path.read_bytes())
    blob[4] += 1  # little-endian version word sits right after the magic
    path.write_bytes(bytes(blob))
    with pytest.raises(VersionMismatchError):
        load_checkpoint(path)


def test_truncated_payload_rejected(tmp_path):
    _, ck = tiny_checkpoint()
    path = tmp_path / "model.uggc"
    save_checkpoint(ck, path)
    blob = path.read_bytes()
    for cut in (len(blob) // 3, len(blob) - 5):
        path.write_bytes(blob[:cut])
        with pytest.raises(TruncatedPayloadError):
            load_checkpoint(path)


def test_trailing_garbage_rejected(tmp_path):
    _, ck = tiny_checkpoint()
    path = tmp_path / "model.uggc"
    save_checkpoint(ck, path)
    path.write_bytes(path.read_bytes() + b"\x00\x01")
    with pytest.raises(ContractViolationError):
        load_checkpoint(path)


def test_magic_is_first_bytes(tmp_path):
    _, ck = tiny_checkpoint()
    path = tmp_path / "model.uggc"
    save_checkpoint(ck, path)
    assert path.read_bytes()[:4] == CHECKPOINT_MAGIC == b"UGGC"


def test_history_csv_layout(tmp_path):
    _, ck = tiny_checkpoint()
    path = tmp_path / "loss.csv"
    write_history_csv(ck.history, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == ",".join(HISTORY_COLUMNS)
    assert len(lines) == 1 + ck.history.shape[0]
    first = lines[1].split(",")
    assert first[0] == "0"
    assert float(first[-1]) == ck.history[0, -1]


def test_history_csv_rejects_wrong_width(tmp_path):
    with pytest.raises(ContractViolationError):
        write_history_csv(np.zeros((3, 4)), tmp_path / "x.csv")
