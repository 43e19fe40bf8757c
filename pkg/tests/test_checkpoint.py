import struct

import numpy as np
import pytest

from core.checkpoint import (
    Checkpoint, decode_checkpoint, encode_checkpoint, load_bundle, load_checkpoint, restore_training,
    save_checkpoint, snapshot_training
)
from core.crdpg import CRDPGTrainer
from core.exceptions import DataError, TruncationError, VersionError
from core.networks import actor_step
from main import load_split


@pytest.fixture
def run(tiny_run):
    config = tiny_run.model_copy(deep=True)
    config.train.iterations = 8
    config.train.checkpoint_every = 4
    return config


@pytest.fixture
def split(run):
    return load_split(run)


def small_checkpoint():
    return Checkpoint(
        tensors={"actor/w": np.arange(6, dtype=np.float32).reshape(2, 3), "scalar": np.array(2.5, np.float32)},
        rng_state='{"bit_generator": "PCG64"}',
        iteration=42,
    )


class TestAsc1:

    def test_reencode_is_identical(self, tmp_path):
        save_checkpoint(small_checkpoint(), tmp_path / "a.asc1")
        first = (tmp_path / "a.asc1").read_bytes()
        save_checkpoint(load_checkpoint(tmp_path / "a.asc1"), tmp_path / "b.asc1")
        assert (tmp_path / "b.asc1").read_bytes() == first

    def test_contents(self):
        restored = decode_checkpoint(encode_checkpoint(small_checkpoint()))
        assert restored.iteration == 42
        assert restored.tensors["scalar"].shape == ()
        np.testing.assert_array_equal(restored.tensors["actor/w"], np.arange(6).reshape(2, 3))

    def test_header(self):
        payload = encode_checkpoint(small_checkpoint())
        assert struct.unpack("<4sII", payload[:12]) == (b"ASC1", 1, 2)

    @pytest.mark.parametrize("cut", [3, 11, 20, 40])
    def test_truncated(self, cut):
        payload = encode_checkpoint(small_checkpoint())
        with pytest.raises(TruncationError) as excinfo:
            decode_checkpoint(payload[:cut])
        assert 0 <= excinfo.value.offset <= cut

    def test_trailing_counter_cut(self):
        payload = encode_checkpoint(small_checkpoint())
        with pytest.raises(TruncationError):
            decode_checkpoint(payload[:-1])

    def test_bad_magic(self):
        payload = encode_checkpoint(small_checkpoint())
        with pytest.raises(VersionError) as excinfo:
            decode_checkpoint(b"ASC2" + payload[4:])
        assert excinfo.value.offset == 0

    def test_unknown_version(self):
        payload = encode_checkpoint(small_checkpoint())
        with pytest.raises(VersionError) as excinfo:
            decode_checkpoint(payload[:4] + struct.pack("<I", 9) + payload[8:])
        assert excinfo.value.offset == 4

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "nope.asc1")


class TestTrainingState:

    def test_loaded_networks_act_identically(self, run, tmp_path, rng):
        state = CRDPGTrainer.initial_state(run)
        save_checkpoint(snapshot_training(state), tmp_path / "init.asc1")
        bundle = load_bundle(tmp_path / "init.asc1", run)
        prev, obs = rng.normal(size=2), rng.normal(size=run.env.samples_per_segment)
        ours, _ = actor_step(bundle.actor, bundle.actor.initial_state(1), prev, obs)
        theirs, _ = actor_step(state.bundle.actor, state.bundle.actor.initial_state(1), prev, obs)
        np.testing.assert_array_equal(ours.data, theirs.data)
        for name, stats in state.bundle.generator.bn_stats.items():
            np.testing.assert_array_equal(bundle.generator.bn_stats[name].var, stats.var)

    def test_restore_counters(self, run, split):
        snapshots = {}
        trainer = CRDPGTrainer(run, split, checkpoint_hook=lambda s, r: snapshots.update({s.iteration: snapshot_training(s)}))
        trainer.run()
        assert sorted(snapshots) == [4, 8]
        restored = restore_training(snapshots[4], run)
        assert restored.iteration == 4
        assert len(restored.replay) == 4
        assert restored.stats.initialized

    def test_resume_matches_unbroken_run(self, run, split):
        snapshots = {}

        def capture(state, records):
            snapshots[state.iteration] = encode_checkpoint(snapshot_training(state))

        unbroken = CRDPGTrainer(run, split, checkpoint_hook=capture).run()
        state = restore_training(decode_checkpoint(snapshots[4]), run)
        resumed = CRDPGTrainer(run, split, state=state).run()

        assert [r.iteration for r in resumed] == [5, 6, 7, 8]
        assert [r.to_row() for r in resumed] == [r.to_row() for r in unbroken[4:]]

    def test_other_architecture_is_rejected(self, run, split):
        snapshot = snapshot_training(CRDPGTrainer.initial_state(run))
        wider = run.model_copy(deep=True)
        wider.train.hidden_size = 8
        with pytest.raises(VersionError):
            restore_training(snapshot, wider)
