import numpy as np
import pytest

from dexloop.policy import EmptyDataset
from dexloop.store import (
    DatasetManifest,
    EpisodeRecord,
    EpisodeStore,
    InvariantViolation,
    ManifestEntry,
    MissingEpisode,
    export_bundle,
    load_dataset,
    windows_from_record,
)


def random_record(rng, steps=None, mode="demo", **header_extra):
    steps = steps or int(rng.integers(3, 40))
    header = {
        "task": "pan", "difficulty": "default", "seed": int(rng.integers(0, 1000)),
        "mode": mode, "round": 0, "created_us": int(rng.integers(0, 2**40)),
        **header_extra,
    }
    return EpisodeRecord(
        header=header,
        observations=rng.normal(size=(steps, 10)),
        actions=rng.uniform(-1, 1, size=(steps, 4)),
        chunk_ids=np.arange(steps) // 8,
        mode_flags=np.zeros(steps),
        gate_states=np.zeros(steps),
        label_states=np.zeros(steps),
        states=rng.normal(size=(steps, 11)),
        trace=rng.uniform(0, 1, size=steps) if rng.random() < 0.5 else None,
    )


def records_equal(a, b):
    arrays = ("observations", "actions", "chunk_ids", "mode_flags",
              "gate_states", "label_states", "states")
    if a.header != b.header:
        return False
    for name in arrays:
        if not np.array_equal(getattr(a, name), getattr(b, name)):
            return False
    if (a.trace is None) != (b.trace is None):
        return False
    return a.trace is None or np.array_equal(a.trace, b.trace)


# ---------------------------------------------------------------------------
# round trip and content addressing
# ---------------------------------------------------------------------------

def test_roundtrip_bit_exact_random_records(tmp_path):
    rng = np.random.default_rng(0)
    store = EpisodeStore(tmp_path)
    for _ in range(100):
        rec = random_record(rng)
        eid = store.append(rec)
        assert records_equal(store.load(eid), rec)


def test_duplicate_write_is_idempotent(tmp_path):
    rng = np.random.default_rng(1)
    store = EpisodeStore(tmp_path)
    rec = random_record(rng)
    a = store.append(rec)
    b = store.append(rec)
    assert a == b
    assert len(store.ids()) == 1


def test_distinct_records_get_distinct_ids():
    rng = np.random.default_rng(2)
    ids = {random_record(rng).episode_id() for _ in range(200)}
    assert len(ids) == 200


def test_row_count_mismatch_rejected():
    rng = np.random.default_rng(3)
    with pytest.raises(InvariantViolation):
        EpisodeRecord(
            header={"mode": "demo", "steps": 7},
            observations=rng.normal(size=(5, 10)),
            actions=rng.uniform(-1, 1, size=(5, 4)),
            chunk_ids=np.zeros(5), mode_flags=np.zeros(5),
            gate_states=np.zeros(5), label_states=np.zeros(5),
            states=rng.normal(size=(5, 11)),
        )
    with pytest.raises(InvariantViolation):
        EpisodeRecord(
            header={"mode": "demo"},
            observations=rng.normal(size=(5, 10)),
            actions=rng.uniform(-1, 1, size=(4, 4)),
            chunk_ids=np.zeros(5), mode_flags=np.zeros(5),
            gate_states=np.zeros(5), label_states=np.zeros(5),
            states=rng.normal(size=(5, 11)),
        )


def test_corrective_provenance_required():
    rng = np.random.default_rng(4)
    with pytest.raises(InvariantViolation):
        random_record(rng, mode="corrective")
    rec = random_record(rng, mode="corrective", parent_episode="abc123", peak_t=12)
    assert rec.header["parent_episode"] == "abc123"


def test_manifest_counts_match_store(tmp_path):
    rng = np.random.default_rng(5)
    store = EpisodeStore(tmp_path)
    manifest = DatasetManifest()
    total = 0
    for _ in range(50):
        rec = random_record(rng)
        eid = store.append(rec)
        manifest.add(eid, rec.steps, rec.header["mode"], 0)
        total += rec.steps
    store.save_manifest(manifest)
    reloaded = store.load_manifest()
    assert reloaded.total_samples == total
    assert sum(store.load(e.episode_id).steps for e in reloaded.entries) == total


# ---------------------------------------------------------------------------
# windowing
# ---------------------------------------------------------------------------

def test_full_episode_yields_one_sample_per_step():
    rng = np.random.default_rng(6)
    rec = random_record(rng, steps=160)
    windows, chunks, masks = windows_from_record(rec)
    assert len(windows) == 160
    # tail chunk is padded: last sample has exactly one real step
    assert masks[-1].sum() == 1.0
    assert masks[0].sum() == 16.0


def test_windowing_arithmetic_hand_computed():
    rng = np.random.default_rng(7)
    rec = random_record(rng, steps=20)
    windows, chunks, masks = windows_from_record(rec, horizon=16, n_obs_steps=2)
    assert len(windows) == 20
    for t in range(20):
        expected_real = min(16, 20 - t)
        assert masks[t].sum() == expected_real
        assert np.array_equal(chunks[t][:expected_real],
                              rec.actions[t:t + expected_real].astype(float))
        assert np.all(chunks[t][expected_real:] == 0.0)
        # obs window: previous step repeated at episode head
        prev = max(0, t - 1)
        assert np.array_equal(windows[t][0], rec.observations[prev].astype(float))
        assert np.array_equal(windows[t][1], rec.observations[t].astype(float))


def test_load_dataset_deterministic_after_reload(tmp_path):
    rng = np.random.default_rng(8)
    store = EpisodeStore(tmp_path)
    manifest = DatasetManifest()
    for _ in range(5):
        rec = random_record(rng)
        eid = store.append(rec)
        manifest.add(eid, rec.steps, "demo", 0)
    store.save_manifest(manifest)

    first = load_dataset(store, store.load_manifest())
    second = load_dataset(EpisodeStore(tmp_path), EpisodeStore(tmp_path).load_manifest())
    assert np.array_equal(first.windows, second.windows)
    assert np.array_equal(first.chunks, second.chunks)
    assert np.array_equal(first.masks, second.masks)


def test_empty_manifest_surfaces_empty_dataset(tmp_path):
    store = EpisodeStore(tmp_path)
    with pytest.raises(EmptyDataset):
        load_dataset(store, DatasetManifest())


def test_missing_episode_raises(tmp_path):
    store = EpisodeStore(tmp_path)
    manifest = DatasetManifest()
    manifest.entries.append(ManifestEntry("deadbeef", 0, 10, "demo", 0))
    with pytest.raises(MissingEpisode):
        load_dataset(store, manifest)


def test_export_bundle_roundtrip(tmp_path):
    import tarfile
    rng = np.random.default_rng(9)
    run = tmp_path / "run"
    store = EpisodeStore(run / "episodes")
    store.append(random_record(rng))
    out = export_bundle(run, tmp_path / "run.tar")
    with tarfile.open(out) as tar:
        names = tar.getnames()
    assert any(name.endswith(".vdge") for name in names)
