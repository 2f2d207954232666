import numpy as np
import pytest

from lithium_ssm.errors import (
    CheckpointError,
    CheckpointShapeError,
    ConfigError,
    DataError,
    DomainError,
    SchemaError,
)
from lithium_ssm.features import DischargeRecord
from lithium_ssm.dataset import (
    CYCLE_COLUMNS,
    DatasetManifest,
    ManifestFile,
    load_checkpoint,
    load_cycles,
    load_discharge,
    make_cycle_splits,
    make_soc_splits,
    read_checkpoint,
    save_checkpoint,
    save_discharge,
    soc_sequences,
    window_bounds,
    write_csv,
)
from lithium_ssm.model import ModelConfig, init_parameters


# ---------------------------------------------------------------------------
# loaders

def test_two_cycle_fixture(fixtures_dir):
    recs = load_cycles(fixtures_dir / "two_cycles.csv")
    assert [r.cycle_index for r in recs] == [1, 2]
    assert [len(r.time_h) for r in recs] == [5, 4]
    assert recs[0].avg_temp_c == 25.1


def test_header_only(tmp_path):
    path = tmp_path / "empty.csv"
    write_csv(path, CYCLE_COLUMNS, [])
    assert load_cycles(path) == []


def test_missing_column(fixtures_dir):
    with pytest.raises(SchemaError, match="voltage_v") as info:
        load_cycles(fixtures_dir / "missing_voltage.csv")
    assert info.value.column == "voltage_v"


def test_unsorted_time(fixtures_dir):
    with pytest.raises(DataError) as info:
        load_cycles(fixtures_dir / "unsorted_time.csv")
    assert info.value.locus == "cycle 2"
    assert "row 7" in str(info.value)


def test_discharge_fixture(fixtures_dir):
    rec = load_discharge(fixtures_dir / "discharge_10.csv")
    assert len(rec) == 10
    assert rec.nominal_capacity_ah == 1.1 and rec.soc_initial == 1.0


def test_discharge_duplicate_time(fixtures_dir):
    with pytest.raises(DataError, match="timestamp") as info:
        load_discharge(fixtures_dir / "discharge_duplicate_time.csv")
    assert info.value.locus == "row 10"


def test_discharge_bad_capacity(fixtures_dir):
    with pytest.raises(DomainError):
        load_discharge(fixtures_dir / "discharge_bad_qn.csv")


def test_non_numeric_cell(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("# q_n_ah=1.0\n# soc_0=1.0\ntime_h,current_a,voltage_v,temp_c\n0,1,x,25\n")
    with pytest.raises(DataError) as info:
        load_discharge(path)
    assert info.value.locus == "row 4"


def test_discharge_roundtrip_exact(tmp_path, rng):
    t = np.cumsum(rng.uniform(0.001, 0.01, 30))
    rec = DischargeRecord(t, rng.normal(size=30), rng.normal(size=30), rng.normal(size=30), 1.1, 0.93)
    save_discharge(tmp_path / "d.csv", rec)
    back = load_discharge(tmp_path / "d.csv")
    for name in ("time_h", "current_a", "voltage_v", "temp_c"):
        assert np.array_equal(getattr(back, name), getattr(rec, name))
    assert back.soc_initial == 0.93


# ---------------------------------------------------------------------------
# manifests and splits

def test_window_counts():
    assert window_bounds(250, 100) == [(0, 100), (100, 200), (200, 250)]
    assert window_bounds(250, 250) == [(0, 250)]
    assert window_bounds(250, None) == [(0, 250)]
    assert window_bounds(10, 4, stride=2) == [(0, 4), (2, 6), (4, 8), (6, 10)]


def test_soc_windows_lengths():
    n = 250
    rec = DischargeRecord(np.arange(n) / 3600, np.ones(n), np.full(n, 3.7), np.full(n, 25.0), 1.0)
    seqs = soc_sequences(rec, "X", "X", window_len=100)
    assert [len(s) for s in seqs] == [100, 100, 50]
    # windows of the label series concatenate back to the full series
    full = soc_sequences(rec, "X", "X")[0].targets
    assert np.array_equal(np.concatenate([s.targets for s in seqs]), full)


def test_soc_leave_one_out(synth_seed0):
    out, written = synth_seed0
    m = DatasetManifest.from_json(written["manifest:soc:25C"])
    assert {f.group for f in m.files} == {"DST", "FUDS", "US06"}
    train, test = make_soc_splits(m)
    assert {s.group for s in train} == {"DST", "US06"}
    assert {s.group for s in test} == {"FUDS"}
    assert not {s.name for s in train} & {s.name for s in test}
    assert all(len(s) <= 100 for s in train + test)

    rotated = m.with_test_group("DST")
    train2, test2 = make_soc_splits(rotated)
    assert {s.group for s in test2} == {"DST"}
    assert {s.group for s in train2} == {"FUDS", "US06"}


def test_test_group_also_train(tmp_path):
    m = DatasetManifest("soc", [ManifestFile("a.csv", "train", "A"), ManifestFile("b.csv", "test", "A")],
                        base_dir=tmp_path)
    with pytest.raises(ConfigError):
        make_soc_splits(m)


def test_manifest_validation(tmp_path):
    with pytest.raises(ConfigError):
        DatasetManifest("soc", [ManifestFile("a.csv", "train")])
    with pytest.raises(ConfigError):
        DatasetManifest("cap", [ManifestFile("a", "train"), ManifestFile("b", "test")])
    with pytest.raises(ConfigError):
        DatasetManifest("soc", [ManifestFile("a", "train"), ManifestFile("b", "test")], window_len=1)
    bad = tmp_path / "m.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        DatasetManifest.from_json(bad)


def test_cycle_splits(synth_seed0):
    _, written = synth_seed0
    m = DatasetManifest.from_json(written["manifest:soh"])
    train, test = make_cycle_splits(m, nominal_capacity_ah=1.1)
    assert [s.group for s in train] == ["cell_a", "cell_b"]
    assert [s.group for s in test] == ["cell_c"]
    assert train[0].features.shape == (150, 8)
    assert train[0].unit == "fraction"


# ---------------------------------------------------------------------------
# checkpoints

CFG = ModelConfig(feature_dim=3, d_model=4, d_state=5, n_layers=2)


def test_checkpoint_roundtrip(tmp_path):
    p = init_parameters(CFG, seed=3)
    extras = {"scaler.feature_mean": np.array([0.1, -2.5, 1e-300])}
    save_checkpoint(p, tmp_path / "m.ckpt", CFG, extras)
    ck = read_checkpoint(tmp_path / "m.ckpt")
    assert ck.config == CFG
    for (k, a), b in zip(p.named().items(), ck.params.named().values()):
        assert a.shape == b.shape and np.array_equal(a, b), k
    assert np.array_equal(ck.extras["scaler.feature_mean"], extras["scaler.feature_mean"])
    assert not (tmp_path / "m.ckpt.tmp").exists()


def test_checkpoint_bytes_deterministic(tmp_path):
    p = init_parameters(CFG, seed=3)
    save_checkpoint(p, tmp_path / "a.ckpt", CFG)
    save_checkpoint(p, tmp_path / "b.ckpt", CFG)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


@pytest.mark.parametrize("keep", [1, 2, 5, -1])
def test_truncated_checkpoint(tmp_path, keep):
    save_checkpoint(init_parameters(CFG), tmp_path / "m.ckpt", CFG)
    lines = (tmp_path / "m.ckpt").read_text().splitlines()
    (tmp_path / "t.ckpt").write_text("\n".join(lines[:keep]) + "\n")
    with pytest.raises(CheckpointError) as info:
        read_checkpoint(tmp_path / "t.ckpt")
    assert info.value.locus is None or info.value.locus.startswith("line")


def test_truncated_mid_values(tmp_path):
    save_checkpoint(init_parameters(CFG), tmp_path / "m.ckpt", CFG)
    text = (tmp_path / "m.ckpt").read_text()
    (tmp_path / "t.ckpt").write_text(text[: len(text) // 2])
    with pytest.raises(CheckpointError, match="line"):
        read_checkpoint(tmp_path / "t.ckpt")


def test_not_a_checkpoint(tmp_path):
    (tmp_path / "x.ckpt").write_text("hello\n")
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "x.ckpt")


def test_mismatched_config(tmp_path):
    save_checkpoint(init_parameters(CFG), tmp_path / "m.ckpt", CFG)
    other = ModelConfig(feature_dim=3, d_model=4, d_state=6, n_layers=2)
    with pytest.raises(CheckpointShapeError, match="ssm0.a_log") as info:
        load_checkpoint(tmp_path / "m.ckpt", other)
    assert info.value.expected == (4, 6) and info.value.found == (4, 5)
    fewer = ModelConfig(feature_dim=3, d_model=4, d_state=5, n_layers=1)
    with pytest.raises(CheckpointShapeError, match="ssm1"):
        load_checkpoint(tmp_path / "m.ckpt", fewer)
