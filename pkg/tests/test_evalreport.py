import csv
import io

import numpy as np
import pytest

from psgmae import evalreport, mae, pipeline
from psgmae.evalreport import (
    LengthMismatch,
    MseCell,
    MseTable,
    aggregate_by_stage,
    baseline_table,
    export_reconstruction,
    mse,
    render_table,
    table_from_csv,
    zero_reconstructions,
)
from psgmae.pipeline import SleepStage

from conftest import philox, synth_records

CANONICAL_LAYOUT = [
    ("EEG (FPz-Cz)", "EOG"),
    ("EEG (FPz-Cz)", "EMG"),
    ("EEG (FPz-Cz)", "EEG (Pz-Oz)"),
    ("EOG", "EEG (FPz-Cz)"),
    ("EOG", "EMG"),
    ("EOG", "EEG (Pz-Oz)"),
]


def make_record(rng, stage, subject="s0", epoch_index=0):
    targets = {
        "EOG horizontal": rng.normal(0, 1, 3000).astype(np.float32),
        "EEG Pz-Oz": rng.normal(0, 1, 3000).astype(np.float32),
    }
    return pipeline.EpochRecord(
        subject_id=subject, epoch_index=epoch_index, stage=stage,
        input_channel="EEG Fpz-Cz",
        input_samples=rng.normal(0, 1, 3000).astype(np.float32),
        targets=targets,
        norm_params={name: (1.5, 2.0) for name in
                     ["EEG Fpz-Cz", *targets.keys()]},
    )


class TestMse:
    def test_identity(self):
        x = np.arange(10.0)
        assert mse(x, x) == 0.0

    def test_constant_offset(self):
        x = np.arange(10.0)
        assert mse(x + 1.0, x) == pytest.approx(1.0)

    def test_hand_computed(self):
        assert mse(np.array([0.0, 0.0]), np.array([3.0, 4.0])) == \
            pytest.approx(12.5)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            mse(np.zeros(3), np.zeros(4))

    def test_nonnegative_and_zero_iff_equal(self):
        rng = philox(0)
        a = rng.normal(0, 1, 50)
        b = rng.normal(0, 1, 50)
        assert mse(a, b) > 0.0
        assert mse(a, a.copy()) == 0.0


class TestAggregate:
    def test_singleton_cell(self):
        rng = philox(1)
        record = make_record(rng, SleepStage.N2)
        recons = {ch: record.targets[ch] + 0.5 for ch in record.targets}
        table = aggregate_by_stage([(record, recons)])
        cell = table.cell("EEG Fpz-Cz", "EOG horizontal", SleepStage.N2)
        assert cell.epoch_count == 1
        assert cell.mean_mse == pytest.approx(0.25, rel=1e-5)
        # other stages have no cells at all
        for stage in SleepStage:
            if stage is not SleepStage.N2:
                assert table.cell("EEG Fpz-Cz", "EOG horizontal", stage) is None

    def test_two_epoch_mean(self):
        rng = philox(2)
        pairs = []
        for offset in (1.0, np.sqrt(3.0)):
            record = make_record(rng, SleepStage.WAKE)
            recons = {ch: record.targets[ch] + offset
                      for ch in record.targets}
            pairs.append((record, recons))
        table = aggregate_by_stage(pairs)
        cell = table.cell("EEG Fpz-Cz", "EOG horizontal", SleepStage.WAKE)
        assert cell.epoch_count == 2
        assert cell.mean_mse == pytest.approx((1.0 + 3.0) / 2, rel=1e-6)

    def test_matches_brute_force_group_by(self):
        rng = philox(3)
        stages = list(SleepStage)
        pairs = []
        for i in range(50):
            record = make_record(rng, stages[int(rng.integers(0, 5))],
                                 epoch_index=i)
            recons = {ch: rng.normal(0, 1, 3000).astype(np.float32)
                      for ch in record.targets}
            pairs.append((record, recons))
        table = aggregate_by_stage(pairs)

        # independent oracle: sort-based group-by over plain numpy means
        for target in ("EOG horizontal", "EEG Pz-Oz"):
            for stage in stages:
                values = [
                    float(np.mean((np.asarray(recons[target], dtype=np.float64)
                                   - np.asarray(record.targets[target],
                                                dtype=np.float64)) ** 2))
                    for record, recons in pairs if record.stage is stage
                ]
                cell = table.cell("EEG Fpz-Cz", target, stage)
                if not values:
                    assert cell is None
                    continue
                oracle = 0.0
                for v in values:
                    oracle += v
                oracle /= len(values)
                assert cell.mean_mse == oracle
                assert cell.epoch_count == len(values)

    def test_weighted_mean_equals_pooled(self):
        rng = philox(4)
        stages = list(SleepStage)
        pairs = []
        for i in range(50):
            record = make_record(rng, stages[i % 5], epoch_index=i)
            recons = {ch: rng.normal(0, 1, 3000).astype(np.float32)
                      for ch in record.targets}
            pairs.append((record, recons))
        table = aggregate_by_stage(pairs)
        for target in ("EOG horizontal", "EEG Pz-Oz"):
            pooled_direct = np.mean([
                mse(recons[target], record.targets[target])
                for record, recons in pairs
            ])
            assert table.pooled_mse("EEG Fpz-Cz", target) == \
                pytest.approx(pooled_direct, abs=1e-6)

    def test_baseline_is_unit_for_normalized_targets(self):
        records = synth_records(seed=11, minutes=2.0)
        table = baseline_table(records)
        for target in records[0].target_channels:
            assert table.pooled_mse("EEG Fpz-Cz", target) == \
                pytest.approx(1.0, abs=1e-3)

    def test_physical_units_flag_rescales_by_variance(self):
        rng = philox(5)
        record = make_record(rng, SleepStage.N3)
        recons = {ch: record.targets[ch] + 1.0 for ch in record.targets}
        normalized = aggregate_by_stage([(record, recons)])
        physical = aggregate_by_stage([(record, recons)], physical_units=True)
        for target in record.target_channels:
            _, std = record.norm_params[target]
            n_cell = normalized.cell("EEG Fpz-Cz", target, SleepStage.N3)
            p_cell = physical.cell("EEG Fpz-Cz", target, SleepStage.N3)
            assert p_cell.mean_mse == pytest.approx(
                n_cell.mean_mse * std * std, rel=1e-5)


def canonical_table():
    table = MseTable()
    value = 1.0
    for input_channel, target in CANONICAL_LAYOUT:
        for stage in SleepStage:
            table.set_cell(input_channel, target, stage,
                           MseCell(mean_mse=value, epoch_count=3))
            value += 0.1
    return table


class TestRender:
    def test_paper_structure_six_rows_five_columns(self):
        text = render_table(canonical_table(), "text").decode()
        lines = [line for line in text.splitlines() if line and
                 not line.startswith(("Input", "-"))]
        assert len(lines) == 6
        header = text.splitlines()[0]
        for column in ("Wake", "N1", "N2", "N3", "REM"):
            assert column in header
        assert "EEG (FPz-Cz)" in text
        assert "EOG" in text
        assert "EMG" in text
        assert "EEG (Pz-Oz)" in text

    def test_one_decimal_in_text(self):
        table = MseTable()
        table.set_cell("in", "out", SleepStage.N2,
                       MseCell(mean_mse=1.23456, epoch_count=2))
        text = render_table(table, "text").decode()
        assert "1.2" in text
        assert "1.23" not in text

    def test_absent_stage_renders_dash_not_zero(self):
        table = MseTable()
        table.set_cell("in", "out", SleepStage.N2,
                       MseCell(mean_mse=0.5, epoch_count=1))
        text = render_table(table, "text").decode()
        row = [line for line in text.splitlines() if "out" in line][0]
        assert row.count("-") == 4
        assert "0.0" not in row

    def test_self_row_rejected(self):
        table = canonical_table()
        table.cells[("EOG", "EOG", SleepStage.WAKE)] = MseCell(1.0, 1)
        with pytest.raises(ValueError):
            render_table(table, "text")
        with pytest.raises(ValueError):
            MseTable().add_row("EOG", "EOG")

    def test_csv_round_trip(self):
        table = canonical_table()
        parsed = table_from_csv(render_table(table, "csv"))
        assert parsed.row_order == table.row_order
        assert parsed.cells.keys() == table.cells.keys()
        for key, cell in table.cells.items():
            assert parsed.cells[key].mean_mse == cell.mean_mse
            assert parsed.cells[key].epoch_count == cell.epoch_count

    def test_unknown_format(self):
        with pytest.raises(ValueError):
            render_table(canonical_table(), "yaml")


class TestExport:
    def test_export_layout_and_denormalization(self, tmp_path):
        records = synth_records(seed=12, minutes=1.0)
        record = records[0]
        recons = zero_reconstructions(record)
        path = tmp_path / "recon.csv"
        export_reconstruction(record, recons, path)

        rows = list(csv.reader(io.StringIO(path.read_text())))
        assert rows[0] == ["channel", "time_s", "original", "reconstructed"]
        body = rows[1:]
        channels = list(record.target_channels)
        assert len(body) == 3000 * len(channels)

        # per channel: 3000 rows at 0.01 s steps
        first = [row for row in body if row[0] == channels[0]]
        assert len(first) == 3000
        assert first[0][1] == "0.00"
        assert first[1][1] == "0.01"
        assert first[-1][1] == "29.99"

        # de-normalized original equals physical samples of the source
        mean, std = record.norm_params[channels[0]]
        physical = record.targets[channels[0]].astype(np.float64) * std + mean
        got = np.array([float(row[2]) for row in first])
        assert np.abs(got - physical).max() < 1e-3

        # zero reconstruction de-normalizes to the channel mean
        recon_column = np.array([float(row[3]) for row in first])
        assert np.allclose(recon_column, mean)

    def test_perfect_reconstruction_columns_equal(self, tmp_path):
        records = synth_records(seed=13, minutes=1.0)
        record = records[0]
        recons = {ch: record.targets[ch].copy() for ch in record.targets}
        path = tmp_path / "perfect.csv"
        export_reconstruction(record, recons, path)
        rows = list(csv.reader(io.StringIO(path.read_text())))[1:]
        assert all(row[2] == row[3] for row in rows)

    def test_missing_target_rejected(self, tmp_path):
        records = synth_records(seed=14, minutes=1.0)
        record = records[0]
        with pytest.raises(ValueError):
            export_reconstruction(record, {}, tmp_path / "x.csv")
