"""Dataset ingestion, wide/long conversion and the bundled example data."""

import pytest

from metabayes.data import (
    ArmRecord,
    BOUCHER2016_FULL_CSV,
    BOUCHER2016_PAIRWISE_CSV,
    DataError,
    Dataset,
    Endpoint,
    builtin_dataset,
    builtin_wide_table,
    convert_wide_to_long,
    parse_csv,
    read_long_csv,
    write_long_csv,
)


class TestParseCsv:
    def test_pairwise_table_shape(self):
        wide = parse_csv(BOUCHER2016_PAIRWISE_CSV)
        assert len(wide.rows) == 6
        assert wide.arm_columns("r") == ("r1", "r2")
        assert wide.arm_columns("n") == ("n1", "n2")

    def test_header_only_gives_zero_rows(self):
        wide = parse_csv("study,r1,n1,r2,n2\n")
        assert len(wide.rows) == 0

    def test_full_table_blank_cells_give_per_row_arm_counts(self):
        wide = parse_csv(BOUCHER2016_FULL_CSV, n_arms_column="nd")
        counts = []
        for row in wide.rows:
            counts.append(sum(row[c] is not None for c in wide.arm_columns("d")))
        assert counts == [2, 4, 3, 4, 2, 2]

    def test_numeric_schema_violation_names_column_and_row(self):
        with pytest.raises(DataError, match=r"column 'n1', row 2"):
            parse_csv("r1,n1\n3,10\n4,ten\n", schema={"n1": "int"})

    def test_schema_column_must_exist(self):
        with pytest.raises(DataError, match="zzz"):
            parse_csv("a,b\n1,2\n", schema={"zzz": "int"})

    def test_ragged_row_rejected_with_row_number(self):
        with pytest.raises(DataError, match="row 1"):
            parse_csv("a,b\n1,2,3\n")

    def test_duplicate_header_rejected(self):
        with pytest.raises(DataError, match="duplicate"):
            parse_csv("a,a\n1,2\n")

    def test_reads_from_file(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text(BOUCHER2016_PAIRWISE_CSV, encoding="utf-8")
        assert len(parse_csv(path).rows) == 6


class TestConvertWideToLong:
    def test_first_study_arms(self):
        wide = parse_csv(BOUCHER2016_PAIRWISE_CSV)
        ds = convert_wide_to_long(wide, {"responders": "r", "sampleSize": "n"}, "binary")
        first = ds.study_arms(1)
        assert first[0] == ArmRecord(1, 0, responders=4, sample_size=73)
        assert first[1] == ArmRecord(1, 1, responders=63, sample_size=140)

    def test_empty_table_gives_empty_dataset(self):
        wide = parse_csv("study,r1,n1,r2,n2\n")
        ds = convert_wide_to_long(wide, {"responders": "r", "sampleSize": "n"}, "binary")
        assert ds.n_studies == 0 and len(ds.arms) == 0

    def test_multi_dose_study_keeps_all_doses(self):
        wide = parse_csv(BOUCHER2016_FULL_CSV, n_arms_column="nd")
        ds = convert_wide_to_long(
            wide, {"dose": "d", "responders": "r", "sampleSize": "n"}, "binary"
        )
        storey = ds.study_arms(2)
        assert [a.dose for a in storey] == [0, 50, 100, 200]
        assert [(a.responders, a.sample_size) for a in storey] == [
            (8, 116),
            (43, 118),
            (59, 126),
            (53, 113),
        ]

    def test_missing_role_for_endpoint(self):
        wide = parse_csv(BOUCHER2016_PAIRWISE_CSV)
        with pytest.raises(DataError, match="sampleSize"):
            convert_wide_to_long(wide, {"responders": "r"}, "binary")

    def test_responders_above_sample_size_names_study(self):
        wide = parse_csv("study,r1,n1,r2,n2\nA,4,73,63,140\nB,999,10,5,10\n")
        with pytest.raises(DataError, match="study 2"):
            convert_wide_to_long(wide, {"responders": "r", "sampleSize": "n"}, "binary")

    def test_partial_arm_cells_rejected(self):
        wide = parse_csv("study,r1,n1,r2,n2\nA,4,73,63,\n")
        with pytest.raises(DataError, match="arm 2"):
            convert_wide_to_long(wide, {"responders": "r", "sampleSize": "n"}, "binary")

    def test_declared_arm_count_cross_checked(self):
        wide = parse_csv("study,nd,d1,r1,n1,d2,r2,n2\nA,3,0,4,73,200,63,140\n", n_arms_column="nd")
        with pytest.raises(DataError, match="nd=3"):
            convert_wide_to_long(
                wide, {"dose": "d", "responders": "r", "sampleSize": "n"}, "binary"
            )

    def test_dose_zero_arm_becomes_control(self):
        wide = parse_csv("study,d1,r1,n1,d2,r2,n2\nA,200,63,140,0,4,73\n")
        ds = convert_wide_to_long(
            wide, {"dose": "d", "responders": "r", "sampleSize": "n"}, "binary"
        )
        arms = ds.study_arms(1)
        assert arms[0].dose == 0 and arms[0].responders == 4
        assert arms[1].dose == 200

    def test_missing_control_dose_rejected(self):
        wide = parse_csv("study,d1,r1,n1,d2,r2,n2\nA,50,63,140,100,4,73\n")
        with pytest.raises(DataError, match="dose-0"):
            convert_wide_to_long(
                wide, {"dose": "d", "responders": "r", "sampleSize": "n"}, "binary"
            )


class TestBuiltinDatasets:
    def test_pairwise_totals(self):
        ds = builtin_dataset("boucher2016_pairwise")
        assert ds.n_studies == 6
        assert len(ds.arms) == 12
        assert sum(a.responders for a in ds.arms if a.arm == 1) == 276

    def test_full_arm_counts(self):
        ds = builtin_dataset("boucher2016_full")
        assert ds.arms_per_study == (2, 4, 3, 4, 2, 2)
        assert ds.has_doses

    def test_duration_covariate(self):
        ds = builtin_dataset("boucher2016_pairwise")
        assert ds.covariates["duration"] == ("short", "short", "long", "long", "long", "short")

    def test_study_labels(self):
        ds = builtin_dataset("boucher2016_pairwise")
        assert ds.study_labels[0] == "Edwards (2000)"
        assert len(ds.study_labels) == 6

    def test_unknown_name(self):
        with pytest.raises(DataError, match="unknown builtin"):
            builtin_dataset("nope")


class TestRoundTrips:
    def test_conversion_preserves_every_cell(self):
        wide = builtin_wide_table("boucher2016_full")
        ds = convert_wide_to_long(
            wide, {"dose": "d", "responders": "r", "sampleSize": "n"}, "binary"
        )
        for irow, row in enumerate(wide.rows):
            expected = set()
            for dc, rc, nc in zip(
                wide.arm_columns("d"), wide.arm_columns("r"), wide.arm_columns("n")
            ):
                if row[dc] is not None:
                    expected.add((float(row[dc]), row[rc], row[nc]))
            got = {
                (a.dose, a.responders, a.sample_size) for a in ds.study_arms(irow + 1)
            }
            assert got == expected

    def test_no_arm_dropped_or_duplicated(self):
        ds = builtin_dataset("boucher2016_full")
        assert len(ds.arms) == sum(ds.arms_per_study)
        assert len({(a.study, a.arm) for a in ds.arms}) == len(ds.arms)

    @pytest.mark.parametrize("name", ["boucher2016_pairwise", "boucher2016_full"])
    def test_long_csv_round_trip(self, name):
        ds = builtin_dataset(name)
        text = write_long_csv(ds)
        back = read_long_csv(text)
        assert back.endpoint is ds.endpoint
        assert sorted(back.arms, key=lambda a: (a.study, a.arm)) == sorted(
            ds.arms, key=lambda a: (a.study, a.arm)
        )

    def test_long_csv_endpoint_inference(self):
        text = write_long_csv(builtin_dataset("boucher2016_pairwise"))
        assert read_long_csv(text).endpoint is Endpoint.BINARY


class TestDatasetValidation:
    def test_non_contiguous_studies(self):
        arms = (
            ArmRecord(1, 0, responders=1, sample_size=5),
            ArmRecord(1, 1, responders=1, sample_size=5),
            ArmRecord(3, 0, responders=1, sample_size=5),
            ArmRecord(3, 1, responders=1, sample_size=5),
        )
        with pytest.raises(DataError, match="contiguous"):
            Dataset(Endpoint.BINARY, arms)

    def test_single_arm_study_rejected(self):
        arms = (ArmRecord(1, 0, responders=1, sample_size=5),)
        with pytest.raises(DataError, match="at least 2 arms"):
            Dataset(Endpoint.BINARY, arms)

    def test_duplicate_arm_indices_rejected(self):
        with pytest.raises(DataError):
            Dataset(
                Endpoint.BINARY,
                (
                    ArmRecord(1, 0, responders=1, sample_size=5),
                    ArmRecord(1, 0, responders=2, sample_size=5),
                ),
            )

    def test_outcome_variant_must_match_endpoint(self):
        arms = (
            ArmRecord(1, 0, mean=0.0, std_err=1.0),
            ArmRecord(1, 1, mean=0.5, std_err=1.0),
        )
        with pytest.raises(DataError, match="endpoint"):
            Dataset(Endpoint.BINARY, arms)

    def test_responders_bounded_by_sample_size(self):
        with pytest.raises(DataError, match="exceed"):
            ArmRecord(1, 0, responders=10, sample_size=5)

    def test_control_arm_needs_dose_zero_when_dosed(self):
        arms = (
            ArmRecord(1, 0, dose=50.0, responders=1, sample_size=5),
            ArmRecord(1, 1, dose=100.0, responders=1, sample_size=5),
        )
        with pytest.raises(DataError, match="dose 0"):
            Dataset(Endpoint.BINARY, arms)
