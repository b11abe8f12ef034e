import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nidglm import data as D
from nidglm.data import (CATEGORICAL, EMBEDDING, NUMERIC, ONEHOT, SCALED, Column, CsvParseError, DataError,
                         Dataset, FeatureSchema, MissingValueError, UnknownCategoryError, encode_for_nn,
                         generate_synthetic, load_csv, split, split_sizes, synthetic_rate, write_csv)

from conftest import make_dataset


class TestColumn:
    def test_reference_defaults_to_last_level(self):
        assert Column("f", CATEGORICAL, ("a", "b", "c")).reference == 2

    def test_rejects_single_level(self):
        with pytest.raises(DataError):
            Column("f", CATEGORICAL, ("a",))

    def test_rejects_duplicate_levels(self):
        with pytest.raises(DataError):
            Column("f", CATEGORICAL, ("a", "a"))

    def test_numeric_has_no_levels(self):
        with pytest.raises(DataError):
            Column("x", NUMERIC, ("a", "b"))


class TestDataset:
    def test_rejects_nonpositive_exposure(self):
        schema = FeatureSchema((Column("x", NUMERIC),))
        with pytest.raises(DataError, match="exposure"):
            Dataset(schema, [0, 1], [1.0, 0.0], {"x": [0.0, 1.0]})

    def test_rejects_negative_claims(self):
        schema = FeatureSchema((Column("x", NUMERIC),))
        with pytest.raises(DataError):
            Dataset(schema, [0, -1], [1.0, 1.0], {"x": [0.0, 1.0]})

    def test_rejects_codes_out_of_range(self):
        schema = FeatureSchema((Column("f", CATEGORICAL, ("a", "b")),))
        with pytest.raises(DataError):
            Dataset(schema, [0, 1], [1.0, 1.0], {"f": np.array([0, 2])})

    def test_arrays_are_read_only(self, toy):
        with pytest.raises(ValueError):
            toy.claims[0] = 5

    def test_subset_and_labels(self, toy):
        sub = toy.subset([0, 2])
        assert sub.n == 2
        assert list(sub.labels("f")) == [toy.schema["f"].categories[c] for c in toy.features["f"][[0, 2]]]


class TestSynthetic:
    def test_rate_formula_by_hand(self):
        x = np.zeros((1, 8))
        x[0, :6] = [1.0, 2.0, 0.5, 1.0, -1.0, 2.0]
        eta = -3 + 0.5 - 0.25 * 4 + 0.5 * 0.5 * np.sin(1.0) + 0.5 * -1.0 + 0.125 * 1 * 2 - 0.1 + 0.3
        got = synthetic_rate(x, np.array([1]), np.array([3]))
        assert got[0] == pytest.approx(np.exp(eta), rel=1e-14)

    def test_rate_is_clamped(self):
        x = np.zeros((1, 8))
        x[0, 0] = 20.0
        assert synthetic_rate(x, np.array([0]), np.array([0]))[0] == 1.0
        assert synthetic_rate(x, np.array([0]), np.array([0]), clamp=False)[0] > 1.0

    def test_reproducible(self):
        a, b = generate_synthetic(500, 11), generate_synthetic(500, 11)
        assert np.array_equal(a.claims, b.claims)
        assert np.array_equal(a.features["x4"], b.features["x4"])

    def test_moments(self):
        d = generate_synthetic(100_000, 5)
        x2, x8 = d.features["x2"], d.features["x8"]
        assert np.corrcoef(x2, x8)[0, 1] == pytest.approx(0.5, abs=0.01)
        assert np.corrcoef(d.features["x1"], d.features["x2"])[0, 1] == pytest.approx(0.0, abs=0.01)
        assert d.features["x9"].mean() == pytest.approx(0.6, abs=0.01)
        assert d.features["x10"].mean() == pytest.approx(1.0, abs=0.02)
        assert np.all(d.exposure == 1.0)

    def test_zero_claim_share_matches_reference(self):
        # 94.358 % of 2e6 rows have no claim in the reference data set; the
        # share is stable enough to check on 2e5 rows.
        d = generate_synthetic(200_000, 1)
        assert np.mean(d.claims == 0) == pytest.approx(0.94358, abs=0.002)

    @pytest.mark.parametrize("n", [0, -5, 2.5])
    def test_bad_n(self, n):
        with pytest.raises(DataError):
            generate_synthetic(n, 0)


class TestSplit:
    def test_sizes(self):
        assert split_sizes(10, (0.8, 0.1, 0.1)) == (8, 1, 1)
        assert sum(split_sizes(12345, (0.8, 0.1, 0.1))) == 12345

    def test_fractions_must_sum_to_one(self):
        with pytest.raises(DataError):
            split_sizes(100, (0.5, 0.3, 0.3))

    def test_tiny_split_is_rejected(self):
        with pytest.raises(DataError):
            split_sizes(3, (0.8, 0.1, 0.1))

    @settings(max_examples=30, deadline=None)
    @given(n=st.integers(20, 400), seed=st.integers(0, 2**31 - 1))
    def test_partition(self, n, seed):
        d = make_dataset(n, seed=1)
        s = split(d, (0.8, 0.1, 0.1), seed)
        idx = np.concatenate(s.indices)
        assert np.array_equal(np.sort(idx), np.arange(n))
        assert s.train.n + s.validation.n + s.test.n == n
        assert np.array_equal(s.train.claims, d.claims[s.indices[0]])

    def test_deterministic(self, toy):
        a, b = split(toy, seed=4), split(toy, seed=4)
        assert all(np.array_equal(x, y) for x, y in zip(a.indices, b.indices))


class TestCsv:
    def test_round_trip(self, tmp_path, toy):
        p = tmp_path / "d.csv"
        write_csv(toy, p)
        back = load_csv(p, toy.schema)
        assert np.array_equal(back.claims, toy.claims)
        assert np.array_equal(back.exposure, toy.exposure)
        for name in toy.schema.names:
            assert np.array_equal(back.features[name], toy.features[name])

    def test_write_is_byte_stable(self, tmp_path, toy):
        write_csv(toy, tmp_path / "a.csv")
        write_csv(load_csv(tmp_path / "a.csv", toy.schema), tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def _schema(self):
        return FeatureSchema((Column("x", NUMERIC), Column("f", CATEGORICAL, ("a", "b"))))

    def test_extra_columns_ignored(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("id,claims,exposure,x,f\n7,1,0.5,2.0,a\n8,0,1.0,3.0,b\n")
        d = load_csv(p, self._schema())
        assert d.n == 2 and list(d.features["f"]) == [0, 1]

    def test_missing_value_reports_row_and_column(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("claims,exposure,x,f\n1,0.5,2.0,a\n0,1.0,,b\n")
        with pytest.raises(MissingValueError) as exc:
            load_csv(p, self._schema())
        assert exc.value.row == 3 and exc.value.column == "x"

    def test_unknown_category(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("claims,exposure,x,f\n1,0.5,2.0,z\n")
        with pytest.raises(UnknownCategoryError) as exc:
            load_csv(p, self._schema())
        assert exc.value.row == 2 and exc.value.column == "f"

    def test_bad_number(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("claims,exposure,x,f\n1,0.5,abc,a\n")
        with pytest.raises(CsvParseError):
            load_csv(p, self._schema())

    def test_missing_column(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("claims,exposure,f\n1,0.5,a\n")
        with pytest.raises(CsvParseError, match="missing"):
            load_csv(p, self._schema())

    def test_infer_schema_for_claims_layout(self, tmp_path):
        p = tmp_path / "fre.csv"
        p.write_text(
            "IDpol,ClaimNb,Exposure,VehPower,VehAge,DrivAge,BonusMalus,VehBrand,VehGas,Area,Density,Region\n"
            "1,0,0.1,5,0,55,50,B12,Regular,D,1217,R82\n"
            "3,1,0.77,5,0,55,50,B1,Diesel,B,1217,R22\n"
        )
        schema = D.infer_schema(p, "ClaimNb", "Exposure", ["VehBrand", "VehGas", "Area", "Region"], ["IDpol"])
        assert schema.names == ["VehPower", "VehAge", "DrivAge", "BonusMalus", "VehBrand", "VehGas", "Area",
                                "Density", "Region"]
        d = load_csv(p, schema)
        assert list(d.labels("Region")) == ["R82", "R22"]
        fixed = D.fremtpl2_schema(["B1", "B12"], ["R22", "R82"], area=("B", "D"))
        assert load_csv(p, fixed).n == 2

    def test_schema_json_round_trip(self, tmp_path, toy):
        toy.schema.save(tmp_path / "s.json")
        assert FeatureSchema.load(tmp_path / "s.json") == toy.schema
        assert json.loads((tmp_path / "s.json").read_text())["columns"][2]["reference"] == 2


class TestEncoding:
    def test_layout_and_scaling(self, toy):
        enc = encode_for_nn(toy, onehot_threshold=5)
        kinds = [(c.source, c.encoding) for c in enc.column_map]
        assert kinds == [("a", SCALED), ("b", SCALED)] + [("f", ONEHOT)] * 3 + [("g", EMBEDDING)]
        a = enc.values[:, 0]
        assert a.min() == -1.0 and a.max() == 1.0
        assert np.array_equal(enc.values[:, -1], toy.features["g"])
        assert np.all(enc.values[:, 2:5].sum(axis=1) == 1.0)

    def test_uses_training_extremes(self, toy):
        params = {"a": (-10.0, 10.0), "b": (0.0, 2.0)}
        enc = encode_for_nn(toy, scaling_params=params)
        assert np.allclose(enc.values[:, 0], toy.features["a"] / 10.0)

    def test_constant_numeric_rejected(self):
        schema = FeatureSchema((Column("x", NUMERIC),))
        d = Dataset(schema, [0, 1], [1.0, 1.0], {"x": [3.0, 3.0]})
        with pytest.raises(DataError, match="constant"):
            encode_for_nn(d)
