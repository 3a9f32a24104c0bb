import numpy as np
import pytest
from numpy.testing import assert_allclose

from app.data_model import (
    Dataset,
    apply_scales,
    load_dataset,
    load_grid,
    load_scales,
    save_dataset,
    save_standardized,
    standardize_inputs,
)
from app.errors import DegenerateInputError, DimensionError, ParseError, SchemaError

HEADER = "id,Sx,Sy,H,S,I,y1,y2,y3,y4\n"


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


class TestLoadDataset:
    def test_reads_series_in_column_order(self, tmp_path):
        path = _write(
            tmp_path / "d.csv",
            "id,Sx,Sy,H,S,I,y2,y1,y10,y3\n"
            "a,1,2,10,20,30,1.5,0,9,2\n"
            "b,3,4,11,22,33,0.5,0,3,1\n",
        )
        dataset = load_dataset(path)
        assert dataset.location_ids == ("a", "b")
        # y1, y2, y3, y10
        assert_allclose(dataset.Y[:, 0], [0.0, 1.5, 2.0, 9.0])
        assert_allclose(dataset.X_raw[1], [11, 22, 33, 3, 4])
        assert_allclose(dataset.times, [1, 2, 3, 4])

    def test_missing_column_is_schema_error(self, tmp_path):
        path = _write(tmp_path / "d.csv", "id,Sx,H,S,I,y1,y2,y3\na,1,1,1,1,0,1,2\nb,2,2,2,2,0,1,2\n")
        with pytest.raises(SchemaError, match="Sy"):
            load_dataset(path)

    def test_parse_error_reports_row_and_column(self, tmp_path):
        path = _write(tmp_path / "d.csv", HEADER + "a,1,2,3,4,5,0,1,2,3\nb,1,2,3,oops,5,0,1,2,3\n")
        with pytest.raises(ParseError) as info:
            load_dataset(path)
        assert info.value.row == 2
        assert info.value.column == "S"

    def test_semicolon_delimiter(self, tmp_path):
        path = _write(tmp_path / "d.csv", HEADER.replace(",", ";") + "a;1;2;3;4;5;0;1;2;3\nb;2;3;4;5;6;0;1;1;1\n")
        assert load_dataset(path, delimiter=";").n_locations == 2

    def test_too_few_time_points(self, tmp_path):
        path = _write(tmp_path / "d.csv", "id,Sx,Sy,H,S,I,y1,y2\na,1,2,3,4,5,0,1\nb,2,3,4,5,6,0,1\n")
        with pytest.raises(DimensionError):
            load_dataset(path)

    def test_first_observation_must_be_zero(self, tmp_path):
        path = _write(tmp_path / "d.csv", HEADER + "a,1,2,3,4,5,0,1,2,3\nb,2,3,4,5,6,0.2,1,1,1\n")
        with pytest.raises(ParseError) as info:
            load_dataset(path)
        assert info.value.row == 2
        assert info.value.column == "y1"

    def test_single_location_rejected(self, tmp_path):
        path = _write(tmp_path / "d.csv", HEADER + "a,1,2,3,4,5,0,1,2,3\n")
        with pytest.raises(DimensionError):
            load_dataset(path)

    def test_save_and_reload_is_exact(self, tmp_path, synthetic5):
        dataset, _ = synthetic5
        save_dataset(dataset, tmp_path / "out.csv")
        again = load_dataset(tmp_path / "out.csv")
        assert again.location_ids == dataset.location_ids
        np.testing.assert_array_equal(again.Y, dataset.Y)
        np.testing.assert_array_equal(again.X_raw, dataset.X_raw)

    def test_unknown_location_id(self, synthetic5):
        dataset, _ = synthetic5
        with pytest.raises(SchemaError):
            dataset.index_of("nope")

    def test_times_must_increase(self):
        with pytest.raises(DimensionError):
            Dataset(Y=np.zeros((3, 2)), X_raw=np.ones((2, 5)), times=[1, 1, 2], location_ids=["a", "b"])


class TestStandardize:
    def test_color_columns_have_unit_sd(self, synthetic5):
        dataset, _ = synthetic5
        std = standardize_inputs(dataset.X_raw)
        assert_allclose(std.X[:, :3].std(axis=0, ddof=1), 1.0, rtol=1e-12)

    def test_spatial_columns_share_pooled_scale(self):
        X = np.array([[1, 1, 1, 0.0, 0.0], [2, 3, 4, 2.0, 0.0], [3, 2, 2, 4.0, 1.0]])
        std = standardize_inputs(X)
        centered = X[:, 3:] - X[:, 3:].mean(axis=0)
        expected = np.sqrt(np.sum(centered**2) / (2 * 3 - 2))
        assert std.spatial_common_scale == pytest.approx(expected)
        assert std.scales[3] == std.scales[4] == pytest.approx(expected)
        assert_allclose(std.X[:, 3:] * expected, X[:, 3:])

    def test_scaling_only_by_default(self, synthetic5):
        dataset, _ = synthetic5
        std = standardize_inputs(dataset.X_raw)
        assert_allclose(std.X * std.scales, dataset.X_raw)
        centered = standardize_inputs(dataset.X_raw, center=True)
        assert_allclose(centered.X.mean(axis=0), 0.0, atol=1e-12)

    def test_zero_variance_column(self):
        X = np.array([[1, 5, 1, 0, 0], [2, 5, 4, 2, 0], [3, 5, 2, 4, 1]], dtype=float)
        with pytest.raises(DegenerateInputError, match="S"):
            standardize_inputs(X)

    def test_single_constant_spatial_column(self):
        X = np.array([[1, 2, 1, 0, 7], [2, 3, 4, 2, 7], [3, 1, 2, 4, 7]], dtype=float)
        with pytest.raises(DegenerateInputError, match="Sy"):
            standardize_inputs(X)

    def test_apply_scales_uses_training_scales(self, synthetic5):
        dataset, _ = synthetic5
        std = standardize_inputs(dataset.X_raw)
        assert_allclose(apply_scales(dataset.X_raw, std), std.X)
        assert_allclose(std.apply(dataset.X_raw[0]), std.X[:1])

    def test_scales_sidecar_round_trip(self, tmp_path, synthetic5):
        dataset, _ = synthetic5
        std = standardize_inputs(dataset.X_raw)
        paths = save_standardized(dataset, std, tmp_path)
        assert [p.name for p in paths] == ["standardized.csv", "scales.csv"]
        again = load_scales(tmp_path / "scales.csv", dataset.X_raw)
        assert_allclose(again.X, std.X, rtol=1e-15)
        standardized_rows = load_dataset(tmp_path / "standardized.csv")
        assert_allclose(standardized_rows.X_raw, std.X, rtol=1e-15)


class TestLoadGrid:
    def test_pixel_coordinates_become_spatial_inputs(self, tmp_path):
        path = _write(tmp_path / "g.csv", "px,py,H,S,I\n0,1,10,20,30\n2,3,11,21,31\n")
        grid = load_grid(path)
        assert grid.n_pixels == 2
        assert_allclose(grid.inputs[1], [11, 21, 31, 2, 3])

    def test_grid_schema(self, tmp_path):
        path = _write(tmp_path / "g.csv", "x,y,H,S,I\n0,1,10,20,30\n")
        with pytest.raises(SchemaError):
            load_grid(path)
