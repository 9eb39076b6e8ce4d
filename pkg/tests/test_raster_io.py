import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from groundfail_svi.errors import DomainError, GridMismatchError, InputIOError, RasterFormatError
from groundfail_svi.raster_io import (
    GridSpec,
    HazardCategory,
    InventoryPoint,
    Raster,
    align_to_grid,
    build_dataset,
    normalize_dpm,
    points_outside,
    rasterize_points,
    read_ascii_grid,
    read_inventory_csv,
    write_ascii_grid,
    write_inventory_csv,
)

HEADER = "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -9999\n"


def _write(tmp_path, text, name="grid.asc"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return str(path)


def test_read_grid_with_nodata(tmp_path):
    raster = read_ascii_grid(_write(tmp_path, HEADER + "0.1 -9999\n0.3 0.4\n"))
    assert raster.spec == GridSpec(2, 2, 0.0, 0.0, 1.0, -9999.0)
    assert int(raster.nodata.sum()) == 1
    assert raster.nodata[0, 1]
    assert raster.values[1, 0] == pytest.approx(0.3)


def test_header_keys_are_case_insensitive(tmp_path):
    raster = read_ascii_grid(_write(tmp_path, HEADER.upper().replace("NODATA_VALUE", "nodata_value") + "1 2\n3 4\n"))
    assert raster.values.tolist() == [[1.0, 2.0], [3.0, 4.0]]


def test_out_of_order_header_names_the_key(tmp_path):
    text = "nrows 2\nncols 2\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -9999\n1 2\n3 4\n"
    with pytest.raises(RasterFormatError, match="nrows") as info:
        read_ascii_grid(_write(tmp_path, text))
    assert info.value.line == 1


@pytest.mark.parametrize(
    "body, line, column",
    [
        ("1 2\n3 x\n", 8, 3),
        ("1 2 3\n3 4\n", 7, 1),
        ("1 2\n", 7, None),
        ("1 nan\n3 4\n", 7, 3),
    ],
)
def test_malformed_body_reports_position(tmp_path, body, line, column):
    with pytest.raises(RasterFormatError) as info:
        read_ascii_grid(_write(tmp_path, HEADER + body))
    assert info.value.line == line
    assert info.value.column == column


def test_missing_file_is_an_io_error(tmp_path):
    with pytest.raises(InputIOError):
        read_ascii_grid(str(tmp_path / "absent.asc"))


@settings(max_examples=25, deadline=None)
@given(
    st.integers(min_value=1, max_value=6),
    st.integers(min_value=1, max_value=6),
    st.integers(min_value=0, max_value=2 ** 32 - 1),
)
def test_round_trip_identity(tmp_path_factory, nrows, ncols, seed):
    rng = np.random.default_rng(seed)
    values = rng.random((nrows, ncols))
    values[rng.random((nrows, ncols)) < 0.2] = np.nan
    raster = Raster(GridSpec(ncols, nrows, 12.5, -3.25, 0.125), values)
    path = str(tmp_path_factory.mktemp("grids") / "r.asc")
    write_ascii_grid(raster, path, decimals=12)
    back = read_ascii_grid(path)
    assert back.spec == raster.spec
    np.testing.assert_array_equal(back.nodata, raster.nodata)
    np.testing.assert_allclose(back.valid_values(), raster.valid_values(), atol=1e-12)


def test_write_formatting(tmp_path):
    spec = GridSpec(1, 1, 0.0, 0.0, 1.0)
    path = str(tmp_path / "one.asc")
    write_ascii_grid(Raster(spec, [[0.5]]), path, decimals=6)
    lines = open(path, encoding="utf-8").read().splitlines()
    assert lines[-1] == "0.500000"
    assert lines[5].split() == ["NODATA_value", "-9999"]

    write_ascii_grid(Raster(spec, [[np.nan]]), path, decimals=6)
    assert open(path, encoding="utf-8").read().splitlines()[-1] == "-9999"
    write_ascii_grid(Raster(spec, [[0.4]]), path, decimals=0)
    assert open(path, encoding="utf-8").read().splitlines()[-1] == "0"


def test_align_identity_and_upsampling():
    src = Raster(GridSpec(1, 1, 0.0, 0.0, 2.0), [[0.7]])
    assert align_to_grid(src, src.spec).values.tolist() == [[0.7]]
    fine = align_to_grid(src, GridSpec(2, 2, 0.0, 0.0, 1.0))
    assert fine.values.tolist() == [[0.7, 0.7], [0.7, 0.7]]


def test_align_marks_outside_cells_nodata():
    src = Raster(GridSpec(2, 2, 0.0, 0.0, 1.0), [[1.0, 2.0], [3.0, np.nan]])
    shifted = align_to_grid(src, GridSpec(2, 2, 1.0, 0.0, 1.0))
    assert shifted.values[0, 0] == 2.0
    assert np.isnan(shifted.values[0, 1])
    assert np.isnan(shifted.values[1, 0])
    with pytest.raises(GridMismatchError):
        align_to_grid(src, GridSpec(2, 2, 10.0, 10.0, 1.0))


def test_normalize_dpm():
    spec = GridSpec(3, 1, 0.0, 0.0, 1.0)
    out = normalize_dpm(Raster(spec, [[0.0, 5.0, 10.0]]), 1e-4)
    assert out.values.tolist() == pytest.approx([[1e-4, 0.5, 1.0]])
    kept = normalize_dpm(Raster(spec, [[0.0, 0.3, 1.0]]), 1e-4, assume_normalized=True)
    assert kept.values.tolist() == pytest.approx([[1e-4, 0.3, 1.0]])
    with pytest.raises(DomainError):
        normalize_dpm(Raster(spec, [[0.2, 0.2, 0.2]]), 1e-4)


def test_rasterize_half_open_cells():
    spec = GridSpec(2, 2, 0.0, 0.0, 1.0)
    points = [
        InventoryPoint(1.0, 1.0, "landslide"),
        InventoryPoint(0.2, 1.8, "landslide"),
        InventoryPoint(0.3, 1.7, "landslide"),
        InventoryPoint(0.5, 0.5, "liquefaction"),
        InventoryPoint(5.0, 5.0, "landslide"),
    ]
    out = rasterize_points(points, spec, HazardCategory.LANDSLIDE)
    # (1, 1) lies on the corner shared by all four cells: west edge of col 1, north edge of row 1
    assert out.values.tolist() == [[1.0, 0.0], [0.0, 1.0]]
    assert points_outside(points, spec) == 1
    assert rasterize_points([], spec, "liquefaction").values.sum() == 0.0


def test_inventory_csv(tmp_path):
    path = str(tmp_path / "truth.csv")
    write_inventory_csv([InventoryPoint(1.5, 2.5, "building_damage")], path)
    assert open(path, encoding="utf-8").read() == "lon,lat,category\n1.5,2.5,building_damage\n"
    assert read_inventory_csv(path) == [InventoryPoint(1.5, 2.5, HazardCategory.BUILDING_DAMAGE)]

    bad = _write(tmp_path, "lon,lat,category\n1,2,flood\n", "bad.csv")
    with pytest.raises(InputIOError, match="flood"):
        read_inventory_csv(bad)
    header = _write(tmp_path, "x,y,category\n1,2,landslide\n", "header.csv")
    with pytest.raises(InputIOError):
        read_inventory_csv(header)


def test_build_dataset_validity_and_footprint():
    spec = GridSpec(3, 1, 0.0, 0.0, 1.0)
    dpm = Raster(spec, [[0.0, 0.5, 0.9]])
    prior_ls = Raster(spec, [[0.1, np.nan, 1.0 + 5e-7]])
    prior_lf = Raster(spec, [[0.2, 0.3, 0.4]])

    table = build_dataset(dpm, prior_ls, prior_lf, None, delta=1e-4)
    assert table.valid.tolist() == [True, False, True]
    assert not table.has_building.any()
    records = list(table)
    assert records[0].y == 1e-4
    assert records[2].alpha_ls == 1.0
    assert not records[1].valid

    footprint = Raster(spec, [[1.0, 0.0, np.nan]])
    assert build_dataset(dpm, prior_ls, prior_lf, footprint).has_building.tolist() == [True, False, False]

    with pytest.raises(DomainError):
        build_dataset(dpm, Raster(spec, [[0.1, 0.2, 1.2]]), prior_lf)
    with pytest.raises(GridMismatchError):
        build_dataset(dpm, Raster(GridSpec(3, 1, 1.0, 0.0, 1.0), [[0.1, 0.2, 0.3]]), prior_lf)
