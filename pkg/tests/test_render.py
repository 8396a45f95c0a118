import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from PIL import Image

from backplane.render import (
    RenderSpec,
    _tile_grid,
    class_grid,
    difference_image,
    grid_shape,
    normalize_surface,
    quantize,
    read_ppm,
    render_sheet_to_files,
    surface_filename,
    tile_channels,
    tile_strides,
    write_png,
    write_ppm,
)


class TestNormalize:
    def test_scales_by_max_abs(self):
        out = normalize_surface(np.array([-4.0, 2.0, 0.0]))
        assert_allclose(out, [1.0, 0.5, 0.0])

    def test_zero_surface_stays_zero(self):
        assert_array_equal(normalize_surface(np.zeros((3, 3))), np.zeros((3, 3)))

    def test_output_is_absolute(self):
        out = normalize_surface(np.array([[-1.0, 1.0]]))
        assert float(out.min()) >= 0.0


class TestQuantize:
    def test_endpoints_and_midpoint(self):
        out = quantize(np.array([0.0, 1.0, 0.5]))
        assert_array_equal(out, [0, 255, 128])

    def test_half_rounds_away_from_zero(self):
        # v*255 == 0.5 and 254.5 are the first and last ties
        out = quantize(np.array([0.5 / 255.0, 254.5 / 255.0]))
        assert_array_equal(out, [1, 255])

    def test_clips_out_of_range(self):
        assert_array_equal(quantize(np.array([-0.3, 1.7])), [0, 255])


class TestGridShape:
    def test_known_shapes(self):
        assert grid_shape(10) == (2, 5)
        assert grid_shape(96) == (8, 12)
        assert grid_shape(16) == (4, 4)
        assert grid_shape(7) == (1, 7)
        assert grid_shape(1) == (1, 1)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            grid_shape(0)


class TestTiling:
    def test_stride_sheet_layout(self):
        tiles = [np.full((2, 2), float(n + 1)) for n in range(4)]
        sheet = tile_strides(tiles)
        assert sheet.shape == (4, 4, 1)
        # constant tiles normalize to all-ones regardless of level
        assert_array_equal(sheet, np.ones((4, 4, 1)))

    def test_stride_sheet_is_row_major(self):
        tiles = [np.zeros((2, 2)) for _ in range(4)]
        tiles[1] = np.array([[2.0, 0.0], [0.0, 0.0]])
        sheet = tile_strides(tiles)
        assert sheet[0, 2, 0] == 1.0  # tile 1 sits at row 0, col 1
        assert sheet[0, 0, 0] == 0.0

    def test_non_square_count_rejected(self):
        with pytest.raises(ValueError):
            tile_strides([np.zeros((2, 2))] * 5)

    def test_channel_sheet_is_j_major(self):
        c_in, c_out = 2, 3
        tiles = [np.zeros((2, 2)) for _ in range(c_in * c_out)]
        tiles[1 * c_out + 2] = np.eye(2)
        sheet = tile_channels(tiles, c_in, c_out)
        assert sheet.shape == (4, 6, 1)
        assert sheet[2, 4, 0] == 1.0  # row j=1, col i=2
        assert sheet[0, 0, 0] == 0.0

    def test_channel_count_mismatch_rejected(self):
        with pytest.raises(ValueError):
            tile_channels([np.zeros((2, 2))] * 5, 2, 3)

    def test_class_grid_has_separators(self):
        tiles = [np.ones((2, 2)), np.ones((2, 2))]
        sheet = class_grid(tiles)
        assert sheet.shape == (2, 5, 1)
        assert_array_equal(sheet[:, 2, 0], [0.5, 0.5])
        assert_array_equal(sheet[:, :2, 0], np.ones((2, 2)))

    def test_trailing_cells_render_gray(self):
        tiles = [np.ones((2, 2))] * 5
        sheet = _tile_grid(tiles, 2, 3, RenderSpec())
        assert_array_equal(sheet[2:, 4:, 0], np.full((2, 2), 0.5))

    def test_mismatched_tile_shapes_rejected(self):
        with pytest.raises(ValueError):
            tile_strides([np.zeros((2, 2)), np.zeros((3, 3)), np.zeros((2, 2)), np.zeros((2, 2))])


class TestDifference:
    def test_identical_inputs_render_black(self):
        a = np.random.default_rng(0).standard_normal((4, 4))
        assert_array_equal(difference_image(a, a.copy()), np.zeros((4, 4)))

    def test_normalized_gap(self):
        a = np.zeros((1, 2))
        b = np.array([[3.0, -1.0]])
        assert_allclose(difference_image(a, b), [[1.0, 1.0 / 3.0]])


class TestFilename:
    def test_mode_zero(self):
        assert surface_filename("vgg7", 0, "fc") == "vgg7_rm0_fc.png"

    def test_full_index(self):
        name = surface_filename("vgg7", 4, "conv2", s=3, j=1, i=2, k=5, ext="ppm")
        assert name == "vgg7_rm4_conv2_3_1_2_5.ppm"

    def test_partial_index_skips_missing_slots(self):
        assert surface_filename("tiny", 3, "conv1", j=0, i=4) == "tiny_rm3_conv1_0_4.png"
        assert surface_filename("tiny", 2, "conv1", s=9, i=1) == "tiny_rm2_conv1_9_1.png"


class TestEncoders:
    @pytest.fixture
    def rgb(self):
        rng = np.random.default_rng(7)
        return rng.integers(0, 256, size=(9, 13, 3), dtype=np.uint8)

    def test_png_decodes_to_input(self, rgb, tmp_path):
        path = tmp_path / "img.png"
        write_png(rgb, path)
        assert_array_equal(np.asarray(Image.open(path).convert("RGB")), rgb)

    def test_ppm_decodes_to_input(self, rgb, tmp_path):
        path = tmp_path / "img.ppm"
        write_ppm(rgb, path)
        assert_array_equal(read_ppm(path), rgb)
        assert_array_equal(np.asarray(Image.open(path).convert("RGB")), rgb)

    def test_grayscale_replicates_to_rgb(self, tmp_path):
        img = np.arange(12, dtype=np.uint8).reshape(3, 4)
        write_png(img, tmp_path / "g.png")
        decoded = np.asarray(Image.open(tmp_path / "g.png").convert("RGB"))
        assert_array_equal(decoded, np.repeat(img[:, :, None], 3, axis=2))

    def test_png_bytes_are_reproducible(self, rgb, tmp_path):
        write_png(rgb, tmp_path / "a.png")
        write_png(rgb, tmp_path / "b.png")
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()

    def test_large_png_splits_deflate_blocks(self, tmp_path):
        # raw stream exceeds one 65535-byte stored block
        rng = np.random.default_rng(8)
        img = rng.integers(0, 256, size=(180, 150, 3), dtype=np.uint8)
        path = tmp_path / "big.png"
        write_png(img, path)
        assert_array_equal(np.asarray(Image.open(path).convert("RGB")), img)

    def test_ppm_reader_skips_comments(self, tmp_path):
        path = tmp_path / "c.ppm"
        body = bytes([10, 20, 30] * 2)
        path.write_bytes(b"P6\n# comment line\n2 1\n255\n" + body)
        assert_array_equal(read_ppm(path), np.array([[[10, 20, 30], [10, 20, 30]]]))

    def test_ppm_reader_rejects_other_magic(self, tmp_path):
        path = tmp_path / "x.ppm"
        path.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
        with pytest.raises(ValueError):
            read_ppm(path)

    def test_sheet_writer_emits_matching_pair(self, tmp_path):
        rng = np.random.default_rng(9)
        sheet = rng.uniform(0, 1, size=(5, 6))
        png, ppm = render_sheet_to_files(sheet, str(tmp_path / "sheet"))
        a = np.asarray(Image.open(png).convert("RGB"))
        b = read_ppm(ppm)
        assert_array_equal(a, b)
        assert_array_equal(a[:, :, 0], quantize(sheet))
