import math
import sys
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from blockdiff import _kernels
from blockdiff.imaging import (CropPolicy, DegradationConfig, ImageFormatError, crop_training, degrade, load_image,
                               psnr, quantize, resize, resize_bicubic, save_image, ssim)
from blockdiff.imaging.degrade import choose_crop_mode
from blockdiff.imaging.io import PNG_SIGNATURE, decode_png, decode_ppm, encode_png, encode_ppm
from blockdiff.imaging.resample import _cubic, gaussian_blur, resample_weights

images = hnp.arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 9), st.just(3)),
                    elements=st.floats(0, 1))


def gradient(h=32, w=32):
    y, x = np.mgrid[0:h, 0:w]
    return np.stack([x / (w - 1), y / (h - 1), (x + y) / (h + w - 2)], -1) * 0.8 + 0.1


# ---- file formats ---------------------------------------------------------

def test_half_grey_png_quantizes_to_128(tmp_path):
    p = tmp_path / "g.png"
    save_image(np.full((4, 4, 3), 0.5), p)
    np.testing.assert_array_equal(load_image(p), np.full((4, 4, 3), 128 / 255))


def test_ppm_red_pixel():
    data = b"P6\n# comment\n1 1\n255\n" + bytes([255, 0, 0])
    np.testing.assert_array_equal(decode_ppm(data), [[[1.0, 0.0, 0.0]]])


@settings(max_examples=40, deadline=None)
@given(images, st.sampled_from([".png", ".ppm"]))
def test_roundtrip_equals_quantize(tmp_path_factory, img, ext):
    p = tmp_path_factory.mktemp("rt") / f"x{ext}"
    save_image(img, p)
    np.testing.assert_array_equal(load_image(p), quantize(img))


def _png_chunk(kind, data):
    return struct.pack(">I", len(data)) + kind + data + struct.pack(">I", zlib.crc32(kind + data) & 0xFFFFFFFF)


def _paeth(a, b, c):
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    return a if pa <= pb and pa <= pc else (b if pb <= pc else c)


def _filtered_png(rgb8, filters, color_type=2):
    """Independent PNG writer applying per-row filter types (forward filters)."""
    h, w, ch = rgb8.shape
    bpp = ch
    rows = rgb8.reshape(h, w * ch).astype(int)
    raw = bytearray()
    prev = [0] * (w * ch)
    for y in range(h):
        f = filters[y % len(filters)]
        cur = rows[y].tolist()
        out = []
        for x, v in enumerate(cur):
            a = cur[x - bpp] if x >= bpp else 0
            b = prev[x]
            c = prev[x - bpp] if x >= bpp else 0
            pred = [0, a, b, (a + b) // 2, _paeth(a, b, c)][f]
            out.append((v - pred) & 0xFF)
        raw.append(f)
        raw.extend(out)
        prev = cur
    ihdr = struct.pack(">IIBBBBB", w, h, 8, color_type, 0, 0, 0)
    return PNG_SIGNATURE + _png_chunk(b"IHDR", ihdr) + _png_chunk(b"IDAT", zlib.compress(bytes(raw))) + _png_chunk(b"IEND", b"")


@pytest.mark.parametrize("filters", [[0], [1], [2], [3], [4], [0, 1, 2, 3, 4]])
def test_png_decoder_handles_all_filters(filters):
    rgb8 = np.random.default_rng(len(filters) + filters[0]).integers(0, 256, (7, 5, 3), dtype=np.uint8)
    np.testing.assert_array_equal(decode_png(_filtered_png(rgb8, filters)), rgb8 / 255.0)


def test_png_rgba_alpha_dropped():
    rgba = np.random.default_rng(0).integers(0, 256, (3, 4, 4), dtype=np.uint8)
    np.testing.assert_array_equal(decode_png(_filtered_png(rgba, [4], color_type=6)), rgba[..., :3] / 255.0)


def test_unfilter_numba_matches_python():
    rng = np.random.default_rng(3)
    h, stride, bpp = 6, 15, 3
    raw = rng.integers(0, 256, h * (stride + 1), dtype=np.uint8)
    raw[:: stride + 1] = [0, 1, 2, 3, 4, 2]
    ref = _kernels.png_unfilter_python(raw, h, stride, bpp)
    out, bad = _kernels.png_unfilter_numba(raw, h, stride, bpp)
    assert bad < 0
    np.testing.assert_array_equal(out, ref)


def test_png_errors():
    good = encode_png(np.zeros((2, 2, 3)))
    with pytest.raises(ImageFormatError):
        decode_png(good[:-20])
    corrupt = bytearray(good)
    corrupt[20] ^= 0xFF  # inside IHDR data, CRC no longer matches
    with pytest.raises(ImageFormatError):
        decode_png(bytes(corrupt))
    grey = PNG_SIGNATURE + _png_chunk(b"IHDR", struct.pack(">IIBBBBB", 1, 1, 8, 0, 0, 0, 0))
    with pytest.raises(ImageFormatError):
        decode_png(grey)
    with pytest.raises(ImageFormatError):
        decode_ppm(b"P6\n2 2\n255\n" + bytes(5))


def test_unsupported_extension(tmp_path):
    with pytest.raises(ImageFormatError):
        save_image(np.zeros((1, 1, 3)), tmp_path / "x.jpg")
    (tmp_path / "y.bin").write_bytes(b"GIF89a")
    with pytest.raises(ImageFormatError):
        load_image(tmp_path / "y.bin")


def test_ppm_16bit():
    data = b"P6 1 1 65535\n" + struct.pack(">HHH", 65535, 0, 32768)
    np.testing.assert_allclose(decode_ppm(data), [[[1.0, 0.0, 32768 / 65535]]])
    assert encode_ppm(np.ones((1, 1, 3))).endswith(bytes([255, 255, 255]))


# ---- resampling -----------------------------------------------------------

def test_cubic_kernel_values():
    # Catmull-Rom: k(0)=1, k(1)=k(2)=0, k(0.5)=0.5625, k(1.5)=-0.0625
    np.testing.assert_allclose(_cubic(np.array([0, 0.5, 1, 1.5, 2, 2.5])), [1, 0.5625, 0, -0.0625, 0, 0])


@given(st.integers(1, 40), st.integers(1, 40), st.sampled_from(["bicubic", "bilinear", "area"]))
def test_weights_partition_of_unity(n_in, n_out, kernel):
    idx, w = resample_weights(n_in, n_out, kernel)
    np.testing.assert_allclose(w.sum(1), 1.0, atol=1e-12)
    assert idx.min() >= 0 and idx.max() < n_in


@given(st.floats(0, 1), st.integers(1, 20), st.integers(1, 20))
def test_constant_preserved(c, h, w):
    np.testing.assert_allclose(resize_bicubic(np.full((5, 7, 3), c), h, w), c, atol=1e-12)


def test_identity_resize():
    img = np.random.default_rng(0).random((9, 11, 3))
    np.testing.assert_allclose(resize_bicubic(img, 9, 11), img, atol=1e-6)


def test_gradient_up_down_psnr():
    g = gradient()
    back = resize_bicubic(resize_bicubic(g, 64, 64), 32, 32)
    assert psnr(g, back) > 40.0


def test_resize_errors_and_range():
    with pytest.raises(ValueError):
        resize_bicubic(np.zeros((4, 4, 3)), 0, 4)
    with pytest.raises(ValueError):
        resize(np.zeros((4, 4, 3)), 2, 2, "lanczos")
    checker = (np.indices((8, 8)).sum(0) % 2).astype(float)[..., None].repeat(3, -1)
    up = resize_bicubic(checker, 32, 32)
    assert up.min() >= 0.0 and up.max() <= 1.0


@pytest.mark.parametrize("kernel", ["bicubic", "area"])
def test_numba_and_numpy_gather_agree(kernel):
    img = np.random.default_rng(1).random((13, 17, 3))
    idx, w = resample_weights(13, 40, kernel)
    src = img.reshape(13, -1)
    np.testing.assert_allclose(_kernels.gather_weighted_numba(src, idx, w), _kernels.gather_weighted_numpy(src, idx, w), atol=1e-14)


def test_area_downsample_is_block_mean():
    img = np.random.default_rng(2).random((8, 8, 3))
    np.testing.assert_allclose(resize(img, 2, 2, "area"), img.reshape(2, 4, 2, 4, 3).mean((1, 3)), atol=1e-12)


def test_gaussian_blur_preserves_mean_of_constant():
    np.testing.assert_allclose(gaussian_blur(np.full((6, 6, 3), 0.3), 1.2), 0.3, atol=1e-12)
    img = np.random.default_rng(0).random((6, 6, 3))
    np.testing.assert_array_equal(gaussian_blur(img, 0.0), img)


# ---- degradation and cropping ---------------------------------------------

def test_degrade_degenerate_is_bicubic_down():
    img = np.random.default_rng(3).random((16, 16, 3))
    cfg = DegradationConfig((0.0, 0.0), ("bicubic",), (0.0, 0.0), 4)
    np.testing.assert_allclose(degrade(img, cfg, seed=5), resize_bicubic(img, 4, 4), atol=1e-12)


def test_degrade_deterministic_and_shape():
    img = np.random.default_rng(4).random((32, 24, 3))
    cfg = DegradationConfig()
    a = degrade(img, cfg, seed=11)
    np.testing.assert_array_equal(a, degrade(img, cfg, seed=11))
    assert a.shape == (8, 6, 3) and a.min() >= 0 and a.max() <= 1
    assert resize_bicubic(a, 32, 24).shape == img.shape
    with pytest.raises(ValueError):
        degrade(np.zeros((10, 8, 3)), cfg)


def test_degrade_noise_mean_monte_carlo():
    sigma = 0.02
    img = 0.3 + 0.4 * np.random.default_rng(5).random((32, 32, 3))
    cfg = DegradationConfig((0.0, 0.0), ("bicubic",), (sigma, sigma), 4)
    down = resize_bicubic(img, 8, 8)
    outs = np.stack([degrade(img, cfg, seed=s) for s in range(100)])
    n = outs.size
    assert abs(outs.mean() - down.mean()) < 3 * sigma / math.sqrt(n)


def test_crop_identity_both_modes():
    img = np.random.default_rng(6).random((64, 64, 3))
    for mode in ("direct_random_crop", "resize_then_crop"):
        np.testing.assert_array_equal(crop_training(img, CropPolicy(64, mode), 3), img)


def test_resize_then_crop_arithmetic(monkeypatch):
    seen = {}
    d = sys.modules["blockdiff.imaging.degrade"]

    real = d.resize

    def spy(img, h, w, kernel="bicubic", clip=True):
        seen["dims"] = (h, w)
        return real(img, h, w, kernel, clip)

    monkeypatch.setattr(d, "resize", spy)
    out = crop_training(np.zeros((64, 128, 3)), CropPolicy(32, "resize_then_crop"), 0)
    assert seen["dims"] == (32, 64) and out.shape == (32, 32, 3)


def test_crop_mode_frequency():
    rng = np.random.default_rng(7)
    modes = [choose_crop_mode(CropPolicy(), rng) for _ in range(10_000)]
    frac = modes.count("direct_random_crop") / len(modes)
    assert abs(frac - 0.5) < 0.02


def test_direct_crop_too_small():
    with pytest.raises(ValueError):
        crop_training(np.zeros((16, 40, 3)), CropPolicy(32, "direct_random_crop"), 0)
    with pytest.raises(ValueError):
        CropPolicy(32, "center")
    with pytest.raises(ValueError):
        DegradationConfig(blur_sigma_range=(2.0, 1.0))


# ---- metrics --------------------------------------------------------------

def test_psnr_one_level_offset():
    img = np.full((8, 8, 3), 100 / 255)
    assert psnr(img, img + 1 / 255) == pytest.approx(20 * math.log10(255), abs=1e-9)
    assert psnr(img, img) == math.inf
    with pytest.raises(ValueError):
        psnr(img, img[:4])


def test_ssim_identity_and_negative_checkerboard():
    img = np.random.default_rng(8).random((16, 16, 3))
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)
    checker = (np.indices((16, 16)).sum(0) % 2).astype(float)[..., None].repeat(3, -1)
    assert ssim(checker, 1 - checker) < 0


def _ssim_direct(a, b):
    """Brute-force windowed SSIM: explicit 11x11 Gaussian weights per window."""
    r = 5
    g = np.exp(-(np.arange(-r, r + 1) ** 2) / (2 * 1.5**2))
    w2 = np.outer(g, g)
    w2 /= w2.sum()
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for ch in range(a.shape[2]):
        for i in range(a.shape[0] - 2 * r):
            for j in range(a.shape[1] - 2 * r):
                pa = a[i : i + 11, j : j + 11, ch]
                pb = b[i : i + 11, j : j + 11, ch]
                ma, mb = (w2 * pa).sum(), (w2 * pb).sum()
                va = (w2 * pa * pa).sum() - ma * ma
                vb = (w2 * pb * pb).sum() - mb * mb
                cov = (w2 * pa * pb).sum() - ma * mb
                vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_ssim_matches_brute_force():
    rng = np.random.default_rng(9)
    a = rng.random((14, 13, 3))
    b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
    assert ssim(a, b) == pytest.approx(_ssim_direct(a, b), abs=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1000))
def test_metrics_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((12, 12, 3)), rng.random((12, 12, 3))
    assert psnr(a, b) == psnr(b, a)
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-9
