import io
import json
import math

import numpy as np
import pytest
from PIL import Image

import support
from efdr import autodiff as ad
from efdr import dataset, pipeline
from efdr import transforms as tf
from efdr.autodiff import Tensor
from efdr.jpeg_codec import JpegFile, make_quant_tables, parse, read_jpeg, serialize
from efdr.network import EfdrModel, NetConfig
from efdr.pipeline import (TrainConfig, hide, hiding_loss, reveal, reveal_subbands,
                           revealing_loss, subbands_to_rgb)
from efdr.gradcheck import rel_error

SMALL = NetConfig(num_submodules=2, heads=2, dim_heads=16, dim_mlp=32, blocks_per_branch=1)
IDENTITY = NetConfig(num_submodules=2, heads=2, dim_heads=16, dim_mlp=32, blocks_per_branch=1,
                     enhance_init="identity")


def cover_file(rng, h=32, w=32, qf=75):
    rgb = rng.integers(0, 256, (3, h, w)).astype(float)
    return dataset.encode_cover(rgb, qf)


def perturbed(cfg, seed=0, std=0.02):
    model = EfdrModel(cfg, seed=seed)
    r = np.random.default_rng(seed)
    for name, p in model.named_parameters():
        if not name.endswith("weight"):
            p.data = (p.data + r.normal(0, std, p.shape)).astype(p.data.dtype)
            p.version += 1
    return model


# ---------------------------------------------------------------- hide / reveal

def test_identity_model_hide_is_coefficient_identical(rng):
    cover = cover_file(rng)
    secret = rng.integers(0, 256, (3, 32, 32))
    model = EfdrModel(IDENTITY)
    model.set_normalization(np.full(192, 37.0), np.full(192, 5.0))
    res = hide(cover, secret, model)
    np.testing.assert_array_equal(res.stego_jpeg.coefficients.blocks, cover.coefficients.blocks)
    again = parse(serialize(res.stego_jpeg))
    np.testing.assert_array_equal(again.coefficients.blocks, cover.coefficients.blocks)
    assert res.postquant_psnr == "identical"


def test_hide_preserves_tables_and_structure(rng):
    cover = cover_file(rng, 24, 40, qf=90)
    res = hide(cover, rng.integers(0, 256, (3, 24, 40)), perturbed(SMALL))
    out = parse(serialize(res.stego_jpeg))
    assert (out.width, out.height) == (cover.width, cover.height)
    for k in cover.quant_tables:
        np.testing.assert_array_equal(out.quant_tables[k], cover.quant_tables[k])
    assert [c.id for c in out.components] == [c.id for c in cover.components]
    assert res.r_f.shape == (192, 3, 5)
    b = out.coefficients.blocks
    assert b.dtype == np.int32 and b[..., 0, 0].min() >= -1024 and np.abs(b).max() <= 1024


def test_hide_size_mismatch(rng):
    with pytest.raises(ValueError):
        hide(cover_file(rng), np.zeros((3, 32, 24)), EfdrModel(SMALL))


def test_reveal_identity_model_gives_gray(rng):
    cover = cover_file(rng)
    res = hide(cover, rng.integers(0, 256, (3, 32, 32)), EfdrModel(IDENTITY))
    out = reveal(res.stego_jpeg, EfdrModel(IDENTITY))
    np.testing.assert_allclose(out, 128.0, atol=1e-6)
    c_rec, s_rec = reveal_subbands(res.stego_jpeg, EfdrModel(IDENTITY))
    np.testing.assert_array_equal(c_rec, tf.coefficients_to_subbands(cover.coefficients))
    assert not s_rec.any()


def test_reveal_deterministic(rng):
    model = perturbed(SMALL, 4)
    res = hide(cover_file(rng), rng.integers(0, 256, (3, 32, 32)), model)
    a = reveal(res.stego_jpeg, model)
    b = reveal(parse(serialize(res.stego_jpeg)), model)
    np.testing.assert_array_equal(a, b)


def test_perfect_information_roundtrip(rng):
    # aux = true r_f recovers the secret sub-bands before rounding
    from efdr.network import model_forward, model_inverse
    model = perturbed(SMALL, 6)
    cover = cover_file(rng)
    secret = rng.integers(0, 256, (3, 32, 32)).astype(float)
    st, rf = model_forward(model, tf.coefficients_to_subbands(cover.coefficients),
                           tf.secret_to_subbands(secret))
    _, s_rec = model_inverse(model, st, rf)
    assert np.abs(s_rec - tf.secret_to_subbands(secret)).max() < 1e-3


# ---------------------------------------------------------------- losses

def naive_decode(subbands, steps):
    """Independent pixel decode: explicit cosine sums and the JFIF color equations."""
    k, bh, bw = subbands.shape
    ycc = np.zeros((3, bh * 8, bw * 8))
    cos = [[math.cos((2 * x + 1) * u * math.pi / 16) for u in range(8)] for x in range(8)]
    c = [math.sqrt(1 / 8)] + [math.sqrt(2 / 8)] * 7
    for ch in range(3):
        for by in range(bh):
            for bx in range(bw):
                coef = np.array([[subbands[ch * 64 + u * 8 + v, by, bx] * steps[ch, u, v]
                                  for v in range(8)] for u in range(8)])
                for x in range(8):
                    for y in range(8):
                        s = sum(c[u] * c[v] * coef[u, v] * cos[x][u] * cos[y][v]
                                for u in range(8) for v in range(8))
                        ycc[ch, by * 8 + x, bx * 8 + y] = s + 128
    y, cb, cr = ycc[0], ycc[1] - 128, ycc[2] - 128
    return np.stack([y + 1.402 * cr, y - 0.344136 * cb - 0.714136 * cr, y + 1.772 * cb])


def test_hiding_loss_two_block_oracle(rng):
    steps = np.stack(make_quant_tables(75)[:1] * 3).astype(float)
    a = rng.integers(-20, 20, (192, 1, 2)).astype(float)
    b = a + rng.integers(-3, 4, a.shape)
    got = float(hiding_loss(a[None], b[None], steps[None]).data)
    expect = float(np.mean((naive_decode(a, steps) - naive_decode(b, steps)) ** 2))
    assert got == pytest.approx(expect, rel=1e-5)


def test_subbands_to_rgb_matches_naive_decode(rng):
    steps = np.stack([make_quant_tables(60)[0], *[make_quant_tables(60)[1]] * 2]).astype(float)
    x = rng.integers(-10, 10, (192, 1, 1)).astype(float)
    got = subbands_to_rgb(x[None], steps[None]).data[0]
    np.testing.assert_allclose(got, naive_decode(x, steps), atol=1e-3)
    np.testing.assert_allclose(subbands_to_rgb(np.zeros((1, 192, 1, 1))).data, 128.0)


def test_hiding_loss_basic(rng):
    steps = np.ones((1, 3, 8, 8))
    a = rng.normal(size=(1, 192, 2, 2))
    assert float(hiding_loss(a, a, steps).data) == 0.0
    b = a + rng.normal(size=a.shape)
    assert float(hiding_loss(a, b, steps).data) == pytest.approx(float(hiding_loss(b, a, steps).data))
    with pytest.raises(ValueError):
        hiding_loss(a, a[..., :1], steps)


def test_revealing_loss_examples(rng):
    s = rng.uniform(0, 245, (2, 3, 8, 8))
    assert float(revealing_loss(s, s).data) == 0.0
    assert float(revealing_loss(s + 10, s).data) == pytest.approx(100.0)
    t = rng.uniform(0, 255, s.shape)
    assert float(revealing_loss(t, s).data) == pytest.approx(np.mean((t - s) ** 2))
    with pytest.raises(ValueError):
        revealing_loss(s, s[:1])


def test_decode_linear_map_adjoint(rng):
    # <A x, g> == <x, A^T g> for the fixed decode operator
    steps = rng.integers(1, 30, (2, 3, 8, 8)).astype(float)
    x = rng.normal(size=(2, 192, 2, 3))
    g = rng.normal(size=(2, 3, 16, 24))
    lhs = np.sum(pipeline._decode_linear(x, steps) * g)
    rhs = np.sum(x * pipeline._decode_adjoint(g, steps))
    assert lhs == pytest.approx(rhs, rel=1e-10)


def test_total_loss_zero_at_identity(rng):
    model = EfdrModel(IDENTITY, dtype=np.float64)
    cover = cover_file(rng)
    c = tf.coefficients_to_subbands(cover.coefficients)[None].astype(float)
    secret = rng.uniform(0, 255, (1, 3, 32, 32))
    loss, l_hi, l_re = pipeline.total_loss(model, c, tf.secret_to_subbands(secret), secret,
                                           cover.coefficients.quant_steps[None])
    assert float(l_hi.data) == 0.0
    assert float(l_re.data) == pytest.approx(np.mean((secret - 128) ** 2), rel=1e-9)


def test_total_loss_gradient_reaches_all_parameters(rng):
    model = perturbed(SMALL, 1)
    cover = cover_file(rng, 16, 16)
    c = tf.coefficients_to_subbands(cover.coefficients)[None]
    secret = rng.uniform(0, 255, (1, 3, 16, 16))
    loss, _, _ = pipeline.total_loss(model, c, tf.secret_to_subbands(secret), secret,
                                     cover.coefficients.quant_steps[None])
    loss.backward()
    missing = [n for n, p in model.named_parameters() if p.grad is None or not np.any(p.grad)]
    assert not missing


# ---------------------------------------------------------------- dataset

def test_center_crop_window():
    img = np.zeros((3, 256, 256), np.uint8)
    img[:, 64:192, 64:192] = 1
    out = dataset.center_crop(img, 128)
    assert out.shape == (3, 128, 128) and np.all(out == 1)


def test_prepare_dataset(tmp_path, rng, ref_decoder):
    src = tmp_path / "src"
    src.mkdir()
    for i in range(3):
        Image.fromarray(rng.integers(0, 256, (80, 72, 3), dtype=np.uint8)).save(src / f"im{i}.png")
    Image.fromarray(np.zeros((40, 40, 3), np.uint8)).save(src / "small.png")
    (src / "broken.png").write_bytes(b"not an image")
    summary = dataset.prepare_dataset(src, tmp_path / "out", qf=80, crop=64)
    assert summary.written == 3 and summary.skipped == 2
    pairs = dataset.read_manifest(tmp_path / "out")
    assert len(pairs) == 3 and all(c.exists() and s.exists() for c, s in pairs)
    luma, chroma = make_quant_tables(80)
    for name, jf in dataset.load_covers(tmp_path / "out" / "covers"):
        np.testing.assert_array_equal(jf.quant_tables[0], luma)
        np.testing.assert_array_equal(jf.quant_tables[1], chroma)
        blocks, _ = support.reference_coefficients(ref_decoder, (tmp_path / "out" / "covers" / f"{name}.jpg").read_bytes())
        np.testing.assert_array_equal(blocks, jf.coefficients.blocks)


def _pixel_gaps(qf=75):
    gaps = []
    for tile in support.natural_tiles(64, 8):
        jf = dataset.encode_cover(tile.transpose(2, 0, 1).astype(float), qf)
        theirs = np.asarray(Image.open(io.BytesIO(serialize(jf))).convert("RGB")).transpose(2, 0, 1)
        gaps.append(np.abs(tf.decode_rgb(jf.coefficients).astype(int) - theirs.astype(int)).ravel())
    return np.concatenate(gaps)


def test_prepared_cover_decode_close_to_reference_decoder():
    # libjpeg rounds YCbCr samples to 8 bits before color conversion; chroma
    # gains up to 1.772 turn that into occasional 2-level RGB gaps
    gaps = _pixel_gaps()
    assert gaps.max() <= 2
    assert np.mean(gaps <= 1) >= 0.99


@pytest.mark.xfail(strict=True, reason="8-bit intermediate samples in libjpeg give rare 2-level gaps")
def test_prepared_cover_decode_within_one_level_everywhere():
    assert _pixel_gaps().max() <= 1


def test_prepare_rejects_bad_arguments(tmp_path):
    with pytest.raises(ValueError):
        dataset.prepare_dataset(tmp_path, tmp_path / "o", qf=0)
    with pytest.raises(ValueError):
        dataset.prepare_dataset(tmp_path, tmp_path / "o", qf=75, crop=60)


# ---------------------------------------------------------------- training

@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    support.make_source_dir(root / "src", 16, 6, seed=3)
    dataset.prepare_dataset(root / "src", root / "prep", qf=75, crop=16)
    return root / "prep"


def tiny_config(**kw):
    base = dict(epochs=2, batch_size=4, seed=7, checkpoint_every=1, net=SMALL, val_fraction=0.2)
    base.update(kw)
    return TrainConfig(**base)


def test_training_lr_zero_is_noop(tiny_data, tmp_path):
    model = EfdrModel(SMALL, seed=7)
    before = {k: v.copy() for k, v in model.state_dict().items()}
    cfg = tiny_config(lr=0.0, weight_decay=0.0, epochs=1)
    model, records = pipeline.train(cfg, tiny_data / "covers", tiny_data / "secrets", tmp_path, model=model)
    for k, v in model.state_dict().items():
        np.testing.assert_array_equal(v, before[k])
    assert len(records) == 1 and records[0]["l_total"] > 0


def test_training_deterministic_and_logged(tiny_data, tmp_path):
    cfg = tiny_config()
    pipeline.train(cfg, tiny_data / "covers", tiny_data / "secrets", tmp_path / "a")
    pipeline.train(cfg, tiny_data / "covers", tiny_data / "secrets", tmp_path / "b")
    log_a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    assert log_a == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    recs = [json.loads(line) for line in log_a.decode().splitlines()]
    assert [r["epoch"] for r in recs] == [1, 2]
    assert set(recs[0]) >= {"epoch", "l_hi", "l_re", "l_total", "lr"}
    assert (tmp_path / "a" / "model.ckpt").exists() and (tmp_path / "a" / "last.ckpt").exists()
    timings = (tmp_path / "a" / "timings.jsonl").read_text().splitlines()
    assert "wall_ms" in json.loads(timings[0])


def test_training_rejects_bad_data(tmp_path, tiny_data):
    (tmp_path / "empty").mkdir()
    with pytest.raises(ValueError):
        pipeline.train(tiny_config(), tmp_path / "empty", tmp_path / "empty", tmp_path / "o")
    odd = tmp_path / "odd"
    odd.mkdir()
    for p in (tiny_data / "covers").glob("*.jpg"):
        (odd / p.name).write_bytes(p.read_bytes())
    Image.fromarray(np.zeros((24, 24, 3), np.uint8)).save(tmp_path / "z.png")
    big = dataset.encode_cover(np.zeros((3, 24, 24)), 75)
    (odd / "big.jpg").write_bytes(serialize(big))
    with pytest.raises(ValueError):
        pipeline.train(tiny_config(), odd, tiny_data / "secrets", tmp_path / "o")


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(qf=0)
    with pytest.raises(ValueError):
        TrainConfig(plateau_factor=0)
    assert TrainConfig(batch_size=4).pairs_per_step == 2
    d = TrainConfig(net=SMALL).to_dict()
    assert TrainConfig(**d).net == SMALL
