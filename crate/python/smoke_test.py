import math
import os
import tempfile

import pgh2net


def main():
    clean, hazy = pgh2net.synthesize(7, 32)
    assert clean.shape == (1, 3, 32, 32) and hazy.shape == clean.shape
    assert hazy.mean() > clean.mean() - 0.05

    dark = pgh2net.dark_channel(hazy)
    bright = pgh2net.bright_channel(hazy, 5)
    assert dark.shape == (1, 1, 32, 32)
    assert all(d <= b for d, b in zip(dark.tolist(), bright.tolist()))

    remapped, before, after = pgh2net.equalize(hazy.tolist()[: 32 * 32], 64)
    assert len(remapped) == 32 * 32 and max(remapped) == 63
    assert math.isclose(sum(before), 1.0) and math.isclose(sum(after), 1.0)

    re, im = pgh2net.fft2d([1.0] + [0.0] * 15, 4, 4)
    assert all(math.isclose(v, 1.0) for v in re) and all(v == 0.0 for v in im)

    assert pgh2net.psnr(clean, clean) == 100.0
    assert math.isclose(pgh2net.ssim(clean, clean), 1.0)

    model = pgh2net.Model.build("base_width = 4\nenc_blocks = 1,1,1\ndec_blocks = 1,1", 0)
    out = model.dehaze(hazy)
    assert out.max_abs_diff(hazy) == 0.0
    assert [t.shape[2] for t in model.forward(hazy)] == [32, 16, 8]

    trainer = pgh2net.Trainer(
        "base_width = 4\nenc_blocks = 1,1,1\ndec_blocks = 1,1\nbatch = 2\n"
        "num_pairs = 4\nimage_size = 24\npatch_size = 16\ntotal_iters = 3\nseed = 1"
    )
    losses = trainer.run()
    assert len(losses) == 3 and all(math.isfinite(x) for x in losses)
    assert trainer.iteration == 3

    with tempfile.TemporaryDirectory() as d:
        path = trainer.save(d)
        back = pgh2net.Model.load(path)
        assert back.param_count == trainer.model().param_count
        img = os.path.join(d, "x.ppm")
        pgh2net.save_ppm(clean, img)
        assert pgh2net.load_ppm(img).max_abs_diff(clean) <= 0.5 / 255 + 1e-12
        try:
            pgh2net.load_ppm(os.path.join(d, "missing.ppm"))
        except OSError:
            pass
        else:
            raise AssertionError("missing file should raise")

    try:
        pgh2net.Tensor((1, 1, 2, 2), [0.0])
    except ValueError:
        pass
    else:
        raise AssertionError("bad tensor should raise")

    print(f"ok: {model.param_count} params, train psnr {trainer.train_psnr():.2f} dB")


if __name__ == "__main__":
    main()
