import numpy as np
import pytest

from himosa.config import ModelConfig, TrainConfig, dump_config
from himosa.data import ImageBuffer, bicubic_downsample, quantize, save_image

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def synth_hr(size: int = 64, seed: int = 0) -> ImageBuffer:
    """Smooth sum-of-sinusoids RGB image, values kept inside [0.1, 0.9]."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    rng = np.random.default_rng(seed)
    img = np.zeros((size, size, 3))
    for c in range(3):
        for _ in range(4):
            fx, fy = rng.uniform(0.5, 3, 2)
            ph = rng.uniform(0, 6.28)
            img[..., c] += np.sin(2 * np.pi * (fx * xx + fy * yy) + ph)
    img = (img - img.min()) / (img.max() - img.min())
    return ImageBuffer.from_array(quantize(0.1 + 0.8 * img))


SMOKE_MODEL = ModelConfig(n_blocks=1, n_layers=2, channels=8, base_window=2, ratios=(1, 2), sparsity=(1, 2),
                          n_experts=2, scale=2, cab_reduction=2, cab_compress=2)
SMOKE_TRAIN = TrainConfig(total_iters=6, warmup_iters=2, base_lr=1e-3, decay_points=(4,), batch_size=2,
                          patch=8, seed=3, checkpoint_every=3)


@pytest.fixture
def smoke_config(tmp_path):
    path = tmp_path / "smoke.cfg"
    path.write_text(dump_config(SMOKE_MODEL, SMOKE_TRAIN))
    return path


@pytest.fixture
def dataset(tmp_path):
    """Two HR images (one with a precomputed LR) and a manifest listing them."""
    d = tmp_path / "data"
    d.mkdir()
    hr0, hr1 = synth_hr(16, 0), synth_hr(20, 1)
    save_image(hr0, d / "a.png")
    save_image(hr1, d / "b.ppm")
    save_image(bicubic_downsample(hr1, 2), d / "b_lr.png")
    manifest = d / "train.txt"
    manifest.write_text("# hr\tlr\na.png\nb.ppm\tb_lr.png\n")
    return manifest
