import math

import numpy as np
import pytest

import spongelab as sl


def test_video_shape_and_range():
    v = sl.gen_video(3, "YES", "A")
    assert v.shape == (8, 32, 32, 3)
    assert v.min() >= 0.0 and v.max() <= 1.0
    assert np.array_equal(v, sl.gen_video(3, "YES", "A"))


def test_bad_label_raises_value_error():
    with pytest.raises(ValueError):
        sl.gen_video(1, "MAYBE")


def test_generation_limits_and_determinism():
    model = sl.Model.init(5)
    video = sl.gen_video(1)
    tokens = model.generate(video, max_new_tokens=6)
    assert 1 <= len(tokens) <= 6
    assert tokens == model.generate(video, max_new_tokens=6)
    assert len(model.generate(video, max_new_tokens=1)) == 1


def test_patch_application_and_training():
    model = sl.Model.init(2)
    videos = [sl.gen_video(s, "YES" if s % 2 else "NO") for s in range(4)]
    patch, losses = sl.train_patch(model, videos, epochs=2, size=4, seed=1)
    assert patch.shape == (4, 4, 3)
    assert len(losses) == 2 and all(math.isfinite(x) for x in losses)
    out = sl.apply_patch(videos[0], patch, 28, 28)
    assert np.array_equal(out[:, 28:, 28:, :], np.broadcast_to(patch, (8, 4, 4, 3)))


def test_latency_recurrence_and_safety():
    assert sl.cum_latency([1.0, 1.0, 1.0], 0.5) == pytest.approx([1.0, 1.5, 2.0])
    cum = sl.cum_latency([1.33] * 10, 0.5)
    assert sl.first_violation(cum) == 3
    assert sl.first_violation([0.07] * 10) is None


def test_gradcheck_passes():
    passed, err = sl.gradcheck(7)
    assert passed and err <= 1e-4
