import numpy as np
import pytest
from scipy import stats

from sevnet.datapipe import (
    PIXEL_MEAN,
    PIXEL_STD,
    ClipPipeline,
    PipelineConfig,
    SyntheticMotionDataset,
    SyntheticSpec,
    VideoRecord,
    bilinear_resize,
    dense_clip_sample,
    dense_clip_starts,
    multiview_aggregate,
    normalize_pixels,
    plan_crop,
    segment_indices,
    segment_sample,
    spatial_transform,
    three_crop,
)


def _video(num_frames, h=64, w=80, value=0.5, label=0):
    frame = np.full((3, h, w), value, dtype=np.float32)
    return VideoRecord(num_frames=num_frames, frame=lambda i: frame,
                       label=label, identifier="v")


class TestSegmentSampling:
    def test_midpoints_160_frames(self):
        got = segment_indices(160, 16, "test")
        assert got == tuple(range(5, 160, 10))

    def test_one_frame_per_segment_when_equal(self):
        assert segment_indices(16, 16, "test") == tuple(range(16))

    def test_short_video_repeats_frames(self):
        idx = segment_indices(3, 16, "test")
        assert len(idx) == 16
        assert all(0 <= i < 3 for i in idx)
        assert list(idx) == sorted(idx)

    def test_closed_form_midpoint_rule(self):
        # midpoint of segment s = floor((s + 1/2) * n / segments)
        for n in (1, 2, 3, 7, 15, 16, 17, 31, 32, 45, 60, 64, 100, 128,
                  160, 161, 250, 999, 1000, 4096):
            got = segment_indices(n, 16, "test")
            want = tuple((2 * s + 1) * n // 32 for s in range(16))
            assert got == want
            assert all(0 <= i < n for i in got)

    def test_train_indices_stay_in_their_segments(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            idx = segment_indices(160, 16, "train", rng)
            for s, i in enumerate(idx):
                assert 10 * s <= i < 10 * (s + 1)

    def test_train_uniform_within_each_segment(self):
        rng = np.random.default_rng(1)
        draws = np.array([segment_indices(160, 16, "train", rng)
                          for _ in range(100_000)])
        for s in range(16):
            counts = np.bincount(draws[:, s] - 10 * s, minlength=10)
            p = stats.chisquare(counts).pvalue
            assert p > 0.01, f"segment {s}: p={p}"

    def test_zero_frames_rejected(self):
        with pytest.raises(ValueError):
            segment_indices(0, 16, "test")

    def test_sample_wraps_record(self):
        plan = segment_sample(_video(160), 16, "test")
        assert plan.frame_indices == tuple(range(5, 160, 10))


class TestDenseClipSampling:
    def test_in_clip_stride_is_four(self):
        plans = dense_clip_sample(_video(64), mode="test", num_clips=1)
        assert plans[0].frame_indices == tuple(range(0, 64, 4))

    def test_64_frame_video_all_test_clips_identical(self):
        plans = dense_clip_sample(_video(64), mode="test", num_clips=10)
        assert len(plans) == 10
        assert len({p.frame_indices for p in plans}) == 1

    def test_640_frame_video_starts_evenly_spaced(self):
        assert dense_clip_starts(640, 64, 10) == list(range(0, 577, 64))

    def test_starts_match_spacing_rule(self):
        for n in (64, 65, 100, 200, 640, 1000):
            starts = dense_clip_starts(n, 64, 10)
            want = [round(i * (n - 64) / 9) for i in range(10)]
            assert starts == want

    def test_short_video_wraps_indices(self):
        plans = dense_clip_sample(_video(10), mode="test", num_clips=2)
        for p in plans:
            assert len(p.frame_indices) == 16
            assert all(0 <= i < 10 for i in p.frame_indices)

    def test_train_start_is_valid(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            (plan,) = dense_clip_sample(_video(100), mode="train", rng=rng)
            assert 0 <= plan.frame_indices[0] <= 36


class TestSpatialTransform:
    def test_square_source_center_crop_is_whole_frame(self):
        frames = np.full((2, 3, 448, 448), 0.5)
        out = spatial_transform(frames, "test")
        assert out.shape == (3, 2, 224, 224)
        np.testing.assert_allclose(out, (0.5 - 0.45) / 0.225, atol=1e-9)

    def test_landscape_source_crops_center_columns(self):
        ramp = np.tile(np.arange(448.0), (224, 1))  # value = column index
        frames = np.stack([np.stack([ramp] * 3)] * 2)  # (2, 3, 224, 448)
        out = spatial_transform(frames, "test")
        want = (np.arange(112.0, 336.0) - PIXEL_MEAN[0]) / PIXEL_STD[0]
        np.testing.assert_allclose(out[0, 0, 0, :], want, atol=1e-9)

    def test_train_crop_offsets_uniform(self):
        rng = np.random.default_rng(3)
        tops = np.empty(10_000, dtype=int)
        lefts = np.empty(10_000, dtype=int)
        for i in range(10_000):
            tops[i], lefts[i] = plan_crop(256, 320, 224, "train", rng)
        p_top = stats.chisquare(np.bincount(tops, minlength=33)).pvalue
        p_left = stats.chisquare(np.bincount(lefts, minlength=97)).pvalue
        assert p_top > 0.01 and p_left > 0.01

    def test_train_resize_target_in_range(self):
        rng = np.random.default_rng(4)
        frames = np.full((1, 3, 230, 300), 0.5)
        out = spatial_transform(frames, "train", rng)
        assert out.shape == (3, 1, 224, 224)

    def test_bilinear_resize_constant_preserved(self):
        arr = np.full((3, 50, 70), 0.37)
        out = bilinear_resize(arr, 224, 224)
        np.testing.assert_allclose(out, 0.37, atol=1e-12)

    def test_bilinear_downscale_exact_2x_average(self):
        arr = np.arange(16.0).reshape(1, 4, 4)
        out = bilinear_resize(arr, 2, 2)
        want = np.array([[[2.5, 4.5], [10.5, 12.5]]])
        np.testing.assert_allclose(out, want)


class TestThreeCrop:
    def test_landscape_offsets(self):
        ramp = np.tile(np.arange(448.0), (224, 1))
        frames = np.stack([np.stack([ramp] * 3)])
        views = three_crop(frames)
        for view, offset in zip(views, (0, 112, 224)):
            want = (np.arange(offset, offset + 224.0) - 0.45) / 0.225
            np.testing.assert_allclose(view[0, 0, 0, :], want, atol=1e-9)

    def test_square_frame_three_identical_crops(self):
        rng = np.random.default_rng(5)
        frames = rng.random((2, 3, 224, 224))
        a, b, c = three_crop(frames)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(b, c)

    def test_portrait_crops_move_down(self):
        ramp = np.tile(np.arange(448.0).reshape(-1, 1), (1, 224))
        frames = np.stack([np.stack([ramp] * 3)])
        views = three_crop(frames)
        for view, offset in zip(views, (0, 112, 224)):
            want = (np.arange(offset, offset + 224.0) - 0.45) / 0.225
            np.testing.assert_allclose(view[0, 0, :, 0], want, atol=1e-9)

    def test_constant_image_constant_crops(self):
        frames = np.full((1, 3, 224, 300), 0.9)
        for view in three_crop(frames):
            np.testing.assert_allclose(view, (0.9 - 0.45) / 0.225, atol=1e-9)


class TestAggregation:
    def test_identical_views_unchanged(self):
        v = np.array([0.2, 0.5, 0.3])
        np.testing.assert_allclose(multiview_aggregate([v, v, v]), v)

    def test_two_disagreeing_one_hot_views(self):
        got = multiview_aggregate([np.array([1.0, 0.0]), np.array([0.0, 1.0])])
        np.testing.assert_allclose(got, [0.5, 0.5])

    def test_matches_brute_force_mean_over_30_views(self):
        rng = np.random.default_rng(6)
        views = [rng.random(12) for _ in range(30)]
        want = sum(views) / 30  # brute-force accumulation
        np.testing.assert_allclose(multiview_aggregate(views), want, atol=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            multiview_aggregate([])


class TestSyntheticDataset:
    SPEC = SyntheticSpec(num_classes=8, clip_frames=8, height=48, width=56,
                         train_count=16, eval_count=8, seed=9)

    def test_bitwise_deterministic(self):
        ds1 = SyntheticMotionDataset(self.SPEC)
        ds2 = SyntheticMotionDataset(self.SPEC)
        a = ds1.render_clip("train", 3)
        b = ds2.render_clip("train", 3)
        assert a.tobytes() == b.tobytes()

    def test_splits_draw_different_streams(self):
        ds = SyntheticMotionDataset(self.SPEC)
        assert (ds.render_clip("train", 0).tobytes()
                != ds.render_clip("eval", 0).tobytes())

    def test_class_histogram_exactly_balanced(self):
        ds = SyntheticMotionDataset(self.SPEC)
        labels = [ds.record("train", i).label for i in range(16)]
        counts = np.bincount(labels, minlength=8)
        assert (counts == 2).all()

    def test_frames_are_unit_range_finite(self):
        ds = SyntheticMotionDataset(self.SPEC)
        clip = ds.render_clip("eval", 1)
        assert clip.shape == (8, 3, 48, 56)
        assert np.all(np.isfinite(clip))
        assert clip.min() >= 0.0 and clip.max() <= 1.0

    def test_out_of_range_index_rejected(self):
        ds = SyntheticMotionDataset(self.SPEC)
        with pytest.raises(IndexError):
            ds.record("train", 16)

    def test_blob_actually_moves(self):
        ds = SyntheticMotionDataset(self.SPEC)
        clip = ds.render_clip("train", 1)
        assert np.abs(clip[0] - clip[-1]).max() > 0.1

    def test_manifest_covers_all_splits(self):
        ds = SyntheticMotionDataset(self.SPEC)
        rows = ds.manifest_rows()
        assert len(rows) == 16 + 8
        assert rows[0] == ("train", 0, 0, 9)


class TestPipeline:
    def test_emitted_tensor_contract(self):
        spec = SyntheticSpec(num_classes=4, clip_frames=8, height=240,
                             width=300, train_count=4, eval_count=0, seed=1)
        ds = SyntheticMotionDataset(spec)
        pipe = ClipPipeline(PipelineConfig(sampler="segment", frames=16))
        video = ds.record("train", 0)
        clip = pipe.train_clip(video, np.random.default_rng(0))
        assert clip.shape == (3, 16, 224, 224)
        assert np.all(np.isfinite(clip))
        (view,) = pipe.test_views(video)
        assert view.shape == (3, 16, 224, 224)

    def test_dense_clip_pipeline_yields_30_views(self):
        spec = SyntheticSpec(num_classes=4, clip_frames=80, height=48,
                             width=64, train_count=2, eval_count=0, seed=2)
        ds = SyntheticMotionDataset(spec)
        pipe = ClipPipeline(PipelineConfig(sampler="dense_clip", frames=4,
                                           crop_size=32, clip_len=16,
                                           test_clips=10))
        views = pipe.test_views(ds.record("train", 0))
        assert len(views) == 30
        assert all(v.shape == (3, 4, 32, 32) for v in views)

    def test_normalization_constants_applied(self):
        clip = np.full((2, 3, 64, 64), 0.45)
        out = normalize_pixels(clip.transpose(1, 0, 2, 3))
        np.testing.assert_allclose(out, 0.0, atol=1e-12)
