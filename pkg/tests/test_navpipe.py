import logging

import numpy as np
import pytest

from navprune.errors import ConfigurationError
from navprune.navpipe import (CAMERA_ERROR_CUE, Direction, MIRRORED, NavConfig,
                              PartitionConfidence, VoteWindow, decide_direction,
                              emit_cue, extract_walkable, partition_confidence,
                              partition_widths, run_pipeline, vote)

L, SL, ST, SR, R, STOP = (Direction.LEFT, Direction.SLIGHT_LEFT, Direction.STRAIGHT,
                          Direction.SLIGHT_RIGHT, Direction.RIGHT, Direction.STOP)


def grid(rows):
    return np.array(rows, dtype=np.int32)


class TestExtractWalkable:
    def test_no_walkable_pixels(self):
        out = extract_walkable(np.zeros((8, 8), dtype=np.int32), {2, 3})
        assert out.dtype == np.uint8
        assert not out.any()

    def test_largest_component_survives(self):
        mask = np.zeros((8, 8), dtype=np.int32)
        mask[0:3, 0:4] = 2          # 12 pixels
        mask[6:7, 2:7] = 3          # 5 pixels, disjoint
        out = extract_walkable(mask, {2, 3})
        assert (out == 255).sum() == 12
        assert out[1, 1] == 255 and out[6, 3] == 0

    def test_full_frame(self):
        out = extract_walkable(np.full((5, 6), 2, dtype=np.int32), {2})
        assert (out == 255).all()

    def test_diagonal_pixels_are_separate_components(self):
        mask = np.zeros((4, 4), dtype=np.int32)
        mask[0, 0] = 2
        mask[1, 1] = 2
        mask[2:4, 2:4] = 2
        out = extract_walkable(mask, {2})
        assert (out == 255).sum() == 4  # only the 2x2 block

    def test_single_component_property(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            mask = (rng.random((12, 12)) < 0.4).astype(np.int32) * 2
            out = extract_walkable(mask, {2})
            relabeled = extract_walkable((out == 255).astype(np.int32), {1})
            assert (relabeled == out).all()  # already one component


class TestPartitionConfidence:
    def test_all_walkable(self):
        conf = partition_confidence(np.full((4, 9), 255, dtype=np.uint8))
        assert conf.as_tuple() == (1.0, 1.0, 1.0)

    def test_left_third_only(self):
        mask = np.zeros((4, 9), dtype=np.uint8)
        mask[:, 0:3] = 255
        assert partition_confidence(mask).as_tuple() == (1.0, 0.0, 0.0)

    def test_six_wide_two_column_strip(self):
        mask = np.zeros((3, 6), dtype=np.uint8)
        mask[:, 0:2] = 255
        assert partition_confidence(mask).as_tuple() == (1.0, 0.0, 0.0)

    def test_widths_symmetric_for_any_remainder(self):
        for w in range(3, 40):
            left, center, right = partition_widths(w)
            assert left == right
            assert left + center + right == w

    def test_too_narrow(self):
        with pytest.raises(ConfigurationError):
            partition_confidence(np.zeros((2, 2), dtype=np.uint8))


class TestDecideDirection:
    def test_all_below_threshold_stops(self):
        assert decide_direction(PartitionConfidence(0, 0, 0), 0.4) is STOP

    def test_hard_left(self):
        assert decide_direction(PartitionConfidence(1.0, 0.0, 0.0), 0.4) is L

    def test_slight_left_when_center_also_walkable(self):
        assert decide_direction(PartitionConfidence(0.6, 0.5, 0.2), 0.4) is SL

    def test_center_max_goes_straight(self):
        assert decide_direction(PartitionConfidence(0.5, 0.9, 0.5), 0.4) is ST

    def test_right_side(self):
        assert decide_direction(PartitionConfidence(0.0, 0.0, 1.0), 0.4) is R
        assert decide_direction(PartitionConfidence(0.2, 0.5, 0.6), 0.4) is SR

    def test_side_tie_is_fork(self):
        assert decide_direction(PartitionConfidence(0.5, 0.45, 0.5), 0.4) is ST
        assert decide_direction(PartitionConfidence(0.5, 0.1, 0.5), 0.4) is STOP

    def test_total_on_random_triples(self):
        rng = np.random.default_rng(1)
        for _ in range(500):
            conf = PartitionConfidence(*rng.random(3))
            assert decide_direction(conf, 0.4) in Direction

    def test_threshold_validated(self):
        with pytest.raises(ConfigurationError):
            decide_direction(PartitionConfidence(0, 0, 0), 1.5)

    def test_mirror_symmetry_on_random_masks(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            mask = (rng.random((16, 16)) < rng.uniform(0.1, 0.9)).astype(np.uint8) * 255
            d = decide_direction(partition_confidence(mask), 0.4)
            d_flipped = decide_direction(partition_confidence(mask[:, ::-1]), 0.4)
            assert d_flipped is MIRRORED[d]


class TestVoteWindow:
    def test_majority_count(self):
        win = VoteWindow(5)
        outcomes = [win.push(d) for d in (L, L, R, L, STOP)]
        assert outcomes[-1] is L

    def test_window_of_one_echoes_input(self):
        win = VoteWindow(1)
        assert win.push(L) is L
        assert win.push(R) is R

    def test_tie_breaks_to_most_recent(self):
        win = VoteWindow(4)
        for d in (L, L, R, R):
            out = win.push(d)
        assert out is R

    def test_functional_wrapper(self):
        win = VoteWindow(3)
        win2, out = vote(win, SL)
        assert win2 is win and out is SL

    def test_constant_stream_converges_and_stays(self):
        for w in (1, 2, 3, 4, 5, 8):
            win = VoteWindow(w)
            for _ in range(w):  # fill with noise alternating
                win.push(R if _ % 2 else STOP)
            needed = -(-w // 2)  # ceil(w/2)
            result = None
            for i in range(w):
                result = win.push(L)
                if i + 1 == needed:
                    break
            assert result is L
            for _ in range(3 * w):
                assert win.push(L) is L

    def test_size_validated(self):
        with pytest.raises(ConfigurationError):
            VoteWindow(0)


class TestEmitCue:
    def test_token_mapping(self):
        assert emit_cue(STOP) == "Stop"
        assert emit_cue(SR) == "Slight Right"
        assert emit_cue(SL) == "Slight Left"
        assert emit_cue(L) == "Left"
        assert emit_cue(R) == "Right"

    def test_straight_is_silent(self):
        assert emit_cue(ST) is None


def left_mask(width=12):
    mask = np.zeros((64, 64), dtype=np.int32)
    mask[:, 2:2 + width] = 2
    return mask


class TestPipeline:
    def test_steady_left_majority_within_window(self):
        frames = [left_mask() for _ in range(10)]
        results = list(run_pipeline(frames, None, NavConfig()))
        assert len(results) == 10
        assert all(r.majority is L for r in results[2:])
        assert results[4].cue == "Left"

    def test_failed_frame_emits_camera_error_and_continues(self):
        frames = [left_mask(), left_mask(), left_mask(), None, left_mask()]
        results = list(run_pipeline(frames, None, NavConfig()))
        assert results[3].failed
        assert results[3].cue == CAMERA_ERROR_CUE
        assert len(results) == 5
        assert results[4].majority is L

    def test_empty_source_yields_empty_stream(self):
        assert list(run_pipeline([], None, NavConfig())) == []

    def test_hook_receives_cues_and_failures_never_raise(self, caplog):
        seen = []
        def hook(cue):
            seen.append(cue)
            raise RuntimeError("speaker unplugged")
        frames = [left_mask(), None]
        with caplog.at_level(logging.WARNING, logger="navprune.navpipe"):
            results = list(run_pipeline(frames, None, NavConfig(cue_hook=hook)))
        assert seen == ["Left", CAMERA_ERROR_CUE]
        assert len(results) == 2
        assert any("cue hook failed" in rec.message for rec in caplog.records)

    def test_segmenter_applied_to_frames(self):
        # identity segmenter: frames already are masks
        frames = [left_mask()]
        results = list(run_pipeline(frames, lambda f: f, NavConfig(window=1)))
        assert results[0].majority is L

    def test_log_line_format(self):
        frames = [left_mask(), None]
        results = list(run_pipeline(frames, None, NavConfig(window=1)))
        fields = results[0].log_line().split("\t")
        assert fields[0] == "0"
        assert len(fields[1].split(",")) == 3
        assert fields[2] == "Left"
        assert fields[3] == "Left"
        assert results[1].log_line().split("\t") == ["1", "-", "-", CAMERA_ERROR_CUE]
