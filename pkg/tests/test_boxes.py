import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phrasebox.boxes import anchor_grid, decode_boxes, encode_boxes, iou_matrix


class TestAnchorGrid:
    def test_tiles_image_exactly(self):
        anchors = anchor_grid(64, 8)
        assert anchors.shape == (64, 4)
        areas = (anchors[:, 2] - anchors[:, 0]) * (anchors[:, 3] - anchors[:, 1])
        assert areas.sum() == 64 * 64
        ious = iou_matrix(anchors, anchors)
        off_diag = ious - np.diag(np.diag(ious))
        assert off_diag.max() == 0.0  # disjoint cells

    def test_boxes_within_image_and_ordered(self):
        anchors = anchor_grid(64, 8)
        assert (anchors[:, 0] < anchors[:, 2]).all()
        assert (anchors[:, 1] < anchors[:, 3]).all()
        assert anchors.min() >= 0 and anchors.max() <= 64


class TestIoU:
    def test_identical(self):
        box = np.array([[3, 4, 10, 12]])
        assert iou_matrix(box, box)[0, 0] == pytest.approx(1.0)

    def test_disjoint(self):
        assert iou_matrix(np.array([[0, 0, 1, 1]]), np.array([[2, 2, 3, 3]]))[0, 0] == 0.0

    def test_known_overlap(self):
        # intersection 1, union 7
        iou = iou_matrix(np.array([[0, 0, 2, 2]]), np.array([[1, 1, 3, 3]]))[0, 0]
        assert iou == pytest.approx(1 / 7)


boxes_strategy = st.tuples(
    st.floats(0, 50), st.floats(0, 50), st.floats(2, 14), st.floats(2, 14)
).map(lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3]))


class TestBoxCoding:
    def test_zero_deltas_decode_to_anchor(self):
        anchors = anchor_grid(64, 8)
        decoded = decode_boxes(np.zeros((64, 4)), anchors, 64)
        np.testing.assert_allclose(decoded, anchors)

    def test_log_scale_doubles_width(self):
        anchor = np.array([[8, 8, 16, 16]])
        decoded = decode_boxes(np.array([[0, 0, np.log(2), 0]]), anchor, 64)
        assert decoded[0, 2] - decoded[0, 0] == pytest.approx(16.0)

    @given(st.lists(boxes_strategy, min_size=1, max_size=8))
    @settings(max_examples=200)
    def test_roundtrip(self, gt_list):
        gt = np.array(gt_list)
        anchors = anchor_grid(64, 8)[: len(gt)]
        deltas = encode_boxes(gt, anchors)
        decoded = decode_boxes(deltas, anchors, 64)
        np.testing.assert_allclose(decoded, gt, atol=1e-6)
