import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from whorlpose.detector import (DecoderConfig, DetectorSpec, FixtureDetector, OnnxDetector, OracleDetector,
                                PredictionsSchemaError, RawDetection, TensorFixtureDetector, decode_pose_tensor, iou,
                                load_predictions_file, nms, oracle_detect, read_tensor_file, rescale_tensor,
                                write_predictions_file, write_tensor_file)
from whorlpose.postprocess import convert_to_real_world
from whorlpose.projection import ImageMeta, SectionImage
from whorlpose.synthgen import SynthGroundTruth, SynthWhorl

from oracles import encode, random_dets, reference_nms, shapely_iou

META = ImageMeta("t", 0.0, 0, -5.0, 5.0, 0.0, 10.0, 1000, 1000)


def det(xc=0.5, yc=0.5, w=0.1, h=0.1, score=0.9, kps=((0.4, 0.5, 1.0), (0.5, 0.5, 1.0), (0.6, 0.5, 1.0))):
    return RawDetection((xc, yc, w, h), score, kps)


def blank(meta=META):
    return SectionImage(meta, np.zeros((meta.height_px, meta.width_px, 4), np.uint8))





# schema

def test_keypoint_order_normalized():
    d = det(kps=((0.7, 0.5, 0.8), (0.5, 0.5, 0.9), (0.3, 0.5, 0.7)))
    assert d.keypoints[0] == (0.3, 0.5, 0.7)
    assert d.keypoints[2] == (0.7, 0.5, 0.8)


def test_coordinates_clamped():
    d = det(xc=1.3, kps=((-0.1, 0.5, 2.0), (0.5, 1.2, 0.5), (0.6, 0.5, 0.5)))
    assert d.bbox_norm[0] == 1.0
    assert d.keypoints[0] == (0.0, 0.5, 1.0)
    assert d.keypoints[1][1] == 1.0


def test_wrong_keypoint_count():
    with pytest.raises(ValueError, match="exactly 3"):
        RawDetection((0.5, 0.5, 0.1, 0.1), 0.9, ((0, 0, 1), (0, 0, 1)))


# predictions file

def test_load_single_detection(tmp_path):
    p = tmp_path / "p.json"
    p.write_text(json.dumps({"a.png": [{"bbox": [0.5, 0.5, 0.1, 0.1], "score": 0.8,
                                        "keypoints": [[0.4, 0.5, 1], [0.5, 0.5, 1], [0.6, 0.5, 1]]}]}))
    got = load_predictions_file(p)
    assert list(got) == ["a.png"] and len(got["a.png"]) == 1


def test_load_right_tip_first(tmp_path):
    p = tmp_path / "p.json"
    p.write_text(json.dumps({"a.png": [{"bbox": [0.5, 0.5, 0.1, 0.1], "score": 0.8,
                                        "keypoints": [[0.6, 0.5, 1], [0.5, 0.5, 1], [0.4, 0.5, 1]]}]}))
    (d,) = load_predictions_file(p)["a.png"]
    assert d.keypoints[0][0] == 0.4


def test_write_load_round_trip(tmp_path):
    preds = {"a.png": [], "b.png": [det(score=0.9), det(xc=0.2, score=0.5), det(yc=0.9, score=0.3)]}
    got = load_predictions_file(write_predictions_file(preds, tmp_path / "p.json"))
    assert {k: len(v) for k, v in got.items()} == {"a.png": 0, "b.png": 3}
    assert got["b.png"] == preds["b.png"]


@pytest.mark.parametrize("doc,match", [
    ({"a.png": [{"score": 1, "keypoints": []}]}, r"a\.png\[0\]: missing field 'bbox'"),
    ({"a.png": [{"bbox": [0, 0, 0], "score": 1, "keypoints": []}]}, r"a\.png\[0\]\.bbox"),
    ({"a.png": [{"bbox": [0, 0, 0, 0], "score": "x", "keypoints": []}]}, r"\.score"),
    ({"a.png": [{"bbox": [0, 0, 0, 0], "score": 1, "keypoints": [[0, 0, 1]] * 2}]}, r"expected 3 keypoints, got 2"),
    ({"a.png": [{"bbox": [0, 0, 0, 0], "score": 1, "keypoints": [[0, 0, 1], [0, 0], [0, 0, 1]]}]},
     r"keypoints\[1\]"),
    ({"a.png": {}}, "expected a list"),
    ([], "top level"),
])
def test_schema_violations(tmp_path, doc, match):
    p = tmp_path / "p.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(PredictionsSchemaError, match=match):
        load_predictions_file(p)


# tensor decoding

def test_decode_hand_built_column():
    raw = np.array([[500, 500, 100, 50, 0.9, 460, 510, 0.8, 500, 500, 0.9, 540, 495, 0.8]], float).T
    (d,) = decode_pose_tensor(raw, META)
    assert d.bbox_norm == pytest.approx((0.5, 0.5, 0.1, 0.05))
    assert d.score == pytest.approx(0.9)
    assert np.allclose(d.keypoints, [(0.46, 0.51, 0.8), (0.5, 0.5, 0.9), (0.54, 0.495, 0.8)])


def test_decode_threshold():
    raw = np.zeros((14, 5))
    raw[4] = [0.1, 0.2, 0.24, 0.0, 0.249]
    assert decode_pose_tensor(raw, META) == []


def test_decode_sorted_by_score():
    raw = np.zeros((14, 3))
    raw[4] = [0.3, 0.9, 0.6]
    raw[2:4] = 10
    assert [d.score for d in decode_pose_tensor(raw, META)] == pytest.approx([0.9, 0.6, 0.3])


def test_decode_wrong_shape():
    with pytest.raises(ValueError, match=r"\(14, N\)"):
        decode_pose_tensor(np.zeros((17, 3)), META)


def test_decode_logits_flag():
    raw = np.zeros((14, 1))
    raw[4] = 0.0  # sigmoid(0) = 0.5
    (d,) = decode_pose_tensor(raw, META, DecoderConfig(scores_are_logits=True))
    assert d.score == pytest.approx(0.5)



def test_encode_decode_round_trip():
    rng = np.random.default_rng(11)
    dets = random_dets(rng, 50)
    got = decode_pose_tensor(encode(dets, META), META)
    want = sorted(dets, key=lambda d: (-d.score, d.bbox_norm[1], d.bbox_norm[0]))
    assert len(got) == 50
    for a, b in zip(got, want):
        assert np.abs(np.subtract(a.bbox_norm, b.bbox_norm)).max() <= 1e-4
        assert np.abs(np.subtract(a.keypoints, b.keypoints)).max() <= 1e-4


def test_tensor_file_round_trip(tmp_path):
    t = np.arange(14 * 4, dtype=float).reshape(14, 4)
    p = write_tensor_file(t, tmp_path / "x.bin")
    raw = p.read_bytes()
    assert raw[:8] == (14).to_bytes(4, "little") + (4).to_bytes(4, "little")
    # column-major: the second stored value is row 1 of column 0
    assert np.frombuffer(raw[8:16], "<f4").tolist() == [0.0, 4.0]
    np.testing.assert_array_equal(read_tensor_file(p), t)


def test_tensor_file_size_mismatch(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes((14).to_bytes(4, "little") + (2).to_bytes(4, "little") + bytes(10))
    with pytest.raises(ValueError, match="expected"):
        read_tensor_file(p)


# iou / nms

def test_iou_examples():
    assert iou((0.5, 0.5, 0.2, 0.2), (0.5, 0.5, 0.2, 0.2)) == 1.0
    assert iou((0.1, 0.1, 0.1, 0.1), (0.8, 0.8, 0.1, 0.1)) == 0.0
    assert iou((0.5, 0.5, 0.2, 0.2), (0.6, 0.5, 0.2, 0.2)) == pytest.approx(1 / 3)


@settings(max_examples=300, deadline=None)
@given(st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(1e-3, 1), st.floats(1e-3, 1)),
       st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(1e-3, 1), st.floats(1e-3, 1)))
def test_iou_matches_shapely(a, b):
    assert iou(a, b) == pytest.approx(shapely_iou(a, b), abs=1e-7)
    assert iou(a, b) == pytest.approx(iou(b, a), abs=1e-15)


def test_nms_examples():
    assert nms([], 0.5) == []
    a, b = det(score=0.9), det(score=0.8)
    assert nms([b, a], 0.5) == [a]


def test_nms_matches_reference_random():
    rng = np.random.default_rng(5)
    for _ in range(50):
        dets = random_dets(rng, 20)
        dets = [RawDetection((d.bbox_norm[0], d.bbox_norm[1], 0.05 + 0.3 * d.bbox_norm[2],
                              0.05 + 0.3 * d.bbox_norm[3]), d.score, d.keypoints) for d in dets]
        thr = float(rng.uniform(0.1, 0.9))
        got = nms(dets, thr)
        assert got == reference_nms(dets, thr)
        assert all(g in dets for g in got)
        for i in range(len(got)):
            for j in range(i + 1, len(got)):
                assert iou(got[i].bbox_norm, got[j].bbox_norm) <= thr


# oracle

def truth_at(*zs, tip_dx=1.0, tip_dz=0.5, az=0.0):
    return SynthGroundTruth("t", [
        SynthWhorl(z, (-tip_dx, z + tip_dz), (tip_dx, z + tip_dz), 0.0, 0.0, 0.0, az) for z in zs])


def test_oracle_mid_window():
    (d,) = oracle_detect(truth_at(5.0), META)
    assert d.keypoints[1][1] == pytest.approx(0.5)
    assert d.score == 1.0


def test_oracle_out_of_window():
    assert oracle_detect(truth_at(12.0), META) == []


def test_oracle_inverse_exact():
    truth = truth_at(1.0, 3.3, 7.25, tip_dx=1.7, tip_dz=0.4, az=30.0)
    for view in (0.0, 45.0, 90.0, 135.0):
        meta = ImageMeta("t", view, 0, -4.2, 5.8, 0.0, 10.0, 1000, 1000)
        for d, w in zip(oracle_detect(truth, meta), truth.whorls):
            cand = convert_to_real_world(d, meta)
            f = math.cos(math.radians(30.0 - view))
            xc = 0.8
            want = sorted([(xc - 1.7 * f, w.z_m + 0.4), (xc + 1.7 * f, w.z_m + 0.4)])
            assert cand.z_m == pytest.approx(w.z_m, abs=1e-9)
            assert np.abs(np.subtract(cand.kp_world, [want[0], (xc, w.z_m), want[1]])).max() <= 1e-9


def test_oracle_box_is_padded_hull():
    (d,) = oracle_detect(truth_at(5.0), META)
    xs = [k[0] for k in d.keypoints]
    assert d.bbox_norm[2] == pytest.approx(max(xs) - min(xs) + 0.04)


def test_oracle_marks_out_of_frame_tips_invisible():
    (d,) = oracle_detect(truth_at(9.9, tip_dz=0.5), META)
    assert [k[2] for k in d.keypoints] == [0.0, 1.0, 0.0]


def test_oracle_noise_deterministic_and_nonzero():
    t = truth_at(2.0, 4.0, 6.0)
    a = oracle_detect(t, META, 0.05, seed=3)
    b = oracle_detect(t, META, 0.05, seed=3)
    c = oracle_detect(t, META, 0.05, seed=4)
    assert a == b and a != c


def test_oracle_detector_from_dir(tmp_path):
    from whorlpose.synthgen import write_truth
    write_truth(truth_at(5.0), tmp_path / "t.truth.json")
    assert len(OracleDetector(truth_dir=tmp_path).detect(blank())) == 1
    other = ImageMeta("other", 0.0, 0, -5, 5, 0, 10, 1000, 1000)
    assert OracleDetector(truth_dir=tmp_path).detect(blank(other)) == []


# backends

def test_fixture_detector_by_image_name():
    fx = FixtureDetector({META.name: [det()]})
    assert fx.detect(blank()) == [det()]
    other = ImageMeta("t", 45.0, 0, -5, 5, 0, 10, 1000, 1000)
    assert fx.detect(blank(other)) == []


def test_tensor_fixture_detector_applies_nms(tmp_path):
    dets = [det(score=0.9), det(score=0.8), det(xc=0.1, score=0.7), det(score=0.1)]
    write_tensor_file(encode(dets, META), tmp_path / "t_v0_s0.bin")
    got = TensorFixtureDetector(tmp_path).detect(blank())
    assert [round(d.score, 3) for d in got] == [0.9, 0.7]


class FakeSession:
    """Stands in for an inference session with a fixed 640x640 input."""

    class _Input:
        name = "images"
        shape = [1, 3, 640, 640]

    def __init__(self, out):
        self.out = out
        self.seen = None

    def get_inputs(self):
        return [self._Input()]

    def run(self, _, feeds):
        self.seen = feeds["images"]
        return [self.out[None]]


def test_onnx_backend_with_injected_session():
    meta = ImageMeta("t", 0.0, 0, -5, 5, 0, 10, 1000, 1000)
    want = det(xc=0.25, yc=0.75, w=0.1, h=0.05, score=0.8,
               kps=((0.2, 0.75, 0.9), (0.25, 0.75, 0.9), (0.3, 0.74, 0.9)))
    model_meta = ImageMeta("t", 0.0, 0, -5, 5, 0, 10, 640, 640)
    sess = FakeSession(encode([want], model_meta))
    (got,) = OnnxDetector(None, session=sess).detect(blank(meta))
    assert sess.seen.shape == (1, 3, 640, 640) and sess.seen.dtype == np.float32
    assert sess.seen.max() == pytest.approx(1.0)  # white background
    assert np.abs(np.subtract(got.keypoints, want.keypoints)).max() < 1e-6
    assert np.abs(np.subtract(got.bbox_norm, want.bbox_norm)).max() < 1e-6


def test_rescale_tensor_only_touches_pixel_rows():
    raw = np.ones((14, 2))
    out = rescale_tensor(raw, (500, 250), (1000, 1000))
    np.testing.assert_array_equal(out[[0, 2, 5, 8, 11], 0], 4.0)
    np.testing.assert_array_equal(out[[1, 3, 6, 9, 12], 0], 2.0)
    np.testing.assert_array_equal(out[[4, 7, 10, 13], 0], 1.0)


def test_onnx_backend_without_runtime_is_explicit():
    try:
        import onnxruntime  # noqa: F401
        pytest.skip("onnxruntime installed")
    except ImportError:
        pass
    with pytest.raises(RuntimeError, match="onnxruntime"):
        OnnxDetector("model.onnx").detect(blank())


def test_detector_spec_validation(tmp_path):
    with pytest.raises(ValueError):
        DetectorSpec("oracle").build()
    with pytest.raises(ValueError):
        DetectorSpec("nope").build()
    assert isinstance(DetectorSpec("fixture", str(tmp_path)).build(), TensorFixtureDetector)


def test_decoder_config_range():
    with pytest.raises(ValueError):
        DecoderConfig(score_threshold=1.5)
