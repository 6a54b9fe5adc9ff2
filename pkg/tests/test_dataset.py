import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from breakmove import tensorio
from breakmove.dataset import (
    EmbeddingDataset,
    Label,
    SegmentAnnotation,
    VideoEmbeddings,
    assign_window_label,
    class_means,
    gen_synthetic,
    labeled_windows,
    load_manifest,
    pool_subembeddings,
    read_split_file,
    resolve_overlaps,
    split_train_test,
    window_table,
    write_manifest,
)
from breakmove.errors import (
    BadAnnotation,
    BadMagic,
    DimMismatch,
    EmptyInput,
    InvalidArgument,
    MissingFile,
    NonFiniteValue,
    SegmentCountMismatch,
    UnknownVideoId,
    WindowCountMismatch,
)

from oracles import nearest_mean_accuracy, window_count_by_enumeration


def _video(video_id="v0", duration=10.0, d=4, num_sub=1, fps=2.0, window=10.0, stride=5.0, fill=0.0):
    n = int(np.floor((duration - window) / stride)) + 1
    rows = np.full((n, num_sub, d), fill, dtype=np.float32)
    return VideoEmbeddings(video_id, "enc", fps, duration, rows, window, stride)


def _write_manifest(tmp_path, videos, dim=4, extra=None):
    (tmp_path / "emb").mkdir(exist_ok=True)
    entries = []
    for vid, duration, rows in videos:
        tensorio.save_embeddings(tmp_path / "emb" / f"{vid}.emb", rows)
        entries.append(
            {"id": vid, "fps": 2.0, "duration_sec": duration, "window_sec": 10.0, "stride_sec": 5.0,
             "num_sub": rows.shape[1] if rows.ndim == 3 else 1, "embeddings_file": f"emb/{vid}.emb"}
        )
    manifest = {"dim": dim, "encoder": "enc", "videos": entries, **(extra or {})}
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(manifest))
    return path


class TestLabel:
    def test_four_variants_with_canonical_text(self):
        assert [lab.text for lab in Label] == ["powermove", "footwork", "toprock", "none"]

    def test_parse_is_case_insensitive(self):
        assert Label.parse("TopRock") is Label.TOPROCK
        with pytest.raises(BadAnnotation):
            Label.parse("windmill")


class TestLoadManifest:
    def test_table1_scale_segment_count(self, tmp_path):
        # 81 videos carrying 1352 annotated segments in total
        rows = np.zeros((19, 1, 4), np.float32)
        duration = 10.0 + 5.0 * 18
        videos = [(f"v{k:02d}", duration, rows) for k in range(81)]
        counts = [17] * 56 + [16] * 25
        assert sum(counts) == 1352
        lines = ["video_id,start_sec,end_sec,label"]
        for (vid, _, _), n in zip(videos, counts):
            for s in range(n):
                lines.append(f"{vid},{s * 5.0},{s * 5.0 + 4.0},{['powermove', 'footwork', 'toprock'][s % 3]}")
        (tmp_path / "annotations.csv").write_text("\n".join(lines) + "\n")
        path = _write_manifest(tmp_path, videos, extra={"num_segments": 1352})
        data = load_manifest(path)
        assert len(data) == 81
        assert len(data.annotations) == 1352

    def test_segment_count_mismatch(self, tmp_path):
        (tmp_path / "annotations.csv").write_text("video_id,start_sec,end_sec,label\nv0,0,5,toprock\n")
        path = _write_manifest(tmp_path, [("v0", 10.0, np.zeros((1, 1, 4), np.float32))], extra={"num_segments": 2})
        with pytest.raises(SegmentCountMismatch):
            load_manifest(path)

    def test_single_window_at_boundary(self, tmp_path):
        path = _write_manifest(tmp_path, [("v0", 10.0, np.zeros((1, 1, 4), np.float32))])
        data = load_manifest(path)
        assert data.videos[0].num_windows == 1

    def test_dim_mismatch(self, tmp_path):
        path = _write_manifest(tmp_path, [("v0", 10.0, np.zeros((1, 1, 256), np.float32))], dim=512)
        with pytest.raises(DimMismatch):
            load_manifest(path)

    def test_bad_magic(self, tmp_path):
        path = _write_manifest(tmp_path, [("v0", 10.0, np.zeros((1, 1, 4), np.float32))])
        blob = (tmp_path / "emb" / "v0.emb").read_bytes()
        (tmp_path / "emb" / "v0.emb").write_bytes(b"EMB2" + blob[4:])
        with pytest.raises(BadMagic):
            load_manifest(path)

    def test_non_finite(self, tmp_path):
        rows = np.zeros((1, 1, 4), np.float32)
        rows[0, 0, 2] = np.nan
        path = _write_manifest(tmp_path, [("v0", 10.0, rows)])
        with pytest.raises(NonFiniteValue):
            load_manifest(path)

    def test_window_count_mismatch(self, tmp_path):
        path = _write_manifest(tmp_path, [("v0", 20.0, np.zeros((2, 1, 4), np.float32))])
        with pytest.raises(WindowCountMismatch):
            load_manifest(path)

    def test_missing_files(self, tmp_path):
        with pytest.raises(MissingFile):
            load_manifest(tmp_path / "absent.json")
        path = _write_manifest(tmp_path, [("v0", 10.0, np.zeros((1, 1, 4), np.float32))])
        (tmp_path / "emb" / "v0.emb").unlink()
        with pytest.raises(MissingFile):
            load_manifest(path)

    def test_annotation_for_unknown_video(self, tmp_path):
        (tmp_path / "annotations.csv").write_text("video_id,start_sec,end_sec,label\nzz,0,5,toprock\n")
        path = _write_manifest(tmp_path, [("v0", 10.0, np.zeros((1, 1, 4), np.float32))])
        with pytest.raises(UnknownVideoId):
            load_manifest(path)

    def test_none_label_rejected_in_annotations(self, tmp_path):
        (tmp_path / "annotations.csv").write_text("video_id,start_sec,end_sec,label\nv0,0,5,none\n")
        path = _write_manifest(tmp_path, [("v0", 10.0, np.zeros((1, 1, 4), np.float32))])
        with pytest.raises(BadAnnotation):
            load_manifest(path)

    def test_round_trip_is_bit_identical(self, tmp_path):
        data = gen_synthetic(4, 8, 3, 5, 3.0, seed=1)
        write_manifest(data, tmp_path / "a", num_segments=True)
        loaded = load_manifest(tmp_path / "a" / "manifest.json")
        write_manifest(loaded, tmp_path / "b", num_segments=True)
        for v in data.videos:
            rel = f"embeddings/{v.video_id}.emb"
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
        assert (tmp_path / "a" / "annotations.csv").read_text() == (tmp_path / "b" / "annotations.csv").read_text()


class TestDatasetInvariants:
    def test_videos_must_share_dim(self):
        with pytest.raises(DimMismatch):
            EmbeddingDataset((_video("a", d=4), _video("b", d=5)))

    @settings(max_examples=200, deadline=None)
    @given(
        window_halves=st.integers(1, 40),
        stride_halves=st.integers(1, 40),
        extra_halves=st.integers(0, 400),
    )
    def test_window_count_formula(self, window_halves, stride_halves, extra_halves):
        window, stride = window_halves / 2, stride_halves / 2
        duration = window + extra_halves / 2
        expected = window_count_by_enumeration(duration, window, stride)
        video = _video(duration=duration, window=window, stride=stride)
        assert video.num_windows == expected
        assert video.rows.shape[0] == expected


class TestPooling:
    def test_identical_copies(self):
        v = np.array([0.25, -1.5, 3.0])
        np.testing.assert_array_equal(pool_subembeddings(np.tile(v, (20, 1)), "mean"), v)

    def test_mean_and_max(self):
        rows = np.array([[1.0, 0.0], [0.0, 1.0]])
        np.testing.assert_array_equal(pool_subembeddings(rows, "mean"), [0.5, 0.5])
        np.testing.assert_array_equal(pool_subembeddings(rows, "max"), [1.0, 1.0])

    def test_empty(self):
        with pytest.raises(EmptyInput):
            pool_subembeddings(np.zeros((0, 3)))

    @given(st.integers(1, 6), st.floats(-100, 100, allow_nan=False))
    def test_mean_commutes_with_scaling(self, num_sub, c):
        rows = np.random.default_rng(num_sub).normal(size=(num_sub, 5))
        np.testing.assert_allclose(pool_subembeddings(c * rows), c * pool_subembeddings(rows), atol=1e-9)

    def test_subwindow_video_pools_in_table(self):
        rows = np.zeros((1, 20, 3), np.float32)
        rows[0, :10] = 1.0
        video = VideoEmbeddings("v", "imagebind", 2.0, 10.0, rows)
        table = window_table(EmbeddingDataset((video,)))
        np.testing.assert_array_equal(table.X, [[0.5, 0.5, 0.5]])


def _ann(s, e, lab, vid="v"):
    return SegmentAnnotation(vid, s, e, lab)


class TestAssignWindowLabel:
    def test_full_overlap(self):
        assert assign_window_label(0, 10, [_ann(0, 10, Label.TOPROCK)], 0.5) is Label.TOPROCK

    def test_no_annotations(self):
        assert assign_window_label(0, 10, [], 0.5) is Label.NONE

    def test_majority_overlap(self):
        anns = [_ann(0, 4, Label.FOOTWORK), _ann(4, 10, Label.POWERMOVE)]
        assert assign_window_label(0, 10, anns, 0.5) is Label.POWERMOVE

    def test_below_coverage(self):
        assert assign_window_label(0, 10, [_ann(0, 4, Label.FOOTWORK)], 0.5) is Label.NONE

    def test_tie_goes_to_label_order(self):
        anns = [_ann(0, 5, Label.TOPROCK), _ann(5, 10, Label.FOOTWORK)]
        assert assign_window_label(0, 10, anns, 0.5) is Label.FOOTWORK

    @given(st.permutations(range(5)), st.floats(0, 1))
    def test_permutation_invariant(self, order, cov):
        anns = [
            _ann(0, 2, Label.FOOTWORK),
            _ann(2, 3.5, Label.TOPROCK),
            _ann(3.5, 7, Label.POWERMOVE),
            _ann(7, 8, Label.TOPROCK),
            _ann(8, 12, Label.FOOTWORK),
        ]
        shuffled = [anns[k] for k in order]
        assert assign_window_label(1, 11, shuffled, cov) == assign_window_label(1, 11, anns, cov)

    def test_overlaps_resolved_by_earlier_start(self):
        anns = resolve_overlaps([_ann(3, 9, Label.TOPROCK), _ann(0, 6, Label.FOOTWORK)])
        assert [(a.start_sec, a.end_sec, a.label) for a in anns] == [
            (0, 6, Label.FOOTWORK),
            (6, 9, Label.TOPROCK),
        ]


class TestSplit:
    def test_71_10_partition(self):
        data = gen_synthetic(4, 4, 81, 2, 1.0, seed=0)
        test_ids = data.video_ids[::8][:10]
        train, test = split_train_test(data, test_ids)
        assert len(train) == 71 and len(test) == 10
        assert set(train.video_ids).isdisjoint(test.video_ids)
        assert set(train.video_ids) | set(test.video_ids) == set(data.video_ids)
        assert len(train.annotations) + len(test.annotations) == len(data.annotations)

    def test_empty_test_ids(self):
        data = gen_synthetic(4, 4, 5, 2, 1.0, seed=0)
        train, test = split_train_test(data, [])
        assert train.video_ids == data.video_ids and len(test) == 0

    def test_unknown_id(self):
        data = gen_synthetic(4, 4, 5, 2, 1.0, seed=0)
        with pytest.raises(UnknownVideoId):
            split_train_test(data, ["nope"])

    def test_split_file_comments(self, tmp_path):
        p = tmp_path / "split.txt"
        p.write_text("# test titles\nvid_a\n\n  vid_b  # trailing note\n")
        assert read_split_file(p) == ["vid_a", "vid_b"]


class TestSynthetic:
    def test_zero_separation_means_identical(self):
        assert np.all(class_means(4, 16, 0.0) == 0.0)

    def test_zero_separation_chance_accuracy(self):
        data = gen_synthetic(4, 16, 200, 20, 0.0, seed=3)
        table = window_table(data)
        # fit class means on half the videos, score the other half
        train, test = split_train_test(data, data.video_ids[100:])
        tr, te = window_table(train), window_table(test)
        means = np.stack([tr.X[tr.y == c].mean(axis=0) for c in range(4)])
        pred = np.argmin(((te.X[:, None, :] - means[None]) ** 2).sum(-1), axis=1)
        assert abs(np.mean(pred == te.y) - 0.25) < 0.05
        assert len(table) == 4000

    def test_deterministic(self):
        a = gen_synthetic(3, 8, 4, 6, 2.0, seed=11)
        b = gen_synthetic(3, 8, 4, 6, 2.0, seed=11)
        for va, vb in zip(a.videos, b.videos):
            assert va.rows.tobytes() == vb.rows.tobytes()
        assert a.annotations == b.annotations

    def test_well_separated_nearest_mean(self):
        data = gen_synthetic(4, 64, 20, 20, 50.0, seed=5)
        table = window_table(data)
        assert nearest_mean_accuracy(table.X, table.y) > 0.999

    @pytest.mark.parametrize("k", [1, 2, 3, 4])
    def test_window_labels_equal_generating_class(self, k):
        data = gen_synthetic(k, 8, 10, 9, 1000.0, seed=k, noise=0.0)
        means = class_means(k, 8, 1000.0)
        for w in labeled_windows(data):
            gen_class = int(np.argmin(((means - w.embedding) ** 2).sum(1)))
            assert int(w.label) == gen_class

    def test_invalid(self):
        with pytest.raises(InvalidArgument):
            gen_synthetic(5, 8, 1, 1, 1.0, 0)
        with pytest.raises(InvalidArgument):
            gen_synthetic(4, 8, 1, 1, -1.0, 0)

    def test_labeled_window_span(self):
        data = gen_synthetic(4, 4, 1, 3, 1.0, seed=0)
        spans = [(w.start_sec, w.end_sec) for w in labeled_windows(data)]
        assert spans == [(0.0, 10.0), (5.0, 15.0), (10.0, 20.0)]
