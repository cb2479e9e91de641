import json
from collections import Counter, defaultdict

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zsreid.corpus import (
    Corpus,
    CorpusError,
    CropRecord,
    MOTParseError,
    SequenceSource,
    filter_crops,
    ingest,
    pad_bbox,
    preprocess,
    stratified_count,
    stratified_split,
)


def _rec(crop_id, identity=1, w=50.0, h=50.0, seq="s"):
    return CropRecord(crop_id, seq, 1, identity, (10.0, 10.0, w, h), (1000, 1000))


def _corpus(sizes, seq="s"):
    out = []
    for identity, n in enumerate(sizes, start=1):
        for _ in range(n):
            out.append(_rec(len(out), identity, seq=seq))
    return out


class TestParseMot:
    def test_field_mapping(self):
        (rec,) = parse("1,3,10,20,50,40,1,-1,-1,-1")
        assert rec.frame == 1 and rec.identity == 3
        assert rec.bbox == (10.0, 20.0, 50.0, 40.0)
        assert rec.crop_id == 0 and rec.sequence_id == "seq"
        assert rec.frame_dims == (640, 480)

    def test_empty_file(self):
        assert parse("") == []

    def test_non_numeric_field(self):
        with pytest.raises(MOTParseError) as exc:
            parse("2,5,abc,0,10,10")
        assert exc.value.line_no == 1
        assert "line 1" in str(exc.value)

    def test_line_number_counts_from_one(self):
        with pytest.raises(MOTParseError, match="line 3"):
            parse("1,1,0,0,10,10\n2,1,0,0,10,10\n3,1,0,0\n")

    def test_negative_size(self):
        with pytest.raises(MOTParseError, match="positive"):
            parse("1,1,0,0,-5,10")

    @pytest.mark.parametrize("line", ["0,1,0,0,5,5", "1,-2,0,0,5,5", "1.5,1,0,0,5,5"])
    def test_frame_and_track_positive_ints(self, line):
        with pytest.raises(MOTParseError):
            parse(line)

    def test_crop_ids_in_line_order_and_extra_fields_ignored(self):
        recs = parse("3,1,0,0,40,40,0.9\n\n1,2,5,5,33,35,1,1,1,extra\n")
        assert [r.crop_id for r in recs] == [0, 1]
        assert [r.frame for r in recs] == [3, 1]

    def test_fractional_bbox_kept(self):
        (rec,) = parse("1,1,10.25,3.5,40.75,50.5")
        assert rec.bbox == (10.25, 3.5, 40.75, 50.5)


def parse(text):
    from zsreid.corpus import parse_mot

    return parse_mot(text, "seq", (640, 480))


class TestPadBbox:
    def test_interior_box(self):
        # center (150,150); 100 * 1.1 = 110 wide -> x0 = 150 - 55
        assert pad_bbox((100, 100, 100, 100), 0.05, (1000, 1000)) == pytest.approx((95, 95, 110, 110))

    def test_clamped_at_origin(self):
        # unclamped (-5,-5)-(105,105); left/top clamp to 0
        assert pad_bbox((0, 0, 100, 100), 0.05, (1000, 1000)) == pytest.approx((0, 0, 105, 105))

    def test_zero_padding_is_identity(self):
        box = (12.5, 7.0, 64.0, 33.0)
        assert pad_bbox(box, 0.0, (1000, 1000)) == box

    def test_clamped_at_far_edge(self):
        assert pad_bbox((900, 950, 100, 50), 0.05, (1000, 1000)) == pytest.approx((895, 947.5, 105, 52.5))

    @given(
        x=st.floats(0, 900), y=st.floats(0, 900), w=st.floats(1, 300), h=st.floats(1, 300),
        pad=st.floats(0, 0.5),
    )
    def test_padded_contains_clipped_original(self, x, y, w, h, pad):
        frame = (1000, 1000)
        px, py, pw, ph = pad_bbox((x, y, w, h), pad, frame)
        ox1, oy1 = min(x + w, 1000), min(y + h, 1000)
        eps = 1e-9 * 1000
        assert px <= x + eps and py <= y + eps
        assert px + pw >= ox1 - eps and py + ph >= oy1 - eps
        assert px >= 0 and py >= 0 and px + pw <= 1000 + eps and py + ph <= 1000 + eps

    @given(w=st.floats(1, 200), h=st.floats(1, 200), pad=st.floats(0, 0.5))
    def test_interior_area_scales(self, w, h, pad):
        _, _, pw, ph = pad_bbox((400, 400, w, h), pad, (2000, 2000))
        assert pw * ph == pytest.approx(w * h * (1 + 2 * pad) ** 2, rel=1e-12)


class TestFilterCrops:
    def test_min_side_either_dimension(self):
        kept, id_map = filter_crops([_rec(0, w=31, h=100), _rec(1, w=32, h=32)])
        assert len(kept) == 1
        assert kept[0].bbox[2:] == (32, 32)
        assert kept[0].crop_id == 0
        assert id_map == {1: 0}

    def test_all_large_unchanged(self):
        recs = [_rec(i) for i in range(4)]
        kept, id_map = filter_crops(recs)
        assert kept == recs
        assert id_map == {i: i for i in range(4)}

    def test_empty(self):
        assert filter_crops([]) == ([], {})

    @given(st.lists(st.tuples(st.floats(1, 80), st.floats(1, 80)), max_size=30))
    def test_subsequence_and_no_small_sides(self, sizes):
        recs = [_rec(i, w=w, h=h) for i, (w, h) in enumerate(sizes)]
        kept, id_map = filter_crops(recs, 32)
        assert all(r.bbox[2] >= 32 and r.bbox[3] >= 32 for r in kept)
        assert [r.crop_id for r in kept] == list(range(len(kept)))
        old = sorted(id_map)
        assert [recs[o].bbox for o in old] == [r.bbox for r in kept]

    def test_filter_stage_order_matters(self):
        # 31 px grows to 34.1 px with 5% padding on each side
        recs = [_rec(0, w=31, h=40)]
        post, _ = preprocess(recs, 0.05, 32, "post_pad")
        pre, _ = preprocess(recs, 0.05, 32, "pre_pad")
        assert len(post) == 1 and post[0].bbox[2] == pytest.approx(34.1)
        assert pre == []

    def test_bad_filter_stage(self):
        with pytest.raises(CorpusError):
            preprocess([], filter_stage="sideways")


class TestStratifiedSplit:
    def test_eight_crops(self):
        split = stratified_split(_corpus([8]), 0.75, seed=1)
        assert (len(split.gallery), len(split.query)) == (6, 2)

    def test_singleton_goes_to_gallery(self):
        split = stratified_split(_corpus([1]), 0.75, seed=1)
        assert split.gallery == {0} and split.query == set()

    def test_pair_is_one_each(self):
        assert stratified_count(2, 0.75) == 1
        split = stratified_split(_corpus([2]), 0.75, seed=1)
        assert len(split.gallery) == 1 and len(split.query) == 1

    @pytest.mark.parametrize("n,expected", [(3, 2), (4, 3), (5, 4), (6, 5), (8, 6), (10, 8), (12, 9)])
    def test_round_half_up(self, n, expected):
        # floor(0.75 n + 0.5): n=6 gives 4.5 -> 5, then the clamp n-1=5 still holds
        assert stratified_count(n, 0.75) == expected

    def test_clamp_keeps_one_query(self):
        assert stratified_count(3, 0.95) == 2
        assert stratified_count(3, 0.05) == 1

    def test_deterministic(self):
        recs = _corpus([5, 7, 1, 12, 3])
        a = stratified_split(recs, 0.75, seed=99)
        b = stratified_split(recs, 0.75, seed=99)
        assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())
        c = stratified_split(recs, 0.75, seed=100)
        assert a.to_dict() != c.to_dict()

    def test_frozen_assignment(self):
        # regression guard on the PRNG stream (PCG64 via SeedSequence)
        recs = [CropRecord(i, "s", 1, 1 + i // 5, (0, 0, 50, 50), (100, 100)) for i in range(15)]
        split = stratified_split(recs, 0.75, seed=7)
        assert split.prng == "numpy.PCG64"
        assert sorted(split.query) == [1, 8, 11]
        assert sorted(stratified_split(recs, 0.75, 7, "global").query) == [3, 7, 11]

    def test_sequences_are_independent_per_sequence_scope(self):
        a = _corpus([6, 6], seq="a")
        b = [CropRecord(len(a) + r.crop_id, "b", 1, r.identity, r.bbox, r.frame_dims) for r in _corpus([6], seq="b")]
        alone = stratified_split(a, seed=5)
        both = stratified_split(a + b, seed=5)
        assert both.query & {r.crop_id for r in a} == alone.query

    def test_same_track_id_in_two_sequences_is_two_identities(self):
        a = _corpus([2], seq="a")
        b = [CropRecord(2 + r.crop_id, "b", 1, r.identity, r.bbox, r.frame_dims) for r in _corpus([2], seq="b")]
        split = stratified_split(a + b, seed=0)
        assert len(split.query) == 2

    def test_global_scope(self):
        split = stratified_split(_corpus([5, 5]), seed=3, scope="global")
        assert split.scope == "global" and len(split.query) == 2

    @pytest.mark.parametrize(
        "kwargs", [dict(ratio=0.0), dict(ratio=1.0), dict(seed=-1), dict(seed=2**64), dict(scope="x")]
    )
    def test_bad_arguments(self, kwargs):
        with pytest.raises(CorpusError):
            stratified_split(_corpus([3]), **kwargs)

    def test_empty(self):
        with pytest.raises(CorpusError):
            stratified_split([], seed=0)

    @settings(max_examples=60, deadline=None)
    @given(
        sizes=st.lists(st.integers(1, 20), min_size=1, max_size=25),
        ratio=st.floats(0.05, 0.95),
        seed=st.integers(0, 2**64 - 1),
    )
    def test_stratification_property(self, sizes, ratio, seed):
        recs = _corpus(sizes)
        split = stratified_split(recs, ratio, seed)
        assert not split.gallery & split.query
        assert split.gallery | split.query == {r.crop_id for r in recs}
        g = Counter(recs[i].identity for i in split.gallery)
        q = Counter(recs[i].identity for i in split.query)
        for identity, n in enumerate(sizes, start=1):
            if n == 1:
                assert g[identity] == 1 and q[identity] == 0
            else:
                assert q[identity] >= 1 and g[identity] >= 1
                assert abs(g[identity] - round(ratio * n)) <= 1


class TestManifest:
    def test_ingest_and_round_trip(self, tmp_path):
        (tmp_path / "a.txt").write_text("1,1,0,0,100,100\n2,1,10,10,20,20\n1,2,50,50,40,40\n")
        (tmp_path / "b.txt").write_text("5,1,0,0,64,64\n")
        corpus = ingest(
            [SequenceSource("A", "a.txt", (640, 480)), SequenceSource("B", "b.txt", (320, 240))],
            base_dir=tmp_path,
        )
        # raw ids 0..3; raw 1 is 22x22 after padding and dropped
        assert corpus.id_map == {0: 0, 2: 1, 3: 2}
        assert [c.sequence_id for c in corpus.crops] == ["A", "A", "B"]
        assert corpus.crops[2].frame_dims == (320, 240)
        path = tmp_path / "m.json"
        corpus.save(path)
        again = Corpus.load(path)
        assert again.crops == corpus.crops
        assert again.id_map == corpus.id_map
        assert again.to_dict() == corpus.to_dict()

    def test_ingest_reports_file(self, tmp_path):
        (tmp_path / "bad.txt").write_text("1,1,0,0,10,10\nnope\n")
        with pytest.raises(MOTParseError, match="bad.txt"):
            ingest([SequenceSource("A", str(tmp_path / "bad.txt"), (10, 10))])

    def test_checked_in_fixture(self, fixtures):
        text = (fixtures / "tiny_gt.txt").read_text()
        from zsreid.corpus import parse_mot

        recs = parse_mot(text, "tiny", (1920, 1080))
        counts = defaultdict(int)
        for r in recs:
            counts[r.identity] += 1
        assert dict(counts) == {1: 4, 2: 3, 3: 1}
        kept, _ = preprocess(recs)
        assert len(kept) == len(recs) - 1
