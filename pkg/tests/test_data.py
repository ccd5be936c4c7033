import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from capattack.data import (
    CaptionedSample,
    FilteredDataset,
    filter_hallucinations,
    load_dataset,
    read_index,
    select_target_pairs,
)
from capattack.encoders import ContentCache, ToyCaptioner, ToyClip, ToyEncoder
from capattack.errors import InsufficientSamples, MissingIndex

from oracles import scalar_cosine


def _write_flickr_layout(root, names, captions_per=5):
    (root / "flickr30k-images").mkdir(parents=True)
    lines = ["image_name\tcomment"]
    for i, name in enumerate(names):
        arr = np.full((8, 8, 3), i * 20, dtype=np.uint8)
        Image.fromarray(arr).save(root / "flickr30k-images" / name)
        lines += [f"{name}#{j}\tcaption {j} of {name}" for j in range(captions_per)]
    (root / "results_20130124.token").write_text("\n".join(lines) + "\n", encoding="utf-8")


class TestIndex:
    def test_token_file_strips_row_suffix(self, tmp_path):
        _write_flickr_layout(tmp_path, ["a.jpg", "b.jpg"])
        table = read_index(tmp_path / "results_20130124.token")
        assert list(table) == ["a.jpg", "b.jpg"]
        assert table["a.jpg"][0] == "caption 0 of a.jpg" and len(table["a.jpg"]) == 5

    def test_missing_index(self, tmp_path):
        with pytest.raises(MissingIndex):
            load_dataset(tmp_path)
        with pytest.raises(MissingIndex):
            load_dataset(tmp_path / "nope")

    def test_empty_caption_rejected(self):
        with pytest.raises(ValueError):
            CaptionedSample("x", "x.png", ("  ",))


class TestLoadDataset:
    def test_seeded_sampling(self, tmp_path):
        names = [f"{i}.jpg" for i in range(10)]
        _write_flickr_layout(tmp_path, names)
        a = load_dataset(tmp_path, limit=4, seed=1)
        b = load_dataset(tmp_path, limit=4, seed=1)
        c = load_dataset(tmp_path, limit=4, seed=2)
        assert [s.sample_id for s in a] == [s.sample_id for s in b]
        assert len(a) == 4 and len({s.sample_id for s in a}) == 4
        assert [s.sample_id for s in a] != [s.sample_id for s in c]

    def test_limit_edges(self, tmp_path):
        _write_flickr_layout(tmp_path, ["a.jpg", "b.jpg"])
        assert load_dataset(tmp_path, limit=0) == []
        assert len(load_dataset(tmp_path, limit=50)) == 2

    def test_unreadable_images_skipped(self, tmp_path, caplog):
        _write_flickr_layout(tmp_path, ["a.jpg", "b.jpg", "c.jpg"])
        (tmp_path / "flickr30k-images" / "b.jpg").write_bytes(b"not an image")
        (tmp_path / "flickr30k-images" / "c.jpg").unlink()
        got = load_dataset(tmp_path)
        assert [s.sample_id for s in got] == ["a"]
        assert "unreadable" in caplog.text


class TestFilter:
    def test_scores_match_independent_computation(self, toy_dataset):
        root, _ = toy_dataset
        samples = load_dataset(root)
        enc = ToyEncoder()
        cap, clip = ToyCaptioner(enc), ToyClip(enc)
        fd = filter_hallucinations(samples, cap, clip.text_encoder, 0.7, image_size=enc.input_size)
        for s in samples:
            pred = cap.caption(s.load_image(enc.input_size).data)
            p = clip.text_encoder.encode_text(pred)
            expected = max(scalar_cosine(list(p), list(clip.text_encoder.encode_text(g))) for g in s.ground_truth_captions)
            assert fd.predicted_captions[s.sample_id] == pred
            assert fd.scores[s.sample_id] == pytest.approx(expected, abs=1e-12)
            assert (s in fd.samples) == (expected >= 0.7)

    def test_separates_faithful_from_hallucinated(self, toy_dataset):
        root, kinds = toy_dataset
        samples = load_dataset(root)
        enc = ToyEncoder()
        fd = filter_hallucinations(samples, ToyCaptioner(enc), ToyClip(enc).text_encoder, 0.7,
                                   image_size=enc.input_size)
        kept = set(fd.sample_ids)
        for name, kind in kinds.items():
            sid = name.removesuffix(".png")
            if kind == "faithful":
                assert sid in kept
            if kind == "hallucinated":
                assert sid not in kept

    def test_monotone_in_tau_and_rethreshold(self, toy_dataset):
        root, _ = toy_dataset
        samples = load_dataset(root)
        enc = ToyEncoder()
        args = (samples, ToyCaptioner(enc), ToyClip(enc).text_encoder)
        loose = filter_hallucinations(*args, 0.5, image_size=enc.input_size)
        strict = filter_hallucinations(*args, 0.9, image_size=enc.input_size)
        assert set(strict.sample_ids) <= set(loose.sample_ids)
        assert loose.rethreshold(0.9).sample_ids == strict.sample_ids

    def test_parallel_matches_serial_and_cache(self, toy_dataset, tmp_path):
        root, _ = toy_dataset
        samples = load_dataset(root)
        enc = ToyEncoder()
        cache = ContentCache(tmp_path / "c")
        args = (samples, ToyCaptioner(enc), ToyClip(enc).text_encoder, 0.7)
        serial = filter_hallucinations(*args, image_size=enc.input_size)
        parallel = filter_hallucinations(*args, cache=cache, image_size=enc.input_size, workers=4)
        assert serial.to_json() == parallel.to_json()
        assert cache.misses == len(samples) and cache.hits == 0
        filter_hallucinations(*args, cache=cache, image_size=enc.input_size, workers=4)
        assert cache.hits == len(samples)

    def test_json_roundtrip_and_recheck(self, toy_dataset, tmp_path):
        root, _ = toy_dataset
        enc = ToyEncoder()
        text = ToyClip(enc).text_encoder
        fd = filter_hallucinations(load_dataset(root), ToyCaptioner(enc), text, 0.7, image_size=enc.input_size)
        fd.save(tmp_path / "f.json")
        back = FilteredDataset.load(tmp_path / "f.json")
        assert back.to_json() == fd.to_json()
        assert back.recheck(text) == fd.sample_ids

    def test_tau_bounds(self):
        with pytest.raises(ValueError):
            FilteredDataset([], 0.0, {})
        with pytest.raises(ValueError):
            FilteredDataset([], 1.5, {})


def _dataset(n):
    samples = [CaptionedSample(f"s{i}", f"s{i}.png", ("x",)) for i in range(n)]
    return FilteredDataset(samples, 0.7, {s.sample_id: "x" for s in samples})


class TestPairs:
    @settings(max_examples=100)
    @given(st.integers(2, 60), st.integers(0, 2**31))
    def test_disjoint_pairs(self, n, seed):
        pairs = select_target_pairs(_dataset(n), seed)
        assert len(pairs) == n // 2
        ids = [s.sample_id for pair in pairs for s in pair]
        assert len(ids) == len(set(ids))
        assert all(a.sample_id != b.sample_id for a, b in pairs)

    def test_seeded(self):
        a = select_target_pairs(_dataset(10), 4)
        assert a == select_target_pairs(_dataset(10), 4)
        assert a != select_target_pairs(_dataset(10), 5)

    def test_too_few(self):
        with pytest.raises(InsufficientSamples):
            select_target_pairs(_dataset(1), 0)
