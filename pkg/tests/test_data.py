"""File formats, corpus validation, and the synthetic generator."""

import json

import numpy as np
import pytest

from kgir.data import (
    CheckpointError,
    CorpusFormatError,
    CorpusManifest,
    QueryRecord,
    Split,
    load_checkpoint,
    load_corpus,
    load_model,
    read_region_file,
    save_checkpoint,
    to_eval_queries,
    to_gallery,
    to_training_set,
    write_corpus,
    write_region_file,
)
from kgir.evaluation import GalleryImage
from kgir.model import AlignmentModel, ModelConfig, RegionFeatureSet
from kgir.retrieval import Candidate, CandidateSet, EntityRecord
from kgir.synthetic import SyntheticSpec, generate_synthetic
from kgir.text import Vocabulary, tokenize


# -- region files -------------------------------------------------------------


class TestRegionFiles:
    def test_roundtrip_identity(self, tmp_path):
        rng = np.random.default_rng(0)
        # payloads are f32 on disk; feed f32-exact values so roundtrip is identity
        original = RegionFeatureSet(
            rng.normal(size=(5, 7)).astype("<f4"),
            np.tile([0.1, 0.2, 0.7, 0.9], (5, 1)).astype("<f4"))
        path = tmp_path / "a.krff"
        write_region_file(path, original)
        loaded = read_region_file(path)
        np.testing.assert_array_equal(loaded.appearance, original.appearance)
        np.testing.assert_array_equal(loaded.boxes, original.boxes)
        # write -> read -> write is byte-identical
        path2 = tmp_path / "b.krff"
        write_region_file(path2, loaded)
        assert path.read_bytes() == path2.read_bytes()

    def test_empty_set(self, tmp_path):
        path = tmp_path / "empty.krff"
        write_region_file(path, RegionFeatureSet(np.zeros((0, 4)), np.zeros((0, 4))))
        loaded = read_region_file(path)
        assert loaded.n == 0

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.krff"
        path.write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(CorpusFormatError, match="magic"):
            read_region_file(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "trunc.krff"
        write_region_file(path, RegionFeatureSet(np.ones((3, 4)),
                                                 np.tile([0, 0, 1, 1.0], (3, 1))))
        blob = path.read_bytes()
        path.write_bytes(blob[:-5])
        with pytest.raises(CorpusFormatError, match="bytes"):
            read_region_file(path)

    def test_dim_mismatch_with_config(self, tmp_path):
        path = tmp_path / "dim.krff"
        write_region_file(path, RegionFeatureSet(np.ones((2, 4)),
                                                 np.tile([0, 0, 1, 1.0], (2, 1))))
        with pytest.raises(CorpusFormatError, match="width 4"):
            read_region_file(path, expect_dim=9)


# -- checkpoints ----------------------------------------------------------------


def small_model(seed=0):
    cfg = ModelConfig(vocab_size=11, d_model=8, n_joint_layers=1, n_heads=2,
                      query_len=3, knowledge_len=4, n_regions=2, d_app=5,
                      align_hidden=6, n_text_layers=1)
    return AlignmentModel(cfg, seed=seed)


class TestCheckpoints:
    def test_save_load_save_is_byte_identical(self, tmp_path):
        model = small_model()
        a, b = tmp_path / "a.krmt", tmp_path / "b.krmt"
        save_checkpoint(model.parameters(), model.cfg, a)
        params, cfg = load_checkpoint(a)
        reloaded = small_model(seed=99)
        for name, tensor in reloaded.parameters().items():
            tensor.data = params[name]
        save_checkpoint(reloaded.parameters(), cfg, b)
        assert a.read_bytes() == b.read_bytes()

    def test_tampered_blob_detected(self, tmp_path):
        model = small_model()
        path = tmp_path / "c.krmt"
        save_checkpoint(model.parameters(), model.cfg, path)
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="hash mismatch"):
            load_checkpoint(path)

    def test_config_guard_reports_the_diff(self, tmp_path):
        model = small_model()
        path = tmp_path / "d.krmt"
        save_checkpoint(model.parameters(), model.cfg, path)
        other = ModelConfig(**{**vars(model.cfg), "d_model": 16, "n_heads": 4})
        with pytest.raises(CheckpointError) as err:
            load_checkpoint(path, expected_config=other)
        assert "d_model" in str(err.value) and "n_heads" in str(err.value)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "e.krmt"
        path.write_bytes(b"garbage" * 10)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_load_model_runs_identically(self, tmp_path):
        model = small_model(seed=3)
        # Push params away from init so the test isn't trivially symmetric.
        for p in model.parameters().values():
            p.data = p.data + 0.01
        path = tmp_path / "f.krmt"
        save_checkpoint(model.parameters(), model.cfg, path)
        # f32 storage quantizes: compare against the quantized original.
        twin = load_model(path)
        q = np.arange(3, dtype=np.int64)[None, :]
        rng = np.random.default_rng(0)
        args = (q, np.ones((1, 3)), np.array([[5, 6, 0, 0]]), np.array([[1.0, 1, 0, 0]]),
                rng.normal(size=(1, 2, 5)), np.tile([0.1, 0.1, 0.9, 0.9], (1, 2, 1)),
                np.ones((1, 2)))
        quantized = small_model(seed=7)
        for name, p in quantized.parameters().items():
            p.data = model.parameters()[name].data.astype("<f4").astype(float)
        a = twin.forward(*args).align_logit.data
        b = quantized.forward(*args).align_logit.data
        np.testing.assert_array_equal(a, b)


# -- corpus writer / loader -------------------------------------------------------


def tiny_corpus(tmp_path):
    vocab = Vocabulary(["red", "tower", "old", "brand", "shoe"])
    entities = [
        EntityRecord("e0", "acme", "brand", "red shoe brand"),
        EntityRecord("e1", "spire", "landmark", "old tower"),
    ]
    rng = np.random.default_rng(1)
    images = []
    for i in range(2):
        regions = RegionFeatureSet(rng.normal(size=(2, 4)),
                                   np.tile([0.1, 0.1, 0.8, 0.8], (2, 1)))
        cands = CandidateSet(f"im{i}", [Candidate(f"e{i}", 0.8),
                                        Candidate(f"e{1-i}", 0.3)])
        images.append(GalleryImage(f"im{i}", regions, cands, gt_entity_id=f"e{i}"))
    queries = [
        QueryRecord("q0", "red shoe", "im0", ("visual",)),
        QueryRecord("q1", "old tower", "im1", ("factual",)),
    ]
    splits = {"train": Split(["im0", "im1"], ["q0", "q1"]),
              "gallery_small": Split(["im0", "im1"], ["q0", "q1"]),
              "gallery_large": Split(["im0", "im1"], ["q0", "q1"])}
    return write_corpus(tmp_path / "corpus", entities, images, queries, vocab, splits)


class TestCorpusRoundtrip:
    def test_valid_tiny_corpus_loads_with_stats(self, tmp_path, caplog):
        manifest = tiny_corpus(tmp_path)
        with caplog.at_level("INFO", logger="kgir.data"):
            corpus = load_corpus(manifest, expect_dim=4)
        assert len(corpus.images) == 2
        assert len(corpus.queries) == 2
        assert len(corpus.entities) == 2
        assert corpus.vocab.id_of("red") >= 5
        assert any("2 images, 2 queries, 2 entities" in m for m in caplog.messages)

    def test_dangling_query_image(self, tmp_path):
        manifest = tiny_corpus(tmp_path)
        queries_file = manifest.parent / "queries.jsonl"
        lines = queries_file.read_text().splitlines()
        bad = json.loads(lines[0])
        bad["image_id"] = "im9"
        queries_file.write_text("\n".join([json.dumps(bad)] + lines[1:]) + "\n")
        with pytest.raises(CorpusFormatError, match="im9"):
            load_corpus(manifest)

    def test_unknown_candidate_entity(self, tmp_path):
        manifest = tiny_corpus(tmp_path)
        cand_file = manifest.parent / "candidates.jsonl"
        lines = cand_file.read_text().splitlines()
        bad = json.loads(lines[0])
        bad["candidates"][0]["entity_id"] = "e9"
        cand_file.write_text("\n".join([json.dumps(bad)] + lines[1:]) + "\n")
        with pytest.raises(CorpusFormatError, match="e9"):
            load_corpus(manifest)

    def test_malformed_line_names_file_and_line(self, tmp_path):
        manifest = tiny_corpus(tmp_path)
        entities_file = manifest.parent / "entities.jsonl"
        blob = entities_file.read_text()
        entities_file.write_text(blob + "{not json\n")
        with pytest.raises(CorpusFormatError, match=r"entities\.jsonl:3"):
            load_corpus(manifest)

    def test_missing_field_reported(self, tmp_path):
        manifest = tiny_corpus(tmp_path)
        queries_file = manifest.parent / "queries.jsonl"
        lines = queries_file.read_text().splitlines()
        bad = json.loads(lines[1])
        del bad["text"]
        queries_file.write_text("\n".join([lines[0], json.dumps(bad)]) + "\n")
        with pytest.raises(CorpusFormatError, match="'text'"):
            load_corpus(manifest)

    def test_split_referencing_unknown_id(self, tmp_path):
        manifest = tiny_corpus(tmp_path)
        raw = json.loads(manifest.read_text())
        raw["splits"]["train"]["image_ids"].append("im7")
        manifest.write_text(json.dumps(raw))
        with pytest.raises(CorpusFormatError, match="im7"):
            load_corpus(manifest)

    def test_missing_region_file(self, tmp_path):
        manifest = tiny_corpus(tmp_path)
        (manifest.parent / "regions" / "im1.krff").unlink()
        with pytest.raises(CorpusFormatError, match="im1"):
            load_corpus(manifest)

    def test_manifest_json_roundtrip(self):
        manifest = CorpusManifest("e.jsonl", "regions", "c.jsonl", "q.jsonl",
                                  "v.txt", {"train": Split(["im0"], ["q0"])})
        again = CorpusManifest.from_json(manifest.to_json())
        assert again == manifest

    def test_converters_feed_model_containers(self, tmp_path):
        manifest = tiny_corpus(tmp_path)
        corpus = load_corpus(manifest)
        cfg = ModelConfig(vocab_size=len(corpus.vocab), d_model=8, n_joint_layers=1,
                          n_heads=2, query_len=4, knowledge_len=6, n_regions=2,
                          d_app=4, align_hidden=6, n_text_layers=1)
        ts = to_training_set(corpus, cfg)
        assert len(ts.items) == 2 and len(ts.images) == 2
        gallery = to_gallery(corpus, cfg)
        assert len(gallery) == 2
        queries = to_eval_queries(corpus, cfg)
        assert {q.query_id for q in queries} == {"q0", "q1"}
        assert queries[1].tags == ("factual",)


# -- synthetic generator -----------------------------------------------------------


class TestSyntheticGenerator:
    def test_spec_validation(self):
        with pytest.raises(ValueError, match="entities"):
            SyntheticSpec(n_entities=1)
        with pytest.raises(ValueError, match="gallery"):
            SyntheticSpec(n_entities=10, n_gallery_images=5)
        with pytest.raises(ValueError, match="knowledge_dependence"):
            SyntheticSpec(knowledge_dependence=1.5)
        with pytest.raises(ValueError, match="distinct scenes"):
            SyntheticSpec(n_entities=2, n_train_images=10, n_gallery_images=50)

    def test_fixed_seed_is_byte_identical(self, tmp_path):
        spec = SyntheticSpec(n_entities=4, n_train_images=12, n_gallery_images=8,
                             n_queries=30, d_app=16, n_candidates=3, seed=5)
        m1 = generate_synthetic(spec, tmp_path / "one")
        m2 = generate_synthetic(spec, tmp_path / "two")
        files1 = sorted(p.relative_to(m1.parent) for p in m1.parent.rglob("*") if p.is_file())
        files2 = sorted(p.relative_to(m2.parent) for p in m2.parent.rglob("*") if p.is_file())
        assert files1 == files2
        for rel in files1:
            assert (m1.parent / rel).read_bytes() == (m2.parent / rel).read_bytes(), rel

    def test_reference_spec_validates_under_loader(self, tmp_path):
        manifest = generate_synthetic(SyntheticSpec(seed=0), tmp_path / "ref")
        corpus = load_corpus(manifest, expect_dim=64)
        assert len(corpus.entities) == 16
        assert len(corpus.images) == 264
        assert len(corpus.queries) == 900
        assert len(corpus.splits["train"].image_ids) == 200
        assert len(corpus.splits["gallery_small"].image_ids) == 64
        assert set(corpus.splits["gallery_large"].image_ids) >= set(
            corpus.splits["gallery_small"].image_ids)

    def test_zero_knowledge_dependence_has_no_exclusive_words(self, tmp_path):
        spec = SyntheticSpec(n_entities=4, n_train_images=12, n_gallery_images=8,
                             n_queries=60, d_app=16, n_candidates=3,
                             knowledge_dependence=0.0, seed=2)
        corpus = load_corpus(generate_synthetic(spec, tmp_path / "zero"))
        exclusive = set()
        scene_detail_filler = set()
        for q in corpus.queries.values():
            scene_detail_filler |= set(tokenize(q.text))
        for e in corpus.entities.values():
            exclusive |= set(tokenize(e.knowledge_text)) - scene_detail_filler
        # every query avoids all knowledge-exclusive words, and all queries are visual
        for q in corpus.queries.values():
            assert not (set(tokenize(q.text)) & exclusive)
            assert q.tags == ("visual",)

    def test_gallery_scenes_distinct_within_entity(self, tmp_path):
        spec = SyntheticSpec(n_entities=4, n_train_images=12, n_gallery_images=16,
                             n_queries=40, d_app=16, n_candidates=3, seed=3)
        corpus = load_corpus(generate_synthetic(spec, tmp_path / "scenes"))
        gallery_queries = {q.image_id: q for q in corpus.queries.values()}
        by_entity = {}
        for image_id in corpus.splits["gallery_small"].image_ids:
            image = corpus.images[image_id]
            q = gallery_queries.get(image_id)
            if q is None:
                continue
            scene = tokenize(q.text)[0]
            by_entity.setdefault(image.gt_entity_id, []).append(scene)
        for entity, scenes in by_entity.items():
            assert len(scenes) == len(set(scenes)), entity

    def test_candidate_top1_rate_is_controllable(self, tmp_path):
        spec = SyntheticSpec(n_entities=8, n_train_images=150, n_gallery_images=50,
                             n_queries=10, d_app=16, top1_rate=0.6, seed=4)
        corpus = load_corpus(generate_synthetic(spec, tmp_path / "noisy"))
        top1_hits = [
            im.candidates.entity_ids()[0] == im.gt_entity_id
            for im in corpus.images.values()
        ]
        rate = np.mean(top1_hits)
        assert 0.5 <= rate <= 0.7
        # demoted ground truths are still among the candidates
        for im in corpus.images.values():
            assert im.gt_entity_id in im.candidates.entity_ids()

    def test_tags_partition_queries(self, tmp_path):
        spec = SyntheticSpec(n_entities=4, n_train_images=12, n_gallery_images=8,
                             n_queries=200, d_app=16, n_candidates=3,
                             knowledge_dependence=0.5, seed=6)
        corpus = load_corpus(generate_synthetic(spec, tmp_path / "tags"))
        counts = {"factual": 0, "commonsense": 0, "visual": 0}
        for q in corpus.queries.values():
            assert len(q.tags) == 1
            counts[q.tags[0]] += 1
        knowledge_share = (counts["factual"] + counts["commonsense"]) / 200
        assert 0.4 <= knowledge_share <= 0.6
        assert counts["factual"] > 0 and counts["commonsense"] > 0
