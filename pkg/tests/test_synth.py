"""Scene generator: determinism, label exactness, lexicon closure, splits."""

import json

import numpy as np
import pytest

from padapt.prompt_codec import parse_box, read_records
from padapt.synth import (
    PALETTE,
    DataConfig,
    GenerationError,
    SceneSpec,
    ShapeSpec,
    build_vocabulary,
    gen_records,
    gen_scene,
    generate_dataset,
    rect_to_box,
    render_scene,
)

CFG = DataConfig(seed=7, canvas=64, grid_units=8, train_per_task=30, val_per_task=10, test_per_task=10)


def test_scene_determinism():
    img1, spec1 = gen_scene(CFG, 42)
    img2, spec2 = gen_scene(CFG, 42)
    assert np.array_equal(img1, img2)
    assert spec1 == spec2


def test_box_pixel_arithmetic():
    assert rect_to_box(8, 8, 16, 16, 64) == (0.125, 0.125, 0.25, 0.25)


def test_boxes_match_rendered_pixels():
    for seed in range(25):
        img, spec = gen_scene(CFG, seed)
        for shape in spec.shapes:
            x1, y1, x2, y2 = shape.box
            x1p, y1p, x2p, y2p = (round(v * 64) for v in (x1, y1, x2, y2))
            region = img[y1p:y2p, x1p:x2p]
            rgb = np.array(PALETTE[shape.color]) / 255.0
            assert (region == rgb).all(axis=-1).any(), "shape color missing inside its box"
            # nothing of this color outside the box
            outside = img.copy()
            outside[y1p:y2p, x1p:x2p] = 1.0
            assert not (outside == rgb).all(axis=-1).any()


def test_single_shape_scene_single_grounding_target():
    cfg = DataConfig(seed=1, max_shapes=1, train_per_task=1)
    _, spec = gen_scene(cfg, 0)
    assert len(spec.shapes) == 1
    recs = gen_records(spec, "grounding", "img.ppm")
    assert len(recs) == 1
    assert recs[0].expr == f"the {spec.shapes[0].color} {spec.shapes[0].kind}"


def test_grounding_target_matches_spec_box():
    for seed in range(20):
        _, spec = gen_scene(CFG, seed)
        for rec, shape in zip(gen_records(spec, "grounding", "x.ppm"), spec.shapes):
            parsed = parse_box(rec.target)
            for a, b in zip(parsed.corners(), shape.box):
                assert abs(a - b) <= 5e-4


def test_caption_mentions_every_color_once():
    for seed in range(20):
        _, spec = gen_scene(CFG, seed)
        caption = gen_records(spec, "caption", "x.ppm")[0].target
        for shape in spec.shapes:
            assert caption.count(shape.color) == 1


def test_vqa_color_question_rule():
    spec = SceneSpec(
        canvas=64,
        grid_units=8,
        shapes=[
            ShapeSpec("square", "red", rect_to_box(0, 0, 16, 16, 64), (0, 0, 2, 2)),
            ShapeSpec("square", "blue", rect_to_box(32, 32, 48, 48, 64), (4, 4, 2, 2)),
        ],
    )
    recs = gen_records(spec, "vqa", "x.ppm")
    questions = [r.question for r in recs]
    # two squares: "what color is the square?" would be ambiguous, so absent
    assert not any(q.startswith("what color") for q in questions)
    assert any(q == "where is the red square?" for q in questions)
    assert any(q == "how many shapes are there?" for q in questions)


def test_empty_scene_rejected():
    spec = SceneSpec(canvas=64, grid_units=8, shapes=[])
    with pytest.raises(GenerationError):
        gen_records(spec, "grounding", "x.ppm")


def test_unique_colors_within_scene():
    for seed in range(30):
        _, spec = gen_scene(CFG, seed)
        colors = [s.color for s in spec.shapes]
        assert len(colors) == len(set(colors))
        assert 1 <= len(spec.shapes) <= 3


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    manifest = generate_dataset(CFG, out)
    return out, manifest


class TestDataset:
    def test_layout(self, built):
        out, manifest = built
        for split, count in (("train", 30), ("val", 10), ("test", 10)):
            for task in ("caption", "vqa", "grounding"):
                recs = read_records(out / f"{split}_{task}.jsonl")
                assert len(recs) == count
                for rec in recs:
                    assert (out / rec.image).exists()
        assert manifest["splits"]["val"]["seed_start"] == 1_000_000

    def test_seed_ranges_disjoint(self, built):
        _, manifest = built
        ranges = [
            range(v["seed_start"], v["seed_start"] + v["count"])
            for v in manifest["splits"].values()
        ]
        for i, a in enumerate(ranges):
            for b in ranges[i + 1 :]:
                assert set(a).isdisjoint(b)

    def test_no_scene_hash_collision_across_splits(self, built):
        out, _ = built
        hashes = {}
        for split in ("train", "val", "test"):
            for idx in range(CFG.split_count(split)):
                img_path = out / f"images/{split}/{idx:05d}.ppm"
                digest = hash(img_path.read_bytes())
                assert digest not in hashes, f"{img_path} duplicates {hashes[digest]}"
                hashes[digest] = img_path

    def test_lexicon_closure(self, built):
        out, _ = built
        vocab = build_vocabulary()
        for split in ("train", "val", "test"):
            for task in ("caption", "vqa", "grounding"):
                for rec in read_records(out / f"{split}_{task}.jsonl"):
                    for text in filter(None, (rec.question, rec.expr, rec.target)):
                        assert vocab.unk_id not in vocab.tokenize(text), text

    def test_rerun_identical(self, built, tmp_path):
        out, manifest = built
        again = generate_dataset(CFG, tmp_path / "again")
        assert again == manifest
        for task in ("caption", "vqa", "grounding"):
            a = (out / f"train_{task}.jsonl").read_bytes()
            b = (tmp_path / "again" / f"train_{task}.jsonl").read_bytes()
            assert a == b
        assert (out / "manifest.json").read_bytes() == (tmp_path / "again" / "manifest.json").read_bytes()

    def test_zero_sample_split(self, tmp_path):
        cfg = DataConfig(seed=0, train_per_task=3, val_per_task=0, test_per_task=0)
        generate_dataset(cfg, tmp_path / "zero")
        assert (tmp_path / "zero" / "val_caption.jsonl").read_text() == ""
        manifest = json.loads((tmp_path / "zero" / "manifest.json").read_text())
        assert manifest["splits"]["val"]["count"] == 0


def test_render_is_pure_function_of_spec():
    _, spec = gen_scene(CFG, 3)
    assert np.array_equal(render_scene(spec), render_scene(spec))
