import numpy as np
import pytest
from pydantic import ValidationError

from lab.errors import GenerationError, InputError, ParseError
from lab.taskgen import (
    CONTRASTIVE_TASKS,
    REGION_GRID,
    AnnotationRecord,
    DistractorPools,
    KnowledgeBase,
    McqSample,
    PromptKind,
    RegionLabel,
    TaskKind,
    applicable_tasks,
    build_pools,
    build_question,
    decode_rle,
    emit_samples,
    encode_rle,
    generate_samples,
    load_mask_pbm,
    load_records,
    load_samples,
    mask_to_region,
    record_from_folder_layout,
    render_prompt_template,
    run_gen_tasks,
    save_mask_pbm,
    synthetic_records,
)


def brute_force_region(mask):
    h, w = mask.shape
    rows = [0, h // 3, 2 * h // 3, h]
    cols = [0, w // 3, 2 * w // 3, w]
    best, best_count = None, -1
    for r in range(3):
        for c in range(3):
            count = 0
            for i in range(rows[r], rows[r + 1]):
                for j in range(cols[c], cols[c + 1]):
                    count += int(mask[i, j])
            if count > best_count:
                best, best_count = REGION_GRID[3 * r + c], count
    return best


def anomalous_record(**fields):
    base = dict(record_id="r1", object_type="bottle", is_anomalous=True, defect_type="scratch",
                image="bottle/r1.png")
    base.update(fields)
    return AnnotationRecord(**base)


POOLS = DistractorPools(
    defects_by_object={"bottle": ["crack", "dent", "hole", "scratch", "stain"]},
    objects=["bottle", "cable", "capsule", "screw", "tile"],
)


def test_region_labels():
    assert len(RegionLabel) == 9
    assert REGION_GRID[0] == RegionLabel.TOP_LEFT
    assert REGION_GRID[-1] == RegionLabel.BOTTOM_RIGHT


def test_mask_to_region_examples():
    mask = np.zeros((9, 9), dtype=bool)
    mask[0, 0] = True
    assert mask_to_region(mask) == RegionLabel.TOP_LEFT

    mask = np.zeros((9, 9), dtype=bool)
    mask[6:8, 6:9] = [[1, 1, 1], [1, 1, 0]]
    mask[3:6, 3] = True
    assert mask.sum() == 8
    assert mask_to_region(mask) == RegionLabel.BOTTOM_RIGHT

    with pytest.raises(InputError, match="no defect to localize"):
        mask_to_region(np.zeros((4, 4)))


def test_mask_to_region_tie_goes_to_reading_order():
    mask = np.zeros((6, 6), dtype=bool)
    mask[5, 5] = True
    mask[0, 5] = True
    assert mask_to_region(mask) == RegionLabel.TOP_RIGHT


def test_mask_to_region_remainder_joins_last_band():
    mask = np.zeros((4, 4), dtype=bool)
    # rows split at 1 and 2, so row 3 belongs to the bottom band
    mask[3, 1] = True
    assert mask_to_region(mask) == RegionLabel.BOTTOM_CENTER


def test_mask_to_region_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        h, w = int(rng.integers(3, 65)), int(rng.integers(3, 49))
        mask = rng.random((h, w)) < rng.uniform(0.01, 0.3)
        if not mask.any():
            mask[int(rng.integers(h)), int(rng.integers(w))] = True
        assert mask_to_region(mask) == brute_force_region(mask)


def test_rle_round_trip_and_format():
    mask = np.array([[1, 1, 0], [0, 0, 1]], dtype=bool)
    assert encode_rle(mask) == "2,3:0,2,3,1"
    np.testing.assert_array_equal(decode_rle("2,3:0,2,3,1"), mask)
    rng = np.random.default_rng(1)
    for _ in range(20):
        m = rng.random((int(rng.integers(1, 10)), int(rng.integers(1, 10)))) < 0.4
        np.testing.assert_array_equal(decode_rle(encode_rle(m)), m)


@pytest.mark.parametrize("encoded", ["2,3:1,2", "garbage", "0,3:", "2,2:-1,5"])
def test_decode_rle_rejects_malformed(encoded):
    with pytest.raises(InputError):
        decode_rle(encoded)


def test_mask_bitmap_round_trip(tmp_path):
    mask = np.zeros((5, 7), dtype=bool)
    mask[1:3, 4:6] = True
    path = tmp_path / "mask.pbm"
    save_mask_pbm(mask, path)
    np.testing.assert_array_equal(load_mask_pbm(path), mask)
    with pytest.raises(InputError):
        load_mask_pbm(tmp_path / "missing.pbm")


def test_record_invariants():
    with pytest.raises(ValidationError):
        AnnotationRecord(record_id="x", object_type="bottle", is_anomalous=True, image="a.png")
    with pytest.raises(ValidationError):
        AnnotationRecord(record_id="x", object_type="bottle", is_anomalous=False, mask_rle="1,1:0,1", image="a.png")
    with pytest.raises(ValidationError):
        AnnotationRecord(record_id="x", object_type="bottle", is_anomalous=False)


def test_anomaly_discrimination():
    normal = AnnotationRecord(record_id="n", object_type="bottle", is_anomalous=False, image="n.png")
    sample = build_question(normal, TaskKind.ANOMALY_DISCRIMINATION, POOLS, np.random.default_rng(0))
    assert sorted(sample.options) == ["No", "Yes"]
    assert sample.gold_option == "No"
    defect = build_question(anomalous_record(), TaskKind.ANOMALY_DISCRIMINATION, POOLS, np.random.default_rng(0))
    assert defect.gold_option == "Yes"


def test_defect_classification_distractors():
    for seed in range(50):
        sample = build_question(anomalous_record(), TaskKind.DEFECT_CLASSIFICATION, POOLS,
                                np.random.default_rng(seed))
        assert len(sample.options) == 4
        assert sample.options.count("scratch") == 1
        assert sample.gold_option == "scratch"
        assert set(sample.options) <= set(POOLS.defects_by_object["bottle"])


def test_build_question_is_deterministic():
    first = build_question(anomalous_record(), TaskKind.DEFECT_CLASSIFICATION, POOLS, np.random.default_rng(3))
    second = build_question(anomalous_record(), TaskKind.DEFECT_CLASSIFICATION, POOLS, np.random.default_rng(3))
    assert first == second


def test_localization_from_mask_and_from_description():
    mask = np.zeros((9, 9), dtype=bool)
    mask[7, 1] = True
    sample = build_question(anomalous_record(mask_rle=encode_rle(mask)), TaskKind.DEFECT_LOCALIZATION, POOLS,
                            np.random.default_rng(0))
    assert sample.gold_option == "bottom left"
    assert len(set(sample.options)) == 4
    assert set(sample.options) <= {r.value for r in RegionLabel}
    assert sample.contrastive

    described = anomalous_record(image=None, description="A scratched bottle.",
                                 defect_location=RegionLabel.CENTER)
    sample = build_question(described, TaskKind.DEFECT_LOCALIZATION, POOLS, np.random.default_rng(0))
    assert sample.gold_option == "center"
    assert not sample.contrastive

    with pytest.raises(InputError):
        build_question(anomalous_record(), TaskKind.DEFECT_LOCALIZATION, POOLS, np.random.default_rng(0))


def test_incompatible_task_and_small_pool():
    normal = AnnotationRecord(record_id="n", object_type="bottle", is_anomalous=False, image="n.png")
    with pytest.raises(InputError):
        build_question(normal, TaskKind.DEFECT_CLASSIFICATION, POOLS, np.random.default_rng(0))
    tiny = DistractorPools({"bottle": ["scratch", "dent"]}, ["bottle"])
    with pytest.raises(GenerationError):
        build_question(anomalous_record(), TaskKind.DEFECT_CLASSIFICATION, tiny, np.random.default_rng(0))


def test_domain_knowledge_policy():
    knowledge = KnowledgeBase({"bottle": "Bottles are glass."})
    rng = np.random.default_rng(0)
    defect = build_question(anomalous_record(), TaskKind.DEFECT_CLASSIFICATION, POOLS, rng, knowledge)
    obj = build_question(anomalous_record(), TaskKind.OBJECT_CLASSIFICATION, POOLS, rng, knowledge)
    assert defect.domain_knowledge == "Bottles are glass."
    assert obj.domain_knowledge is None
    assert "Domain knowledge: Bottles are glass." in defect.prompt()
    with pytest.raises(ValidationError):
        McqSample(**{**obj.model_dump(), "domain_knowledge": "leak"})


def test_knowledge_base_from_dir(tmp_path):
    (tmp_path / "bottle.txt").write_text("Glass bottle.\n")
    (tmp_path / "screw.txt").write_text("Metal screw.")
    kb = KnowledgeBase.from_dir(tmp_path)
    assert kb.get("bottle") == "Glass bottle."
    assert kb.get("cable") is None
    with pytest.raises(InputError):
        KnowledgeBase.from_dir(tmp_path / "missing")


def test_generated_samples_satisfy_invariants():
    records = synthetic_records(60, np.random.default_rng(2))
    knowledge = KnowledgeBase({"bottle": "Glass.", "screw": "Metal."})
    samples = generate_samples(records, seed=5, knowledge=knowledge)
    by_id = {r.record_id: r for r in records}
    assert samples
    for s in samples:
        record = by_id[s.provenance["record_id"]]
        assert len(set(s.options)) == len(s.options)
        assert s.options.count(s.gold_option) == 1
        if s.task == TaskKind.ANOMALY_DISCRIMINATION:
            assert s.gold_option == ("Yes" if record.is_anomalous else "No")
        elif s.task == TaskKind.DEFECT_CLASSIFICATION:
            assert s.gold_option == record.defect_type
        elif s.task == TaskKind.OBJECT_CLASSIFICATION:
            assert s.gold_option == record.object_type
            assert s.domain_knowledge is None
        else:
            expected = mask_to_region(decode_rle(record.mask_rle)).value if record.mask_rle \
                else record.defect_location.value
            assert s.gold_option == expected
        if s.task != TaskKind.OBJECT_CLASSIFICATION and record.object_type in knowledge.entries:
            assert s.domain_knowledge == knowledge.get(record.object_type)
        assert s.contrastive == (s.task in CONTRASTIVE_TASKS and record.image is not None)


def test_generation_is_independent_of_record_order():
    records = synthetic_records(30, np.random.default_rng(4))
    forward = generate_samples(records, seed=1)
    backward = generate_samples(list(reversed(records)), seed=1)
    assert forward == backward
    record_ids = [s.provenance["record_id"] for s in forward]
    assert record_ids == sorted(record_ids)


def test_applicable_tasks():
    normal = AnnotationRecord(record_id="n", object_type="bottle", is_anomalous=False, image="n.png")
    assert applicable_tasks(normal) == [TaskKind.ANOMALY_DISCRIMINATION, TaskKind.OBJECT_CLASSIFICATION]
    assert TaskKind.DEFECT_LOCALIZATION not in applicable_tasks(anomalous_record())
    assert TaskKind.DEFECT_LOCALIZATION in applicable_tasks(anomalous_record(mask_rle="1,1:0,1"))


def test_emit_and_load_round_trip(tmp_path):
    path = tmp_path / "samples.jsonl"
    emit_samples([], path)
    assert path.read_text() == ""
    assert load_samples(path) == []

    samples = generate_samples(synthetic_records(40, np.random.default_rng(7)), seed=3)[:100]
    emit_samples(samples, path)
    assert len(path.read_text().splitlines()) == len(samples)
    assert load_samples(path) == samples


def test_load_samples_reports_truncated_line(tmp_path):
    samples = generate_samples(synthetic_records(3, np.random.default_rng(0)), seed=0)
    path = tmp_path / "samples.jsonl"
    emit_samples(samples, path)
    text = path.read_text()
    path.write_text(text[:-20])
    with pytest.raises(ParseError) as err:
        load_samples(path)
    assert err.value.line == len(samples)


def test_render_prompt_templates():
    text = render_prompt_template(PromptKind.DEFECT_DESCRIPTION, object_type="bottle", defect_type="crack",
                                  defect_location="top left")
    assert "bottle" in text and "crack" in text and "top left" in text
    assert "$" not in text
    assert text == render_prompt_template("defect_description", object_type="bottle", defect_type="crack",
                                          defect_location="top left")
    for kind in PromptKind:
        assert "$" not in render_prompt_template(kind, object_type="cable", defect_type="cut",
                                                 defect_location="center")
    with pytest.raises(InputError):
        render_prompt_template(PromptKind.DEFECT_KNOWLEDGE, object_type="bottle")


def test_folder_layout_adapter():
    normal = record_from_folder_layout("bottle", "good", "bottle/test/good/000.png")
    assert not normal.is_anomalous and normal.defect_type is None
    broken = record_from_folder_layout("bottle", "broken_large", "bottle/test/broken_large/003.png",
                                       mask_path="bottle/ground_truth/broken_large/003_mask.png")
    assert broken.defect_type == "broken large"
    assert broken.record_id == "bottle/test/broken_large/003"


def test_run_gen_tasks_from_records(tmp_path):
    mask = np.zeros((6, 6), dtype=bool)
    mask[0:2, 4:6] = True
    save_mask_pbm(mask, tmp_path / "m1.pbm")
    lines = [
        anomalous_record(record_id="a1", mask_path="m1.pbm").model_dump_json(),
        AnnotationRecord(record_id="n1", object_type="bottle", is_anomalous=False, image="n1.png").model_dump_json(),
    ]
    (tmp_path / "records.jsonl").write_text("\n".join(lines) + "\n")
    assert len(load_records(tmp_path / "records.jsonl")) == 2
    samples = run_gen_tasks(tmp_path / "out.jsonl", seed=0, records_path=tmp_path / "records.jsonl")
    by_task = {s.task: s for s in samples if s.provenance["record_id"] == "a1"}
    assert by_task[TaskKind.DEFECT_LOCALIZATION].gold_option == "top right"
    # defect pool has one entry and the object pool one object: those tasks are skipped
    assert TaskKind.DEFECT_CLASSIFICATION not in by_task
    assert load_samples(tmp_path / "out.jsonl") == samples


def test_build_pools_groups_defects_by_object():
    records = [
        anomalous_record(record_id="a", defect_type="scratch"),
        anomalous_record(record_id="b", defect_type="crack"),
        anomalous_record(record_id="c", object_type="screw", defect_type="scratch"),
        AnnotationRecord(record_id="d", object_type="tile", is_anomalous=False, image="d.png"),
    ]
    pools = build_pools(records)
    assert pools.defects_by_object == {"bottle": ["crack", "scratch"], "screw": ["scratch"]}
    assert pools.objects == ["bottle", "screw", "tile"]
