import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fullanno.errors import InvariantViolation, SchemaError
from fullanno.model import (
    BBox,
    DenseCaption,
    EnrichedImageAnnotation,
    ObjectAnnotation,
    OcrEntry,
    Provenance,
    SimpleCaption,
    canonical_serialize,
    parse_record,
    validate,
)
from fullanno.tokenizers import WhitespaceTokenizer


def obj(object_id, x=10, y=10, w=50, h=50, **kw):
    defaults = dict(category="person", score=1.0, source_id="coco-gt")
    defaults.update(kw)
    return ObjectAnnotation(object_id=object_id, bbox=BBox(x, y, w, h), **defaults)


def record(**kw):
    defaults = dict(image_id=1, file_name="a.jpg", width=640, height=480)
    defaults.update(kw)
    return EnrichedImageAnnotation(**defaults)


MINIMAL_GOLDEN = (
    b'{"image_id":1,"file_name":"a.jpg","width":640,"height":480,'
    b'"objects":[],"ocr":[],"simple_captions":[],"dense_caption":null,'
    b'"provenance":{"stage1":false,"stage2":false,"stage3":false}}'
)


class TestCanonicalSerialize:
    def test_minimal_golden_bytes(self):
        assert canonical_serialize(record()) == MINIMAL_GOLDEN

    def test_round_trip_identity(self):
        r = record(
            objects=(obj(1, x=0.5, y=1.25, w=10.5, h=20), obj(2)),
            ocr=(OcrEntry(ocr_id=7, bbox=BBox(12, 12, 5, 5), text="13",
                          confidence=0.9),),
            simple_captions=(SimpleCaption("a dog", 2),),
        )
        assert parse_record(canonical_serialize(r)) == r

    def test_round_trip_canonicalizes_insertion_order(self):
        r = record(objects=(obj(2), obj(1)))
        back = parse_record(canonical_serialize(r))
        assert [o.object_id for o in back.objects] == [1, 2]
        assert canonical_serialize(back) == canonical_serialize(r)

    def test_insertion_order_does_not_matter(self):
        objs = [obj(3), obj(1), obj(2)]
        reverse = record(objects=tuple(objs))
        sorted_rec = record(objects=tuple(sorted(objs, key=lambda o: o.object_id)))
        assert canonical_serialize(reverse) == canonical_serialize(sorted_rec)

    def test_serialize_parse_serialize_is_byte_stable(self):
        r = record(objects=(obj(1),), simple_captions=(SimpleCaption("x y", 2),))
        once = canonical_serialize(r)
        assert canonical_serialize(parse_record(once)) == once

    def test_refuses_dangling_reference(self):
        r = record(ocr=(OcrEntry(ocr_id=1, bbox=BBox(0, 0, 5, 5), text="t",
                                 confidence=0.5, matched_object_id=99),))
        with pytest.raises(InvariantViolation):
            canonical_serialize(r)

    def test_segmentation_carried_through(self):
        seg = [[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]]
        r = record(objects=(obj(1, segmentation=seg),))
        back = parse_record(canonical_serialize(r))
        assert back.objects[0].segmentation == seg


class TestParse:
    def test_rejects_non_object(self):
        with pytest.raises(SchemaError):
            parse_record(b"[]")

    def test_missing_key_names_path(self):
        doc = json.loads(MINIMAL_GOLDEN)
        del doc["objects"]
        with pytest.raises(SchemaError) as e:
            parse_record(json.dumps(doc))
        assert "$.objects" in str(e.value)

    def test_bad_bbox_names_path(self):
        doc = json.loads(MINIMAL_GOLDEN)
        doc["objects"] = [{"object_id": 1, "bbox": [1, 2], "category": "x",
                           "score": 1.0, "source_id": "s"}]
        with pytest.raises(SchemaError) as e:
            parse_record(json.dumps(doc))
        assert "bbox" in str(e.value)


class TestValidate:
    def test_valid_record(self):
        assert validate(record(objects=(obj(1),))) == []

    def test_dangling_ocr_match(self):
        r = record(ocr=(OcrEntry(ocr_id=1, bbox=BBox(0, 0, 5, 5), text="t",
                                 confidence=0.5, matched_object_id=99),))
        violations = validate(r)
        assert len(violations) == 1
        assert "missing object" in violations[0]

    def test_degenerate_box(self):
        r = record(objects=(obj(1, w=0),))
        violations = validate(r)
        assert len(violations) == 1
        assert "degenerate" in violations[0]

    def test_match_without_containment(self):
        o = obj(1, x=100, y=100, w=10, h=10, matched_ocr_ids=(5,))
        e = OcrEntry(ocr_id=5, bbox=BBox(0, 0, 5, 5), text="t", confidence=0.5,
                     matched_object_id=1)
        assert any("contain" in v for v in validate(record(objects=(o,), ocr=(e,))))

    def test_one_way_link_flagged(self):
        o = obj(1)
        e = OcrEntry(ocr_id=5, bbox=BBox(12, 12, 4, 4), text="t",
                     confidence=0.5, matched_object_id=1)
        assert any("link back" in v for v in validate(record(objects=(o,), ocr=(e,))))

    def test_non_monotone_provenance(self):
        r = record(provenance=Provenance(stage1=False, stage2=True))
        assert any("monotone" in v for v in validate(r))

    def test_token_length_checked_with_tokenizer(self):
        r = record(simple_captions=(SimpleCaption("one two three", 99),))
        assert validate(r) == []
        assert any("token_length" in v for v in validate(r, WhitespaceTokenizer()))

    def test_verified_requires_corrected_text(self):
        e = OcrEntry(ocr_id=1, bbox=BBox(0, 0, 5, 5), text="t",
                     confidence=0.5, verified=True)
        assert any("corrected_text" in v for v in validate(record(ocr=(e,))))


@settings(max_examples=200)
@given(
    n_objects=st.integers(0, 5),
    seed=st.integers(0, 10 ** 6),
    stage=st.integers(0, 3),
)
def test_round_trip_property(n_objects, seed, stage):
    rng = random.Random(seed)
    objects = tuple(
        obj(i + 1, x=rng.randrange(0, 300), y=rng.randrange(0, 200),
            w=rng.randrange(1, 100), h=rng.randrange(1, 100),
            score=rng.randrange(0, 101) / 100)
        for i in range(n_objects)
    )
    prov = Provenance(stage >= 1, stage >= 2, stage >= 3)
    dense = None
    if stage == 3:
        dense = DenseCaption(text="words here", token_length=2,
                             generator={"endpoint_id": "e", "timestamp": 0},
                             prompt_hash="ab" * 32)
    r = record(objects=objects, provenance=prov, dense_caption=dense)
    data = canonical_serialize(r)
    assert parse_record(data) == r
    assert canonical_serialize(parse_record(data)) == data
