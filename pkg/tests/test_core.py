import pytest
import runez

from betalab.core import canonical_json, CapacityError, checked_dataset, HIGH_GAP, InvalidInput, LOW_GAP, ModelShape
from betalab.core import PreferenceDataset, read_json, read_jsonl, round_half_up, Triplet, TripletMeta, validate_dataset, write_jsonl


def test_exceptions():
    e = InvalidInput("bad value")
    assert str(e) == "bad value"
    assert isinstance(e, ValueError)
    assert not isinstance(CapacityError("x"), ValueError)


def test_round_half_up():
    assert round_half_up(0.5) == 1
    assert round_half_up(1.5) == 2
    assert round_half_up(2.5) == 3
    assert round_half_up(2.49) == 2
    assert round_half_up(-0.5) == 0
    assert round_half_up(0.8 * 7) == 6


def test_shape():
    shape = ModelShape(P=2, T=3, V=4)
    assert str(shape) == "2x3x4"
    assert shape.dims == (2, 3, 4)
    assert shape.sequence_count == 64
    assert shape == ModelShape.from_dict(shape.to_dict())
    assert shape.validated() is shape
    assert len({shape, ModelShape(P=2, T=3, V=4)}) == 1

    assert "P must be an int >= 1" in ModelShape(P=0).problem()
    assert "V must be an int >= 2" in ModelShape(V=1).problem()
    assert "T must be an int >= 1" in ModelShape(T=1.5).problem()
    assert ModelShape(P=True).problem()
    with pytest.raises(InvalidInput):
        ModelShape(T=0).validated()

    shape.check_prompt(1)
    with pytest.raises(InvalidInput, match="prompt_id 2 out of range"):
        shape.check_prompt(2)

    with pytest.raises(InvalidInput):
        shape.check_prompt(-1)

    assert shape.response_problem((0, 1, 3)) is None
    assert shape.response_problem((0, 1)) == "response has length 2, expected 3"
    assert shape.response_problem((0, 4, 1)) == "token 4 out of range [0, 4)"
    with pytest.raises(InvalidInput):
        shape.check_response((0, -1, 0))

    shape.check_enumerable(64)
    with pytest.raises(CapacityError, match="64 sequences per prompt exceed enumeration budget 63"):
        shape.check_enumerable(63)


def test_triplet():
    meta = TripletMeta(HIGH_GAP, True, 1.5, -0.5)
    t = Triplet(1, [0, 1, 2], (3, 3, 3), meta)
    assert t.chosen == (0, 1, 2)
    assert str(t) == "x1: (0, 1, 2) > (3, 3, 3)"
    assert str(meta) == "high (flipped)"
    assert meta.reward_gap == 2.0
    assert Triplet.from_dict(t.to_dict()) == t

    swapped = t.swapped()
    assert swapped.chosen == t.rejected
    assert swapped.rejected == t.chosen
    assert swapped.meta.reward_gap == -2.0
    assert swapped.meta.label_flipped
    assert swapped.swapped() == t

    bare = Triplet(0, (0, 0, 0), (1, 1, 1))
    assert "meta" not in bare.to_dict()
    assert bare.swapped().meta is None

    with pytest.raises(InvalidInput, match="record is missing keys: rejected"):
        Triplet.from_dict(dict(prompt_id=0, chosen=[0, 0, 0]))

    with pytest.raises(InvalidInput, match="meta is missing keys: r_rejected"):
        TripletMeta.from_dict(dict(gap_class=LOW_GAP, label_flipped=False, r_chosen=1.0))


def test_dataset(handmade):
    assert len(handmade) == 4
    assert str(handmade) == "4 triplets over 2x3x4"
    assert handmade[1].prompt_id == 1
    assert [t.prompt_id for t in handmade] == [0, 1, 0, 1]
    assert handmade.by_prompt() == {0: [0, 2], 1: [1, 3]}

    sub = handmade.subset([3, 0])
    assert len(sub) == 2
    assert sub[0] == handmade[3]
    assert sub.generator_config_digest == "handmade"
    assert handmade.subset([0, 1, 2, 3]) == handmade
    assert handmade.header() == dict(P=2, T=3, V=4, generator_digest="handmade")
    assert validate_dataset(handmade) == []
    assert checked_dataset(handmade) is handmade


def test_validation(shape):
    triplets = [
        Triplet(0, (0, 1, 2), (3, 3, 3)),
        Triplet(2, (0, 1, 2), (3, 3, 3)),
        Triplet(0, (0, 1), (3, 3, 3)),
        Triplet(1, (0, 1, 2), (3, 3, 3), TripletMeta("medium")),
        Triplet(1, (0, 1, 2), (3, 3, 3), TripletMeta(LOW_GAP, False, float("inf"), 0.0)),
    ]
    problems = validate_dataset(PreferenceDataset(shape, triplets))
    assert problems == [
        "triplet 1: prompt_id 2 out of range [0, 2)",
        "triplet 2: response has length 2, expected 3",
        "triplet 3: invalid gap_class 'medium'",
        "triplet 4: non-finite true reward",
    ]
    with pytest.raises(InvalidInput, match=r"triplet 1: prompt_id 2 out of range \[0, 2\) \(and 3 more\)"):
        checked_dataset(PreferenceDataset(shape, triplets))

    assert validate_dataset(PreferenceDataset(ModelShape(V=1), [])) == ["V must be an int >= 2, got 1"]


def test_canonical_json():
    assert canonical_json(dict(b=1, a=[1, 2])) == '{"a":[1,2],"b":1}'


def test_jsonl(temp_folder, handmade):
    assert write_jsonl(handmade, "data/train.jsonl", logger=None) == 1
    lines = list(runez.readlines("data/train.jsonl"))
    assert len(lines) == 5
    assert lines[0] == '{"P":2,"T":3,"V":4,"generator_digest":"handmade"}'

    loaded = read_jsonl("data/train.jsonl")
    assert loaded == handmade
    assert loaded[2].meta.label_flipped

    # Blank lines are tolerated
    runez.write("blank.jsonl", "\n".join(lines[:2]) + "\n\n" + "\n".join(lines[2:]) + "\n", logger=None)
    assert read_jsonl("blank.jsonl") == handmade


def test_bad_jsonl(temp_folder):
    with pytest.raises(InvalidInput, match="Can't read"):
        read_jsonl("no-such-file.jsonl")

    runez.write("empty.jsonl", "", logger=None)
    with pytest.raises(InvalidInput, match="no header line"):
        read_jsonl("empty.jsonl")

    runez.write("header.jsonl", '{"P": 2, "T": 3}\n', logger=None)
    with pytest.raises(InvalidInput, match="header is missing keys: V, generator_digest"):
        read_jsonl("header.jsonl")

    header = '{"P": 2, "T": 3, "V": 4, "generator_digest": null}\n'
    runez.write("json.jsonl", header + "{oops\n", logger=None)
    with pytest.raises(InvalidInput, match="line 2: invalid json"):
        read_jsonl("json.jsonl")

    runez.write("list.jsonl", header + "[1, 2]\n", logger=None)
    with pytest.raises(InvalidInput, match="line 2: expecting an object"):
        read_jsonl("list.jsonl")

    runez.write("record.jsonl", header + '{"prompt_id": 0, "chosen": [0, 0, 0]}\n', logger=None)
    with pytest.raises(InvalidInput, match="line 2: record is missing keys"):
        read_jsonl("record.jsonl")

    runez.write("token.jsonl", header + '{"prompt_id": 0, "chosen": [0, 0, 9], "rejected": [0, 0, 0]}\n', logger=None)
    with pytest.raises(InvalidInput, match="triplet 0: token 9 out of range"):
        read_jsonl("token.jsonl")

    runez.write("shape.jsonl", '{"P": 2, "T": 3, "V": 1, "generator_digest": null}\n', logger=None)
    with pytest.raises(InvalidInput, match="V must be an int >= 2"):
        read_jsonl("shape.jsonl")



def test_read_json(temp_folder):
    runez.save_json(dict(a=1), "ok.json", logger=None)
    assert read_json("ok.json") == dict(a=1)

    with pytest.raises(InvalidInput, match="Can't read no-such-file.json"):
        read_json("no-such-file.json")

    runez.write("truncated.json", '{"a": [1, ', logger=None)
    with pytest.raises(InvalidInput, match="truncated.json: invalid json"):
        read_json("truncated.json")

    runez.write("list.json", "[1, 2]", logger=None)
    with pytest.raises(InvalidInput, match="list.json: expecting an object"):
        read_json("list.json")
