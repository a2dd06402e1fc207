import pytest

from rlsf.trajectory import BOS, Label, PreferenceRecord, Trajectory, as_flow, check_dataset

A = Trajectory(0, (1, 2, 3))
B = Trajectory(0, (3, 2, 1))


def test_steps_expose_context():
    assert list(A.steps()) == [((0, 0, BOS), 1), ((0, 1, 1), 2), ((0, 2, 2), 3)]


def test_json_round_trip():
    assert Trajectory.from_json(A.to_json()) == A
    rec = PreferenceRecord(A, B, Label.FIRST, "run1")
    back = PreferenceRecord.from_json(rec.to_json())
    assert back == rec and back.run_id == "run1"


def test_negative_tokens_rejected():
    with pytest.raises(ValueError):
        Trajectory(0, (1, -2))


def test_kappa_weights():
    assert Label.FIRST.kappa == (1.0, 0.0)
    assert Label.SECOND.kappa == (0.0, 1.0)
    assert Label.TIE.kappa == (0.5, 0.5)


def test_identical_pair_only_tied():
    PreferenceRecord(A, A, Label.TIE)
    with pytest.raises(ValueError):
        PreferenceRecord(A, A, Label.FIRST)


def test_length_mismatch_rejected():
    with pytest.raises(ValueError):
        PreferenceRecord(A, Trajectory(0, (1, 2)), Label.TIE)


def test_as_flow():
    assert as_flow(A) == (A,)
    assert as_flow([A, B]) == (A, B)
    with pytest.raises(ValueError):
        as_flow([])
    with pytest.raises(TypeError):
        as_flow([A, (1, 2)])


def test_conflicting_labels_within_a_run():
    ok = [PreferenceRecord(A, B, Label.FIRST, "r"), PreferenceRecord(B, A, Label.SECOND, "r")]
    check_dataset(ok)
    with pytest.raises(ValueError):
        check_dataset([PreferenceRecord(A, B, Label.FIRST, "r"), PreferenceRecord(B, A, Label.FIRST, "r")])
    # Different runs may disagree.
    check_dataset([PreferenceRecord(A, B, Label.FIRST, "r1"), PreferenceRecord(A, B, Label.SECOND, "r2")])
