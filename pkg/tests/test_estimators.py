import pytest
from sklearn.base import clone

from biomx import CheckpointMerger, DatasetTranslator, MCQAEvaluator, SequencePacker, WeightQuantizer
from biomx.scoring import HashBackend

ESTIMATORS = [
    CheckpointMerger(method="ties", density=0.3),
    WeightQuantizer(bits=8, group_size=64),
    SequencePacker(chunk_len=16, sep_id=0),
    DatasetTranslator(target_lang="de", max_retries=1),
    MCQAEvaluator(backend=HashBackend(), k_shots=0, seeds=(4,)),
]


@pytest.mark.parametrize("est", ESTIMATORS, ids=lambda e: type(e).__name__)
def test_clone_preserves_params(est):
    twin = clone(est)
    assert twin is not est
    assert twin.get_params().keys() == est.get_params().keys()
    for key, value in est.get_params().items():
        other = twin.get_params()[key]
        if hasattr(value, "label"):  # backends are deep-copied by clone
            assert type(other) is type(value) and other.label == value.label
        else:
            assert other == value


@pytest.mark.parametrize("est", ESTIMATORS, ids=lambda e: type(e).__name__)
def test_repr_and_set_params(est):
    first = sorted(est.get_params())[0]
    twin = clone(est).set_params(**{first: est.get_params()[first]})
    assert type(twin).__name__ in repr(twin)


def test_unfitted_attributes_absent():
    assert not hasattr(WeightQuantizer(), "spec_")
    assert not hasattr(CheckpointMerger(), "merged_")
