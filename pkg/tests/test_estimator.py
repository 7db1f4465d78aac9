import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from selectod import corpus as C
from selectod import evaluator as E
from selectod.estimator import TODSystem, check_corpus, check_dialogues


@pytest.fixture(scope="module")
def corpus():
    return C.generate_corpus({"domains": ["restaurant", "hotel"], "dialogues_per_combination": 4, "seed": 2})


TINY = dict(d_model=16, n_heads=2, n_layers=1, epochs=1, batch_size=4, max_steps=3, max_decode_len=8)


def test_params_roundtrip_and_clone():
    est = TODSystem(variant="differentiable", delta=0.25)
    params = est.get_params()
    assert params["variant"] == "differentiable" and params["delta"] == 0.25
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(tau_final=0.5)
    assert est.tau_final == 0.5


def test_unfitted_estimator_refuses_to_predict():
    with pytest.raises(NotFittedError):
        TODSystem().predict("test")


def test_check_corpus(corpus, tmp_path):
    assert check_corpus(corpus) is corpus
    C.save_corpus(corpus, tmp_path / "c")
    assert check_corpus(str(tmp_path / "c")).dialogues == corpus.dialogues
    with pytest.raises(FileNotFoundError):
        check_corpus(str(tmp_path / "missing"))
    with pytest.raises(TypeError):
        check_corpus(42)


def test_check_dialogues(corpus):
    assert check_dialogues("dev", corpus) == corpus.split("dev")
    assert check_dialogues(corpus, corpus) == corpus.split("test")
    some = corpus.dialogues[:2]
    assert check_dialogues(some, corpus) == some
    with pytest.raises(ValueError):
        check_dialogues("validation", corpus)
    with pytest.raises(ValueError):
        check_dialogues([], corpus)
    with pytest.raises(TypeError):
        check_dialogues([1, 2], corpus)


def test_invalid_variant_is_reported_at_fit(corpus):
    with pytest.raises(ValueError):
        TODSystem(variant="sideways", **TINY).fit(corpus)


@pytest.mark.parametrize("variant", ["none", "after_encoder"])
def test_fit_predict_score(corpus, tmp_path, variant):
    est = TODSystem(variant=variant, out_dir=str(tmp_path), **TINY).fit(corpus)
    assert est.n_parameters_ == est.model_.n_parameters(est.variant) > 0
    assert est.train_state_.step == 3
    gens = est.predict("dev")
    assert [g.dialogue_id for g in gens] == [d.dialogue_id for d in corpus.split("dev")]
    assert all(isinstance(t, E.TurnOutput) for g in gens for t in g.turns)
    score = est.score("dev")
    report = est.evaluate("dev")
    assert score == report.combined
    assert 0.0 <= score <= 200.0
