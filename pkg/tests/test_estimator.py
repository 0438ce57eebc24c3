import numpy as np
import pytest
from helpers import chain_corpus
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from miasrec import MiaSRec
from miasrec.estimator import check_sessions

TINY = dict(d=8, num_heads=2, dropout=0.0, max_epochs=3, lr=0.01)


@pytest.fixture(scope="module")
def fitted():
    sessions = [s.items for s in chain_corpus(n_sessions=30, n_items=10, max_len=5).sessions]
    return MiaSRec(**TINY, n_items=10).fit(sessions), sessions


def test_params_round_trip():
    est = MiaSRec(beta=0.3, tau=0.1)
    params = est.get_params()
    assert params["beta"] == 0.3 and params["tau"] == 0.1
    twin = clone(est)
    assert twin.get_params() == params
    assert est.set_params(dropout=0.4).dropout == 0.4


def test_not_fitted():
    with pytest.raises(NotFittedError):
        MiaSRec().predict([[1, 2]])


def test_predict_contract(fitted):
    est, sessions = fitted
    top = est.predict([[1], [3, 4, 3]])
    assert top.shape == (2, 10)
    assert sorted(top[0].tolist()) == list(range(1, 11))
    scores = est.predict_scores([[1], [3, 4, 3]])
    assert np.all(scores >= -1 - 1e-6) and np.all(scores <= 1 + 1e-6)
    assert top[1, 0] == int(np.argmax(scores[1])) + 1
    assert 0.0 <= est.score(sessions) <= 1.0
    assert len(est.history_) == 3


def test_validation():
    with pytest.raises(ValueError, match="at least 2"):
        check_sessions([[1, 2], [3]], min_len=2)
    with pytest.raises(ValueError, match="1-based"):
        check_sessions([[0, 1]])
    with pytest.raises(ValueError, match="vocabulary of 5"):
        check_sessions([[1, 9]], n_items=5)
    with pytest.raises(ValueError):
        check_sessions([])
    with pytest.raises(TypeError):
        check_sessions("abc")


def test_unknown_item_at_predict(fitted):
    est, _ = fitted
    with pytest.raises(ValueError):
        est.predict([[11]])
