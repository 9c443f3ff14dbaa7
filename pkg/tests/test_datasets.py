import csv

import numpy as np
import pytest

from purs.data import InteractionEvent
from purs.datasets import convert_movielens, load_movielens, subsample_users
from purs.errors import DataError

INTER = """user_id:token\titem_id:token\trating:float\ttimestamp:float
1\t10\t5\t881250949
1\t20\t3\t881250950
2\t10\t4\t891717742
2\t30\t1\t878887116
"""
ITEM = """item_id:token\tmovie_title:token_seq\trelease_year:token\tclass:token_seq
10\tToy Story\t1995\tAnimation Comedy
20\tGoldenEye\t1975\tAction
30\tUnknown\t\tComedy
"""
USER = """user_id:token\tage:token\tgender:token\toccupation:token\tzip_code:token
1\t24\tM\ttechnician\t85711
2\t53\tF\tother\t94043
"""


@pytest.fixture
def converted(tmp_path):
    src = tmp_path / "raw"
    src.mkdir()
    (src / "ml-100k.inter").write_text(INTER)
    (src / "ml-100k.item").write_text(ITEM)
    (src / "ml-100k.user").write_text(USER)
    stats = convert_movielens(src, tmp_path / "out")
    return tmp_path / "out", stats


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_stats(converted):
    _, stats = converted
    assert stats == {"events": 4, "items": 3, "users": 2}


def test_ratings_layout(converted):
    out, _ = converted
    rows = _rows(out / "ratings.csv")
    assert list(rows[0]) == ["user_id", "item_id", "rating", "timestamp"]
    assert rows[0] == {"user_id": "1", "item_id": "10", "rating": "5", "timestamp": "881250949"}


def test_item_features(converted):
    out, _ = converted
    rows = {r["item_id"]: r for r in _rows(out / "items.csv")}
    assert set(rows["10"]) == {"item_id", "year", "genre_Action", "genre_Animation", "genre_Comedy"}
    assert float(rows["10"]["year"]) == 1.0 and float(rows["20"]["year"]) == 0.0
    assert float(rows["30"]["year"]) == 0.5  # missing year sits mid-range
    assert (rows["10"]["genre_Animation"], rows["10"]["genre_Comedy"], rows["10"]["genre_Action"]) == ("1", "1", "0")


def test_user_features(converted):
    out, _ = converted
    rows = {r["user_id"]: r for r in _rows(out / "users.csv")}
    assert float(rows["1"]["age"]) == 0.0 and float(rows["2"]["age"]) == 1.0
    assert rows["1"]["gender_m"] == "1" and rows["2"]["gender_m"] == "0"
    assert rows["1"]["occ_technician"] == "1" and rows["1"]["occ_other"] == "0"


def test_load_binarises_and_attaches_features(converted):
    out, _ = converted
    events, users, items = load_movielens(out)
    labels = {(e.user_id, e.item_id): e.label for e in events}
    assert labels == {("1", "10"): 1, ("1", "20"): 0, ("2", "10"): 1, ("2", "30"): 0}
    assert set(users) == {"1", "2"} and set(items) == {"10", "20", "30"}
    assert users["1"].shape == (2 + 2,)


def test_max_events_keeps_earliest(converted):
    out, _ = converted
    events, _, _ = load_movielens(out, max_events=2)
    assert sorted(e.timestamp for e in events) == [878887116, 881250949]


def test_missing_files(tmp_path):
    with pytest.raises(DataError):
        load_movielens(tmp_path)
    with pytest.raises(DataError):
        convert_movielens(tmp_path, tmp_path / "out")


def test_subsample_users():
    events = [InteractionEvent(f"u{u}", f"i{k}", k % 2, k) for u in range(10) for k in range(3)]
    sub = subsample_users(events, 4, seed=1)
    users = {e.user_id for e in sub}
    assert len(users) == 4 and len(sub) == 12
    assert sub == subsample_users(events, 4, seed=1)
    assert len(subsample_users(events, 50)) == len(events)
    assert np.all([e in events for e in sub])
