import numpy as np
import pytest

from clover import data
from clover.data import ConfigError, DataError, Interaction, RawDataset


def write_ml100k(root, n_rows=1000, bad_rows=(), users=20, items=50):
    root.mkdir(parents=True, exist_ok=True)
    (root / "u.user").write_text("".join(f"{u}|30|{'MF'[u % 2]}|writer|1234{u % 10}\n"
                                         for u in range(1, users + 1)))
    flags = "|".join(["0"] * 18 + ["1"])
    (root / "u.item").write_text("".join(f"{i}|Film {i} (1995)|01-Jan-1995||http://x/{i}|{flags}\n"
                                         for i in range(1, items + 1)))
    lines = []
    for k in range(n_rows):
        if k in bad_rows:
            lines.append("this row is not a rating")
        else:
            lines.append(f"{k % users + 1}\t{k % items + 1}\t{k % 5 + 1}\t{880000000 + k}")
    (root / "u.data").write_text("\n".join(lines) + ("\n" if lines else ""))
    return root


def test_one_malformed_row_in_a_thousand(tmp_path):
    raw = data.load_movielens(write_ml100k(tmp_path / "d", bad_rows={500}), "ml100k")
    assert len(raw.interactions) == 999
    assert raw.rejected == 1


def test_too_many_malformed_rows_is_fatal(tmp_path):
    with pytest.raises(DataError):
        data.load_movielens(write_ml100k(tmp_path / "d", n_rows=100, bad_rows={1, 2}), "ml100k")


def test_out_of_range_rating_is_rejected(tmp_path):
    root = write_ml100k(tmp_path / "d", n_rows=200)
    with open(root / "u.data", "a") as fh:
        fh.write("1\t1\t6\t880000999\n")
    raw = data.load_movielens(root, "ml100k")
    assert raw.rejected == 1 and len(raw.interactions) == 200


def test_empty_ratings_file(tmp_path, caplog):
    raw = data.load_movielens(write_ml100k(tmp_path / "d", n_rows=0), "ml100k")
    assert raw.interactions == [] and raw.rejected == 0
    assert "no interactions" in caplog.text


def test_missing_file_and_unknown_schema(tmp_path):
    root = write_ml100k(tmp_path / "d")
    (root / "u.item").unlink()
    with pytest.raises(FileNotFoundError):
        data.load_movielens(root, "ml100k")
    with pytest.raises(ConfigError):
        data.load_movielens(root, "netflix")


def test_ml100k_fixture(fixtures_dir):
    raw = data.load_movielens(fixtures_dir / "ml100k_mini", "ml100k")
    assert (len(raw.users), len(raw.items), len(raw.interactions)) == (5, 20, 72)
    raw.validate()


def test_ml1m_excerpt(fixtures_dir):
    raw = data.load_movielens(fixtures_dir / "ml1m_excerpt", "ml1m")
    assert (len(raw.users), len(raw.items), len(raw.interactions)) == (10, 30, 160)
    assert raw.rejected == 0 and raw.dropped == 0
    assert raw.items["2"] == {"year": "1982", "genre": ["Action", "Comedy", "Sci-Fi"]}
    assert raw.users["2"]["gender"] == "F"


def test_bookcrossing_excerpt(fixtures_dir):
    raw = data.load_movielens(fixtures_dir / "bookcrossing_excerpt", "bookcrossing")
    # User 12 has no age; 12 implicit zeros, 15 ratings by user 12 and one unknown ISBN are dropped.
    assert (len(raw.users), len(raw.items), len(raw.interactions)) == (11, 25, 165)
    assert raw.dropped == 28 and raw.rejected == 0
    assert raw.rating_range == (1, 10)
    assert raw.users["2"]["location"] == "germany"
    space = data.build_feature_space(raw, "age")
    assert space.sensitive_block.categories == ("old", "young")
    labels = [p.sensitive_label for p in data.encode_users(raw, "age", space)]
    # Median age 31: six users at or below, five above.
    assert labels.count(1) == 6 and labels.count(0) == 5


def test_gender_encoding_order(fixtures_dir):
    raw = data.load_movielens(fixtures_dir / "ml100k_mini", "ml100k")
    users = {p.key: p for p in data.encode_users(raw, "gender")}
    assert users["2"].block("gender").tolist() == [1.0, 0.0]
    assert users["2"].sensitive_label == 0 and users["1"].sensitive_label == 1


def test_age_and_zip_buckets(fixtures_dir):
    assert data.age_band(25) == "25" and data.age_band(34) == "25" and data.age_band(17) == "1"
    assert data.age_band(56) == "56" and data.age_band(18) == "18"
    assert data.zip_bucket("55117") == "5" and data.zip_bucket("T8H1N") == "0"
    raw = data.load_movielens(fixtures_dir / "ml100k_mini", "ml100k")
    users = {p.key: p for p in data.encode_users(raw, "gender")}
    age = users["4"].block("age")
    assert age.size == 7 and age[2] == 1.0 and age.sum() == 1.0
    assert users["4"].block("zip").tolist() == [0, 0, 0, 0, 0, 1.0, 0, 0, 0, 0]


def test_unknown_or_constant_sensitive_attribute(fixtures_dir):
    raw = data.load_movielens(fixtures_dir / "ml100k_mini", "ml100k")
    with pytest.raises(ConfigError):
        data.encode_users(raw, "religion")
    for u in raw.users.values():
        u["gender"] = "F"
    with pytest.raises(ConfigError):
        data.encode_users(raw, "gender")


def test_blocks_sum_to_one_and_genres_multi_hot(small_raw):
    space = data.build_feature_space(small_raw)
    for p in data.encode_users(small_raw, "gender", space):
        for name, vec in p.blocks:
            assert vec.sum() == 1.0, name
    for p, key in zip(data.encode_items(small_raw, space), sorted(small_raw.items, key=int)):
        assert p.block("genre").sum() == len(small_raw.items[key]["genre"]) >= 1


def test_flip_changes_only_sensitive_block_and_is_an_involution(small_raw):
    p = data.encode_users(small_raw)[0]
    q = p.flip_sensitive()
    for (n, a), (_, b) in zip(p.blocks, q.blocks):
        assert np.array_equal(a, b) == (n != "gender")
    r = q.flip_sensitive()
    assert all(np.array_equal(a, b) for (_, a), (_, b) in zip(p.blocks, r.blocks))
    assert q.sensitive_label == 1 - p.sensitive_label


def test_split_sizes():
    s = data.split_users([str(k) for k in range(943)], seed=0)
    assert (len(s.train), len(s.valid), len(s.test)) == (660, 94, 189)
    s = data.split_users([str(k) for k in range(10)], seed=0)
    assert (len(s.train), len(s.valid), len(s.test)) == (7, 1, 2)
    assert data.split_users([str(k) for k in range(10)], seed=0) == s
    assert set(s.train) | set(s.valid) | set(s.test) == {str(k) for k in range(10)}
    with pytest.raises(ValueError):
        data.split_users(["1"], (0.5, 0.1, 0.1))


def _raw_with_counts(counts):
    users = {str(u): {"gender": "FM"[u % 2], "age": "30", "occupation": "x", "zip": "1"}
             for u in range(1, len(counts) + 1)}
    items = {str(i): {"genre": ["Drama"], "year": "1990"} for i in range(1, 201)}
    inter = []
    for u, n in enumerate(counts, 1):
        for k in range(n):
            # Every user's last two interactions share a timestamp to exercise the tie-break.
            inter.append(Interaction(str(u), str(200 - k), 1 + k % 5, 1000 + min(k, n - 2)))
    return RawDataset("ml100k", users, items, inter, (1, 5))


def test_task_construction_rules():
    raw = _raw_with_counts([25, 100, 12, 13])
    ts = data.prepare(raw, "gender", ratios=(1.0, 0.0, 0.0))
    tasks = {t.user_id: t for t in ts.train}
    assert ts.dropped_users == 1 and "3" not in tasks
    assert (len(tasks["1"].support_items), len(tasks["1"].query_items)) == (15, 10)
    assert (len(tasks["2"].support_items), len(tasks["2"].query_items)) == (64, 10)
    assert len(tasks["4"].support_items) == 3
    for t in ts.train:
        assert not set(t.support_items) & set(t.query_items)
        assert t.support_times.max() <= t.query_times.min()
    # Tied last timestamps: the larger item id comes last.
    last = [ts.items.keys[r] for r in tasks["1"].query_items[-2:]]
    assert [int(k) for k in last] == sorted(int(k) for k in last)


def test_query_is_most_recent():
    raw = _raw_with_counts([30, 14])
    ts = data.prepare(raw, "gender", ratios=(1.0, 0.0, 0.0))
    t = ts.train[0]
    times = sorted(it.timestamp for it in raw.interactions if it.user == "1")
    assert sorted(t.query_times.tolist()) == times[-10:]


def test_encoding_is_deterministic(small_raw):
    a = data.prepare(small_raw, "gender", seed=1)
    b = data.prepare(small_raw, "gender", seed=1)
    for x, y in zip(a.train, b.train):
        assert x.user_id == y.user_id
        assert np.array_equal(x.support_items, y.support_items)
        assert all(np.array_equal(u, v) for (_, u), (_, v) in zip(x.user.blocks, y.user.blocks))


def test_blind_view_refuses_label_reads(small_tasks):
    t = small_tasks.train[0]
    before = t.label_reads
    _ = t.sensitive_label
    assert t.label_reads == before + 1
    with pytest.raises(data.SensitiveLabelAccess):
        _ = t.blind().sensitive_label


def test_full_ml100k_counts():
    import os
    from pathlib import Path
    root = os.environ.get("CLOVER_ML100K_DIR")
    if not root or not Path(root, "u.data").is_file():
        pytest.skip("CLOVER_ML100K_DIR not set")
    raw = data.load_movielens(root, "ml100k")
    assert (len(raw.users), len(raw.items), len(raw.interactions)) == (943, 1682, 100000)
