import numpy as np
import pytest

from metawrapper.data import (
    Instance, MalformedRowError, PackedDataset, SplitDataset, SyntheticConfig,
    SyntheticConfigError, Vocab, build_split, generate_synthetic, item_group,
    load_interactions, make_tasks, task_indices, user_group,
)


def write(tmp_path, text, name="d.tsv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_three_rows(tmp_path):
    p = write(tmp_path, "7\t10\t1\t100\tclick\n7\t11\t1\t101\tclick\n7\t12\t2\t102\tclick\n")
    data = load_interactions(p)
    assert len(data.records) == 3
    assert len(data.vocab.users) == 1 and data.vocab.n_items == 3


def test_empty_file(tmp_path):
    data = load_interactions(write(tmp_path, ""))
    assert data.records == [] and data.vocab.n_items == 0


def test_bad_item_names_line(tmp_path):
    p = write(tmp_path, "user_id\titem_id\tcategory_id\ttimestamp\tbehavior\n1\t2\t3\t4\tclick\n1\tx\t3\t5\tclick\n")
    with pytest.raises(MalformedRowError) as err:
        load_interactions(p)
    assert err.value.line == 3 and "item_id" in str(err.value)


def test_duplicates_counted(tmp_path):
    p = write(tmp_path, "1\t2\t3\t4\tclick\n1\t2\t3\t4\tclick\n1\t5\t3\t4\tclick\n")
    data = load_interactions(p)
    assert len(data.records) == 2 and data.n_duplicates == 1


def test_sorted_and_tie_broken_by_item(tmp_path):
    p = write(tmp_path, "1\t9\t0\t5\tclick\n1\t3\t0\t5\tclick\n1\t4\t0\t1\tclick\n")
    data = load_interactions(p)
    ids = [(r.timestamp, r.item_id) for r in data.records]
    assert ids == sorted(ids)


def test_vocab_roundtrip(tmp_path):
    v = Vocab({"1": 0}, {"5": 0, "9": 1}, {"3": 0}, np.array([0, 0]))
    v.save(tmp_path / "v.json")
    w = Vocab.load(tmp_path / "v.json")
    assert w.items == v.items and np.array_equal(w.item_category, v.item_category)


def interactions(tmp_path, rows):
    text = "".join(f"{u}\t{i}\t{i % 3}\t{t}\tclick\n" for u, i, t in rows)
    return load_interactions(write(tmp_path, text))


def test_split_leave_last_out(tmp_path):
    # one user with behaviours a..e = items 0..4, plus filler items never clicked
    rows = [(0, i, i) for i in range(5)] + [(1, 10 + i, i) for i in range(3)] + [(2, 20, 0), (2, 21, 1)]
    ds = build_split(interactions(tmp_path, rows), seed=0)
    u0_test = [x for x in ds.test if x.user_id == 0]
    pos = [x for x in u0_test if x.label == 1][0]
    assert pos.target_item[0] == 4 and [h[0] for h in pos.history] == [0, 1, 2, 3]
    vpos = [x for x in ds.valid if x.user_id == 0 and x.label == 1][0]
    assert vpos.target_item[0] == 3 and [h[0] for h in vpos.history] == [0, 1, 2]
    tpos = sorted((x.target_item[0], tuple(h[0] for h in x.history))
                  for x in ds.train if x.user_id == 0 and x.label == 1)
    assert tpos == [(1, (0,)), (2, (0, 1))]
    # user 2 has two behaviours and is dropped
    assert not any(x.user_id == 2 for x in ds.train + ds.valid + ds.test)
    assert ds.info["dropped_users"] == 1
    # one negative per positive, sharing the history
    for part in (ds.train, ds.valid, ds.test):
        assert sum(x.label for x in part) * 2 == len(part)


def test_history_truncated(tmp_path):
    rows = [(0, i, i) for i in range(10)] + [(1, 50, 0)]
    ds = build_split(interactions(tmp_path, rows), max_seq_len=3)
    assert all(len(x.history) <= 3 for x in ds.train + ds.valid + ds.test)
    pos = [x for x in ds.test if x.label == 1][0]
    assert [h[0] for h in pos.history] == [6, 7, 8]


def test_negatives_never_clicked(tmp_path):
    rng = np.random.default_rng(0)
    rows = []
    for u in range(40):
        items = rng.choice(60, size=rng.integers(3, 30), replace=False)
        rows += [(u, int(i), t) for t, i in enumerate(items)]
    data = interactions(tmp_path, rows)
    clicked = {}
    for r in data.records:
        clicked.setdefault(r.user_id, set()).add(r.item_id)
    n_checked = 0
    for seed in range(30):
        ds = build_split(data, seed=seed)
        for x in ds.train + ds.valid + ds.test:
            if x.label == 0:
                assert x.target_item[0] not in clicked[x.user_id]
                n_checked += 1
    assert n_checked >= 10_000


def test_split_histories_strictly_earlier(tmp_path):
    # items 0 and 1 share a timestamp, so item 1 has no strictly earlier history
    rows = [(0, 0, 1), (0, 1, 1), (0, 2, 2), (0, 3, 3), (0, 4, 4), (1, 9, 0)]
    ds = build_split(interactions(tmp_path, rows))
    ts = {i: t for _, i, t in rows}
    for x in ds.test + ds.valid + ds.train:
        if x.label == 1:
            assert all(ts[h[0]] < ts[x.target_item[0]] for h in x.history)
    assert not any(x.target_item[0] == 1 for x in ds.train if x.label == 1)


def test_task_partition_sizes():
    rng = np.random.default_rng(0)
    (d_in, d_out), = list(task_indices(100, 0.8, 128, rng))
    assert (len(d_in), len(d_out)) == (80, 20)
    (d_in, d_out), = list(task_indices(2, 0.5, 128, rng))
    assert (len(d_in), len(d_out)) == (1, 1)


def test_tasks_disjoint_exhaustive_and_short_last_batch():
    rng = np.random.default_rng(3)
    steps = list(task_indices(1000, 0.8, 128, rng))
    assert [len(i) for i, _ in steps][-1] == 800 - 6 * 128
    all_in = np.concatenate([i for i, _ in steps])
    all_out = np.concatenate([o for _, o in steps])
    assert len(np.intersect1d(all_in, all_out)) == 0
    assert sorted(np.concatenate([all_in, all_out]).tolist()) == list(range(1000))


def test_tasks_deterministic_and_resplit():
    a = list(make_tasks(list(range(50)), 0.8, np.random.default_rng(1), batch_size=8, epochs=2))
    b = list(make_tasks(list(range(50)), 0.8, np.random.default_rng(1), batch_size=8, epochs=2))
    assert [(t.d_in, t.d_out) for t in a] == [(t.d_in, t.d_out) for t in b]
    half = len(a) // 2
    assert sorted(sum((t.d_out for t in a[:half]), [])) != sorted(sum((t.d_out for t in a[half:]), []))


def test_bad_ratio():
    with pytest.raises(ValueError):
        list(task_indices(10, 1.0, 4, np.random.default_rng(0)))


def test_packed_batches():
    inst = [Instance(0, (1, 1), ((2, 2),), 1), Instance(0, (3, 0), ((4, 1), (5, 2), (6, 0)), 0)]
    b = PackedDataset(inst).all()
    assert b.mask.tolist() == [[1, 0, 0], [1, 1, 1]]
    assert b.hist_item[1].tolist() == [4, 5, 6]
    one = PackedDataset(inst).take([0])
    assert one.mask.shape == (1, 1)


def test_user_group():
    assert user_group(17) == 7


def test_synthetic_defaults(synthetic):
    ds = synthetic
    assert len(ds.train) + len(ds.test) == 10_000
    assert len(ds.test) == 1000 and ds.valid == []
    everything = ds.train + ds.test
    assert sum(x.interest for x in everything) == 5000
    for x in everything:
        same = item_group(x.target_item[0]) == user_group(x.user_id)
        assert same == (x.interest == 1)
        assert x.target_item[1] == item_group(x.target_item[0])


def test_synthetic_clicked_interest_count():
    # E = 2500, sd = sqrt(5000 * .25) ~ 35.4
    counts = []
    for seed in range(5):
        ds = generate_synthetic(SyntheticConfig(), np.random.default_rng(seed))
        counts.append(sum(x.label for x in ds.train + ds.test if x.interest == 1))
    assert all(abs(c - 2500) <= 106 for c in counts)


def test_synthetic_histories_are_training_clicks(synthetic):
    clicks = {}
    for x in synthetic.train:
        if x.label == 1:
            clicks.setdefault(x.user_id, set()).add(x.target_item[0])
    for x in synthetic.train[:2000] + synthetic.test:
        items = [h[0] for h in x.history]
        assert set(items) <= clicks[x.user_id]
        assert len(set(items)) == len(items)
        if x.label == 1 and x in synthetic.train:
            assert x.target_item[0] not in items


def test_synthetic_bad_groups():
    with pytest.raises(SyntheticConfigError):
        generate_synthetic(SyntheticConfig(item_group_modulus=1000), np.random.default_rng(0))
    with pytest.raises(SyntheticConfigError):
        generate_synthetic(SyntheticConfig(n_items=100, pos_per_user=50), np.random.default_rng(0))


def test_synthetic_deterministic(small_synthetic):
    cfg = SyntheticConfig(n_users=20, n_items=400, pos_per_user=10, neg_per_user=10, history_len=5)
    again = generate_synthetic(cfg, np.random.default_rng(0))
    assert again.train == small_synthetic.train and again.test == small_synthetic.test


def test_split_dataset_roundtrip(tmp_path, small_synthetic):
    small_synthetic.save(tmp_path / "s")
    back = SplitDataset.load(tmp_path / "s")
    assert back.train == small_synthetic.train and back.n_items == small_synthetic.n_items
