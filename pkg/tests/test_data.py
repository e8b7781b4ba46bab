import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from plansel import NUM_PLANNERS, SENTINEL
from plansel.data import (
    DatasetManifest,
    FormatError,
    RuntimeLabelSet,
    derive_best_planner,
    derive_binary_labels,
    feature_label_correlation,
    load_manifest,
    make_folds,
    parse_graph_file,
    parse_labels,
    parse_split_file,
    pearson_matrix,
    serialize_graph,
    serialize_labels,
    serialize_splits,
    write_dataset,
)
from plansel.graph import PlanningGraph

HEADER = "task_id,domain," + ",".join(f"p{i}" for i in range(NUM_PLANNERS))


def label_row(tid, runtimes, domain="d"):
    return f"{tid},{domain}," + ",".join(str(r) for r in runtimes)


def labels(tid="t", runtimes=None, domain="d"):
    runtimes = runtimes if runtimes is not None else [SENTINEL] * NUM_PLANNERS
    return RuntimeLabelSet(tid, domain, tuple(float(r) for r in runtimes))


class TestGraphFile:
    def test_minimal(self):
        g = parse_graph_file(b"PSG1 grounded t0 dom\n1 0\n0\n")
        assert g.num_nodes == 1 and g.num_edges == 0 and g.task_id == "t0"

    def test_dangling_endpoint(self):
        with pytest.raises(FormatError, match=r":4: .*dangling"):
            parse_graph_file("PSG1 grounded t dom\n3 1\n0 0 0\n0 5\n")

    def test_bad_type_reports_line(self):
        with pytest.raises(FormatError, match=r":3: node 1 has type 9"):
            parse_graph_file("PSG1 grounded t dom\n2 0\n0 9\n")

    @pytest.mark.parametrize("text,where", [
        ("XXX grounded t d\n1 0\n0\n", ":1:"),
        ("PSG1 grounded t d\n1\n0\n", ":2:"),
        ("PSG1 grounded t d\n2 0\n0\n", ":3:"),
        ("PSG1 grounded t d\n2 1\n0 0\n0 x\n", ":4:"),
        ("PSG1 grounded t d\n2 2\n0 0\n0 1\n", "declares 2 edges"),
        ("PSG1 planar t d\n1 0\n0\n", ":1:"),
    ])
    def test_malformed(self, text, where):
        with pytest.raises(FormatError, match=where):
            parse_graph_file(text)

    @settings(max_examples=60, deadline=None)
    @given(st.data())
    def test_round_trip(self, data):
        rep = data.draw(st.sampled_from(["grounded", "lifted"]))
        k = 6 if rep == "grounded" else 15
        n = data.draw(st.integers(0, 15))
        types = data.draw(st.lists(st.integers(0, k - 1), min_size=n, max_size=n))
        edges = data.draw(st.lists(st.tuples(st.integers(0, max(n - 1, 0)),
                                             st.integers(0, max(n - 1, 0))), max_size=40)) if n else []
        text = (f"PSG1 {rep} task dom\n{n} {len(edges)}\n" + " ".join(map(str, types)) + "\n"
                + "".join(f"{s} {d}\n" for s, d in edges))
        g = parse_graph_file(text)
        canonical = serialize_graph(g)
        assert serialize_graph(parse_graph_file(canonical)) == canonical
        assert parse_graph_file(canonical) == g
        # canonical form keeps first occurrences, drops self-loops and repeats
        seen, expect = set(), []
        for e in edges:
            if e[0] != e[1] and e not in seen:
                seen.add(e)
                expect.append(e)
        assert g.edges == expect


class TestLabels:
    def test_sentinel_column(self):
        rt = [1.5] * NUM_PLANNERS
        rt[2] = 10000
        (rec,) = parse_labels(HEADER + "\n" + label_row("t", rt) + "\n")
        assert rec.runtimes[2] == 10000

    def test_column_count(self):
        with pytest.raises(FormatError, match="columns"):
            parse_labels(HEADER + "\n" + label_row("t", [1.0] * 16) + "\n")

    def test_all_sentinel_row(self):
        (rec,) = parse_labels(HEADER + "\n" + label_row("t", ["10000"] * NUM_PLANNERS))
        assert derive_binary_labels(rec).sum() == 0

    @pytest.mark.parametrize("bad", ["abc", "1800.5", "20000", "-1", "nan"])
    def test_invalid_runtime(self, bad):
        rt = ["1"] * NUM_PLANNERS
        rt[0] = bad
        with pytest.raises(FormatError):
            parse_labels(HEADER + "\n" + label_row("t", rt))

    def test_round_trip(self):
        recs = [labels("a", [0.25] + [SENTINEL] * 16), labels("b", [1800] * 17)]
        assert parse_labels(serialize_labels(recs)) == recs


class TestDerivedLabels:
    def test_binary(self):
        rt = [SENTINEL] * NUM_PLANNERS
        rt[0], rt[1] = 0.5, 1800
        bits = derive_binary_labels(labels(runtimes=rt))
        assert bits[0] == 1 and bits[1] == 1 and bits[2] == 0

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.one_of(st.floats(0, 1800), st.just(SENTINEL)),
                    min_size=NUM_PLANNERS, max_size=NUM_PLANNERS))
    def test_binary_iff_within_timeout(self, rt):
        bits = derive_binary_labels(labels(runtimes=rt))
        assert all(bits[p] == (rt[p] <= 1800) for p in range(NUM_PLANNERS))

    def test_best(self):
        assert derive_best_planner(labels(runtimes=[5, 3] + [SENTINEL] * 15)) == (1, True)
        assert derive_best_planner(labels(runtimes=[7] * 17)) == (0, True)
        assert derive_best_planner(labels()) == (0, False)


def items(n, domains):
    return [(f"t{i}", f"d{i % domains}") for i in range(n)]


class TestFolds:
    def test_random_sizes_2439(self):
        folds = make_folds(items(2439, 50), "random", 10, seed=1)
        assert sorted(len(f.test_ids) for f in folds) == [243] + [244] * 9

    def test_two_domains(self):
        folds = make_folds([("a1", "A"), ("a2", "A"), ("b1", "B")], "domain", 2, seed=3)
        tests = sorted(tuple(sorted(f.test_ids)) for f in folds)
        assert tests == [("a1", "a2"), ("b1",)]

    def test_deterministic(self):
        assert make_folds(items(100, 10), "random", 5, 7) == make_folds(items(100, 10), "random", 5, 7)
        assert make_folds(items(100, 10), "random", 5, 7) != make_folds(items(100, 10), "random", 5, 8)

    def test_too_few_domains(self):
        with pytest.raises(ValueError, match="domains"):
            make_folds(items(30, 3), "domain", 5)

    @pytest.mark.parametrize("mode", ["random", "domain"])
    @pytest.mark.parametrize("n,domains,k,seed", [(10, 5, 2, 0), (57, 11, 5, 1), (200, 23, 10, 2), (31, 31, 3, 3)])
    def test_partition(self, mode, n, domains, k, seed):
        its = items(n, domains)
        folds = make_folds(its, mode, k, seed)
        ids = {i for i, _ in its}
        domain_of = dict(its)
        seen = []
        for f in folds:
            assert set(f.train_ids) | set(f.test_ids) == ids
            assert not set(f.train_ids) & set(f.test_ids)
            seen.extend(f.test_ids)
            if mode == "domain":
                assert not {domain_of[i] for i in f.train_ids} & {domain_of[i] for i in f.test_ids}
        assert sorted(seen) == sorted(ids)
        if mode == "random":
            sizes = [len(f.test_ids) for f in folds]
            assert max(sizes) - min(sizes) <= 1

    def test_split_file(self):
        ids = [f"t{i}" for i in range(20)]
        folds = parse_split_file("fold 0 test t1 t2\nfold 1 test t3\n", ids)
        assert folds[0].test_ids == ("t1", "t2") and len(folds[0].train_ids) == 18
        assert parse_split_file(serialize_splits(folds), ids) == folds
        with pytest.raises(FormatError, match="unknown task"):
            parse_split_file("fold 0 test nope\n", ids)
        with pytest.raises(FormatError, match=":1:"):
            parse_split_file("fold zero test t1\n", ids)


class TestCorrelation:
    def test_constant_and_identity(self):
        x = np.array([1.0, 2.0, 4.0, 8.0])
        m = pearson_matrix({"const": np.ones(4), "x": x, "label": x.copy(), "neg": -x})
        assert m.get("const", "label") == 0 and m.degenerate[0, 2]
        assert m.get("x", "label") == pytest.approx(1.0, abs=1e-15)
        assert m.get("neg", "label") == pytest.approx(-1.0, abs=1e-15)
        assert np.allclose(m.values, m.values.T)

    def test_matches_numpy(self, rng):
        cols = {c: rng.normal(size=30) for c in "abcd"}
        m = pearson_matrix(cols)
        assert np.allclose(m.values, np.corrcoef(np.vstack(list(cols.values()))), atol=1e-12)

    def test_feature_equal_to_label(self):
        # mean in-degree of each graph equals its mean runtime across planners
        graphs, recs = [], []
        for i, k in enumerate([0, 1, 2, 3]):
            n = 4
            edges = [(s, d) for s in range(n) for d in range(n) if s != d][: k * n]
            graphs.append(PlanningGraph(f"t{i}", "d", "grounded", [0] * n, edges))
            recs.append(labels(f"t{i}", [float(k)] * NUM_PLANNERS))
        m = feature_label_correlation(DatasetManifest.from_memory(graphs, recs))
        assert m.get("in_degree", "time") == pytest.approx(1.0, abs=1e-12)
        assert m.get("node_type", "time") == 0 and m.degenerate[m.names.index("node_type"), m.names.index("time")]
        assert m.get("time", "time") == 1.0
        # every task is solved, so the solvable column is constant
        assert m.get("solvable", "solvable") == 0 and m.degenerate[-1, -1]

    def test_needs_three_tasks(self):
        g = [PlanningGraph(f"t{i}", "d", "grounded", [0], []) for i in range(2)]
        with pytest.raises(ValueError):
            feature_label_correlation(DatasetManifest.from_memory(g, [labels("t0"), labels("t1")]))


class TestManifest:
    def test_directory_round_trip(self, tmp_path, rng):
        graphs = [PlanningGraph(f"t{i}", f"d{i % 2}", "lifted", rng.integers(0, 15, 5),
                                rng.integers(0, 5, (6, 2))) for i in range(4)]
        recs = [labels(g.task_id, [float(i)] * NUM_PLANNERS, g.domain) for i, g in enumerate(graphs)]
        write_dataset(tmp_path, graphs, recs)
        m = load_manifest(tmp_path)
        assert m.representation == "lifted" and m.task_ids == [g.task_id for g in graphs]
        assert all(m.graph(g.task_id) == g for g in graphs)
        with pytest.raises(FormatError):
            load_manifest(tmp_path, "grounded")

    def test_duplicate_ids(self):
        g = PlanningGraph("t", "d", "grounded", [0], [])
        with pytest.raises(FormatError, match="duplicate"):
            DatasetManifest.from_memory([g, g], [labels("t"), labels("t")])
