import csv
import io
import json
import random
from types import SimpleNamespace

import pytest

from agromas.bench import Report, aggregate, bucket, load_dataset, render, run_bench, score
from agromas.config import EngineConfig
from agromas.errors import AggregationError, DatasetError

import scenarios as S


def rec(i, category="DI", n_images=1):
    return SimpleNamespace(id=f"r{i}", category=category, images=[None] * n_images)


def config():
    return EngineConfig.model_validate(S.config_dict())


# --- loading ---------------------------------------------------------------------


def test_load_valid_dataset(tmp_path):
    rows, _ = S.bench_records(3, set())
    records = load_dataset(S.write_dataset(tmp_path, rows))
    assert [r.id for r in records] == ["q000", "q001", "q002"]
    assert records[0].images[0].uri == str((tmp_path / "img/0_1.png").resolve())
    q = records[1].to_query(seed=4)
    assert q.letters == ["A", "B", "C", "D"] and q.metadata == {"location": "Toowoomba"} and q.seed == 4


def test_load_reports_every_bad_line(tmp_path):
    rows, _ = S.bench_records(4, set())
    rows[1]["answer"] = "E"
    rows[3]["images"] = []
    path = S.write_dataset(tmp_path, rows)
    with path.open("a") as fh:
        fh.write("{not json\n")
        fh.write(json.dumps(rows[0]) + "\n")
    with pytest.raises(DatasetError) as err:
        load_dataset(path)
    lines = [line for line, _ in err.value.problems]
    assert lines == [2, 4, 5, 6]
    msgs = dict(err.value.problems)
    assert "'E'" in msgs[2] and "images" in msgs[4] and "duplicate id" in msgs[6]


def test_load_missing_image(tmp_path):
    rows, _ = S.bench_records(1, set())
    path = S.write_dataset(tmp_path, rows)
    (tmp_path / rows[0]["images"][0]["uri"]).unlink()
    with pytest.raises(DatasetError, match="not found"):
        load_dataset(path)
    assert len(load_dataset(path, check_images=False)) == 1


def test_too_many_images(tmp_path):
    rows, _ = S.bench_records(1, set())
    rows[0]["images"] = [{"id": f"i{k}", "uri": f"img/{k}.png"} for k in range(11)]
    with pytest.raises(DatasetError):
        load_dataset(S.write_dataset(tmp_path, rows))


# --- scoring ---------------------------------------------------------------------


def test_score():
    assert score("B", "B") == 1
    assert score(" b ", "B") == 1
    assert score("C", "B") == 0
    assert score(None, "B") == 0


def test_bucket():
    assert [bucket(n) for n in (1, 2, 3, 4, 10)] == [1, 2, 3, "4+", "4+"]
    with pytest.raises(ValueError):
        bucket(0)


def test_aggregate_worked_example():
    data = [(rec(0, "DI", 1), "A", 1), (rec(1, "DI", 2), "B", 1), (rec(2, "PI", 4), "C", 0), (rec(3, "PI", 1), "A", 1)]
    report = aggregate(data)
    assert report.overall_accuracy == 0.75 and report.n == 4
    assert report.per_category["DI"].accuracy == 1.0 and report.per_category["PI"].accuracy == 0.5
    assert report.macro_average == 0.75
    assert {k: (c.correct, c.total) for k, c in report.per_bucket.items()} == {"1": (2, 2), "2": (1, 1), "4+": (0, 1)}


def test_aggregate_rejects_empty_and_duplicates():
    with pytest.raises(AggregationError):
        aggregate([])
    with pytest.raises(AggregationError, match="r1"):
        aggregate([(rec(1), "A", 1), (rec(1), "A", 1)])


def test_aggregate_against_recount():
    rng = random.Random(3)
    for _ in range(200):
        n = rng.randint(1, 60)
        data = [(rec(i, rng.choice("DI PI SI MI SD".split()), rng.randint(1, 10)), None, rng.randint(0, 1))
                for i in range(n)]
        report = aggregate(data)
        assert report.overall_accuracy == sum(s for _, _, s in data) / n
        for cat, cell in report.per_category.items():
            scores = [s for r, _, s in data if r.category == cat]
            assert (cell.correct, cell.total) == (sum(scores), len(scores))
        accs = [c.accuracy for c in report.per_category.values()]
        assert report.macro_average == pytest.approx(sum(accs) / len(accs), abs=1e-15)
        assert sum(c.total for c in report.per_bucket.values()) == n
        # Micro and macro coincide when categories are equally sized.
        sizes = {c.total for c in report.per_category.values()}
        if len(sizes) == 1:
            assert report.macro_average == pytest.approx(report.overall_accuracy, abs=1e-12)


# --- rendering -------------------------------------------------------------------


def gpt4o_report():
    # 10000-per-category denominators reproduce two-decimal percentages exactly.
    acc = {"DI": 8526, "PI": 8989, "SI": 8788, "MI": 9184, "SD": 8871}
    data, i = [], 0
    for cat, correct in acc.items():
        for k in range(10000):
            data.append((rec(i, cat, 1 + (k % 4)), None, int(k < correct)))
            i += 1
    return aggregate(data)


def test_render_markdown():
    out = render(gpt4o_report(), "markdown")
    assert "| Category | DI | PI | SI | MI | SD | Average |" in out
    assert "| Accuracy | 85.26 | 89.89 | 87.88 | 91.84 | 88.71 | 88.72 |" in out
    assert "| Num of Images | 1 | 2 | 3 | 4+ |" in out


def test_render_csv():
    tables = render(gpt4o_report(), "csv").split("\n\n")
    cats = list(csv.reader(io.StringIO(tables[0])))
    assert cats[0][-1] == "Average" and cats[1][-1] == "88.72"
    assert list(csv.reader(io.StringIO(tables[1])))[0] == ["1", "2", "3", "4+"]


def test_render_missing_cells_dash():
    out = render(aggregate([(rec(0, "MI", 2), "A", 1)]), "markdown")
    assert "| Accuracy | - | - | - | 100.00 | - | 100.00 |" in out
    assert "| Accuracy | - | 100.00 | - | - |" in out


def test_render_json_round_trip():
    report = gpt4o_report()
    assert Report.model_validate_json(render(report, "json")) == report


# --- run_bench -------------------------------------------------------------------


def test_run_bench_scripted(tmp_path):
    rows, predicted = S.bench_records(4, {0, 1, 2})
    records = load_dataset(S.write_dataset(tmp_path, rows))
    report, out = run_bench(records, config(), script=S.bench_script(predicted),
                            results_path=tmp_path / "r.jsonl", trace_dir=tmp_path)
    assert report.overall_accuracy == 0.75
    assert [r["score"] for r in out] == [1, 1, 1, 0]
    saved = [json.loads(x) for x in (tmp_path / "r.jsonl").read_text().splitlines()]
    assert saved == out
    assert sorted(p.name for p in tmp_path.glob("q*.jsonl")) == [f"q00{i}.jsonl" for i in range(4)]


def test_run_bench_failed_session_scores_zero(tmp_path):
    rows, predicted = S.bench_records(3, {0, 1, 2})
    records = load_dataset(S.write_dataset(tmp_path, rows))
    del predicted[rows[1]["question"]]
    report, out = run_bench(records, config(), script=S.bench_script(predicted))
    assert [r["failed"] for r in out] == [False, True, False]
    assert out[1]["score"] == 0 and out[1]["predicted"] is None
    assert report.n == 3 and report.overall_accuracy == pytest.approx(2 / 3)


def test_run_bench_concurrency_independent(tmp_path):
    rows, predicted = S.bench_records(12, {0, 3, 4, 7, 9, 10})
    records = load_dataset(S.write_dataset(tmp_path, rows))
    script = S.bench_script(predicted)
    serial, rows1 = run_bench(records, config(), script=script, concurrency=1)
    parallel, rows4 = run_bench(records, config(), script=script, concurrency=4)
    assert serial == parallel and rows1 == rows4
    assert serial.overall_accuracy == 0.5


def test_run_bench_rejects_bad_concurrency(tmp_path):
    with pytest.raises(ValueError):
        run_bench([], config(), script=[], concurrency=0)
