import json
import random
import threading
import urllib.error
import urllib.request
from collections import Counter

import pytest

from clusterbench.webmon import (DEFAULT_COLUMNS, ENDPOINTS, FILTER_FIELDS, QUERY_EXAMPLES, JobView, QueryError,
                                 StateSnapshot, apinfo, format_cell, make_server, parse_filter, parse_query,
                                 render_apinfo_html, render_html, render_json, select_jobs, serve)

from webmon_util import clause_text, html_rows, random_clauses, random_snapshot, reference_filter


@pytest.fixture
def server():
    holder = {"snap": random_snapshot(random.Random(0), 12)}
    srv = make_server(lambda: holder["snap"])
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    yield srv, holder
    srv.shutdown()
    srv.server_close()


def get(srv, path):
    url = f"http://127.0.0.1:{srv.server_address[1]}{path}"
    try:
        with urllib.request.urlopen(url, timeout=5) as r:
            return r.status, r.read().decode()
    except urllib.error.HTTPError as e:
        return e.code, e.read().decode()


# --------------------------------------------------------------------- parser

@pytest.mark.parametrize("text", ["tstart", "rss:100..500,state:Running", "attempts:2..", "duration:..5",
                                  "name:job1", "rss:1.5"])
def test_valid_filters(text):
    assert len(parse_filter(text).clauses) == len(text.split(","))


@pytest.mark.parametrize("text", ["bogus", "rss:abc", "state:a..b", "rss:5..1", "rss:..", "rss:", "tstart,,rss",
                                  "cpu:1"])
def test_invalid_filters(text):
    with pytest.raises(QueryError):
        parse_filter(text)


def test_query_params():
    q = parse_query("flt=tstart&fmt=json&cols=name,state&refresh=5&all=1")
    assert (q.fmt, q.cols, q.refresh, q.all) == ("json", ("name", "state"), 5, True)
    for bad in ("fmt=xml", "cols=name,cpu", "refresh=0", "refresh=x", "page=2"):
        with pytest.raises(QueryError):
            parse_query(bad)


def test_apinfo_cross_check():
    info = apinfo()
    assert set(info["endpoints"]) == set(ENDPOINTS) and len(info["endpoints"]) == 4
    for field in info["fields"]:
        parse_filter(field)
    for example in info["examples"]:
        path, _, qs = example.partition("?")
        assert path in ENDPOINTS
        parse_query(qs)
    assert info["examples"] == QUERY_EXAMPLES


# ------------------------------------------------------------------- rendering

def test_presence_filter_on_tstart():
    snap = random_snapshot(random.Random(1), 30)
    got = select_jobs(snap, parse_query("flt=tstart"))
    assert got == [j for j in snap.jobs if j.tstart is not None]
    assert 0 < len(got) < len(snap.jobs)


def test_empty_pool_page():
    snap = StateSnapshot(timestamp=0.0)
    doc = render_html(snap, parse_query(""))
    rows, scripts = html_rows(doc)
    assert rows == [] and scripts == 0
    assert doc.count("<th>") >= len(DEFAULT_COLUMNS)
    assert all(f"<th>{c}</th>" in doc for c in DEFAULT_COLUMNS)


def test_column_selection():
    snap = random_snapshot(random.Random(2), 3)
    rows, _ = html_rows(render_html(snap, parse_query("cols=name,state")))
    assert len(rows) == 3 and all(len(r) == 2 for r in rows)


def test_refresh_is_meta_only():
    doc = render_html(random_snapshot(random.Random(3), 2), parse_query("refresh=7"))
    assert '<meta http-equiv="refresh" content="7">' in doc
    assert "<script" not in doc.lower()


def test_json_default_columns():
    snap = random_snapshot(random.Random(4), 5)
    out = json.loads(render_json(snap, parse_query("fmt=json")))
    assert [tuple(r) for r in out["jobs"]] == [DEFAULT_COLUMNS] * 5


def test_tasks_pruned_by_filter():
    snap = random_snapshot(random.Random(5), 20)
    q = parse_query("flt=state:Running&fmt=json")
    out = json.loads(render_json(snap, q, "/tasks"))
    names = [j["name"] for t in out["tasks"] for j in t["jobs"]]
    assert sorted(names) == sorted(j.name for j in snap.jobs if j.state == "Running")
    assert all(t["jobs"] for t in out["tasks"])


def test_html_escapes_values():
    job = JobView("<b>x</b>", "t", "Running", None, None, None, 1)
    doc = render_html(StateSnapshot(0.0, jobs=[job]), parse_query(""))
    assert "<b>x</b>" not in doc and "&lt;b&gt;" in doc


@pytest.mark.parametrize("seed", range(50))
def test_json_html_and_reference_agree(seed):
    rng = random.Random(seed)
    snap = random_snapshot(rng)
    clauses = random_clauses(rng, snap.jobs)
    cols = rng.sample(list(FILTER_FIELDS), rng.randint(1, len(FILTER_FIELDS)))
    qs = f"flt={clause_text(clauses)}&cols={','.join(cols)}"
    want = reference_filter(snap.jobs, clauses)
    data = json.loads(render_json(snap, parse_query(qs + "&fmt=json")))["jobs"]
    assert len(data) == len(want)
    if "name" in cols:
        assert [r["name"] for r in data] == [j.name for j in want]
    rows, scripts = html_rows(render_html(snap, parse_query(qs)))
    assert scripts == 0
    as_text = Counter(tuple(format_cell(c, r[c]) for c in cols) for r in data)
    assert Counter(rows) == as_text


# ---------------------------------------------------------------------- server

def test_server_endpoints(server):
    srv, holder = server
    for path in ENDPOINTS:
        status, body = get(srv, path)
        assert status == 200
        assert "<script" not in body.lower()
    status, body = get(srv, "/jobs?flt=tstart&fmt=json")
    names = [j["name"] for j in json.loads(body)["jobs"]]
    assert names == [j.name for j in holder["snap"].jobs if j.tstart is not None]
    status, body = get(srv, "/apinfo?fmt=json")
    assert json.loads(body) == apinfo()


def test_server_errors(server):
    srv, _ = server
    status, body = get(srv, "/jobs?flt=bogus:1")
    assert status == 400 and "bogus:1" in body
    assert get(srv, "/nowhere")[0] == 404


def test_server_sees_new_snapshots(server):
    srv, holder = server
    holder["snap"] = StateSnapshot(timestamp=1.0)
    assert json.loads(get(srv, "/jobs?fmt=json")[1])["jobs"] == []


def test_port_zero_disables():
    assert serve(lambda: None, 0) is None


def test_apinfo_html_static():
    doc = render_apinfo_html()
    assert all(p in doc for p in ENDPOINTS)
    assert "<script" not in doc.lower()
