"""Read-only web monitor over pool state snapshots.

Endpoints: ``/jobs``, ``/tasks``, ``/failures`` and ``/apinfo``. Pages are
plain HTML tables (no scripts, so text browsers render them the same) or
JSON with ``fmt=json``. The server only ever reads snapshots the pool has
already published; it never touches live scheduler state.

Query parameters::

    flt=<clause>[,<clause>...]   clause: field | field:value | field:lo..hi | field:lo.. | field:..hi
    fmt=html|json
    cols=<field>[,<field>...]
    refresh=<seconds>            live listing through a meta refresh
    all=1                        /jobs only: include finished jobs
"""
import html
import json
import logging
import threading
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional
from urllib.parse import parse_qs, urlsplit

logger = logging.getLogger(__name__)

FILTER_FIELDS = {
    "name": str,
    "task": str,
    "state": str,
    "tstart": float,
    "duration": float,
    "rss": float,
    "attempts": int,
}
DEFAULT_COLUMNS = tuple(FILTER_FIELDS)
ENDPOINTS = {
    "/jobs": "all executing and scheduled jobs (add all=1 to include finished ones)",
    "/tasks": "hierarchies of the executing and scheduled tasks with their jobs",
    "/failures": "hierarchies of the failed tasks with their failed jobs",
    "/apinfo": "this description of endpoints, fields and the query grammar",
}
QUERY_EXAMPLES = [
    "/jobs?flt=tstart",
    "/jobs?flt=rss:100..500,state:Running&fmt=json",
    "/jobs?flt=attempts:2..&cols=name,state,attempts",
    "/tasks?flt=state:Running&refresh=5",
    "/failures?fmt=json",
]


class QueryError(ValueError):
    pass


# ------------------------------------------------------------------ snapshot

@dataclass(frozen=True)
class JobView:
    name: str
    task: str
    state: str
    tstart: Optional[float]
    duration: Optional[float]
    rss: Optional[float]
    attempts: int
    category: str = ""


@dataclass(frozen=True)
class TaskView:
    name: str
    path: str
    state: str
    jobs: list = field(default_factory=list)
    tasks: list = field(default_factory=list)

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], d["path"], d["state"], [JobView(**j) for j in d["jobs"]],
                   [cls.from_dict(t) for t in d["tasks"]])


@dataclass(frozen=True)
class SystemSummary:
    ram_total_mib: float = 0.0
    ram_used_mib: float = 0.0
    load_avg: tuple = (0.0, 0.0, 0.0)
    workers: int = 0
    worker_cap: Optional[int] = None
    pending: int = 0
    cpus: int = 0


@dataclass(frozen=True)
class StateSnapshot:
    timestamp: float
    system: SystemSummary = field(default_factory=SystemSummary)
    jobs: list = field(default_factory=list)
    tasks: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    failed_jobs: list = field(default_factory=list)
    all_jobs: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        sysd = dict(d.get("system", {}))
        if "load_avg" in sysd:
            sysd["load_avg"] = tuple(sysd["load_avg"])
        return cls(
            timestamp=d["timestamp"], system=SystemSummary(**sysd),
            jobs=[JobView(**j) for j in d.get("jobs", [])],
            tasks=[TaskView.from_dict(t) for t in d.get("tasks", [])],
            failures=[TaskView.from_dict(t) for t in d.get("failures", [])],
            failed_jobs=[JobView(**j) for j in d.get("failed_jobs", [])],
            all_jobs=[JobView(**j) for j in d.get("all_jobs", [])])

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def empty_snapshot():
    return StateSnapshot(timestamp=0.0)


# -------------------------------------------------------------------- filter

@dataclass(frozen=True)
class Clause:
    field: str
    value: object = None  # exact value
    lo: Optional[float] = None
    hi: Optional[float] = None
    presence: bool = False

    def matches(self, row):
        v = getattr(row, self.field) if not isinstance(row, dict) else row.get(self.field)
        if v is None or v == "":
            return False
        if self.presence:
            return True
        if self.value is not None:
            if FILTER_FIELDS[self.field] is str:
                return str(v) == self.value
            return float(v) == float(self.value)
        if self.lo is not None and v < self.lo:
            return False
        if self.hi is not None and v > self.hi:
            return False
        return True


@dataclass(frozen=True)
class FilterQuery:
    clauses: tuple = ()

    def matches(self, row):
        return all(c.matches(row) for c in self.clauses)

    def __bool__(self):
        return bool(self.clauses)


def _number(text, ftype, clause):
    try:
        return ftype(text) if ftype is int and text.lstrip("-").isdigit() else float(text)
    except ValueError:
        raise QueryError(f"bad number {text!r} in clause {clause!r}") from None


def parse_filter(text):
    """Parse the ``flt`` grammar; unknown fields and malformed clauses raise QueryError."""
    clauses = []
    if not text:
        return FilterQuery()
    for raw in text.split(","):
        clause = raw.strip()
        if not clause:
            raise QueryError(f"empty clause in {text!r}")
        name, sep, spec = clause.partition(":")
        name = name.strip()
        if name not in FILTER_FIELDS:
            raise QueryError(f"unknown field {name!r} in clause {clause!r}")
        ftype = FILTER_FIELDS[name]
        if not sep:
            clauses.append(Clause(name, presence=True))
            continue
        if spec == "":
            raise QueryError(f"missing value in clause {clause!r}")
        if ".." in spec:
            if ftype is str:
                raise QueryError(f"range on text field in clause {clause!r}")
            lo, _, hi = spec.partition("..")
            if lo == "" and hi == "":
                raise QueryError(f"empty range in clause {clause!r}")
            lo_v = _number(lo, ftype, clause) if lo != "" else None
            hi_v = _number(hi, ftype, clause) if hi != "" else None
            if lo_v is not None and hi_v is not None and lo_v > hi_v:
                raise QueryError(f"inverted range in clause {clause!r}")
            clauses.append(Clause(name, lo=lo_v, hi=hi_v))
        else:
            value = spec if ftype is str else _number(spec, ftype, clause)
            clauses.append(Clause(name, value=value))
    return FilterQuery(tuple(clauses))


def parse_columns(text):
    if not text:
        return DEFAULT_COLUMNS
    cols = tuple(c.strip() for c in text.split(",") if c.strip())
    bad = [c for c in cols if c not in FILTER_FIELDS]
    if bad:
        raise QueryError(f"unknown column {bad[0]!r}")
    return cols


@dataclass(frozen=True)
class Query:
    flt: FilterQuery = FilterQuery()
    fmt: str = "html"
    cols: tuple = DEFAULT_COLUMNS
    refresh: Optional[int] = None
    all: bool = False


def parse_query(qs):
    params = {k: v[-1] for k, v in parse_qs(qs, keep_blank_values=True).items()}
    unknown = set(params) - {"flt", "fmt", "cols", "refresh", "all"}
    if unknown:
        raise QueryError(f"unknown parameter {sorted(unknown)[0]!r}")
    fmt = params.get("fmt", "html") or "html"
    if fmt not in ("html", "json"):
        raise QueryError(f"fmt must be html or json, got {fmt!r}")
    refresh = params.get("refresh")
    if refresh is not None:
        if not refresh.isdigit() or int(refresh) < 1:
            raise QueryError(f"refresh must be a positive integer, got {refresh!r}")
        refresh = int(refresh)
    return Query(parse_filter(params.get("flt", "")), fmt, parse_columns(params.get("cols", "")),
                 refresh, params.get("all", "0") not in ("", "0", "false"))


# ------------------------------------------------------------------- views

def select_jobs(snapshot, query):
    rows = snapshot.all_jobs if query.all else snapshot.jobs
    return [j for j in rows if query.flt.matches(j)]


def _prune(task, flt):
    """Keep jobs passing the filter, and the subtasks that still hold any."""
    subs = [t for t in (_prune(t, flt) for t in task.tasks) if t is not None]
    jobs = [j for j in task.jobs if flt.matches(j)]
    if flt and not jobs and not subs:
        return None
    return TaskView(task.name, task.path, task.state, jobs, subs)


def select_tasks(forest, query):
    return [t for t in (_prune(t, query.flt) for t in forest) if t is not None]


def job_row(job, cols):
    return {c: getattr(job, c) for c in cols}


def task_json(task, cols):
    return {"name": task.name, "path": task.path, "state": task.state,
            "jobs": [job_row(j, cols) for j in task.jobs],
            "tasks": [task_json(t, cols) for t in task.tasks]}


def format_cell(col, value):
    if value is None:
        return ""
    if col == "tstart":
        return datetime.fromtimestamp(value, timezone.utc).strftime("%Y-%m-%d %H:%M:%S")
    if col == "duration":
        return f"{value:.1f}"
    if col == "rss":
        return f"{value:.1f}"
    return str(value)


_STYLE = """
body{font-family:monospace;margin:1em}
table{border-collapse:collapse;margin-bottom:1em}
th,td{border:1px solid #999;padding:2px 6px;text-align:left}
th{background:#ddd}
tr.task td{font-weight:bold;background:#f3f3f3}
td.Failed,td.TimedOut,td.Killed{color:#a00}
td.Running{color:#060}
"""


def _summary_html(snapshot):
    s = snapshot.system
    ts = datetime.fromtimestamp(snapshot.timestamp, timezone.utc).strftime("%Y-%m-%d %H:%M:%S UTC") \
        if snapshot.timestamp else "-"
    cap = "-" if s.worker_cap is None else s.worker_cap
    load = " ".join(f"{x:.2f}" for x in s.load_avg)
    return ("<table class=\"summary\">"
            f"<tr><th>snapshot</th><td>{ts}</td></tr>"
            f"<tr><th>RAM used / total, MiB</th><td>{s.ram_used_mib:.0f} / {s.ram_total_mib:.0f}</td></tr>"
            f"<tr><th>load average</th><td>{load}</td></tr>"
            f"<tr><th>workers / cap</th><td>{s.workers} / {cap}</td></tr>"
            f"<tr><th>pending</th><td>{s.pending}</td></tr>"
            f"<tr><th>logical CPUs</th><td>{s.cpus}</td></tr>"
            "</table>")


def _page(title, body, refresh=None):
    meta = f"<meta http-equiv=\"refresh\" content=\"{refresh}\">" if refresh else ""
    return ("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">" + meta +
            f"<title>{html.escape(title)}</title><style>{_STYLE}</style></head>"
            f"<body><h1>{html.escape(title)}</h1>{body}</body></html>\n")


def _job_tr(job, cols, indent=0):
    cells = []
    for i, c in enumerate(cols):
        text = html.escape(format_cell(c, getattr(job, c)))
        if i == 0 and indent:
            text = "&nbsp;" * (2 * indent) + text
        klass = f" class=\"{html.escape(job.state)}\"" if c == "state" else ""
        cells.append(f"<td{klass}>{text}</td>")
    return "<tr class=\"job\">" + "".join(cells) + "</tr>"


def _task_trs(task, cols, depth=0):
    pad = "&nbsp;" * (2 * depth)
    rows = [f"<tr class=\"task\"><td colspan=\"{len(cols)}\">{pad}{html.escape(task.path)} "
            f"[{html.escape(task.state)}]</td></tr>"]
    rows.extend(_job_tr(j, cols, depth + 1) for j in task.jobs)
    for t in task.tasks:
        rows.extend(_task_trs(t, cols, depth + 1))
    return rows


def _table(cols, rows):
    head = "<tr>" + "".join(f"<th>{html.escape(c)}</th>" for c in cols) + "</tr>"
    return "<table class=\"rows\">" + head + "".join(rows) + "</table>"


def render_html(snapshot, query, endpoint="/jobs"):
    """Static page: summary block plus the endpoint's table."""
    cols = query.cols
    if endpoint == "/jobs":
        rows = [_job_tr(j, cols) for j in select_jobs(snapshot, query)]
    elif endpoint == "/tasks":
        rows = [r for t in select_tasks(snapshot.tasks, query) for r in _task_trs(t, cols)]
    elif endpoint == "/failures":
        rows = [r for t in select_tasks(snapshot.failures, query) for r in _task_trs(t, cols)]
        rows += [_job_tr(j, cols) for j in snapshot.failed_jobs if query.flt.matches(j)]
    else:
        raise KeyError(endpoint)
    return _page(endpoint.strip("/"), _summary_html(snapshot) + _table(cols, rows), query.refresh)


def render_json(snapshot, query, endpoint="/jobs"):
    cols = query.cols
    out = {"timestamp": snapshot.timestamp, "system": asdict(snapshot.system)}
    if endpoint == "/jobs":
        out["jobs"] = [job_row(j, cols) for j in select_jobs(snapshot, query)]
    elif endpoint == "/tasks":
        out["tasks"] = [task_json(t, cols) for t in select_tasks(snapshot.tasks, query)]
    elif endpoint == "/failures":
        out["tasks"] = [task_json(t, cols) for t in select_tasks(snapshot.failures, query)]
        out["jobs"] = [job_row(j, cols) for j in snapshot.failed_jobs if query.flt.matches(j)]
    else:
        raise KeyError(endpoint)
    return json.dumps(out, indent=1)


def apinfo():
    """Machine-readable API description."""
    return {
        "endpoints": dict(ENDPOINTS),
        "fields": {k: ("number" if t is not str else "text") + (" (integer)" if t is int else "")
                   for k, t in FILTER_FIELDS.items()},
        "parameters": {
            "flt": "comma separated clauses: field (present), field:value (exact), "
                   "field:lo..hi (closed range), field:lo.. or field:..hi (open ended); ranges on numbers only",
            "fmt": "html (default) or json",
            "cols": "comma separated subset of the fields, default " + ",".join(DEFAULT_COLUMNS),
            "refresh": "seconds between automatic page reloads (html)",
            "all": "1 to list finished jobs as well (/jobs)",
        },
        "units": {"tstart": "unix epoch seconds", "duration": "seconds", "rss": "MiB"},
        "examples": list(QUERY_EXAMPLES),
    }


def render_apinfo_html():
    info = apinfo()
    parts = ["<h2>Endpoints</h2>", _table(("endpoint", "content"), [
        f"<tr><td>{html.escape(k)}</td><td>{html.escape(v)}</td></tr>" for k, v in info["endpoints"].items()])]
    parts += ["<h2>Fields</h2>", _table(("field", "type"), [
        f"<tr><td>{html.escape(k)}</td><td>{html.escape(v)}</td></tr>" for k, v in info["fields"].items()])]
    parts += ["<h2>Parameters</h2>", _table(("parameter", "meaning"), [
        f"<tr><td>{html.escape(k)}</td><td>{html.escape(v)}</td></tr>" for k, v in info["parameters"].items()])]
    parts += ["<h2>Examples</h2><ul>"] + [f"<li><code>{html.escape(e)}</code></li>" for e in info["examples"]]
    parts.append("</ul>")
    return _page("apinfo", "".join(parts))


# ------------------------------------------------------------------- server

class _Handler(BaseHTTPRequestHandler):
    server_version = "clusterbench-webmon/1"
    provider = staticmethod(empty_snapshot)

    def log_message(self, fmt, *args):
        logger.debug("webmon %s " + fmt, self.address_string(), *args)

    def _send(self, code, body, ctype):
        data = body.encode("utf-8")
        self.send_response(code)
        self.send_header("Content-Type", f"{ctype}; charset=utf-8")
        self.send_header("Content-Length", str(len(data)))
        self.send_header("Cache-Control", "no-store")
        self.end_headers()
        self.wfile.write(data)

    def do_GET(self):
        url = urlsplit(self.path)
        path = url.path.rstrip("/") or "/"
        if path not in ENDPOINTS:
            self._send(404, f"unknown endpoint {path}; see /apinfo\n", "text/plain")
            return
        try:
            query = parse_query(url.query)
        except QueryError as exc:
            self._send(400, f"bad query: {exc}\n", "text/plain")
            return
        if path == "/apinfo":
            if query.fmt == "json":
                self._send(200, json.dumps(apinfo(), indent=1), "application/json")
            else:
                self._send(200, render_apinfo_html(), "text/html")
            return
        snapshot = self.provider() or empty_snapshot()
        if query.fmt == "json":
            self._send(200, render_json(snapshot, query, path), "application/json")
        else:
            self._send(200, render_html(snapshot, query, path), "text/html")


def make_server(provider, host="127.0.0.1", port=0):
    """HTTP server reading snapshots from ``provider()``; port 0 picks a free port."""
    handler = type("Handler", (_Handler,), {"provider": staticmethod(provider)})
    return ThreadingHTTPServer((host, port), handler)


def serve(provider, port, host="127.0.0.1"):
    """Start the monitor on a daemon thread and return the server (None when port is 0)."""
    if not port:
        return None
    server = make_server(provider, host, port)
    thread = threading.Thread(target=server.serve_forever, name="webmon", daemon=True)
    thread.start()
    logger.info("web monitor on http://%s:%d/", host, server.server_address[1])
    return server
