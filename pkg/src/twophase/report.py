"""CSV and JSON-lines writers with fixed column order per experiment."""

from __future__ import annotations

import csv
import io
import json
from typing import Iterable, Mapping, Sequence

COLUMNS: dict[str, tuple[str, ...]] = {
    "variants": ("id", "name", "template", "check_id", "mark", "addr_mode", "cpu_mode",
                 "required_features"),
    "profiles": ("name", "rob_size", "features", "description"),
    "exploitability": ("profile", "variant", "name", "letter"),
    "window": ("profile", "variant", "cpuid_pos", "effective_size", "window",
               "no_speculation", "oracle_cap"),
    "p1": ("profile", "variant", "data_level", "tlb", "relative_p1", "t_spec1", "t_spec2",
           "t_spec2_prime", "t_delay", "t_p1", "t_data", "chase_depth"),
    "prefetch": ("profile", "variant", "level", "rounds", "trials", "kind", "key", "count"),
    "squash": ("profile", "variant", "threshold", "rob_size"),
    "mispredict": ("profile", "with_slow_windowing", "window", "bound"),
    "dual-primitive": ("profile", "variant", "same_address", "inserted_count", "outcome"),
}


def _cell(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return ""
    if isinstance(v, (list, tuple, set, frozenset)):
        return " ".join(str(x) for x in sorted(v))
    return str(v)


def to_csv(kind: str, rows: Iterable[Mapping]) -> str:
    cols = COLUMNS[kind]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in cols])
    return buf.getvalue()


def to_jsonl(kind: str, rows: Iterable[Mapping]) -> str:
    cols = COLUMNS[kind]
    out = []
    for r in rows:
        rec = {"experiment": kind}
        for c in cols:
            v = r.get(c)
            rec[c] = sorted(v) if isinstance(v, (set, frozenset)) else v
        out.append(json.dumps(rec, sort_keys=False, separators=(",", ":")))
    return "".join(line + "\n" for line in out)


def render(kind: str, rows: Sequence[Mapping], fmt: str) -> str:
    if fmt == "csv":
        return to_csv(kind, rows)
    if fmt == "jsonl":
        return to_jsonl(kind, rows)
    raise ValueError(f"unknown format {fmt!r}")
