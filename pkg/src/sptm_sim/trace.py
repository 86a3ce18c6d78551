"""Deterministic trace stream shared by all modules.

A record serializes as one line:

    seq<TAB>actor<TAB>operation<TAB>k=v k=v ...<TAB>outcome

Detail keys keep insertion order, integers are written in hex, so identical
inputs give byte-identical output.
"""
from dataclasses import dataclass, field


def _fmt(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if hasattr(v, "name") and isinstance(v, int):
        return v.name
    if isinstance(v, int):
        return hex(v)
    if isinstance(v, (list, tuple, set, frozenset)):
        items = sorted(v) if isinstance(v, (set, frozenset)) else v
        return ",".join(_fmt(x) for x in items) or "-"
    if v is None:
        return "-"
    s = str(v)
    return s.replace("\t", " ").replace("\n", " ").replace(" ", "_") or "-"


@dataclass
class TraceRecord:
    seq: int
    actor: str
    operation: str
    detail: dict = field(default_factory=dict)
    outcome: str = "ok"

    def line(self):
        d = " ".join(f"{k}={_fmt(v)}" for k, v in self.detail.items()) or "-"
        return f"{self.seq}\t{self.actor}\t{self.operation}\t{d}\t{self.outcome}"


class Trace:
    def __init__(self):
        self.records = []

    def emit(self, actor, operation, outcome="ok", **detail):
        actor = actor.name if hasattr(actor, "name") else str(actor)
        rec = TraceRecord(len(self.records) + 1, actor, operation, detail, outcome)
        self.records.append(rec)
        return rec

    def ops(self, operation):
        return [r for r in self.records if r.operation == operation]

    def text(self):
        return "".join(r.line() + "\n" for r in self.records)

    def __len__(self):
        return len(self.records)
