"""Command line front end: ``run`` scenarios and ``dump`` rule tables."""
import argparse
import sys
from pathlib import Path

from . import tables
from .core_model import SPRR_PERMISSIONS, domain_name, table_name
from .dispatcher import TRANSITIONS
from .errors import ParseError, UnknownTable
from .frame_table import REAL_TYPES, RULES, allowed_retypes
from .page_mapper import TABLE_RULES, XNU_MAPPABLE
from .scenario import load_scenario, run_scenario
from .txm import SELECTORS
from .world import WorldConfig
from .xnuproxy import Cmd

EXIT_OK, EXIT_MISMATCH, EXIT_PARSE = 0, 1, 2


def _names(types):
    return ",".join(t.name for t in sorted(types)) or "-"


def dump_retype_matrix():
    out = ["from\tcaller\tallowed"]
    for t in REAL_TYPES:
        out.append(f"{t.name}\t{RULES.caller_rules[t].allowed_domain.name}\t{_names(allowed_retypes(t))}")
    return out


def dump_xnu_mappable():
    return [t.name for t in sorted(XNU_MAPPABLE.mappable_set)]


def dump_state_machine():
    out = ["state\tevent\tnext\tdomain\tflag\taction"]
    for (s, e), t in sorted(TRANSITIONS.items()):
        dom = domain_name(t.domain) if t.domain is not None else "-"
        out.append(f"{s:#x}\t{e:#x}\t{t.next_state:#x}\t{dom}\t{t.flag}\t{t.action}")
    return out


def dump_table_maps():
    out = ["table_type\tmask\tdrift\tallowed"]
    for t, r in sorted(TABLE_RULES.items()):
        out.append(f"{t.name}\t{r.mask:#x}\t{'yes' if r.mask_drift else 'no'}\t{_names(r.allowed_frame_types)}")
    return out


def dump_sprr():
    return ["index\tel0\tel2\tgl2"] + [f"{r.index:#x}\t{r.el0}\t{r.el2}\t{r.gl2}"
                                       for r in sorted(SPRR_PERMISSIONS.values(), key=lambda r: r.index)]


def dump_dispatch_tables():
    return ["id\tname"] + [f"{int(r['id'])}\t{table_name(int(r['id']))}" for r in tables.load("dispatch_tables")]


def dump_iommu():
    return ["\t".join(tables.load("iommu")[0])] + ["\t".join(r.values()) for r in tables.load("iommu")]


def dump_txm_selectors():
    return ["selector\tname\tinputs\toutputs"] + [
        f"{s.selector}\t{s.name}\t{s.num_input_args}\t{s.num_output_args}" for s in SELECTORS.values()]


def dump_xnuproxy_commands():
    return [f"{c.value}\t{c.name}" for c in Cmd]


DUMPS = {
    "retype-matrix": dump_retype_matrix,
    "xnu-mappable": dump_xnu_mappable,
    "state-machine": dump_state_machine,
    "table-maps": dump_table_maps,
    "sprr": dump_sprr,
    "dispatch-tables": dump_dispatch_tables,
    "iommu": dump_iommu,
    "txm-selectors": dump_txm_selectors,
    "xnuproxy-commands": dump_xnuproxy_commands,
}


def dump_tables(which):
    fn = DUMPS.get(which)
    if fn is None:
        raise UnknownTable(f"no table {which!r}; choose from {', '.join(DUMPS)}")
    return "".join(line + "\n" for line in fn())


def _config(args):
    return WorldConfig(fixtures=args.fixtures, strict_firmware=args.strict_firmware,
                       relax_sprr=args.relax_sprr)


def cmd_run(args):
    try:
        scenario = load_scenario(args.scenario)
        world, results = run_scenario(scenario, _config(args))
    except ParseError as e:
        print(f"ParseError: {e}", file=sys.stderr)
        return EXIT_PARSE
    text = world.trace.text()
    if args.trace:
        Path(args.trace).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    bad = [r for r in results if not r.matched]
    for r in bad:
        print(f"StepMismatch: line {r.step.lineno} {r.step.verb}: expected {r.step.expect}, got {r.outcome}",
              file=sys.stderr)
    return EXIT_MISMATCH if bad else EXIT_OK


def cmd_dump(args):
    try:
        sys.stdout.write(dump_tables(args.table))
    except UnknownTable as e:
        print(f"UnknownTable: {e}", file=sys.stderr)
        return EXIT_PARSE
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="sptm-sim", description="Monitor-stack reference simulator.")
    p.add_argument("--fixtures", help="directory holding resources.tsv")
    p.add_argument("--trace", help="write the trace here instead of stdout")
    p.add_argument("--strict-firmware", action="store_true",
                   help="named-buffer create reports 0x46 (service not supported)")
    p.add_argument("--relax-sprr", action="store_true", help="SPRR index mismatches only warn")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a scenario file")
    r.add_argument("scenario")
    r.set_defaults(func=cmd_run)
    d = sub.add_parser("dump", help="print a loaded rule table")
    d.add_argument("table", help=", ".join(DUMPS))
    d.set_defaults(func=cmd_dump)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
