"""Command-line entry point: ``defectorsim <subcommand> [flags]``.

Exit status is 0 on success, 1 for configuration or usage errors and 2 for
bad input data.
"""
import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import typing
from datetime import datetime, timezone
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__, corpus, evaluation, exposure, pathsim, wfknn
from .config import parse_config
from .errors import ConfigurationError, DataError
from .seeding import derive_rng

log = logging.getLogger("defectorsim")

EXIT_CONFIG = 1
EXIT_DATA = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _csv_list(text) -> List[str]:
    return [v.strip() for v in str(text).split(",") if v.strip()]


def _add_common(p: argparse.ArgumentParser, out_default: str) -> None:
    p.add_argument("--config", help="flat 'key = value' file; flags override it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=out_default)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--desk-scale", type=int, default=evaluation.ExperimentConfig.desk_scale)
    p.add_argument("-v", "--verbose", action="store_true")


_SKIP_FIELDS = {"seed", "desk_scale"}


def _field_type(f: dataclasses.Field):
    hint = typing.get_type_hints(evaluation.ExperimentConfig)[f.name]
    if hint is bool:
        return _bool
    if hint is int:
        return int
    if hint is float:
        return float
    if f.name == "popularity_sites":
        return int
    if f.name == "attacks":
        return lambda s: tuple(_csv_list(s))
    return str


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("experiment")
    for f in dataclasses.fields(evaluation.ExperimentConfig):
        if f.name in _SKIP_FIELDS:
            continue
        default = f.default
        g.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=_field_type(f), default=default)
    p.add_argument("--traces", help="dataset manifest.csv written by gen-traces (default: synthesize)")
    p.add_argument("--corpus", help="corpus file for the simulated background")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="defectorsim", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    parser.commands = sub.choices

    p = sub.add_parser("gen-corpus", help="synthesize a website/domain corpus")
    _add_common(p, "corpus_out")
    p.add_argument("--sites", type=int, default=10_000)

    p = sub.add_parser("gen-traces", help="synthesize a labelled trace dataset")
    _add_common(p, "traces_out")
    _add_experiment_flags(p)

    p = sub.add_parser("eval", help="cross-validated wf/ctw/hp experiment")
    _add_common(p, "eval_out")
    _add_experiment_flags(p)

    p = sub.add_parser("sweep", help="experiment per value of one axis")
    _add_common(p, "sweep_out")
    _add_experiment_flags(p)
    p.add_argument("--axis", choices=evaluation.AXES, required=False)
    p.add_argument("--values", type=_csv_list)

    p = sub.add_parser("exposure", help="AS exposure of DNS versus web paths")
    _add_common(p, "exposure_out")
    p.add_argument("--routes", required=False, help="routing snapshot: prefix<TAB>asn per line")
    p.add_argument("--traces", required=False, help="traceroutes as JSON lines")
    p.add_argument("--delegations", help="authoritative servers per site: site<TAB>ip,ip")
    p.add_argument("--sites", type=_csv_list, help="sites to report (default: every site in the traceroutes)")

    p = sub.add_parser("pathsim", help="client compromise simulation")
    _add_common(p, "pathsim_out")
    p.add_argument("--relays", help="relays as JSON lines")
    p.add_argument("--ingress", help="client-to-guard paths: src_asn,dst_key,asn_list")
    p.add_argument("--egress", help="exit-side DNS paths: src_asn,dst_key,asn_list")
    p.add_argument("--clients", type=int, default=2000)
    p.add_argument("--days", type=int, default=pathsim.HORIZON_DAYS)
    p.add_argument("--scenarios", type=_csv_list, default=",".join(pathsim.MODES))
    p.add_argument("--client-asns", type=_csv_list, default=",".join(map(str, pathsim.DEFAULT_CLIENT_ASNS)))
    return parser


def _parse(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        values = parse_config(args.config)
        sub = parser.commands[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(values) - known - {"config", "help"})
        if unknown:
            raise ConfigurationError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
        sub.set_defaults(**values)
        args = parser.parse_args(argv)
    for name in ("relays", "ingress", "egress") if args.command == "pathsim" else ():
        if not getattr(args, name):
            parser.error(f"pathsim needs --{name}")
    if args.command == "exposure" and not (args.routes and args.traces):
        parser.error("exposure needs --routes and --traces")
    if args.command == "sweep" and not (args.axis and args.values):
        parser.error("sweep needs --axis and --values")
    if args.workers < 1:
        raise ConfigurationError("--workers must be at least 1")
    return args


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _snapshot(args) -> Dict[str, object]:
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in ("verbose",):
            continue
        out[k] = list(v) if isinstance(v, tuple) else v
    return out


def write_manifest(path, args, inputs: Sequence[str], started: str, outputs: Sequence[str]) -> None:
    manifest = {
        "command": args.command,
        "config": _snapshot(args),
        "seed": args.seed,
        "version": __version__,
        "inputs": {p: _digest(p) for p in inputs if p},
        "outputs": sorted(os.path.basename(o) for o in outputs),
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _experiment_config(args) -> evaluation.ExperimentConfig:
    kw = {f.name: getattr(args, f.name) for f in dataclasses.fields(evaluation.ExperimentConfig)
          if f.name not in _SKIP_FIELDS}
    return evaluation.ExperimentConfig(seed=args.seed, desk_scale=args.desk_scale, **kw)


def _load_traces(cfg, path):
    traces = wfknn.load_dataset(path)
    data = evaluation.TraceDataset.from_traces(traces)
    labels, counts = np.unique(data.y_mon, return_counts=True)
    if len(labels) == 0 or len(set(counts.tolist())) != 1:
        raise DataError(f"{path}: every monitored site needs the same number of instances")
    if labels.tolist() != list(range(1, len(labels) + 1)):
        raise DataError(f"{path}: monitored labels must be 1..{len(labels)}")
    ds = cfg.desk_scale
    cfg = dataclasses.replace(cfg, monitored_count=len(labels) * ds, instances_per_site=int(counts[0]) * ds,
                              unmonitored_count=len(data.X_unmon) * ds)
    return cfg, data


def _prepare(args):
    cfg = _experiment_config(args)
    data = None
    if args.traces:
        cfg, data = _load_traces(cfg, args.traces)
    cfg.validate()
    bg_corpus = corpus.load_corpus(args.corpus) if args.corpus else None
    return cfg, data, bg_corpus


def _with_scale(rows, desk_scale):
    for r in rows:
        r["desk_scale"] = desk_scale
    return rows


RESULT_COLUMNS = evaluation.RESULT_COLUMNS + ["desk_scale"]


def cmd_gen_corpus(args, out: str) -> List[str]:
    if args.sites < 1:
        raise ConfigurationError("--sites must be positive")
    c = corpus.generate_synthetic(args.sites, corpus.CorpusStats(), derive_rng(args.seed, "corpus"))
    path = os.path.join(out, "corpus.tsv")
    corpus.save_corpus(c, path)
    return [path]


def cmd_gen_traces(args, out: str) -> List[str]:
    cfg = _experiment_config(args)
    cfg.validate()
    rng = derive_rng(cfg.seed, "traces")
    traces = wfknn.generate_traces(cfg.n_monitored, cfg.n_instances, cfg.separability, rng)
    traces += wfknn.generate_unmonitored(cfg.n_unmonitored, cfg.separability, rng)
    return [wfknn.save_dataset(traces, out)]


def cmd_eval(args, out: str) -> List[str]:
    cfg, data, bg = _prepare(args)
    res = evaluation.run_experiment(cfg, data, args.workers, corpus=bg)
    paths = [os.path.join(out, n) for n in ("results.csv", "summary.csv", "verdicts.csv")]
    evaluation.write_rows(_with_scale(res.result_rows(), cfg.desk_scale), RESULT_COLUMNS, paths[0])
    evaluation.write_rows(_with_scale(res.summary_rows(), cfg.desk_scale), RESULT_COLUMNS, paths[1])
    evaluation.write_rows(res.verdict_rows(), evaluation.VERDICT_COLUMNS, paths[2])
    return paths


def cmd_sweep(args, out: str) -> List[str]:
    cfg, data, bg = _prepare(args)
    points = evaluation.sweep(cfg, args.axis, args.values, args.workers, data, bg)
    results, summary, paths = [], [], []
    for i, (value, res) in enumerate(points):
        results += res.result_rows(args.axis, value)
        summary += res.summary_rows(args.axis, value)
        vpath = os.path.join(out, f"verdicts_{i:03d}.csv")
        evaluation.write_rows(res.verdict_rows(), evaluation.VERDICT_COLUMNS, vpath)
        paths.append(vpath)
    for name, rows in (("results.csv", results), ("summary.csv", summary)):
        path = os.path.join(out, name)
        evaluation.write_rows(_with_scale(rows, cfg.desk_scale), RESULT_COLUMNS, path)
        paths.append(path)
    return paths


def cmd_exposure(args, out: str) -> List[str]:
    table = exposure.load_routing_table(args.routes)
    traces = exposure.load_traceroutes(args.traces)
    delegations = exposure.load_delegations(args.delegations) if args.delegations else None
    sites = args.sites or sorted({t.site for t in traces})
    report = exposure.exposure_report(sites, traces, table, delegations)
    if out.endswith(".csv"):
        stem = out[:-4]
        main, ecdf = out, stem + ".ecdf.csv"
    else:
        main, ecdf = os.path.join(out, "exposure.csv"), os.path.join(out, "ecdf.csv")
    exposure.write_report(report, main)
    exposure.write_ecdf(report, ecdf)
    log.info("%d sites, median lambda %.3f, %d DNS ASes, %d web ASes", len(report.results), report.median,
             len(report.unique_dns_ases), len(report.unique_web_ases))
    return [main, ecdf]


def cmd_pathsim(args, out: str) -> List[str]:
    relays = pathsim.load_relays(args.relays)
    ingress = pathsim.load_paths(args.ingress)
    egress = pathsim.load_paths(args.egress)
    try:
        asns = [int(a) for a in args.client_asns]
    except ValueError:
        raise ConfigurationError(f"bad --client-asns {args.client_asns}") from None
    if args.days < 1:
        raise ConfigurationError("--days must be positive")
    schedule = dataclasses.replace(pathsim.UsageSchedule.default(), days=args.days)
    scenarios = [pathsim.DnsConfigScenario(m) for m in args.scenarios]
    results = pathsim.scenario_compare(args.clients, relays, schedule, scenarios, ingress, egress,
                                       args.seed, args.workers, asns)
    paths = [os.path.join(out, "clients.csv"), os.path.join(out, "summary.csv")]
    pathsim.write_clients(results, paths[0])
    pathsim.write_summary(pathsim.summarize(results), paths[1])
    return paths


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "gen-traces": cmd_gen_traces,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "exposure": cmd_exposure,
    "pathsim": cmd_pathsim,
}

_INPUT_FLAGS = ("config", "traces", "corpus", "routes", "delegations", "relays", "ingress", "egress")


def _inputs(args) -> List[str]:
    out = []
    for name in _INPUT_FLAGS:
        value = getattr(args, name, None)
        if value:
            out.append(value)
    return out


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    started = datetime.now(timezone.utc).isoformat()
    try:
        try:
            args = _parse(argv)
        except SystemExit as exc:  # usage errors, --help and --version
            return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        out = args.out
        file_out = args.command == "exposure" and out.endswith(".csv")
        os.makedirs(os.path.dirname(os.path.abspath(out)) if file_out else out, exist_ok=True)
        outputs = COMMANDS[args.command](args, out)
        manifest = out[:-4] + ".manifest.json" if file_out else os.path.join(out, "manifest.json")
        write_manifest(manifest, args, _inputs(args), started, outputs)
    except ConfigurationError as exc:
        print(f"defectorsim: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"defectorsim: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"defectorsim: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
