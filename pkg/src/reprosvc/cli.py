"""Command line interface.

`serve` runs the HTTP service; `evaluate` grades one local source tree
without a server; the remaining commands are thin HTTP clients so scripts
and CI jobs can talk to a running instance.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
import urllib.error
import urllib.request
import uuid
from pathlib import Path

from reprosvc import report as report_mod
from reprosvc.errors import ServiceError
from reprosvc.harness import ASSERT_KEY_EQUALS, ASSERT_OUTPUT_DIGEST, ASSERT_STATUS_ONLY
from reprosvc.manifest import MANIFEST_FILENAME, ManifestError, parse_manifest

EXIT_GREEN = 0
EXIT_AMBER = 1
EXIT_RED = 2
EXIT_INTERNAL = 3

_COLOR_EXIT = {report_mod.GREEN: EXIT_GREEN, report_mod.AMBER: EXIT_AMBER, report_mod.RED: EXIT_RED}

DEFAULT_SERVER = "http://127.0.0.1:8787"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reprosvc",
        description="Continuous reproducibility checks for research software.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_serve = sub.add_parser("serve", help="run the HTTP service")
    p_serve.add_argument("--config", type=Path, help="JSON config file (or $REPROSVC_CONFIG)")
    p_serve.add_argument("--data-dir", type=Path, help="state directory (when no config file)")
    p_serve.add_argument("--listen", help="host:port override")

    p_eval = sub.add_parser(
        "evaluate", help="build, test and grade a local source tree once"
    )
    p_eval.add_argument("--source", type=Path, required=True, help="source tree to evaluate")
    p_eval.add_argument(
        "--manifest",
        default=MANIFEST_FILENAME,
        help="manifest path relative to the source tree",
    )
    p_eval.add_argument(
        "--benchmarks", type=Path, help="directory of *.bench.json files plus models"
    )
    p_eval.add_argument(
        "--output", type=Path, default=Path("report.json"), help="machine-readable report path"
    )
    p_eval.add_argument("--work-dir", type=Path, help="scratch directory (default: temporary)")

    p_submit = sub.add_parser("submit-benchmark", help="submit a model to a running service")
    p_submit.add_argument("--project", required=True)
    p_submit.add_argument("--model", type=Path, required=True, help="model file to upload")
    p_submit.add_argument(
        "--assert",
        dest="asserts",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="expected key in the tool's result.json (repeatable)",
    )
    p_submit.add_argument("--assert-exit", type=int, help="expect this exit status instead")
    p_submit.add_argument("--assert-digest", help="expect this canonical output digest instead")
    p_submit.add_argument("--algs", help="comma-separated algorithm tags (default: all)")
    p_submit.add_argument("--doi", help="publication DOI or URL to link")
    p_submit.add_argument("--format-tag", default="", help="advisory model format label")
    p_submit.add_argument("--submitter", default=os.environ.get("USER", "anonymous"))
    p_submit.add_argument("--wall-seconds", type=int, help="per-cell wall limit override")
    p_submit.add_argument("--server", default=DEFAULT_SERVER)
    p_submit.add_argument("--token", default=os.environ.get("REPROSVC_TOKEN"))

    p_badge = sub.add_parser("badge", help="fetch the badge for a commit")
    p_badge.add_argument("--project", required=True)
    p_badge.add_argument("--commit", help="commit id (default: latest run)")
    p_badge.add_argument("--server", default=DEFAULT_SERVER)

    p_rank = sub.add_parser("rank", help="print a venue's ranked submissions")
    p_rank.add_argument("--venue", required=True)
    p_rank.add_argument("--server", default=DEFAULT_SERVER)

    return parser


# -- HTTP helpers ---------------------------------------------------------------


def _request(url: str, data: bytes | None = None, headers: dict | None = None, method="GET"):
    req = urllib.request.Request(url, data=data, headers=headers or {}, method=method)
    try:
        with urllib.request.urlopen(req) as resp:
            return resp.status, json.loads(resp.read().decode())
    except urllib.error.HTTPError as exc:
        body = exc.read().decode()
        try:
            return exc.code, json.loads(body)
        except ValueError:
            return exc.code, {"error": {"code": "HTTP", "message": body}}
    except urllib.error.URLError as exc:
        raise ServiceError("INTERNAL", f"cannot reach {url}: {exc.reason}") from None


def _multipart(fields: dict[str, str], file_field: str, filename: str, blob: bytes):
    boundary = uuid.uuid4().hex
    lines: list[bytes] = []
    for name, value in fields.items():
        lines += [
            f"--{boundary}".encode(),
            f'Content-Disposition: form-data; name="{name}"'.encode(),
            b"",
            value.encode(),
        ]
    lines += [
        f"--{boundary}".encode(),
        f'Content-Disposition: form-data; name="{file_field}"; filename="{filename}"'.encode(),
        b"Content-Type: application/octet-stream",
        b"",
        blob,
        f"--{boundary}--".encode(),
        b"",
    ]
    body = b"\r\n".join(lines)
    return body, f"multipart/form-data; boundary={boundary}"


# -- subcommands -----------------------------------------------------------------


def cmd_serve(args) -> int:
    from reprosvc.gateway import serve
    from reprosvc.service import ServiceConfig

    config_path = args.config or (
        Path(os.environ["REPROSVC_CONFIG"]) if os.environ.get("REPROSVC_CONFIG") else None
    )
    try:
        if config_path is not None:
            config = ServiceConfig.from_file(config_path)
        elif args.data_dir is not None:
            config = ServiceConfig(data_dir=args.data_dir)
        else:
            print("serve needs --config, --data-dir or $REPROSVC_CONFIG", file=sys.stderr)
            return EXIT_INTERNAL
        if args.listen:
            config.listen_address = args.listen
            config.__post_init__()
    except (ValueError, OSError, ServiceError) as exc:
        print(f"bad configuration: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return serve(config)


def cmd_evaluate(args) -> int:
    from reprosvc.service import evaluate_once, load_benchmark_dir

    source = args.source
    if not source.is_dir():
        print(f"source directory not found: {source}", file=sys.stderr)
        return EXIT_INTERNAL
    manifest_file = source / args.manifest
    try:
        parse_manifest(manifest_file.read_bytes())
    except FileNotFoundError:
        print(f"manifest not found: {manifest_file}", file=sys.stderr)
        return EXIT_INTERNAL
    except ManifestError as exc:
        print(f"manifest invalid: {exc}", file=sys.stderr)
        return EXIT_INTERNAL

    benchmarks = []
    if args.benchmarks is not None:
        if not args.benchmarks.is_dir():
            print(f"benchmarks directory not found: {args.benchmarks}", file=sys.stderr)
            return EXIT_INTERNAL
        try:
            benchmarks = load_benchmark_dir(args.benchmarks)
        except (ServiceError, ValueError, OSError, KeyError) as exc:
            print(f"cannot load benchmarks: {exc}", file=sys.stderr)
            return EXIT_INTERNAL

    if args.work_dir is not None:
        work_dir = args.work_dir
        record, light = evaluate_once(source, work_dir, benchmarks, args.manifest)
    else:
        with tempfile.TemporaryDirectory(prefix="reprosvc-eval-") as tmp:
            record, light = evaluate_once(source, Path(tmp), benchmarks, args.manifest)

    _print_report(record, light)
    passed, total = report_mod.pass_counts(record)
    args.output.write_text(
        json.dumps(
            {
                "record": record.to_doc(),
                "grade": light.to_doc(),
                "color": light.color,
                "pass_fraction": f"{passed}/{total}",
            },
            indent=1,
            sort_keys=True,
        )
    )
    print(f"report written to {args.output}")
    return _COLOR_EXIT[light.color]


def _print_report(record, light) -> None:
    print(f"commit {record.commit.commit_id[:16]} run {record.run_id}")
    for stage in record.stages:
        print(f"  {stage.stage:<6} {stage.status:<8} {stage.wall_ms} ms")
    if record.test is not None:
        print(f"  TEST   {record.test.status:<8} {record.test.wall_ms} ms")
    if record.cells is not None:
        passed, total = report_mod.pass_counts(record)
        print(f"  cells: {passed}/{total} PASS")
        for cell in record.cells:
            print(f"    {cell.benchmark_id} x {cell.algorithm}: {cell.status}")
    print(f"color: {light.color}")


def cmd_submit(args) -> int:
    assertion = _assertion_from_args(args)
    if assertion is None:
        print("one of --assert, --assert-exit, --assert-digest is required", file=sys.stderr)
        return EXIT_INTERNAL
    metadata: dict = {"assertion": assertion, "format_tag": args.format_tag,
                      "submitter": args.submitter}
    if args.algs:
        metadata["algorithm_tags"] = [a for a in args.algs.split(",") if a]
    if args.doi:
        metadata["publication"] = {"doi": args.doi}
    if args.wall_seconds:
        metadata["wall_seconds"] = args.wall_seconds
    blob = args.model.read_bytes()
    body, content_type = _multipart(
        {"metadata": json.dumps(metadata)}, "model", args.model.name, blob
    )
    headers = {"Content-Type": content_type}
    if args.token:
        headers["X-Api-Token"] = args.token
    status, doc = _request(
        f"{args.server}/projects/{args.project}/benchmarks",
        data=body,
        headers=headers,
        method="POST",
    )
    print(json.dumps(doc, indent=1, sort_keys=True))
    if status != 201:
        return EXIT_INTERNAL
    return EXIT_GREEN if doc.get("accepted") else EXIT_INTERNAL


def _assertion_from_args(args) -> dict | None:
    chosen = [bool(args.asserts), args.assert_exit is not None, args.assert_digest is not None]
    if sum(chosen) != 1:
        return None
    if args.asserts:
        expectations = []
        for item in args.asserts:
            key, sep, value = item.partition("=")
            if not sep or not key:
                return None
            expectations.append([key, value])
        return {"kind": ASSERT_KEY_EQUALS, "expectations": expectations}
    if args.assert_exit is not None:
        return {"kind": ASSERT_STATUS_ONLY, "expected_exit": args.assert_exit}
    return {"kind": ASSERT_OUTPUT_DIGEST, "expected_digest": args.assert_digest}


def cmd_badge(args) -> int:
    url = f"{args.server}/projects/{args.project}/badge"
    if args.commit:
        url += f"?commit={args.commit}"
    status, doc = _request(url)
    print(json.dumps(doc, indent=1, sort_keys=True))
    if status != 200:
        return EXIT_INTERNAL
    return _COLOR_EXIT.get(doc.get("color"), EXIT_INTERNAL)


def cmd_rank(args) -> int:
    status, doc = _request(f"{args.server}/venues/{args.venue}/ranking")
    if status != 200:
        print(json.dumps(doc, indent=1), file=sys.stderr)
        return EXIT_INTERNAL
    entries = doc.get("entries", [])
    if not entries:
        print(f"venue {args.venue}: no graded submissions")
        return EXIT_GREEN
    width = max(len(e["submission_id"]) for e in entries)
    for pos, entry in enumerate(entries, start=1):
        print(
            f"{pos:>3}. {entry['submission_id']:<{width}}  {entry['color']:<6}"
            f"  {entry['pass_fraction']:>7}  ({entry['cell_count']} cells)"
        )
    return EXIT_GREEN


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "serve": cmd_serve,
        "evaluate": cmd_evaluate,
        "submit-benchmark": cmd_submit,
        "badge": cmd_badge,
        "rank": cmd_rank,
    }
    try:
        return handlers[args.command](args)
    except ServiceError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
