"""Experiment runner CLI: config resolution, orchestration, artifact emission.

All output files are written atomically (write to a temp file, then rename),
so an interrupted run never corrupts artifacts from an earlier one.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .config import ExperimentConfig, apply_preset, parse_config, render_config
from .errors import FedstyleError
from .federation import ExperimentResult, RoundRecord, run_experiment
from .memory import render_memory
from .nn import render_encoder


def atomic_write(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def ledger_text(records) -> str:
    return "".join(json.dumps(r.ledger_entry(), sort_keys=True) + "\n"
                   for r in records)


def metrics_text(rows) -> str:
    lines = ["round,plan,domain,map,rank1"]
    for row in rows:
        lines.append(f"{row['round']},{row['plan']},{row['domain']},"
                     f"{row['map']:.6f},{row['rank1']:.6f}")
    return "\n".join(lines) + "\n"


def write_artifacts(out_dir: Path, result: ExperimentResult) -> None:
    atomic_write(out_dir / "metrics.csv", metrics_text(result.metrics_rows))
    atomic_write(out_dir / "ledger.jsonl", ledger_text(result.ledger))
    atomic_write(out_dir / "server_encoder.txt",
                 render_encoder(result.server.encoder))
    for client in result.clients:
        if client.memory is not None:
            atomic_write(out_dir / f"memory_client{client.client_id}.txt",
                         render_memory(client.memory))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedstyle",
        description="Federated style-screening experiment runner")
    parser.add_argument("--config", metavar="PATH",
                        help="config file (omit to run the defaults)")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", metavar="DIR", help="override the output directory")
    parser.add_argument("--ablation", choices=("baseline", "nsa", "pscu", "full"),
                        help="apply one of the four ablation presets")
    parser.add_argument("--quiet", action="store_true",
                        help="suppress per-round progress output")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.out_dir = args.out
        if args.ablation is not None:
            cfg = apply_preset(cfg, args.ablation)
        cfg.validate()

        out_dir = Path(cfg.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        atomic_write(out_dir / "resolved_config.cfg", render_config(cfg))

        records: list[RoundRecord] = []

        def on_round(record: RoundRecord) -> None:
            records.append(record)
            if not args.quiet:
                print(f"round {record.round}/{cfg.rounds} "
                      f"rank1 {record.rank1_after:.4f} {record.decision} "
                      f"lr {record.lr:g}")

        try:
            result = run_experiment(cfg, on_round=on_round)
        except BaseException:
            # Flush whatever completed so the run stays inspectable.
            atomic_write(out_dir / "ledger.jsonl", ledger_text(records))
            raise

        write_artifacts(out_dir, result)
        if not args.quiet:
            for dom, report in sorted(result.final_reports.items()):
                print(f"final {cfg.eval.plan} domain {dom}: "
                      f"mAP {report.map:.4f} rank1 {report.rank1:.4f}")
            print(f"artifacts written to {out_dir}")
        return 0
    except FedstyleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130


def console() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    raise SystemExit(main())
