#!/usr/bin/env python3
"""
Script to display the runs recorded in a run ledger
"""
import sys
from datetime import datetime

from ledger import get_epoch_metrics, get_runs, ledger_path

DEFAULT_OUT = 'runs/desk'

STATUS_ICONS = {'OK': '✅', 'FAILED': '❌', 'RUNNING': '⏳'}


def format_run(run):
    """Format a run dictionary for display"""
    formatted = {}
    for key, value in run.items():
        if key in ['started_at', 'finished_at']:
            if value:
                try:
                    formatted[key] = datetime.fromisoformat(value).strftime('%Y-%m-%d %H:%M:%S')
                except ValueError:
                    formatted[key] = value
            else:
                formatted[key] = 'N/A'
        else:
            formatted[key] = value if value is not None else 'N/A'
    return formatted


def show_runs(out_dir=DEFAULT_OUT):
    """Display all runs of one output directory"""
    runs = get_runs(out_dir)

    print("=" * 80)
    print(f"RUN LEDGER  {ledger_path(out_dir)}")
    print("=" * 80)
    print(f"\n📊 Runs: {len(runs)}")

    if not runs:
        print("\nNo runs found.")
        print("\n" + "=" * 80)
        return runs

    for i, run in enumerate(runs, 1):
        run = format_run(run)
        icon = STATUS_ICONS.get(run['status'], '•')
        print(f"\n{i}. {icon} {run['command']}  (run {run['run_uuid']})")
        print(f"   Seed: {run['seed']}")
        print(f"   Started: {run['started_at']} | Finished: {run['finished_at']}")
        print(f"   Status: {run['status']} | Exit code: {run['exit_code']}")
        if run['message'] != 'N/A':
            print(f"   Message: {run['message']}")

        metrics = get_epoch_metrics(out_dir, run_uuid=run['run_uuid'])
        if metrics:
            last_epoch = max(m['epoch'] for m in metrics)
            for m in metrics:
                if m['epoch'] == last_epoch:
                    acc = f"{m['accuracy']:.4f}" if m['accuracy'] is not None else "N/A"
                    print(f"   Epoch {m['epoch']} {m['phase']}/{m['model_id']}: loss {m['loss']:.4f}, accuracy {acc}")
        print("-" * 80)

    ok = [r for r in runs if r.get('status') == 'OK']
    failed = [r for r in runs if r.get('status') == 'FAILED']
    print("\nSUMMARY:")
    print(f"  OK: {len(ok)}, Failed: {len(failed)}, Running: {len(runs) - len(ok) - len(failed)}")
    print("\n" + "=" * 80)
    return runs


if __name__ == "__main__":
    show_runs(sys.argv[1] if len(sys.argv) > 1 else DEFAULT_OUT)
