#!/usr/bin/env python3
"""
Script to check the run registry
"""
import argparse
import os
import sys

from database import RunDatabase


def check_runs(db_path: str = "runs.db", limit: int = 5) -> int:
    """Show registry totals and the most recent runs"""
    if not os.path.exists(db_path):
        print(f"Run registry {db_path} not found!")
        return 1

    db = RunDatabase(db_path)
    stats = db.get_statistics()
    print(f"Runs in registry: {stats['total_runs']} ({stats['failed_runs']} failed)")
    print(f"Total wall time: {stats['total_wall_time']:.1f}s")
    for command, count in stats['runs_by_command'].items():
        print(f"  {command}: {count}")

    runs = db.get_recent_runs(limit)
    if runs:
        print("\nRecent runs:")
        for run in runs:
            inputs = [f['path'] for f in run['files'] if f['role'] == 'input']
            print(f"  #{run['id']} {run['command']} - {run['created_at']} - "
                  f"{run['wall_time']:.2f}s - {', '.join(inputs) or 'no inputs'}")
            if run['summary']:
                print(f"      {run['summary']}")
    return 0


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Run registry status check")
    parser.add_argument("db_path", nargs="?", default="runs.db")
    parser.add_argument("--limit", type=int, default=5)
    args = parser.parse_args()
    print("Run Registry Status Check")
    print("=" * 50)
    sys.exit(check_runs(args.db_path, args.limit))
