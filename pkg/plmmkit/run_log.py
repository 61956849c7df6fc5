"""
Run Log - JSONL records of pipeline stages and capacity violations
Keeps session totals and renders the stage-timing breakdown report
"""

import csv
import json
import os
import logging
from collections import defaultdict
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

logger = logging.getLogger(__name__)

# Reported stage groups, in pipeline order
BREAKDOWN_GROUPS = {
    "ingest": ("process",),
    "design": ("design",),
    "decomposition": ("grm", "eigen", "eta", "rotate"),
    "fit": ("fit", "format"),
}

# Stage name of the measured whole-run time
TOTAL_STAGE = "total"


class RunLogger:
    """
    Append-only log of stage timings for one or more pipeline runs

    Stage records go to stages.jsonl, capacity violations to
    capacity_violations.jsonl; both carry timestamps.
    """

    def __init__(self, log_dir: Optional[str] = None, run_id: Optional[str] = None):
        """
        Initialize run logger

        Args:
            log_dir: Directory for log files (default: ../logs)
            run_id: Label attached to every record (default: start timestamp)
        """
        if log_dir is None:
            current_dir = os.path.dirname(os.path.abspath(__file__))
            log_dir = os.path.normpath(os.path.join(current_dir, "..", "logs"))

        self.log_dir = Path(log_dir)
        self.log_dir.mkdir(parents=True, exist_ok=True)
        self.run_id = run_id or datetime.now().strftime("%Y%m%d_%H%M%S")

        self.stage_log_file = self.log_dir / "stages.jsonl"
        self.capacity_log_file = self.log_dir / "capacity_violations.jsonl"

        # In-memory statistics for current session
        self.session_stats = {
            "total_stages": 0,
            "total_seconds": 0.0,
            "total_capacity_violations": 0,
            "stage_seconds": defaultdict(float),
        }

    def log_stage(self, stage: str, seconds: float, **dimensions: Any) -> None:
        """
        Record one completed stage

        Args:
            stage: Stage name (process, design, grm, eigen, eta, rotate, fit, format, cv)
            seconds: Wall-clock duration
            dimensions: n, p, nlambda, ... as plain numbers
        """
        entry = {
            "timestamp": datetime.now().isoformat(),
            "run_id": self.run_id,
            "stage": stage,
            "seconds": float(seconds),
            "dimensions": dimensions,
        }
        self._write_log(self.stage_log_file, entry)
        self.session_stats["total_stages"] += 1
        self.session_stats["total_seconds"] += float(seconds)
        self.session_stats["stage_seconds"][stage] += float(seconds)

    def log_timings(self, timings: Dict[str, float], **dimensions: Any) -> None:
        """Record every entry of a stage -> seconds mapping"""
        for stage, seconds in timings.items():
            self.log_stage(stage, seconds, **dimensions)

    def log_capacity_violation(self, check: str, details: str, metadata: Dict[str, Any]) -> None:
        """
        Record a run refused by the memory guard

        Args:
            check: Name of the failed check (dense_workspace, block_workspace, ...)
            details: Human-readable message
            metadata: Estimates and budget from the guard
        """
        entry = {
            "timestamp": datetime.now().isoformat(),
            "run_id": self.run_id,
            "check": check,
            "details": details,
            "metadata": metadata,
        }
        self._write_log(self.capacity_log_file, entry)
        self.session_stats["total_capacity_violations"] += 1

    def get_session_stats(self) -> Dict[str, Any]:
        return {
            "run_id": self.run_id,
            "total_stages": self.session_stats["total_stages"],
            "total_seconds": self.session_stats["total_seconds"],
            "total_capacity_violations": self.session_stats["total_capacity_violations"],
            "stage_seconds": dict(self.session_stats["stage_seconds"]),
        }

    def get_recent_logs(self, log_type: str = "stages", limit: int = 100) -> List[Dict[str, Any]]:
        """
        Retrieve recent log entries

        Args:
            log_type: "stages" or "capacity"
            limit: Maximum number of entries to return

        Returns:
            List of log entries (most recent first)
        """
        log_file = {"stages": self.stage_log_file, "capacity": self.capacity_log_file}.get(log_type)
        if not log_file or not log_file.exists():
            return []

        logs = []
        with open(log_file, 'r', encoding='utf-8') as f:
            for line in f:
                try:
                    logs.append(json.loads(line.strip()))
                except json.JSONDecodeError:
                    continue
        return logs[-limit:][::-1]

    def log_total(self, seconds: float, **dimensions: Any) -> None:
        """Record the measured wall-clock time of a whole run (not added to stage totals)"""
        entry = {
            "timestamp": datetime.now().isoformat(),
            "run_id": self.run_id,
            "stage": TOTAL_STAGE,
            "seconds": float(seconds),
            "dimensions": dimensions,
        }
        self._write_log(self.stage_log_file, entry)

    def stage_breakdown(self, run_id: Optional[str] = None) -> Dict[str, float]:
        """
        Seconds per reported stage group for one run

        "total" is the measured run time from log_total when one was recorded,
        otherwise the stage sum; "unaccounted" is total minus the stage sum.

        Returns:
            {"ingest", "design", "decomposition", "fit", "other", "total", "unaccounted"} in seconds
        """
        run_id = run_id or self.run_id
        records = [r for r in self.get_recent_logs("stages", limit=10 ** 9) if r.get("run_id") == run_id]

        breakdown = {group: 0.0 for group in BREAKDOWN_GROUPS}
        breakdown["other"] = 0.0
        measured = None
        for record in records:
            if record["stage"] == TOTAL_STAGE:
                # most recent first
                measured = record["seconds"] if measured is None else measured
                continue
            for group, stages in BREAKDOWN_GROUPS.items():
                if record["stage"] in stages:
                    breakdown[group] += record["seconds"]
                    break
            else:
                breakdown["other"] += record["seconds"]
        stage_sum = sum(breakdown.values())
        breakdown["total"] = measured if measured is not None else stage_sum
        breakdown["unaccounted"] = breakdown["total"] - stage_sum
        return breakdown

    def check_stage_coverage(self, run_id: Optional[str] = None,
                             tolerance: float = 0.01) -> Tuple[bool, str, Dict[str, Any]]:
        """
        Check that the logged stages account for the measured run time

        Returns:
            Tuple of (is_ok, message, metadata); fails when the unaccounted share exceeds tolerance
        """
        breakdown = self.stage_breakdown(run_id)
        total = breakdown["total"]
        share = abs(breakdown["unaccounted"]) / total if total > 0 else 0.0
        metadata = {"total_s": total, "unaccounted_s": breakdown["unaccounted"],
                    "unaccounted_share": share, "tolerance": tolerance}
        if share > tolerance:
            return False, (f"Stages cover {total - breakdown['unaccounted']:.3f}s of a {total:.3f}s run "
                           f"({100 * share:.1f}% unaccounted)"), metadata
        return True, f"Stages cover the run within {100 * tolerance:.1f}%", metadata

    def format_breakdown(self, run_id: Optional[str] = None) -> str:
        """Render the stage breakdown as an aligned text table"""
        breakdown = self.stage_breakdown(run_id)
        total = breakdown["total"] or 1.0
        lines = [f"{'stage':<15}{'seconds':>12}{'share':>9}"]
        for stage, seconds in breakdown.items():
            if stage in ("other", "unaccounted") and seconds == 0.0:
                continue
            lines.append(f"{stage:<15}{seconds:>12.3f}{100.0 * seconds / total:>8.1f}%")
        return "\n".join(lines)

    def export_logs_csv(self, output_file: str) -> None:
        """Export stage records to CSV, one row per stage"""
        logs = self.get_recent_logs("stages", limit=10 ** 9)[::-1]
        if not logs:
            return
        dim_keys = sorted({k for log in logs for k in log.get("dimensions", {})})
        with open(output_file, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f)
            writer.writerow(["timestamp", "run_id", "stage", "seconds"] + dim_keys)
            for log in logs:
                dims = log.get("dimensions", {})
                writer.writerow([log["timestamp"], log["run_id"], log["stage"], log["seconds"]]
                                + [dims.get(k, "") for k in dim_keys])

    def _write_log(self, log_file: Path, entry: Dict[str, Any]) -> None:
        with open(log_file, 'a', encoding='utf-8') as f:
            f.write(json.dumps(entry) + '\n')
