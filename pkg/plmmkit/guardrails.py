"""
Memory Guardrails for plmmkit
Estimates the resident memory of the heavy stages and refuses runs that exceed the budget
"""

import logging
from datetime import datetime
from typing import Any, Dict, Optional, Tuple

from .errors import CapacityError

logger = logging.getLogger(__name__)

BYTES_PER_FLOAT = 8
MB = 1024 * 1024

CheckResult = Tuple[bool, str, Dict[str, Any]]


class MemoryGuard:
    """
    Budget checks run before dense and blocked stages

    Every check returns (is_ok, message, metadata); `require` turns a failed
    check into a CapacityError and records it in the run log.
    """

    # K, U and the eigensolver workspace are each n x n
    DENSE_COPIES = 3
    # one block being read plus one being reduced, per worker
    BLOCK_COPIES = 2

    def __init__(self, memory_budget_mb: Optional[float] = None, run_logger=None):
        """
        Args:
            memory_budget_mb: Budget in MiB; None disables every check
            run_logger: Optional RunLogger receiving capacity violations
        """
        self.memory_budget_mb = memory_budget_mb
        self.run_logger = run_logger

    @property
    def enabled(self) -> bool:
        return self.memory_budget_mb is not None

    def _evaluate(self, check: str, estimate_bytes: float, **details: Any) -> CheckResult:
        estimate_mb = estimate_bytes / MB
        metadata = {
            "validation_time": datetime.now().isoformat(),
            "check": check,
            "estimate_mb": round(estimate_mb, 3),
            "budget_mb": self.memory_budget_mb,
            **details,
        }
        if not self.enabled:
            return True, f"{check}: no memory budget set", metadata
        if estimate_mb > self.memory_budget_mb:
            return False, (
                f"Capacity error: {check} needs about {estimate_mb:.1f} MB "
                f"but the memory budget is {self.memory_budget_mb:.1f} MB"
            ), metadata
        return True, f"{check}: {estimate_mb:.1f}/{self.memory_budget_mb:.1f} MB", metadata

    def check_dense_workspace(self, n: int) -> CheckResult:
        """Relatedness matrix and its eigendecomposition (O(n^2))"""
        return self._evaluate("dense_workspace", self.DENSE_COPIES * n * n * BYTES_PER_FLOAT, n=n)

    def check_block_workspace(self, n: int, block_width: int, threads: int = 1) -> CheckResult:
        """Column blocks in flight during a blocked traversal"""
        estimate = self.BLOCK_COPIES * threads * n * block_width * BYTES_PER_FLOAT
        return self._evaluate("block_workspace", estimate, n=n, block_width=block_width, threads=threads)

    def check_working_set(self, n: int, n_cols: int) -> CheckResult:
        """Dense copy of the coordinate-descent working set"""
        return self._evaluate("working_set", n * n_cols * BYTES_PER_FLOAT, n=n, n_cols=n_cols)

    def validate_run(self, n: int, block_width: int, threads: int = 1,
                     dense: bool = True) -> CheckResult:
        """
        Run the checks that apply before a fit

        Args:
            n: Number of samples
            block_width: Columns per block
            threads: Worker count
            dense: Include the n x n workspace (False for ingest/design)

        Returns:
            Tuple of (is_ok, message, metadata)
        """
        checks = [self.check_block_workspace(n, block_width, threads)]
        if dense:
            checks.append(self.check_dense_workspace(n))

        metadata = {"checks_performed": [c[2]["check"] for c in checks]}
        for is_ok, message, meta in checks:
            if not is_ok:
                metadata.update(meta)
                return False, message, metadata
        metadata["checks_performed"].append("all_passed")
        return True, "Memory checks passed", metadata

    def require(self, result: CheckResult) -> None:
        """Raise CapacityError for a failed check"""
        is_ok, message, metadata = result
        if is_ok:
            logger.debug(message)
            return
        logger.error(message)
        if self.run_logger is not None:
            self.run_logger.log_capacity_violation(metadata.get("check", "validate_run"), message, metadata)
        raise CapacityError(message)
