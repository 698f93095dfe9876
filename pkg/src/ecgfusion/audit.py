"""Instrumentation for protocol-integrity assertions.

Fit operations (MiniRocket bias fitting, PCA fitting) and parameter
updates report here. The cross-validation driver uses the record-id log
to assert fold isolation; the zero-shot path asserts that all counters
stay at zero for the lifetime of the evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass
class FitAudit:
    """Counters plus the record ids consumed by each fit family."""

    minirocket_fit_calls: int = 0
    pca_fit_calls: int = 0
    param_update_calls: int = 0
    record_ids_seen: set = field(default_factory=set)

    def note_minirocket_fit(self, record_ids=()):
        self.minirocket_fit_calls += 1
        self.record_ids_seen.update(record_ids)

    def note_pca_fit(self, record_ids=()):
        self.pca_fit_calls += 1
        self.record_ids_seen.update(record_ids)

    def note_param_update(self):
        self.param_update_calls += 1

    @property
    def total_fit_calls(self) -> int:
        return self.minirocket_fit_calls + self.pca_fit_calls + self.param_update_calls

    def reset(self):
        self.minirocket_fit_calls = 0
        self.pca_fit_calls = 0
        self.param_update_calls = 0
        self.record_ids_seen = set()


# Process-wide audit used when callers do not supply their own.
GLOBAL_AUDIT = FitAudit()
