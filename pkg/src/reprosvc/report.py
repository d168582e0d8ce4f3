"""Grades, ranked listings, badges and venue review policy.

Everything here is a pure function of recorded outcomes. Advisory timings
never enter any computation in this module.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Iterable

from reprosvc.errors import ServiceError, missing_artifact, no_run
from reprosvc.harness import CELL_PASS, TEST_OK
from reprosvc.ledger import Ledger, RunRecord
from reprosvc.util import to_rfc3339, utcnow

GREEN = "GREEN"
AMBER = "AMBER"
RED = "RED"
_COLOR_RANK = {GREEN: 0, AMBER: 1, RED: 2}

MODE_OPTIONAL = "OPTIONAL"
MODE_MANDATORY_UNSCORED = "MANDATORY_UNSCORED"
MODE_MANDATORY_SCORED = "MANDATORY_SCORED"
POLICY_MODES = (MODE_OPTIONAL, MODE_MANDATORY_UNSCORED, MODE_MANDATORY_SCORED)


@dataclass(frozen=True)
class TrafficLight:
    color: str
    derivation: dict

    def to_doc(self) -> dict:
        return {"color": self.color, "derivation": self.derivation}


def grade(record: RunRecord) -> TrafficLight:
    """Traffic-light color of one run.

    RED: the run never reached a judged matrix (stage or test failure).
    GREEN: test OK and no cell deviated; an empty matrix is vacuously GREEN.
    AMBER: test OK but at least one cell did not PASS.
    """
    for outcome in record.stages:
        if not outcome.ok:
            return TrafficLight(
                color=RED,
                derivation={
                    "reason": "stage_failure",
                    "stage": outcome.stage,
                    "status": outcome.status,
                },
            )
    if record.test is None or record.test.status != TEST_OK:
        status = record.test.status if record.test else "MISSING"
        return TrafficLight(
            color=RED,
            derivation={"reason": "test_failure", "status": status},
        )
    cells = record.cells or ()
    degraded = [c for c in cells if c.status != CELL_PASS]
    if not degraded:
        return TrafficLight(
            color=GREEN,
            derivation={"reason": "all_pass", "cell_count": len(cells)},
        )
    return TrafficLight(
        color=AMBER,
        derivation={
            "reason": "cells_degraded",
            "cell_count": len(cells),
            "pass_count": len(cells) - len(degraded),
            "degraded": [
                {"benchmark_id": c.benchmark_id, "algorithm": c.algorithm, "status": c.status}
                for c in degraded
            ],
        },
    )


def pass_counts(record: RunRecord) -> tuple[int, int]:
    """(PASS cells, total cells); (0, 0) when the run recorded no matrix."""
    cells = record.cells or ()
    return sum(1 for c in cells if c.status == CELL_PASS), len(cells)


def pass_fraction(record: RunRecord) -> Fraction:
    passed, total = pass_counts(record)
    return Fraction(passed, total) if total else Fraction(0)


@dataclass(frozen=True)
class RankedEntry:
    submission_id: str
    color: str
    pass_fraction: Fraction
    cell_count: int
    tiebreak_key: str

    def to_doc(self) -> dict:
        return {
            "submission_id": self.submission_id,
            "color": self.color,
            "pass_fraction": f"{self.pass_fraction.numerator}/{self.pass_fraction.denominator}"
            if self.cell_count
            else "0/0",
            "cell_count": self.cell_count,
            "tiebreak_key": self.tiebreak_key,
        }


def rank(
    records: Iterable[RunRecord],
    submission_id: Callable[[RunRecord], str] | None = None,
) -> list[RankedEntry]:
    """Total deterministic ordering of submissions.

    Color first (GREEN best), then larger pass fraction, then more cells
    (a 0/0 GREEN ranks below a 10/10 GREEN), finally the submission id.
    """
    ident = submission_id or (lambda r: r.commit.project_id)
    entries = []
    for record in records:
        entries.append(
            RankedEntry(
                submission_id=ident(record),
                color=grade(record).color,
                pass_fraction=pass_fraction(record),
                cell_count=pass_counts(record)[1],
                tiebreak_key=ident(record),
            )
        )
    entries.sort(
        key=lambda e: (_COLOR_RANK[e.color], -e.pass_fraction, -e.cell_count, e.submission_id)
    )
    return entries


def render_badge(ledger: Ledger, project_id: str, commit_id: str | None = None) -> dict:
    """Machine-readable status badge for a commit (latest when omitted).

    Carries only judged facts: color, pass fraction, the run that produced
    them. Deliberately no durations.
    """
    record = ledger.latest_run(project_id, commit_id)
    if record is None:
        raise no_run(commit_id or f"latest of {project_id}")
    light = grade(record)
    passed, total = pass_counts(record)
    return {
        "project": project_id,
        "commit": record.commit.commit_id,
        "color": light.color,
        "pass_fraction": f"{passed}/{total}",
        "generated_at": to_rfc3339(utcnow()),
        "run_id": record.run_id,
    }


@dataclass(frozen=True)
class VenuePolicy:
    venue_id: str
    mode: str
    label: str = ""

    def __post_init__(self):
        if self.mode not in POLICY_MODES:
            raise ValueError(f"unknown policy mode {self.mode!r}")

    def advanced_to(self, mode: str, label: str | None = None) -> "VenuePolicy":
        """Move the mandate forward; a venue never walks its policy back."""
        if mode not in POLICY_MODES:
            raise ServiceError("REJECTED", f"unknown policy mode {mode!r}")
        if POLICY_MODES.index(mode) < POLICY_MODES.index(self.mode):
            raise ServiceError(
                "REJECTED", f"policy may not regress from {self.mode} to {mode}"
            )
        return VenuePolicy(
            venue_id=self.venue_id,
            mode=mode,
            label=self.label if label is None else label,
        )

    def to_doc(self) -> dict:
        return {"venue_id": self.venue_id, "mode": self.mode, "label": self.label}

    @classmethod
    def from_doc(cls, doc: dict) -> "VenuePolicy":
        return cls(venue_id=doc["venue_id"], mode=doc["mode"], label=doc.get("label", ""))


def apply_policy(policy: VenuePolicy, record: RunRecord | None) -> dict:
    """Review annotation for a submission under the venue's current mode."""
    annotation: dict = {"venue_id": policy.venue_id, "mode": policy.mode}
    if policy.mode == MODE_OPTIONAL:
        annotation["note"] = "voluntary; not used in decision"
        annotation["scored"] = False
        if record is not None:
            annotation["grade"] = grade(record).color
        return annotation
    if record is None:
        raise missing_artifact(policy.venue_id, policy.mode)
    light = grade(record)
    if policy.mode == MODE_MANDATORY_UNSCORED:
        annotation["note"] = "grade shown to reviewers; not part of the decision"
        annotation["scored"] = False
        annotation["grade"] = light.color
        annotation["informational"] = True
    else:
        annotation["note"] = "grade enters the review decision"
        annotation["scored"] = True
        annotation["grade"] = light.color
    return annotation
