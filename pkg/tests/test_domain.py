"""Domain types, the submission lifecycle state machine, subaccount limits
and visibility redaction."""

import dataclasses
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from codearena.clock import utc_iso
from codearena.domain import (
    DomainError,
    ExitKind,
    IllegalTransition,
    InstanceScope,
    LifecycleEvent,
    MetricRecord,
    StageOutcome,
    SubaccountDecision,
    Submission,
    SubmissionStatus,
    SubmissionView,
    TERMINAL_STATUSES,
    ViewerKind,
    VisibilityPolicy,
    full_view,
    redact_submission_view,
    transition_submission,
    validate_subaccount_request,
)

ALL_STATUSES = list(SubmissionStatus)
ALL_EVENTS = list(LifecycleEvent)

# the complete legal relation, spelled out independently of the implementation
LEGAL = {
    (SubmissionStatus.QUEUED, LifecycleEvent.STAGE_STARTED): SubmissionStatus.FETCHING,
    (SubmissionStatus.FETCHING, LifecycleEvent.FETCHED): SubmissionStatus.EVALUATING,
    (SubmissionStatus.FETCHING, LifecycleEvent.STAGE_FAIL): SubmissionStatus.FAILED,
    (SubmissionStatus.EVALUATING, LifecycleEvent.STAGE_OK): SubmissionStatus.EVALUATING,
    (SubmissionStatus.EVALUATING, LifecycleEvent.ALL_STAGES_DONE): SubmissionStatus.DONE,
    (SubmissionStatus.EVALUATING, LifecycleEvent.STAGE_FAIL): SubmissionStatus.FAILED,
    (SubmissionStatus.EVALUATING, LifecycleEvent.TIMEOUT): SubmissionStatus.TIMED_OUT,
    (SubmissionStatus.EVALUATING, LifecycleEvent.RESOURCE_KILL): SubmissionStatus.KILLED,
}


class TestStateMachine:
    def test_all_49_pairs_classified(self):
        checked = 0
        for status in ALL_STATUSES:
            for event in ALL_EVENTS:
                checked += 1
                if (status, event) in LEGAL:
                    assert transition_submission(status, event) == LEGAL[(status, event)]
                else:
                    with pytest.raises(IllegalTransition):
                        transition_submission(status, event)
        assert checked == 49

    def test_queued_fetched_rejected(self):
        # only (fetching, fetched) reaches evaluating
        with pytest.raises(IllegalTransition):
            transition_submission(SubmissionStatus.QUEUED, LifecycleEvent.FETCHED)
        assert (
            transition_submission(SubmissionStatus.FETCHING, LifecycleEvent.FETCHED)
            == SubmissionStatus.EVALUATING
        )

    def test_timeout_kills_evaluation(self):
        assert (
            transition_submission(SubmissionStatus.EVALUATING, LifecycleEvent.TIMEOUT)
            == SubmissionStatus.TIMED_OUT
        )

    def test_terminal_states_accept_nothing(self):
        for status in TERMINAL_STATUSES:
            for event in ALL_EVENTS:
                with pytest.raises(IllegalTransition):
                    transition_submission(status, event)

    @given(st.lists(st.sampled_from(ALL_EVENTS), max_size=20))
    @settings(max_examples=300, deadline=None)
    def test_folding_never_reaches_undefined_state(self, events):
        status = SubmissionStatus.QUEUED
        for event in events:
            try:
                status = transition_submission(status, event)
            except IllegalTransition:
                break
            assert status in ALL_STATUSES


class TestSubaccountPolicy:
    def test_first_subaccount_allowed(self):
        assert validate_subaccount_request("u", "c", 0, 1) == SubaccountDecision.ALLOW

    def test_at_limit_denied(self):
        assert validate_subaccount_request("u", "c", 1, 1) == SubaccountDecision.DENY_LIMIT

    def test_below_raised_limit_allowed(self):
        assert validate_subaccount_request("u", "c", 2, 3) == SubaccountDecision.ALLOW

    def test_allow_iff_below_limit_exhaustive(self):
        for count in range(101):
            for limit in range(1, 101):
                decision = validate_subaccount_request("u", "c", count, limit)
                assert (decision == SubaccountDecision.ALLOW) == (count < limit)

    def test_preconditions(self):
        with pytest.raises(DomainError):
            validate_subaccount_request("u", "c", -1, 1)
        with pytest.raises(DomainError):
            validate_subaccount_request("u", "c", 0, 0)


def outcome(stage, scope, instance=None, **kw):
    defaults = dict(
        exit_kind=ExitKind.OK,
        wall_time=1.0,
        peak_memory=1000,
        stdout_ref=f"{stage}/{instance or 'x'}/logs/stdout.txt",
        stderr_ref=f"{stage}/{instance or 'x'}/logs/stderr.txt",
        artifact_refs=(f"{stage}/{instance or 'x'}/metrics.jsonl",),
    )
    defaults.update(kw)
    return StageOutcome(stage_name=stage, instance_scope=scope, instance_id=instance, **defaults)


def sample_submission():
    return Submission(
        submission_id="s1",
        subaccount_id="a1",
        competition_id="c1",
        submit_time=utc_iso(1000.0),
        commit_hash="a" * 40,
        status=SubmissionStatus.DONE,
        declared_packages=("libfoo",),
        stage_outcomes=(
            outcome("bench", InstanceScope.DEBUG, "d1"),
            outcome("bench", InstanceScope.HIDDEN, "h1"),
        ),
        metric_records=(
            MetricRecord("d1", "runtime_seconds", 0.5, InstanceScope.DEBUG),
            MetricRecord("h1", "runtime_seconds", 1.5, InstanceScope.HIDDEN),
        ),
        server_log="[t] fetched\n",
    )


def visible_fields(view: SubmissionView) -> set:
    """The set of leaf facts a viewer can see, for subset comparisons."""
    facts = set()
    for name in ("commit_hash", "server_log"):
        if getattr(view, name) is not None:
            facts.add(name)
    if view.declared_packages is not None:
        facts.add("declared_packages")
    for o in view.stage_outcomes:
        key = ("outcome", o.stage_name, o.instance_id)
        facts.add(key)
        if o.stdout_ref:
            facts.add(key + ("stdout",))
        if o.stderr_ref:
            facts.add(key + ("stderr",))
        for ref in o.artifact_refs:
            facts.add(key + ("artifact", ref))
    for m in view.metric_records:
        facts.add(("metric", m.instance_id, m.metric_name, m.scope.value))
    return facts


class TestRedaction:
    def test_organiser_sees_everything(self):
        sub = sample_submission()
        view = redact_submission_view(sub, ViewerKind.ORGANISER, VisibilityPolicy.GPPC_STYLE)
        assert view == full_view(sub)

    def test_gppc_owner_sees_debug_logs_not_hidden_logs(self):
        sub = sample_submission()
        view = redact_submission_view(sub, ViewerKind.OWNER, VisibilityPolicy.GPPC_STYLE)
        by_scope = {o.instance_scope: o for o in view.stage_outcomes}
        assert by_scope[InstanceScope.DEBUG].stdout_ref is not None
        assert by_scope[InstanceScope.HIDDEN].stdout_ref is None
        assert by_scope[InstanceScope.HIDDEN].stderr_ref is None
        assert by_scope[InstanceScope.HIDDEN].artifact_refs == ()

    def test_lorr_owner_sees_only_server_log_among_logs(self):
        sub = sample_submission()
        view = redact_submission_view(sub, ViewerKind.OWNER, VisibilityPolicy.LORR_STYLE)
        assert view.server_log == sub.server_log
        assert view.stage_outcomes == ()
        # final scores stay visible: hidden-scope records only
        assert all(m.scope == InstanceScope.HIDDEN for m in view.metric_records)

    def test_other_sees_status_and_time_only(self):
        sub = sample_submission()
        view = redact_submission_view(sub, ViewerKind.OTHER, VisibilityPolicy.GPPC_STYLE)
        assert view.status == sub.status
        assert view.submit_time == sub.submit_time
        assert view.commit_hash is None
        assert view.server_log is None
        assert view.stage_outcomes == ()
        assert view.metric_records == ()

    @pytest.mark.parametrize("policy", list(VisibilityPolicy))
    @pytest.mark.parametrize("viewer", list(ViewerKind))
    def test_idempotent(self, policy, viewer):
        sub = sample_submission()
        once = redact_submission_view(sub, viewer, policy)
        twice = redact_submission_view(once, viewer, policy)
        assert once == twice

    @pytest.mark.parametrize("policy", list(VisibilityPolicy))
    @pytest.mark.parametrize("viewer", [ViewerKind.OWNER, ViewerKind.OTHER])
    def test_never_widens(self, policy, viewer):
        sub = sample_submission()
        organiser = visible_fields(full_view(sub))
        participant = visible_fields(redact_submission_view(sub, viewer, policy))
        assert participant <= organiser

    @given(
        st.lists(
            st.tuples(
                st.sampled_from([InstanceScope.DEBUG, InstanceScope.HIDDEN]),
                st.booleans(),
            ),
            max_size=8,
        )
    )
    @settings(max_examples=150, deadline=None)
    def test_hidden_logs_never_survive_participant_redaction(self, scopes):
        outcomes = tuple(
            outcome("bench", scope, f"i{i}")
            for i, (scope, _) in enumerate(scopes)
        )
        sub = dataclasses.replace(sample_submission(), stage_outcomes=outcomes)
        for policy in VisibilityPolicy:
            view = redact_submission_view(sub, ViewerKind.OWNER, policy)
            for o in view.stage_outcomes:
                if o.instance_scope == InstanceScope.HIDDEN:
                    assert o.stdout_ref is None and o.stderr_ref is None
                    assert o.artifact_refs == ()


class TestTypeInvariants:
    def test_metric_record_must_be_finite(self):
        with pytest.raises(DomainError):
            MetricRecord("i", "m", float("nan"), InstanceScope.HIDDEN)
        with pytest.raises(DomainError):
            MetricRecord("i", "m", float("inf"), InstanceScope.DEBUG)

    def test_commit_hash_shape_enforced(self):
        with pytest.raises(DomainError):
            Submission("s", "a", "c", utc_iso(0), commit_hash="not-hex")

    def test_status_beyond_fetching_requires_hash(self):
        with pytest.raises(DomainError):
            Submission("s", "a", "c", utc_iso(0), status=SubmissionStatus.EVALUATING)

    def test_benchmark_stage_must_be_exclusive(self):
        from codearena.domain import StageConcurrency, StageKind, StageSpec

        with pytest.raises(DomainError):
            StageSpec(
                "b",
                StageKind.BENCHMARK,
                StageConcurrency.PARALLEL,
                1.0,
                1.0,
                1,
                1,
                ("true",),
            )

    def test_submission_doc_roundtrip(self):
        sub = sample_submission()
        assert Submission.from_doc(sub.to_doc()) == sub
