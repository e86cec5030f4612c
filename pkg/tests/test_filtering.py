import threading

import pytest

from rpmfog.domain import (
    DataCategory,
    Frame,
    decode_frame,
    decode_identity_payload,
    encode_frame,
    encode_identity_payload,
)
from rpmfog.filtering import (
    Action,
    FilterPolicy,
    PatientMismatchError,
    PolicyEngine,
    PolicyFileError,
    evaluate,
    format_policies,
    parse_policies,
    policy_from_consent,
)


def frame_of(category, patient=1, payload=b""):
    return Frame(category=category, patient=patient, seq=0, total=1, payload=payload)


class TestPolicyConstruction:
    def test_ack_implicitly_allowed(self):
        policy = policy_from_consent(1, {DataCategory.VITALS})
        assert DataCategory.ACK in policy.allowed
        assert DataCategory.VITALS in policy.allowed
        assert policy.version == 1

    def test_empty_consent_passes_only_acks(self):
        policy = policy_from_consent(1, set())
        assert policy.allowed == frozenset({DataCategory.ACK})

    def test_version_bumps_on_update(self):
        engine = PolicyEngine([policy_from_consent(1, {DataCategory.VITALS})])
        second = FilterPolicy(patient=1, allowed=frozenset(), version=2)
        result = engine.update_policy(second)
        assert result.accepted and result.version == 2


class TestEvaluate:
    def test_disallowed_category_drops(self):
        policy = policy_from_consent(1, {DataCategory.VITALS})
        decision = evaluate(policy, frame_of(DataCategory.AUDIO_CLIP))
        assert decision.action is Action.DROP
        assert decision.frame is None

    def test_allowed_category_passes(self):
        policy = policy_from_consent(1, {DataCategory.VITALS, DataCategory.KEYWORD_EVENT})
        decision = evaluate(policy, frame_of(DataCategory.KEYWORD_EVENT))
        assert decision.action is Action.PASS

    def test_redaction_zeroes_name_and_recrcs(self):
        policy = policy_from_consent(1, {DataCategory.IDENTITY}, redact_identity=True)
        original = frame_of(DataCategory.IDENTITY, payload=encode_identity_payload("Pat Doe", b"rest"))
        decision = evaluate(policy, original)
        assert decision.action is Action.REDACT
        # the redacted frame must re-encode with a valid checksum
        buf = encode_frame(decision.frame)
        back, _ = decode_frame(buf)
        name, extra = decode_identity_payload(back.payload)
        assert name == "\x00" * 7
        assert extra == b"rest"
        assert len(back.payload) == len(original.payload)

    def test_redaction_idempotent(self):
        policy = policy_from_consent(1, {DataCategory.IDENTITY}, redact_identity=True)
        once = evaluate(policy, frame_of(DataCategory.IDENTITY, payload=encode_identity_payload("X")))
        twice = evaluate(policy, once.frame)
        assert twice.action is Action.REDACT
        assert twice.frame == once.frame

    def test_identity_without_redaction_passes_whole(self):
        policy = policy_from_consent(1, {DataCategory.IDENTITY}, redact_identity=False)
        payload = encode_identity_payload("Keep Me")
        decision = evaluate(policy, frame_of(DataCategory.IDENTITY, payload=payload))
        assert decision.action is Action.PASS
        assert decision.frame.payload == payload

    def test_patient_mismatch_never_passes(self):
        policy = policy_from_consent(1, {DataCategory.VITALS})
        with pytest.raises(PatientMismatchError):
            evaluate(policy, frame_of(DataCategory.VITALS, patient=2))

    def test_soundness_and_completeness(self):
        policy = policy_from_consent(1, {DataCategory.VITALS, DataCategory.CAMERA_CONTROL})
        for category in DataCategory:
            decision = evaluate(policy, frame_of(category))
            if category in policy.allowed:
                assert decision.action in (Action.PASS, Action.REDACT)
            else:
                assert decision.action is Action.DROP


class TestEngine:
    def test_stale_version_rejected(self):
        engine = PolicyEngine([policy_from_consent(1, {DataCategory.VITALS})])
        v2 = FilterPolicy(patient=1, allowed=frozenset({DataCategory.VITALS}), version=2)
        assert engine.update_policy(v2).accepted
        again = engine.update_policy(FilterPolicy(patient=1, allowed=frozenset(), version=2))
        assert not again.accepted
        assert again.version == 2

    def test_unknown_patient_fails_closed(self):
        engine = PolicyEngine()
        decision = engine.evaluate(frame_of(DataCategory.VITALS, patient=9))
        assert decision.action is Action.DROP
        assert engine.drops[DataCategory.VITALS] == 1
        # but acks still flow
        assert engine.evaluate(frame_of(DataCategory.ACK, patient=9)).action is Action.PASS

    def test_drop_counter_by_category(self):
        engine = PolicyEngine([policy_from_consent(1, {DataCategory.VITALS})])
        for _ in range(3):
            engine.evaluate(frame_of(DataCategory.AUDIO_CLIP))
        engine.evaluate(frame_of(DataCategory.IDENTITY))
        assert engine.drops[DataCategory.AUDIO_CLIP] == 3
        assert engine.drops[DataCategory.IDENTITY] == 1

    def test_concurrent_updates_yield_consistent_decisions(self):
        # even versions allow vitals, odd versions do not; every decision
        # must match the policy version it reports
        engine = PolicyEngine([policy_from_consent(1, {DataCategory.VITALS})])
        engine.update_policy(FilterPolicy(patient=1, allowed=frozenset({DataCategory.VITALS}), version=2))
        stop = threading.Event()
        results = []
        errors = []

        def updater():
            version = 3
            while not stop.is_set():
                allowed = frozenset() if version % 2 else frozenset({DataCategory.VITALS})
                engine.update_policy(FilterPolicy(patient=1, allowed=allowed, version=version))
                version += 1

        def evaluator():
            frame = frame_of(DataCategory.VITALS)
            try:
                for _ in range(4000):
                    d = engine.evaluate(frame)
                    results.append((d.action, d.policy_version))
            except Exception as exc:  # pragma: no cover
                errors.append(exc)

        threads = [threading.Thread(target=updater)] + [threading.Thread(target=evaluator) for _ in range(4)]
        for t in threads:
            t.start()
        for t in threads[1:]:
            t.join()
        stop.set()
        threads[0].join()
        assert not errors
        assert len(results) == 16000
        for action, version in results:
            expected = Action.PASS if version % 2 == 0 else Action.DROP
            assert action is expected


class TestPolicyFile:
    def test_roundtrip(self):
        policies = [
            policy_from_consent(1, {DataCategory.VITALS, DataCategory.KEYWORD_EVENT}),
            FilterPolicy(patient=2, allowed=frozenset({DataCategory.IDENTITY}), redact_identity=True, version=3),
        ]
        text = format_policies(policies)
        back = parse_policies(text)
        assert back == policies

    def test_parse_example(self):
        text = "patient=5\nallowed=Vitals,AudioClip\nredact_identity=true\nversion=2\n"
        (policy,) = parse_policies(text)
        assert policy.patient == 5
        assert DataCategory.AUDIO_CLIP in policy.allowed
        assert policy.redact_identity
        assert policy.version == 2

    def test_bad_category_rejected(self):
        with pytest.raises(PolicyFileError):
            parse_policies("patient=1\nallowed=Nonsense\n")

    def test_empty_rejected(self):
        with pytest.raises(PolicyFileError):
            parse_policies("\n\n")
