"""Consent-driven data filter: pass, drop, or redact frames per patient.

The engine is read-mostly: evaluations take a single reference to the
current policy object, so every decision reflects exactly one complete
policy version even while updates land concurrently.
"""

from __future__ import annotations

import threading
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum

from .domain import DataCategory, Frame, redact_identity_payload, validate_patient_id


class PatientMismatchError(ValueError):
    """Frame routed to a policy for a different patient."""


class PolicyFileError(ValueError):
    pass


class Action(Enum):
    PASS = "pass"
    DROP = "drop"
    REDACT = "redact"


@dataclass(frozen=True)
class FilterPolicy:
    patient: int
    allowed: frozenset
    redact_identity: bool = False
    version: int = 1

    def __post_init__(self):
        validate_patient_id(self.patient)
        if self.version < 1:
            raise ValueError("policy version must be >= 1")
        # acks always flow, or nothing could be delivered reliably
        object.__setattr__(self, "allowed", frozenset(self.allowed) | {DataCategory.ACK})


@dataclass(frozen=True)
class FilterDecision:
    action: Action
    frame: Frame | None
    policy_version: int


@dataclass(frozen=True)
class UpdateResult:
    accepted: bool
    version: int  # version now in force


def policy_from_consent(patient, allowed_categories, redact_identity=False) -> FilterPolicy:
    return FilterPolicy(
        patient=patient,
        allowed=frozenset(allowed_categories),
        redact_identity=redact_identity,
        version=1,
    )


def evaluate(policy: FilterPolicy, frame: Frame) -> FilterDecision:
    """Pure decision for one frame against one policy."""
    if frame.patient != policy.patient:
        raise PatientMismatchError(f"frame for patient {frame.patient} hit policy for {policy.patient}")
    if frame.category not in policy.allowed:
        return FilterDecision(Action.DROP, None, policy.version)
    if frame.category == DataCategory.IDENTITY and policy.redact_identity:
        redacted = Frame(
            category=frame.category,
            patient=frame.patient,
            seq=frame.seq,
            total=frame.total,
            payload=redact_identity_payload(frame.payload),
        )
        return FilterDecision(Action.REDACT, redacted, policy.version)
    return FilterDecision(Action.PASS, frame, policy.version)


class PolicyEngine:
    """Holds the live policy per patient; unknown patients fail closed."""

    def __init__(self, policies=()):
        self._policies = {}
        self._lock = threading.Lock()
        self.drops = Counter()
        for policy in policies:
            self._policies[policy.patient] = policy

    def policy_for(self, patient) -> FilterPolicy | None:
        return self._policies.get(patient)

    def evaluate(self, frame: Frame) -> FilterDecision:
        policy = self._policies.get(frame.patient)
        if policy is None:
            if frame.category == DataCategory.ACK:
                return FilterDecision(Action.PASS, frame, 0)
            self.drops[frame.category] += 1
            return FilterDecision(Action.DROP, None, 0)
        decision = evaluate(policy, frame)
        if decision.action is Action.DROP:
            self.drops[frame.category] += 1
        return decision

    def update_policy(self, new_policy: FilterPolicy) -> UpdateResult:
        """Install a newer policy version; stale versions are rejected."""
        with self._lock:
            current = self._policies.get(new_policy.patient)
            if current is not None and new_policy.version <= current.version:
                return UpdateResult(accepted=False, version=current.version)
            self._policies[new_policy.patient] = new_policy
            return UpdateResult(accepted=True, version=new_policy.version)


# --- policy file format ----------------------------------------------------
#
# Line-oriented key=value blocks, one per patient, separated by blank lines:
#
#     patient=1
#     allowed=Vitals,KeywordEvent
#     redact_identity=false
#     version=1

_CATEGORY_NAMES = {
    "Vitals": DataCategory.VITALS,
    "AudioClip": DataCategory.AUDIO_CLIP,
    "KeywordEvent": DataCategory.KEYWORD_EVENT,
    "CameraControl": DataCategory.CAMERA_CONTROL,
    "Identity": DataCategory.IDENTITY,
    "Ack": DataCategory.ACK,
}
_NAMES_BY_CATEGORY = {v: k for k, v in _CATEGORY_NAMES.items()}


def parse_policies(text: str):
    """Parse one or more policy blocks from policy-file text."""
    policies = []
    for block in text.split("\n\n"):
        lines = [ln.strip() for ln in block.splitlines() if ln.strip() and not ln.strip().startswith("#")]
        if not lines:
            continue
        fields = {}
        for line in lines:
            if "=" not in line:
                raise PolicyFileError(f"expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            fields[key.strip()] = value.strip()
        try:
            patient = int(fields["patient"])
            allowed = set()
            for name in filter(None, (n.strip() for n in fields.get("allowed", "").split(","))):
                if name not in _CATEGORY_NAMES:
                    raise PolicyFileError(f"unknown category {name!r}")
                allowed.add(_CATEGORY_NAMES[name])
            redact = fields.get("redact_identity", "false").lower() in ("true", "1", "yes")
            version = int(fields.get("version", "1"))
        except KeyError as exc:
            raise PolicyFileError(f"policy block missing {exc}") from exc
        except ValueError as exc:
            raise PolicyFileError(f"bad policy value: {exc}") from exc
        policies.append(FilterPolicy(patient=patient, allowed=frozenset(allowed), redact_identity=redact, version=version))
    if not policies:
        raise PolicyFileError("no policy blocks found")
    return policies


def format_policies(policies) -> str:
    blocks = []
    for p in policies:
        names = sorted(_NAMES_BY_CATEGORY[c] for c in p.allowed)
        blocks.append(
            "\n".join(
                [
                    f"patient={p.patient}",
                    f"allowed={','.join(names)}",
                    f"redact_identity={'true' if p.redact_identity else 'false'}",
                    f"version={p.version}",
                ]
            )
        )
    return "\n\n".join(blocks) + "\n"


def load_policy_file(path):
    with open(path) as fh:
        return parse_policies(fh.read())


def save_policy_file(policies, path):
    with open(path, "w") as fh:
        fh.write(format_policies(policies))
