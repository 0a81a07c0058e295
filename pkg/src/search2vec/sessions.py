"""Search-session extraction from raw event logs.

Raw events (queries, ad clicks with dwell, link clicks, ad impressions)
are segmented into per-user sessions at 30-minute inactivity gaps.
Sessions are the training unit: their action sequences feed the
skip-gram trainers, and their impression blocks yield implicit-negative
(query, skipped ad) pairs.

Event log format (line-delimited, tab-separated)::

    user_id <TAB> timestamp <TAB> kind <TAB> payload

with kind Q (payload = query text), AC (payload = ``ad_id,dwell_seconds``),
LC (payload = link_id), AI (payload = ``ad1|ad2|...;clicked_pos``,
clicked_pos empty when nothing was clicked).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

SESSION_GAP_SECONDS = 1800
MAX_SKIP_POSITION = 3
MIN_SKIP_DWELL_SECONDS = 10

KIND_QUERY = "query"
KIND_AD = "ad"
KIND_LINK = "link"


class MalformedEventError(ValueError):
    """A single event record that cannot be parsed or violates invariants."""


@dataclass(frozen=True)
class AdImpression:
    """Ads shown for one query, ordered by page position (1-based)."""

    ad_ids: tuple[str, ...]
    clicked_position: int | None = None

    def __post_init__(self) -> None:
        if not self.ad_ids:
            raise MalformedEventError("impression with empty ad list")
        if self.clicked_position is not None and not (
            1 <= self.clicked_position <= len(self.ad_ids)
        ):
            raise MalformedEventError(
                f"clicked position {self.clicked_position} outside 1..{len(self.ad_ids)}"
            )


@dataclass(frozen=True)
class RawEvent:
    user_id: str
    timestamp: int
    kind: str  # "Q" | "AC" | "LC" | "AI"
    query: str | None = None
    ad_id: str | None = None
    dwell_seconds: int | None = None
    link_id: str | None = None
    impression: AdImpression | None = None


@dataclass(frozen=True)
class Action:
    """One user action inside a session.

    ``token`` is the canonical id: normalized query text, ad id, or link
    id. ``dwell_seconds`` is present exactly for clicked ads.
    """

    kind: str
    token: str
    dwell_seconds: int | None = None


@dataclass
class Session:
    user_id: str
    actions: list[Action]
    # (index of the query action the block was shown for, impression)
    impressions: list[tuple[int, AdImpression]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.actions)


@dataclass(frozen=True)
class ImplicitNegativePair:
    query_token: str
    skipped_ad_token: str


@dataclass
class IngestReport:
    events: int = 0
    malformed: int = 0
    sessions: int = 0
    discarded_singletons: int = 0
    errors: list[tuple[int, str]] = field(default_factory=list)

    def record_error(self, line_no: int, reason: str) -> None:
        self.malformed += 1
        self.errors.append((line_no, reason))


def normalize_query(text: str) -> str:
    """Canonical query form: lowercase, trimmed, internal whitespace collapsed."""
    return " ".join(text.lower().split())


def dwell_weight(dwell_minutes: float) -> float:
    """Weight for a (query, clicked ad) pair given dwell time in minutes.

    ln(1 + t) up to 10 minutes, then 1.0. The formula exceeds 1 on
    (e-1, 10] and drops back to 1 above 10 minutes; implemented literally.
    """
    if dwell_minutes < 0:
        raise ValueError(f"dwell must be non-negative, got {dwell_minutes}")
    if dwell_minutes > 10:
        return 1.0
    return math.log1p(dwell_minutes)


def parse_event_line(line: str) -> RawEvent:
    """Parse one log line; raises MalformedEventError on any defect."""
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 4:
        raise MalformedEventError(f"expected 4 tab-separated fields, got {len(parts)}")
    user_id, ts_text, kind, payload = parts
    if not user_id:
        raise MalformedEventError("empty user id")
    try:
        timestamp = int(ts_text)
    except ValueError:
        raise MalformedEventError(f"bad timestamp {ts_text!r}") from None
    if timestamp < 0:
        raise MalformedEventError(f"negative timestamp {timestamp}")

    if kind == "Q":
        token = normalize_query(payload)
        if not token:
            raise MalformedEventError("empty query text")
        return RawEvent(user_id, timestamp, "Q", query=token)
    if kind == "AC":
        ad_id, sep, dwell_text = payload.partition(",")
        if not sep or not ad_id:
            raise MalformedEventError(f"bad ad click payload {payload!r}")
        try:
            dwell = int(dwell_text)
        except ValueError:
            raise MalformedEventError(f"bad dwell {dwell_text!r}") from None
        if dwell < 0:
            raise MalformedEventError(f"negative dwell {dwell}")
        return RawEvent(user_id, timestamp, "AC", ad_id=ad_id, dwell_seconds=dwell)
    if kind == "LC":
        if not payload:
            raise MalformedEventError("empty link id")
        return RawEvent(user_id, timestamp, "LC", link_id=payload)
    if kind == "AI":
        ads_text, sep, pos_text = payload.partition(";")
        if not sep:
            raise MalformedEventError(f"bad impression payload {payload!r}")
        ad_ids = tuple(a for a in ads_text.split("|") if a)
        if not ad_ids or len(ad_ids) != len(ads_text.split("|")):
            raise MalformedEventError(f"bad impression ad list {ads_text!r}")
        clicked: int | None = None
        if pos_text:
            try:
                clicked = int(pos_text)
            except ValueError:
                raise MalformedEventError(f"bad clicked position {pos_text!r}") from None
        return RawEvent(user_id, timestamp, "AI", impression=AdImpression(ad_ids, clicked))
    raise MalformedEventError(f"unknown event kind {kind!r}")


def read_events(lines: Iterable[str], report: IngestReport | None = None) -> Iterator[RawEvent]:
    """Yield parsed events; malformed lines go to the report, never abort."""
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            event = parse_event_line(line)
        except MalformedEventError as exc:
            if report is not None:
                report.record_error(line_no, str(exc))
            continue
        if report is not None:
            report.events += 1
        yield event


def _event_action(event: RawEvent) -> Action | None:
    if event.kind == "Q":
        return Action(KIND_QUERY, event.query or "")
    if event.kind == "AC":
        return Action(KIND_AD, event.ad_id or "", event.dwell_seconds)
    if event.kind == "LC":
        return Action(KIND_LINK, event.link_id or "")
    return None


def segment_sessions(
    events: Iterable[RawEvent], report: IngestReport | None = None
) -> list[Session]:
    """Split a (possibly multi-user) event stream into sessions.

    A new session starts whenever consecutive actions of one user are
    more than 30 minutes apart. Impressions are not actions: they do not
    move the gap clock, and they attach to the nearest preceding query
    of the fragment under construction (dropped when no query precedes
    them). Fragments with fewer than 2 actions are discarded.
    """
    by_user: dict[str, list[RawEvent]] = {}
    for event in events:
        by_user.setdefault(event.user_id, []).append(event)

    sessions: list[Session] = []
    for user_id, user_events in by_user.items():
        user_events.sort(key=lambda e: e.timestamp)
        current: Session | None = None
        last_action_ts: int | None = None

        def close(fragment: Session | None) -> None:
            if fragment is None:
                return
            if len(fragment.actions) >= 2:
                sessions.append(fragment)
                if report is not None:
                    report.sessions += 1
            elif len(fragment.actions) == 1 and report is not None:
                report.discarded_singletons += 1

        for event in user_events:
            action = _event_action(event)
            if action is None:
                # Impression: attach to the open fragment's last query.
                if current is not None and event.impression is not None:
                    for idx in range(len(current.actions) - 1, -1, -1):
                        if current.actions[idx].kind == KIND_QUERY:
                            current.impressions.append((idx, event.impression))
                            break
                continue
            if (
                current is None
                or last_action_ts is None
                or event.timestamp - last_action_ts > SESSION_GAP_SECONDS
            ):
                close(current)
                current = Session(user_id, [])
            current.actions.append(action)
            last_action_ts = event.timestamp
        close(current)
    return sessions


def extract_implicit_negatives(session: Session) -> list[ImplicitNegativePair]:
    """(query, skipped ad) pairs from a session's impression blocks.

    Only sessions with exactly one ad click, dwelled over 10 seconds,
    are eligible; the skipped ads are those shown strictly above the
    clicked position, within the top 3 positions.
    """
    clicks = [a for a in session.actions if a.kind == KIND_AD]
    if len(clicks) != 1:
        return []
    click = clicks[0]
    if click.dwell_seconds is None or click.dwell_seconds <= MIN_SKIP_DWELL_SECONDS:
        return []
    for query_idx, impression in session.impressions:
        pos = impression.clicked_position
        if pos is None or impression.ad_ids[pos - 1] != click.token:
            continue
        query_token = session.actions[query_idx].token
        top = min(MAX_SKIP_POSITION, pos - 1)
        return [
            ImplicitNegativePair(query_token, impression.ad_ids[p - 1])
            for p in range(1, top + 1)
        ]
    return []


_KIND_CODE = {KIND_QUERY: "Q", KIND_AD: "AC", KIND_LINK: "LC"}
_CODE_KIND = {v: k for k, v in _KIND_CODE.items()}


def format_session(session: Session) -> str:
    """One-line record: user, then actions, then impression blocks."""
    fields = [session.user_id]
    for action in session.actions:
        if action.kind == KIND_AD:
            fields.append(f"AC:{action.token},{action.dwell_seconds}")
        else:
            fields.append(f"{_KIND_CODE[action.kind]}:{action.token}")
    for query_idx, imp in session.impressions:
        clicked = "" if imp.clicked_position is None else str(imp.clicked_position)
        fields.append(f"AI@{query_idx}:{'|'.join(imp.ad_ids)};{clicked}")
    return "\t".join(fields)


def parse_session_line(line: str) -> Session:
    parts = line.rstrip("\n").split("\t")
    if len(parts) < 2:
        raise MalformedEventError("session record with no actions")
    session = Session(parts[0], [])
    for part in parts[1:]:
        tag, sep, payload = part.partition(":")
        if not sep:
            raise MalformedEventError(f"bad session field {part!r}")
        if tag.startswith("AI@"):
            query_idx = int(tag[3:])
            ads_text, _, pos_text = payload.partition(";")
            imp = AdImpression(
                tuple(ads_text.split("|")), int(pos_text) if pos_text else None
            )
            session.impressions.append((query_idx, imp))
        elif tag == "AC":
            ad_id, _, dwell = payload.partition(",")
            session.actions.append(Action(KIND_AD, ad_id, int(dwell)))
        elif tag in _CODE_KIND:
            session.actions.append(Action(_CODE_KIND[tag], payload))
        else:
            raise MalformedEventError(f"unknown session field tag {tag!r}")
    return session


def write_sessions(sessions: Sequence[Session], path: str) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for session in sessions:
            handle.write(format_session(session) + "\n")


def read_sessions(path: str) -> list[Session]:
    with open(path, encoding="utf-8") as handle:
        return [parse_session_line(line) for line in handle if line.strip()]
