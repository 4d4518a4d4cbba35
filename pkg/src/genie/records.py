"""Core auction domain types and the line-delimited log format.

One logged request serializes to one self-describing JSON line, so a
truncated or corrupt line is detectable and skippable on its own.
Floats round-trip exactly (shortest-repr encoding), which is what makes
"replay the log byte-for-byte" checks meaningful.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator

from .errors import ConfigurationError, SchemaError

# Registered policy knobs and their baseline (identity) values. A knob value
# is always an absolute assignment; modifiers compute the in-place mutation
# relative to the record's generating policy.
KNOB_REGISTRY: dict[str, float] = {
    "bid_multiplier": 1.0,      # scales every ad's bid
    "reserve_score": 0.0,       # rank-score floor for eligibility and pricing
    "quality_exponent": 1.0,    # quality policy: q = pclick ** exponent
    "mainline_capacity": -1.0,  # mainline slot override; negative = template default
    "mainline_min_pclick": 0.0, # minimum pclick to enter a mainline block
}


@dataclass
class PolicyConfig:
    """Named policy knob assignments, validated against the knob registry."""

    knobs: dict[str, float] = field(default_factory=dict)
    schema_version: int = 1

    def __post_init__(self):
        unknown = sorted(set(self.knobs) - set(KNOB_REGISTRY))
        if unknown:
            raise ConfigurationError(f"unknown policy knobs: {unknown}")
        self.knobs = {k: float(v) for k, v in self.knobs.items()}

    def get(self, name: str) -> float:
        if name not in KNOB_REGISTRY:
            raise ConfigurationError(f"unknown policy knob: {name!r}")
        return self.knobs.get(name, KNOB_REGISTRY[name])

    def updated(self, assignments: dict[str, float]) -> "PolicyConfig":
        merged = dict(self.knobs)
        merged.update(assignments)
        return PolicyConfig(knobs=merged, schema_version=self.schema_version)

    def to_dict(self) -> dict:
        return {"knobs": dict(sorted(self.knobs.items())), "schema_version": self.schema_version}

    @classmethod
    def from_dict(cls, data: dict) -> "PolicyConfig":
        return cls(knobs=dict(data.get("knobs", {})), schema_version=int(data.get("schema_version", 1)))


@dataclass(frozen=True, slots=True)
class AdRecord:
    """One ad as logged: bid, serving-time click score, and quality score."""

    ad_id: int
    advertiser_id: int
    bid: float
    pclick: float
    quality: float
    metadata: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if not self.bid > 0:
            raise SchemaError(f"ad {self.ad_id}: bid must be > 0, got {self.bid}")
        if not 0 < self.pclick < 1:
            raise SchemaError(f"ad {self.ad_id}: pclick must be in (0,1), got {self.pclick}")
        if not self.quality >= 0:  # also rejects NaN
            raise SchemaError(f"ad {self.ad_id}: quality must be >= 0, got {self.quality}")

    @property
    def rank_score(self) -> float:
        return self.bid * self.quality


@dataclass(frozen=True, slots=True)
class BlockSpec:
    """A page block: named slot group with a capacity and an optional pclick floor."""

    name: str
    capacity: int
    min_pclick: float = 0.0

    def __post_init__(self):
        if self.capacity < 0:
            raise SchemaError(f"block {self.name}: capacity must be >= 0")


@dataclass(frozen=True, slots=True)
class PageTemplate:
    """Ordered blocks, most significant first."""

    template_id: int
    blocks: tuple[BlockSpec, ...]


@dataclass(frozen=True, slots=True)
class PagePlacement:
    block: str
    slot: int
    ad_id: int
    rank_score: float
    pricing_score: float
    pclick: float
    cpc: float
    clicked: bool | None = None  # realized outcome; only set on logged allocations


@dataclass(frozen=True, slots=True)
class PageAllocation:
    template_id: int
    placements: tuple[PagePlacement, ...]
    utility: float

    def replay_key(self) -> tuple:
        """Canonical identity of the auction outcome, ignoring click outcomes."""
        return (
            self.template_id,
            tuple(
                (p.block, p.slot, p.ad_id, p.rank_score, p.pricing_score, p.pclick, p.cpc)
                for p in self.placements
            ),
        )


@dataclass(slots=True)
class AuctionData:
    """One logged request reconstructed for replay."""

    request_id: int
    query_class: int
    ads: tuple[AdRecord, ...]
    policy_params: PolicyConfig
    page_templates: tuple[PageTemplate, ...]
    logged_allocation: PageAllocation | None = None

    def __post_init__(self):
        if not self.ads:
            raise SchemaError(f"request {self.request_id}: ads must be non-empty")
        if not self.page_templates:
            raise SchemaError(f"request {self.request_id}: at least one page template required")

    def to_json_line(self) -> str:
        return json.dumps(record_to_dict(self), sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class DriftSpec:
    """Mid-log policy swap: records at/after ``drift_index`` use ``drifted_policy``."""

    drift_index: int
    drifted_policy: PolicyConfig


@dataclass
class LogDataset:
    records: list[AuctionData]
    logging_policy: PolicyConfig
    drift_spec: DriftSpec | None = None

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class ConversionStats:
    """Outcome of converting raw log lines into replayable records."""

    total: int
    converted: int
    rejections: list[tuple[int, str]] = field(default_factory=list)

    @property
    def zero_total(self) -> bool:
        return self.total == 0

    @property
    def conversion_success(self) -> float:
        if self.total == 0:
            return 1.0
        return self.converted / self.total


# ---------------------------------------------------------------------------
# serialization

def _placement_to_dict(p: PagePlacement) -> dict:
    d = {
        "block": p.block,
        "slot": p.slot,
        "ad_id": p.ad_id,
        "rank_score": p.rank_score,
        "pricing_score": p.pricing_score,
        "pclick": p.pclick,
        "cpc": p.cpc,
    }
    if p.clicked is not None:
        d["clicked"] = p.clicked
    return d


def allocation_to_dict(alloc: PageAllocation) -> dict:
    return {
        "template_id": alloc.template_id,
        "placements": [_placement_to_dict(p) for p in alloc.placements],
        "utility": alloc.utility,
    }


def allocation_from_dict(data: dict) -> PageAllocation:
    placements = tuple(
        PagePlacement(
            block=str(p["block"]),
            slot=int(p["slot"]),
            ad_id=int(p["ad_id"]),
            rank_score=float(p["rank_score"]),
            pricing_score=float(p["pricing_score"]),
            pclick=float(p["pclick"]),
            cpc=float(p["cpc"]),
            clicked=bool(p["clicked"]) if "clicked" in p else None,
        )
        for p in data["placements"]
    )
    return PageAllocation(
        template_id=int(data["template_id"]),
        placements=placements,
        utility=float(data["utility"]),
    )


def record_to_dict(record: AuctionData) -> dict:
    return {
        "request_id": record.request_id,
        "query_class": record.query_class,
        "ads": [
            {
                "ad_id": a.ad_id,
                "advertiser_id": a.advertiser_id,
                "bid": a.bid,
                "pclick": a.pclick,
                "quality": a.quality,
                "metadata": dict(a.metadata),
            }
            for a in record.ads
        ],
        "policy_params": record.policy_params.to_dict(),
        "page_templates": [
            {
                "template_id": t.template_id,
                "blocks": [
                    {"name": b.name, "capacity": b.capacity, "min_pclick": b.min_pclick}
                    for b in t.blocks
                ],
            }
            for t in record.page_templates
        ],
        "logged_allocation": (
            allocation_to_dict(record.logged_allocation)
            if record.logged_allocation is not None
            else None
        ),
    }


def record_from_dict(data: dict) -> AuctionData:
    try:
        ads = tuple(
            AdRecord(
                ad_id=int(a["ad_id"]),
                advertiser_id=int(a["advertiser_id"]),
                bid=float(a["bid"]),
                pclick=float(a["pclick"]),
                quality=float(a["quality"]),
                metadata=tuple(sorted((str(k), str(v)) for k, v in a.get("metadata", {}).items())),
            )
            for a in data["ads"]
        )
        templates = tuple(
            PageTemplate(
                template_id=int(t["template_id"]),
                blocks=tuple(
                    BlockSpec(
                        name=str(b["name"]),
                        capacity=int(b["capacity"]),
                        min_pclick=float(b.get("min_pclick", 0.0)),
                    )
                    for b in t["blocks"]
                ),
            )
            for t in data["page_templates"]
        )
        alloc = data.get("logged_allocation")
        return AuctionData(
            request_id=int(data["request_id"]),
            query_class=int(data["query_class"]),
            ads=ads,
            policy_params=PolicyConfig.from_dict(data["policy_params"]),
            page_templates=templates,
            logged_allocation=allocation_from_dict(alloc) if alloc is not None else None,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed auction record: {exc}") from exc


def write_log_lines(records: Iterable[AuctionData], stream: IO[str]) -> int:
    n = 0
    for record in records:
        stream.write(record.to_json_line())
        stream.write("\n")
        n += 1
    return n


def write_log_file(records: Iterable[AuctionData], path) -> int:
    with open(path, "w", encoding="utf-8") as fh:
        return write_log_lines(records, fh)


def validate_and_convert(stream: IO[bytes] | Iterable[bytes | str]) -> tuple[list[AuctionData], ConversionStats]:
    """Convert raw log lines into auction records, skipping malformed lines.

    Every line is converted independently; parse failures, schema violations
    and duplicate request ids are counted and reported with their 1-based
    line number instead of aborting. Blank lines are ignored entirely.
    I/O errors from the underlying stream propagate.
    """
    records: list[AuctionData] = []
    rejections: list[tuple[int, str]] = []
    seen_ids: set[int] = set()
    total = 0
    for line_no, raw in enumerate(stream, start=1):
        if isinstance(raw, bytes):
            try:
                line = raw.decode("utf-8")
            except UnicodeDecodeError as exc:
                total += 1
                rejections.append((line_no, f"undecodable bytes: {exc}"))
                continue
        else:
            line = raw
        line = line.strip()
        if not line:
            continue
        total += 1
        try:
            payload = json.loads(line)
            record = record_from_dict(payload)
        except (json.JSONDecodeError, SchemaError, ConfigurationError) as exc:
            rejections.append((line_no, str(exc)))
            continue
        if record.request_id in seen_ids:
            rejections.append((line_no, f"duplicate request_id {record.request_id}"))
            continue
        seen_ids.add(record.request_id)
        records.append(record)
    stats = ConversionStats(total=total, converted=len(records), rejections=rejections)
    return records, stats


def load_log_file(path) -> tuple[list[AuctionData], ConversionStats]:
    with open(path, "rb") as fh:
        return validate_and_convert(fh)


def iter_log_file(path) -> Iterator[str]:
    with open(path, "r", encoding="utf-8") as fh:
        yield from fh
