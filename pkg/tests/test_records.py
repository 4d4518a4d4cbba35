import io

import pytest

from genie import ConfigurationError, PolicyConfig, SchemaError, validate_and_convert
from genie.records import AdRecord, load_log_file, write_log_file


def lines_of(records):
    return [r.to_json_line().encode() for r in records]


def test_log_round_trip_is_byte_identical(small_logs, tmp_path):
    path = tmp_path / "logs.jsonl"
    write_log_file(small_logs.records, path)
    loaded, stats = load_log_file(path)
    assert stats.conversion_success == 1.0
    assert [r.to_json_line() for r in loaded] == [r.to_json_line() for r in small_logs.records]


def test_all_well_formed_lines_convert(small_logs):
    records, stats = validate_and_convert(lines_of(small_logs.records[:100]))
    assert stats.total == 100
    assert stats.conversion_success == 1.0
    assert not stats.zero_total


def test_truncated_line_is_counted_and_skipped(small_logs):
    lines = lines_of(small_logs.records[:100])
    lines[41] = lines[41][: len(lines[41]) // 2]  # truncate mid-record
    records, stats = validate_and_convert(lines)
    assert stats.total == 100
    assert stats.converted == 99
    assert stats.conversion_success == pytest.approx(0.99)
    assert [line_no for line_no, _ in stats.rejections] == [42]


def test_empty_stream_reports_success_with_zero_total_flag():
    records, stats = validate_and_convert(io.BytesIO(b""))
    assert records == []
    assert stats.conversion_success == 1.0
    assert stats.zero_total


def test_duplicate_request_ids_rejected(small_logs):
    lines = lines_of(small_logs.records[:3])
    records, stats = validate_and_convert(lines + [lines[0]])
    assert stats.converted == 3
    assert "duplicate request_id" in stats.rejections[0][1]


def test_undecodable_bytes_rejected(small_logs):
    lines = [b"\xff\xfe\xfd"] + lines_of(small_logs.records[:2])
    records, stats = validate_and_convert(lines)
    assert stats.converted == 2
    assert stats.rejections[0][0] == 1


def test_unknown_knob_rejected_at_load():
    with pytest.raises(ConfigurationError, match="unknown policy knobs"):
        PolicyConfig({"frobnicate": 2.0})


def test_unknown_knob_in_log_line_rejected(small_logs):
    line = small_logs.records[0].to_json_line()
    bad = line.replace('"knobs":{', '"knobs":{"bogus_knob":1.0,')
    records, stats = validate_and_convert([bad.encode()])
    assert stats.converted == 0
    assert "bogus_knob" in stats.rejections[0][1]


def test_schema_violations_rejected_not_fatal(small_logs):
    import re

    line = small_logs.records[0].to_json_line()
    bad = re.sub(r'"bid":[0-9.eE+-]+', '"bid":-1.0', line, count=1)
    records, stats = validate_and_convert([bad.encode(), small_logs.records[1].to_json_line().encode()])
    assert stats.converted == 1
    assert stats.rejections[0][0] == 1


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(bid=0.0, pclick=0.5, quality=0.5),
        dict(bid=1.0, pclick=0.0, quality=0.5),
        dict(bid=1.0, pclick=1.0, quality=0.5),
        dict(bid=1.0, pclick=0.5, quality=-0.1),
    ],
)
def test_ad_record_invariants(kwargs):
    with pytest.raises(SchemaError):
        AdRecord(ad_id=1, advertiser_id=1, **kwargs)


def test_policy_get_falls_back_to_registry_default():
    policy = PolicyConfig({"reserve_score": 0.2})
    assert policy.get("reserve_score") == 0.2
    assert policy.get("bid_multiplier") == 1.0
    with pytest.raises(ConfigurationError):
        policy.get("nonsense")
