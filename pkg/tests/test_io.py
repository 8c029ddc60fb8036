import io

import numpy as np
import pytest

from qsl.errors import SchemaError, ValidationError
from qsl.io import (
    RunRecord,
    delta_observations,
    parse_runs,
    read_matrix,
    write_matrix,
    write_runs,
)
from qsl.quant import PER_VECTOR, Group

HEADER = "n_params,d_tokens,precision,granularity,fc2_8bit,final_loss\n"


def test_header_only():
    assert parse_runs(io.StringIO(HEADER)) == []


def test_single_row():
    recs = parse_runs(io.StringIO(HEADER + "595000000,100000000000,w4a4,g128,false,2.81\n"))
    assert recs == [RunRecord(595e6, 100e9, "w4a4", Group(128), False, 2.81)]


def test_negative_loss_names_field():
    with pytest.raises(ValidationError) as e:
        parse_runs(io.StringIO(HEADER + "1e8,1e10,w4a4,g32,false,-1\n"))
    assert list(e.value.fields) == ["final_loss"]


def test_bad_header_and_line_numbers():
    with pytest.raises(SchemaError):
        parse_runs(io.StringIO("a,b\n1,2\n"))
    with pytest.raises(SchemaError) as e:
        parse_runs(io.StringIO(HEADER + "1e8,1e10,w4a4,g32,false,2.9\n1e8,x,w4a4,g32,false,2.9\n"))
    assert e.value.line == 3
    with pytest.raises(SchemaError):
        parse_runs(io.StringIO(HEADER + "1e8,1e10,w4a4\n"))


def test_duplicates_rejected():
    row = "1e8,1e10,w4a4,g32,false,2.9\n"
    with pytest.raises(ValidationError):
        parse_runs(io.StringIO(HEADER + row + row))
    # fc2 variant is a different run
    assert len(parse_runs(io.StringIO(HEADER + row + "1e8,1e10,w4a4,g32,true,2.8\n"))) == 2


def test_bf16_ignores_granularity():
    recs = parse_runs(io.StringIO(HEADER + "1e8,1e10,bf16,,false,3.0\n1e8,2e10,bf16,g32,true,2.9\n"))
    assert all(r.granularity is None and not r.fc2_8bit for r in recs)


def test_unknown_precision():
    with pytest.raises(ValidationError) as e:
        parse_runs(io.StringIO(HEADER + "1e8,1e10,w8a8,g32,false,2.9\n"))
    assert "precision" in e.value.fields


RECORDS = [
    RunRecord(74e6, 10e9, "bf16", None, False, 3.3),
    RunRecord(74e6, 10e9, "w4a4", Group(32), False, 3.41),
    RunRecord(74e6, 10e9, "w4a4", Group(32), True, 3.37),
    RunRecord(74e6, 10e9, "w16a4", Group(256), False, 3.38),
    RunRecord(145e6, 20e9, "w4a16", Group(64), False, 3.1234567890123),
]


@pytest.mark.parametrize("fmt", ["csv", "json"])
def test_round_trip(fmt):
    buf = io.StringIO()
    write_runs(RECORDS, buf, fmt)
    buf.seek(0)
    assert parse_runs(buf, fmt) == RECORDS


def test_json_errors():
    with pytest.raises(SchemaError):
        parse_runs(io.StringIO("{not json"), "json")
    with pytest.raises(SchemaError):
        parse_runs(io.StringIO('{"runs": 3}'), "json")


def test_delta_observations():
    obs = delta_observations(RECORDS, "w4a4")
    assert obs == [(74e6, 10e9, 32.0, pytest.approx(0.11))]
    obs = delta_observations(RECORDS, "w4a4_fc2_8")
    assert obs[0][3] == pytest.approx(0.07)
    assert delta_observations(RECORDS, "w4a16") == []  # no bf16 twin


def test_per_vector_uses_reference_hidden():
    recs = [RunRecord(595e6, 10e9, "bf16", None, False, 3.0),
            RunRecord(595e6, 10e9, "w4a4", PER_VECTOR, False, 3.1)]
    assert delta_observations(recs, "w4a4")[0][2] == 1536
    assert delta_observations(recs, "w4a4", vector_len=100)[0][2] == 100


def test_matrix_io(tmp_path):
    x = np.array([[1.5, -2.0], [0.1, 3.0]])
    p = tmp_path / "m.csv"
    with open(p, "w") as fh:
        write_matrix(x, fh)
    assert np.array_equal(read_matrix(p), x)
    (tmp_path / "r.csv").write_text("1,2\n3\n")
    with pytest.raises(SchemaError):
        read_matrix(tmp_path / "r.csv")
    (tmp_path / "n.csv").write_text("1,a\n")
    with pytest.raises(SchemaError):
        read_matrix(tmp_path / "n.csv")
    with pytest.raises(SchemaError):
        read_matrix(tmp_path / "missing.csv")
