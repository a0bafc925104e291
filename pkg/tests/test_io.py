import json
import logging

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modefusion.io import (
    MalformedInputError,
    PipelineManifest,
    RelationEntry,
    load_graph,
    read_events,
    read_manifest,
    read_matrix,
    read_stats,
    read_table,
    read_towers,
    write_manifest,
    write_matrix,
)
from modefusion.relation_graph import GraphError

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(finite, min_size=3, max_size=3), min_size=1, max_size=6))
def test_matrix_round_trip_is_bit_exact(tmp_path_factory, rows):
    path = tmp_path_factory.mktemp("m") / "m.csv"
    frame = pd.DataFrame(rows, index=[f"r{i}" for i in range(len(rows))], columns=["a", "b", "c"])
    write_matrix(frame, path, corner="thing")
    back = read_matrix(path)
    expected = frame.to_numpy() + 0.0  # -0.0 is written as 0.0
    assert back.to_numpy().tobytes() == expected.tobytes()
    assert list(back.index) == list(frame.index) and back.index.name == "thing"


def test_fifteen_significant_digits(tmp_path):
    values = np.array([[1.23456789012345e-7, 9.87654321098765e12, 0.1]])
    write_matrix(pd.DataFrame(values), tmp_path / "m.csv")
    assert np.array_equal(read_matrix(tmp_path / "m.csv").to_numpy(), values)


def test_read_matrix_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("x,a,b\nr0,1,2\nr1,3\n")
    with pytest.raises(ValueError, match=":3"):
        read_matrix(p)
    p.write_text("x,a\nr0,abc\n")
    with pytest.raises(ValueError):
        read_matrix(p)


def test_manifest_round_trip_and_label_alignment(tmp_path):
    write_matrix(pd.DataFrame([[1.0, 2.0], [3.0, 4.0]], index=["m1", "m2"], columns=["u", "v"]),
                 tmp_path / "a.csv", corner="muni")
    # same concept, rows in another order: must be realigned by label
    write_matrix(pd.DataFrame([[5.0], [6.0]], index=["m2", "m1"], columns=["w"]),
                 tmp_path / "sub" / "b.csv", corner="muni")
    entries = [RelationEntry("R01", "muni", "mode", tmp_path / "a.csv", "survey"),
               RelationEntry("R02", "muni", "other", tmp_path / "sub" / "b.csv")]
    write_manifest(tmp_path / "graph.json", entries)
    assert json.loads((tmp_path / "graph.json").read_text())["relations"][1]["path"] == "sub/b.csv"
    target, back = read_manifest(tmp_path / "graph.json")
    assert target == "R01" and [e.path for e in back] == [e.path.resolve() for e in entries]
    g = load_graph(tmp_path / "graph.json")
    assert g.concept("muni").labels == ("m1", "m2")
    assert g.relation("R02").values[:, 0].tolist() == [6.0, 5.0]
    assert g.relation("R01").provenance == "survey"


def test_load_graph_label_mismatch(tmp_path):
    write_matrix(pd.DataFrame([[1.0]], index=["m1"], columns=["u"]), tmp_path / "a.csv")
    write_matrix(pd.DataFrame([[1.0]], index=["m9"], columns=["w"]), tmp_path / "b.csv")
    with pytest.raises(GraphError):
        load_graph([RelationEntry("R01", "muni", "x", tmp_path / "a.csv"),
                    RelationEntry("R02", "muni", "y", tmp_path / "b.csv")])


def test_read_table_malformed_threshold(tmp_path, caplog):
    p = tmp_path / "t.csv"
    good = "".join(f"d{i},{i}\n" for i in range(199))
    p.write_text("device,value\n" + good + "dX,notanumber\n")
    with caplog.at_level(logging.WARNING):
        table = read_table(p, {"device": str, "value": float})
    assert len(table) == 199
    assert ":201:" in caplog.text
    p.write_text("device,value\n" + good + "dX,oops\ndY,bad\ndZ\n")
    with pytest.raises(MalformedInputError, match="201"):
        read_table(p, {"device": str, "value": float})


def test_read_table_missing_file_and_columns(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.csv"):
        read_table(tmp_path / "nope.csv", {"a": str})
    (tmp_path / "t.csv").write_text("a,b\n1,2\n")
    with pytest.raises(MalformedInputError, match="missing"):
        read_table(tmp_path / "t.csv", {"c": str})


def test_read_events_sorts_and_dedups(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("device,tower,timestamp\nb,T1,5\na,T2,9\na,T1,3\na,T3,3\n")
    e = read_events(p)
    assert e.values.tolist() == [["a", "T1", 3], ["a", "T2", 9], ["b", "T1", 5]]


def test_read_towers_duplicates(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("tower,x_m,y_m,municipality\nT1,0,0,m\nT1,1,1,m\n")
    with pytest.raises(MalformedInputError):
        read_towers(p)


def test_read_stats(tmp_path):
    (tmp_path / "s.csv").write_text(
        "municipality,pop_base,pop_new,permits_base,permits_new\nm1,10,11,5,6\n")
    (tmp_path / "metro.csv").write_text("metro_base,metro_new\n100,56.3\n")
    s = read_stats(tmp_path / "s.csv", tmp_path / "metro.csv")
    assert s.metro_ratio == pytest.approx(0.563) and s.population_ratio["m1"] == 1.1
    (tmp_path / "metro.csv").write_text("metro_base,metro_new\n1,1\n2,2\n")
    with pytest.raises(MalformedInputError):
        read_stats(tmp_path / "s.csv", tmp_path / "metro.csv")


def test_pipeline_manifest(tmp_path):
    (tmp_path / "cfg.json").write_text(json.dumps({"macro_areas": "areas.csv"}))
    (tmp_path / "m.json").write_text(json.dumps({"towers": "towers.csv", "run_config": "cfg.json"}))
    m = PipelineManifest.from_json(tmp_path / "m.json")
    assert m.towers == (tmp_path / "towers.csv").resolve()
    assert m.run_settings()["macro_areas"] == (tmp_path / "areas.csv").resolve()
    with pytest.raises(FileNotFoundError, match="towers"):
        m.require("towers")
    with pytest.raises(FileNotFoundError):
        m.require("events")
    (tmp_path / "bad.json").write_text(json.dumps({"whatever": "x"}))
    with pytest.raises(ValueError):
        PipelineManifest.from_json(tmp_path / "bad.json")
