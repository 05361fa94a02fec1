"""
Tests for pipeline.runner and pipeline.exports
"""
import math

import numpy as np
import pandas as pd
import pytest

from pipeline.exports import ArtifactWriter, dumps, sha256_file
from pipeline.runner import run_replicas


def test_inline_and_pool_agree():
    jobs = [(3.0, 4.0), (5.0, 12.0), (8.0, 15.0)]
    assert run_replicas(math.hypot, jobs) == [5.0, 13.0, 17.0]
    assert run_replicas(math.hypot, jobs, workers=2) == [5.0, 13.0, 17.0]
    assert run_replicas(math.hypot, [], workers=2) == []
    with pytest.raises(ValueError):
        run_replicas(math.hypot, jobs, workers=0)


def test_dumps_handles_numpy_and_complex():
    text = dumps({"b": np.float64(0.5), "a": np.arange(2), "z": 1 + 2j})
    assert text.index('"a"') < text.index('"b"')
    assert '"z": [\n    1.0,\n    2.0\n  ]' in text


def test_writer_records_checksums(tmp_path):
    writer = ArtifactWriter(str(tmp_path), export_svg=False)
    csv_path = writer.csv("table.csv", pd.DataFrame({"x": [0.1, 0.2]}))
    pgm_path = writer.pgm("mask.pgm", np.eye(4, dtype=bool))
    assert writer.svg_scatter("skip.svg", np.zeros(3)) is None
    assert writer.checksums() == {"mask.pgm": sha256_file(pgm_path), "table.csv": sha256_file(csv_path)}
    header = pgm_path.read_bytes()[:11]
    assert header == b"P5\n4 4\n255\n"
