"""Shared fixtures built on the synthetic archives in hurdat_samples."""

import pytest

from geo_features import fit_grid
from hurdat_ingest import filter_tracks, parse_hurdat2
from hurdat_samples import build_fixture_text, build_training_text


@pytest.fixture
def hurdat_text():
    return build_fixture_text()


@pytest.fixture
def raw_tracks(hurdat_text):
    return parse_hurdat2(hurdat_text)


@pytest.fixture
def tracks(raw_tracks):
    return filter_tracks(raw_tracks, 1944, 2022)


@pytest.fixture
def training_tracks():
    return filter_tracks(parse_hurdat2(build_training_text()), 1944, 2022)


@pytest.fixture
def training_grid(training_tracks):
    return fit_grid(p.position for t in training_tracks for p in t.points)


@pytest.fixture
def training_file(tmp_path):
    path = tmp_path / "hurdat2.txt"
    path.write_text(build_training_text())
    return path
