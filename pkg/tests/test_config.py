import pytest

from seqboed.config import apply_override, load_config, parse_value, validate
from seqboed.errors import ConfigError, ValidationError

BASE = """
experiment: {kind: eig_sweep}
model: {kind: linear}
prior: {mean: 2.0, covariance: 2.0}
noise: {covariance: 1.0}
eig: {J: 100}
seeds: {master: 0}
"""


@pytest.fixture
def base_file(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(BASE)
    return path


def test_load_and_defaults(base_file):
    cfg = validate(load_config(base_file))
    assert cfg["eig"]["delta"] == 0.1 and cfg["eig"]["folds"] == 10
    assert cfg["output"]["dir"] == "out"


def test_overrides_parse_yaml_scalars(base_file):
    cfg = load_config(base_file, ["eig.J=1e3", "eig.p_grid=[0, 1]", "model.tau=0.5", "new.block.value=x"])
    assert cfg["eig"]["J"] == 1000.0 and cfg["eig"]["p_grid"] == [0, 1]
    assert cfg["new"]["block"]["value"] == "x"
    assert parse_value("null") is None
    with pytest.raises(ConfigError):
        apply_override({}, "novalue")
    with pytest.raises(ConfigError):
        apply_override({"a": 1}, "a.b=2")


def test_parse_errors(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("a: [1, 2\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    scalar = tmp_path / "scalar.yaml"
    scalar.write_text("3\n")
    with pytest.raises(ConfigError):
        load_config(scalar)


@pytest.mark.parametrize(
    "override, path",
    [
        ("eig.J=-5", "eig.J"),
        ("eig.J=2.5", "eig.J"),
        ("experiment.kind=other", "experiment.kind"),
        ("model.kind=quadratic", "model.kind"),
        ("noise.covariance=-1", "noise.covariance"),
        ("seeds={}", "seeds.master"),
        ("eig.delta=0", "eig.delta"),
    ],
)
def test_validation_reports_field_path(base_file, override, path):
    with pytest.raises(ValidationError) as info:
        validate(load_config(base_file, [override]))
    assert info.value.path == path


def test_required_blocks(base_file):
    cfg = load_config(base_file, ["experiment.kind=sequential"])
    with pytest.raises(ValidationError) as info:
        validate(cfg)
    assert info.value.path == "sampler"
    cfg = load_config(base_file)
    del cfg["seeds"]
    with pytest.raises(ValidationError):
        validate(cfg)


def test_eki_block_checks(base_file):
    cfg = load_config(base_file, ["experiment.kind=eki_optimize", "eki.J=3", "eki.box=[2, 0]"])
    with pytest.raises(ValidationError) as info:
        validate(cfg)
    assert info.value.path == "eki.box"
    cfg = load_config(base_file, ["experiment.kind=eki_optimize", "eki.J=3", "eki.selection=best"])
    with pytest.raises(ValidationError):
        validate(cfg)
