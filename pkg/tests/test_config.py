import pytest

from examrec.config import RunConfig
from examrec.errors import ConfigError


def test_text_round_trip():
    cfg = RunConfig(embed_dim=16, kan_range=1.5, use_rgat=False, fusion="linear")
    assert RunConfig.from_text(cfg.to_text()) == cfg


def test_comments_and_blank_lines():
    cfg = RunConfig.from_text("# header\n\nk = 20  # rebuilt neighbors\nuse_diffusion = off\n")
    assert cfg.k == 20 and cfg.use_diffusion is False


def test_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("epochs = 7\n")
    assert RunConfig.from_file(path).epochs == 7


def test_overrides_accept_dashes():
    cfg = RunConfig().with_overrides({"gate-eps": "0.6", "rgat_layers": "3"})
    assert cfg.gate_eps == 0.6 and cfg.rgat_layers == 3


@pytest.mark.parametrize("text,field", [
    ("nonsense = 1", "nonsense"),
    ("k = many", "k"),
    ("use_rgat = maybe", "use_rgat"),
    ("just words", "line 1"),
])
def test_parse_errors_name_field(text, field):
    with pytest.raises(ConfigError) as exc:
        RunConfig.from_text(text)
    assert exc.value.field == field


@pytest.mark.parametrize("changes,field", [
    (dict(k=0), "k"),
    (dict(embed_dim=10, n_heads=4), "n_heads"),
    (dict(dropout=1.0), "dropout"),
    (dict(gate_eps=0.0), "gate_eps"),
    (dict(noise_min=0.02), "noise_min"),
    (dict(inference_steps=99), "inference_steps"),
    (dict(fusion="concat"), "fusion"),
])
def test_validate(changes, field):
    with pytest.raises(ConfigError) as exc:
        RunConfig(**changes).validate()
    assert exc.value.field == field


def test_hash_tracks_values():
    assert RunConfig().hash() == RunConfig().hash()
    assert RunConfig().hash() != RunConfig(seed=1).hash()


def test_derived_defaults():
    cfg = RunConfig(epochs=9, diff_steps=30)
    assert cfg.n_denoiser_epochs == 9 and cfg.n_inference_steps == 30
    assert RunConfig(denoiser_epochs=0).n_denoiser_epochs == 0
