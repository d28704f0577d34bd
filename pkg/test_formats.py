"""
Tests for MELF files, checkpoints, config files, manifests and CSV output
"""

import io

import numpy as np
import pytest
import torch

from app.exceptions import ConfigError, ContractError, FormatError
from app.models import ModelConfig, SyntheticTaskSpec, TrainRecipe
from app.services.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint
from app.services.network import ARWKV
from app.services.reporting import ABLATION_SCHEMA, BENCH_SCHEMA, CsvSchema, emit_csv, read_csv, render_csv
from app.services.spectrograms import (
    MELF_HEADER_BYTES,
    MelSpectrogram,
    load_melf,
    parse_manifest,
    read_melf,
    save_melf,
    write_melf,
)
from app.utils.config_io import config_from_text, config_to_text, load_config, parse_config


def _melf_bytes(data: np.ndarray) -> bytes:
    buffer = io.BytesIO()
    write_melf(MelSpectrogram(data), buffer)
    return buffer.getvalue()


# ----------------------------------------------------------------------------
# MELF
# ----------------------------------------------------------------------------

def test_melf_roundtrip_is_bit_exact_with_subnormals(tmp_path):
    data = np.array(
        [[0.0, -0.0, 1.5, np.float32(1e-45)], [np.finfo(np.float32).tiny / 4, -3.25, 7e-40, 1e30]],
        dtype=np.float32,
    )
    path = save_melf(tmp_path / "clip.melf", MelSpectrogram(data, "clip"))
    loaded = load_melf(path)
    assert loaded.sample_id == "clip"
    assert loaded.data.tobytes() == data.tobytes()
    assert path.stat().st_size == MELF_HEADER_BYTES + data.size * 4


def test_melf_header_layout():
    raw = _melf_bytes(np.ones((2, 3), dtype=np.float32))
    assert raw[:4] == b"MELF"
    assert np.frombuffer(raw[4:16], dtype="<u4").tolist() == [1, 2, 3]


def test_melf_bad_magic():
    raw = b"MELX" + _melf_bytes(np.ones((1, 1), dtype=np.float32))[4:]
    with pytest.raises(FormatError) as exc:
        read_melf(raw)
    assert exc.value.offset == 0


def test_melf_unsupported_version():
    raw = bytearray(_melf_bytes(np.ones((1, 1), dtype=np.float32)))
    raw[4] = 2
    with pytest.raises(FormatError) as exc:
        read_melf(bytes(raw))
    assert exc.value.offset == 4


def test_melf_truncated_payload():
    raw = _melf_bytes(np.ones((2, 2), dtype=np.float32))[:-3]
    with pytest.raises(FormatError) as exc:
        read_melf(raw)
    assert exc.value.offset == MELF_HEADER_BYTES
    assert "byte offset" in str(exc.value)


def test_melf_trailing_bytes_and_zero_dims():
    with pytest.raises(FormatError):
        read_melf(_melf_bytes(np.ones((1, 2), dtype=np.float32)) + b"\x00")
    zero = b"MELF" + np.array([1, 0, 4], dtype="<u4").tobytes()
    with pytest.raises(FormatError):
        read_melf(zero)


def test_melf_non_finite_payload():
    raw = bytearray(_melf_bytes(np.ones((1, 3), dtype=np.float32)))
    raw[MELF_HEADER_BYTES + 4:MELF_HEADER_BYTES + 8] = np.array([np.nan], dtype="<f4").tobytes()
    with pytest.raises(FormatError) as exc:
        read_melf(bytes(raw))
    assert exc.value.offset == MELF_HEADER_BYTES + 4


def test_spectrogram_rejects_non_finite():
    with pytest.raises(ContractError):
        MelSpectrogram(np.array([[np.inf]]))


# ----------------------------------------------------------------------------
# Checkpoints
# ----------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path, tiny_cfg):
    model = ARWKV(tiny_cfg, generator=torch.Generator().manual_seed(3))
    state = model.state_dict()
    state["blocks.0.att.w0"][0] = float(np.float32(1e-44))
    path = save_checkpoint(tmp_path / "model.arwk", tiny_cfg, state)

    cfg, loaded = load_checkpoint(path)
    assert cfg == tiny_cfg
    assert list(loaded) == list(state)
    for name, tensor in state.items():
        assert loaded[name].numpy().tobytes() == tensor.numpy().tobytes(), name

    restored = ARWKV(cfg)
    restored.load_state_dict(loaded)
    spec = torch.randn(1, 1, *cfg.input_size)
    assert torch.equal(restored(spec), model(spec))


def test_checkpoint_truncation_reports_offset(tiny_cfg):
    buffer = io.BytesIO()
    write_checkpoint(buffer, tiny_cfg, {"x": torch.ones(3, 2)})
    raw = buffer.getvalue()
    with pytest.raises(FormatError) as exc:
        read_checkpoint(io.BytesIO(raw[:-5]))
    assert exc.value.offset is not None
    with pytest.raises(FormatError):
        read_checkpoint(io.BytesIO(b"NOPE" + raw[4:]))


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "absent.arwk")


def test_checkpoint_scalar_tensor(tiny_cfg):
    buffer = io.BytesIO()
    write_checkpoint(buffer, tiny_cfg, {"scale": torch.tensor(2.5)})
    buffer.seek(0)
    _, state = read_checkpoint(buffer)
    assert state["scale"].shape == ()
    assert state["scale"].item() == 2.5


# ----------------------------------------------------------------------------
# Config files
# ----------------------------------------------------------------------------

def test_config_text_roundtrip(tiny_cfg):
    text = config_to_text(tiny_cfg)
    assert text.splitlines()[0] == "config_version=1"
    assert config_from_text(text, ModelConfig) == tiny_cfg

    recipe = TrainRecipe(batch_size=4, total_steps=10, betas=(0.9, 0.95))
    assert config_from_text(config_to_text(recipe), TrainRecipe) == recipe

    task = SyntheticTaskSpec(snr_db=float("inf"))
    assert config_from_text(config_to_text(task), SyntheticTaskSpec).snr_db == float("inf")


def test_missing_field_names_the_field():
    with pytest.raises(ConfigError) as exc:
        parse_config({"embed_dim": "16", "depth": "1", "head_dim": "8"}, ModelConfig)
    assert "num_classes" in exc.value.fields
    assert "num_classes" in str(exc.value)


def test_unknown_key_and_preset(tmp_path):
    with pytest.raises(ConfigError) as exc:
        parse_config({"preset": "micro", "embed_dims": "8"}, ModelConfig)
    assert "embed_dims" in str(exc.value)
    with pytest.raises(ConfigError):
        parse_config({"preset": "huge"}, ModelConfig)

    path = tmp_path / "micro.txt"
    path.write_text("# desk-scale model\npreset=micro\nnum_classes=4\n")
    cfg = load_config(path, ModelConfig)
    assert (cfg.embed_dim, cfg.depth, cfg.head_dim, cfg.num_classes) == (96, 4, 32, 4)


def test_recipe_preset_seeds_regularisation(tmp_path):
    recipe = parse_config({"preset": "tiny", "batch_size": "8", "total_steps": "10"}, TrainRecipe)
    assert (recipe.drop_path_rate, recipe.cutmix_alpha) == (0.05, 0.2)
    recipe = parse_config({"preset": "s", "batch_size": "8", "total_steps": "10", "cutmix_alpha": "0.5"}, TrainRecipe)
    assert (recipe.drop_path_rate, recipe.cutmix_alpha) == (0.35, 0.5)

    path = tmp_path / "recipe.txt"
    path.write_text("preset=base\nbatch_size=4\ntotal_steps=2\n")
    recipe = load_config(path, TrainRecipe)
    assert (recipe.drop_path_rate, recipe.cutmix_alpha) == (0.5, 0.8)

    with pytest.raises(ConfigError) as exc:
        parse_config({"preset": "micro"}, SyntheticTaskSpec)
    assert exc.value.fields == ["preset"]


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.txt", ModelConfig)


def test_indivisible_geometry_rejected():
    with pytest.raises(ConfigError) as exc:
        parse_config({"embed_dim": 16, "depth": 1, "head_dim": 8, "num_classes": 2,
                      "patch": "16,16", "input_size": "100,64"}, ModelConfig)
    assert "divisible" in str(exc.value)


# ----------------------------------------------------------------------------
# Manifests
# ----------------------------------------------------------------------------

def test_parse_manifest_directives_and_weights():
    text = "\n".join([
        "#! num_classes=4",
        "#! split=val",
        "#! mean=-2.5",
        "#! std=4.0",
        "# a comment",
        "",
        "clips/a.melf\t1",
        "clips/b.melf\t0,3\t0.25,0.75",
    ])
    manifest = parse_manifest(text, root="/data")
    assert manifest.num_classes == 4
    assert (manifest.split, manifest.mean, manifest.std) == ("val", -2.5, 4.0)
    assert manifest.entries[1].target(4).tolist() == [0.25, 0.0, 0.0, 0.75]
    assert manifest.entries[0].target(4).tolist() == [0.0, 1.0, 0.0, 0.0]


def test_manifest_infers_class_count():
    manifest = parse_manifest("a.melf\t2\nb.melf\t0,1\n")
    assert manifest.num_classes == 3
    assert manifest.entries[1].target(3).tolist() == [0.5, 0.5, 0.0]


def test_manifest_errors_name_the_line():
    with pytest.raises(FormatError) as exc:
        parse_manifest("#! num_classes=2\na.melf\t0\nb.melf\t5\n")
    assert exc.value.line == 3
    with pytest.raises(FormatError) as exc:
        parse_manifest("a.melf\tzero\n")
    assert "(line 1)" in str(exc.value)
    with pytest.raises(FormatError):
        parse_manifest("only-a-path\n")


# ----------------------------------------------------------------------------
# CSV
# ----------------------------------------------------------------------------

def test_empty_rows_write_header_only(tmp_path):
    path = emit_csv([], BENCH_SCHEMA, tmp_path / "bench.csv")
    assert path.read_text() == ",".join(BENCH_SCHEMA.names) + "\n"


def test_comma_values_are_quoted_and_reparse(tmp_path):
    schema = CsvSchema(columns=(("name", str), ("value", float)))
    rows = [{"name": "a,b", "value": 0.1}, {"name": 'say "hi"', "value": 2.0}]
    text = render_csv(rows, schema)
    assert '"a,b"' in text
    assert text.endswith("\n")
    path = emit_csv(rows, schema, tmp_path / "x.csv")
    parsed = read_csv(path)
    assert [r["name"] for r in parsed] == ["a,b", 'say "hi"']
    assert [float(r["value"]) for r in parsed] == [0.1, 2.0]


def test_schema_violation_writes_nothing(tmp_path):
    path = tmp_path / "ablation.csv"
    bad = {"variant": "A", "scan": "causal"}
    with pytest.raises(ContractError):
        emit_csv([bad], ABLATION_SCHEMA, path)
    assert not path.exists()
    with pytest.raises(ContractError):
        render_csv([{"variant": "A", "bogus": 1}], ABLATION_SCHEMA)
