import json

import numpy as np
import pytest

from mimforge.store import (
    MAGIC,
    Checkpoint,
    ConfigError,
    StoreError,
    apply_overrides,
    config_from_dict,
    load_checkpoint,
    load_config,
    save_checkpoint,
)


def _sample_ckpt():
    rng = np.random.default_rng(0)
    return Checkpoint(
        kind="tokenizer",
        config={"tokenizer": {"vocab_size": 128}},
        tensors={
            "enc.w": rng.normal(size=(3, 3, 3, 8)).astype(np.float32),
            "enc.b": rng.normal(size=(8,)).astype(np.float32),
        },
        seed=7,
        step=42,
    )


def test_checkpoint_roundtrip_bit_identical(tmp_path):
    ckpt = _sample_ckpt()
    path = tmp_path / "c.ckpt"
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    assert back.kind == ckpt.kind
    assert back.seed == 7 and back.step == 42
    assert back.config == ckpt.config
    assert list(back.tensors) == list(ckpt.tensors)
    for name in ckpt.tensors:
        assert back.tensors[name].tobytes() == ckpt.tensors[name].tobytes()


def test_empty_tensor_table(tmp_path):
    ckpt = Checkpoint(kind="backbone-mim", config={}, tensors={}, seed=0, step=0)
    path = tmp_path / "e.ckpt"
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    assert back.tensors == {}


def test_header_length_field_matches(tmp_path):
    path = tmp_path / "h.ckpt"
    save_checkpoint(_sample_ckpt(), path)
    raw = path.read_bytes()
    assert raw[:8] == MAGIC
    header_len = int.from_bytes(raw[8:12], "little")
    header = raw[12 : 12 + header_len]
    doc = json.loads(header.decode("utf-8"))
    assert len(header) == header_len
    assert doc["kind"] == "tokenizer"


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    save_checkpoint(_sample_ckpt(), path)
    raw = bytearray(path.read_bytes())
    raw[0] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(StoreError, match="bad magic"):
        load_checkpoint(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "t.ckpt"
    save_checkpoint(_sample_ckpt(), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-1])
    with pytest.raises(StoreError, match="truncated payload"):
        load_checkpoint(path)


def test_shape_mismatch_detected(tmp_path):
    path = tmp_path / "s.ckpt"
    save_checkpoint(_sample_ckpt(), path)
    raw = path.read_bytes()
    header_len = int.from_bytes(raw[8:12], "little")
    doc = json.loads(raw[12 : 12 + header_len].decode("utf-8"))
    doc["tensors"][0]["shape"] = [2, 2]  # inconsistent with recorded nbytes
    new_header = json.dumps(doc, sort_keys=True).encode("utf-8")
    path.write_bytes(MAGIC + len(new_header).to_bytes(4, "little") + new_header + raw[12 + header_len :])
    with pytest.raises(StoreError, match="shape"):
        load_checkpoint(path)


def test_unknown_kind_rejected():
    with pytest.raises(StoreError, match="kind"):
        Checkpoint(kind="mystery", config={}, tensors={}, seed=0, step=0)


def test_float64_saved_as_float32(tmp_path):
    ckpt = Checkpoint(
        kind="backbone-mim",
        config={},
        tensors={"w": np.array([1.0, 2.0], dtype=np.float64)},
        seed=0,
        step=0,
    )
    path = tmp_path / "d.ckpt"
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    assert back.tensors["w"].dtype == np.float32


# ---------------------------------------------------------------------------
# run config
# ---------------------------------------------------------------------------


def test_empty_document_gives_defaults(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text("{}")
    cfg = load_config(path)
    assert cfg.seed == 0
    assert cfg.mask.ratio == 0.4
    assert cfg.backbone.layers == 4
    assert cfg.pretrain.objective == "mim"


def test_blank_file_gives_defaults(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text("")
    assert load_config(path).tokenizer.vocab_size == 128


def test_ratio_constraint_names_key():
    with pytest.raises(ConfigError, match="mask.ratio"):
        config_from_dict({"mask": {"ratio": 1.5}})


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="mask.rato"):
        config_from_dict({"mask": {"rato": 0.4}})


def test_type_error_names_key():
    with pytest.raises(ConfigError, match="backbone.layers"):
        config_from_dict({"backbone": {"layers": "twelve"}})


def test_paper_scale_reference_values_accepted():
    cfg = config_from_dict(
        {
            "pretrain": {"batch_size": 2048, "peak_lr": 1.5e-3},
            "backbone": {"layers": 12, "hidden": 768, "heads": 12, "ffn": 3072, "patch": 16, "resolution": 224},
            "tokenizer": {"vocab_size": 8192},
        }
    )
    assert cfg.pretrain.batch_size == 2048
    assert cfg.backbone.hidden == 768


def test_resolved_config_roundtrips():
    cfg = config_from_dict({"seed": 5, "mask": {"strategy": "random"}})
    again = config_from_dict(cfg.to_dict())
    assert again == cfg


def test_hidden_not_divisible_by_heads():
    with pytest.raises(ConfigError, match="backbone.hidden"):
        config_from_dict({"backbone": {"hidden": 130}})


def test_overrides():
    doc = apply_overrides({}, ["mask.ratio=0.5", "data.source=shapes", "pretrain.steps=10"])
    cfg = config_from_dict(doc)
    assert cfg.mask.ratio == 0.5
    assert cfg.pretrain.steps == 10


def test_override_bad_form():
    with pytest.raises(ConfigError):
        apply_overrides({}, ["justakey"])


def test_invalid_json_reported(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError, match="JSON"):
        load_config(path)
