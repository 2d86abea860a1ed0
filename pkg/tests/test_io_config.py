import json
import struct
import zlib

import numpy as np
import pytest

from bpinn_ip import io as bio
from bpinn_ip.config import DEFAULTS, ConfigError, config_from_dict, config_load, parse_json
from bpinn_ip.datagen import SceneSpec, make_dataset
from bpinn_ip.fields import PsfKernel, restoration_operator
from bpinn_ip.neural import ArchSpec, init_params


class TestFieldFormat:
    def test_round_trip(self, tmp_path, rng):
        f = rng.standard_normal((5, 7)).astype(np.float32)
        bio.field_write(tmp_path / "f.bpif", f)
        back = bio.field_read(tmp_path / "f.bpif")
        assert back.tobytes() == f.tobytes() and back.shape == (5, 7)

    def test_layout(self, tmp_path):
        bio.field_write(tmp_path / "f.bpif", np.array([[1.0, 2.0], [3.0, 4.0]]))
        data = (tmp_path / "f.bpif").read_bytes()
        # 4-byte magic and two u32 dimensions, then four f32 values
        assert len(data) == 12 + 16
        assert data[:4] == b"BPIF"
        assert struct.unpack("<II", data[4:12]) == (2, 2)
        assert struct.unpack("<4f", data[12:]) == (1.0, 2.0, 3.0, 4.0)

    def test_rectangular_header_is_width_then_height(self):
        data = bio.field_to_bytes(np.zeros((3, 5)))
        assert struct.unpack("<II", data[4:12]) == (5, 3)

    @pytest.mark.parametrize(
        "data",
        [b"XXXX" + bytes(12), b"BPIF" + struct.pack("<II", 2, 2) + bytes(15),
         b"BPIF" + struct.pack("<II", 0, 4), b"BPIF" + struct.pack("<II", 1 << 20, 1 << 20)],
        ids=["magic", "truncated", "zero", "overflow"],
    )
    def test_rejects_bad_files(self, data):
        with pytest.raises(bio.FormatError):
            bio.field_from_bytes(data)

    def test_refuses_non_finite(self):
        with pytest.raises(ValueError):
            bio.field_to_bytes(np.array([[np.nan]]))


class TestPgm:
    def test_constant_field_is_black(self):
        data = bio.pgm_bytes(np.full((3, 4), 7.5))
        header = b"P5\n4 3\n255\n"
        assert data.startswith(header)
        assert data[len(header):] == bytes(12)

    def test_min_max_scaling(self):
        data = bio.pgm_bytes(np.array([[0.0, 0.5, 1.0]]))
        assert list(data[-3:]) == [0, 128, 255]


class TestCheckpoint:
    arch = ArchSpec("conv_ed", (8, 8), (8, 8), base_channels=2, depth=2)

    def test_round_trip(self, tmp_path):
        p = init_params(self.arch, 4)
        bio.save_checkpoint(tmp_path / "m.bpnn", p)
        back = bio.load_checkpoint(tmp_path / "m.bpnn")
        assert back.arch == self.arch
        assert back.values.tobytes() == p.values.tobytes()

    def test_layout_and_crc(self):
        p = init_params(ArchSpec("mlp", (2, 1), (1, 1), hidden_sizes=()), 0)
        data = bio.params_to_bytes(p)
        assert data[:4] == b"BPNN"
        assert struct.unpack("<H", data[4:6]) == (1,)
        (n_arch,) = struct.unpack("<I", data[6:10])
        assert json.loads(data[10:10 + n_arch]) == json.loads(p.arch.canonical())
        (count,) = struct.unpack("<Q", data[10 + n_arch:18 + n_arch])
        assert count == p.size == 3
        assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4])

    def test_truncation(self):
        data = bio.params_to_bytes(init_params(self.arch, 0))
        with pytest.raises(bio.CountMismatchError):
            bio.params_from_bytes(data[:-12])

    def test_bit_flip(self):
        data = bytearray(bio.params_to_bytes(init_params(self.arch, 0)))
        data[len(data) // 2] ^= 0x10
        with pytest.raises(bio.IntegrityError):
            bio.params_from_bytes(bytes(data))

    def test_future_version(self):
        data = bytearray(bio.params_to_bytes(init_params(self.arch, 0)))
        data[4:6] = struct.pack("<H", 9)
        with pytest.raises(bio.VersionError):
            bio.params_from_bytes(bytes(data))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="checkpoint not found"):
            bio.load_checkpoint(tmp_path / "nope.bpnn")


def test_dataset_round_trip(tmp_path):
    A = restoration_operator((8, 8), PsfKernel.gaussian(1.0, 3))
    tr, _, _ = make_dataset(SceneSpec(8, 8), A, 3, 0, 0, 0.01, 0.02, 5)
    bio.save_dataset(tmp_path, tr)
    back = bio.load_split(tmp_path, "train", 3, True, A, 0.01, 0.02, 5)
    assert back.g.astype(np.float32).tobytes() == tr.g.astype(np.float32).tobytes()
    np.testing.assert_array_equal(back.f_T, tr.f_T.astype(np.float32))


def test_atomic_write_leaves_no_temp_files(tmp_path):
    bio.atomic_write_text(tmp_path / "sub" / "a.txt", "hello")
    assert (tmp_path / "sub" / "a.txt").read_text() == "hello"
    assert [p.name for p in (tmp_path / "sub").iterdir()] == ["a.txt"]


class TestConfig:
    def test_minimal_config_gets_defaults(self, tmp_path):
        cfg = config_from_dict({"problem": {"kind": "restore"}, "scene": {"width": 32, "height": 32}}, tmp_path)
        assert cfg.v_eps == DEFAULTS["variances"]["v_eps"]
        assert cfg.train.learning_rate == DEFAULTS["train"]["learning_rate"]
        assert cfg.arch.kind == DEFAULTS["arch"]["kind"]
        assert cfg.psf.size == DEFAULTS["psf"]["size"]
        assert cfg.checkpoint == tmp_path / DEFAULTS["paths"]["checkpoint"]

    def test_superres_factor_must_divide(self):
        with pytest.raises(ConfigError, match="factor 3"):
            config_from_dict({"problem": {"kind": "superres", "factor": 3}, "scene": {"width": 32, "height": 32}})

    def test_superres_shapes(self):
        cfg = config_from_dict({"problem": {"kind": "superres", "factor": 2}, "psf": {"size": 5}})
        assert cfg.operator().output_shape == (16, 16)
        assert cfg.arch.input_shape == (16, 16) and cfg.arch.output_shape == (32, 32)

    def test_duplicate_key(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_json('{"problem": {"kind": "restore", "kind": "superres"}}')

    def test_parse_error_has_position(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_json('{\n  "problem": ,\n}')

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError, match="lerning_rate"):
            config_from_dict({"train": {"lerning_rate": 0.1}})

    def test_reports_every_violation(self):
        with pytest.raises(ConfigError) as exc:
            config_from_dict({"train": {"beta_w": 3.0, "batch_size": 0}, "psf": {"sigma": -1}})
        assert len(exc.value.errors) >= 3

    def test_shipped_configs_load(self):
        from pathlib import Path

        root = Path(__file__).resolve().parents[1] / "configs"
        for name in ("restore.json", "superres.json"):
            cfg = config_load(root / name)
            assert cfg.scene.width == 32

    def test_paths_relative_to_config(self, tmp_path):
        (tmp_path / "c.json").write_text('{"paths": {"data_dir": "d"}}')
        cfg = config_load(tmp_path / "c.json")
        assert cfg.data_dir == tmp_path / "d"
