"""Configuration parsing: key=value files, includes, presets, validation."""

import numpy as np
import pytest

from evtrack import config as cfg
from evtrack.errors import ConfigError


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


class TestParseConfig:
    def test_basic_key_values_and_comments(self, tmp_path):
        path = write(
            tmp_path,
            "a.cfg",
            "# comment\ncontrast = 0.2  # inline\n\nduration=1.5\n",
        )
        values = cfg.parse_config(path)
        assert values == {"contrast": "0.2", "duration": "1.5"}

    def test_unknown_key_rejected_with_line_number(self, tmp_path):
        path = write(tmp_path, "a.cfg", "contrast = 0.2\nbogus_key = 1\n")
        with pytest.raises(ConfigError, match=r":2:.*bogus_key"):
            cfg.parse_config(path)

    def test_missing_equals_rejected(self, tmp_path):
        path = write(tmp_path, "a.cfg", "contrast\n")
        with pytest.raises(ConfigError, match=":1:"):
            cfg.parse_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            cfg.parse_config(str(tmp_path / "nope.cfg"))

    def test_include_with_override(self, tmp_path):
        write(tmp_path, "base.cfg", "contrast = 0.1\nduration = 2.0\n")
        path = write(tmp_path, "top.cfg", "include base.cfg\ncontrast = 0.3\n")
        values = cfg.parse_config(path)
        assert values["contrast"] == "0.3"
        assert values["duration"] == "2.0"

    def test_include_from_preset_dir(self, tmp_path):
        path = write(tmp_path, "top.cfg", "include box.cfg\n")
        values = cfg.parse_config(path)
        assert values["shape_kind"] == "box"

    def test_missing_include_target(self, tmp_path):
        path = write(tmp_path, "top.cfg", "include nothere.cfg\n")
        with pytest.raises(ConfigError, match="nothere"):
            cfg.parse_config(path)

    def test_include_cycle_detected(self, tmp_path):
        write(tmp_path, "a.cfg", "include b.cfg\n")
        write(tmp_path, "b.cfg", "include a.cfg\n")
        with pytest.raises(ConfigError, match="depth"):
            cfg.parse_config(str(tmp_path / "a.cfg"))


class TestBuilders:
    def minimal_scene_values(self):
        return {
            "camera_fx": "100",
            "camera_fy": "100",
            "camera_cx": "32",
            "camera_cy": "32",
            "camera_width": "64",
            "camera_height": "64",
        }

    def test_build_scene_defaults(self):
        scene = cfg.build_scene(self.minimal_scene_values())
        assert scene.camera.width == 64
        assert scene.contrast == 0.1
        np.testing.assert_allclose(scene.trajectory.initial_pose.translation, [0, 0, 1.6])

    def test_build_scene_missing_required_key(self):
        values = self.minimal_scene_values()
        del values["camera_fx"]
        with pytest.raises(ConfigError, match="camera_fx"):
            cfg.build_scene(values)

    def test_bad_vector_arity(self):
        values = self.minimal_scene_values()
        values["light_direction"] = "1 2"
        with pytest.raises(ConfigError, match="light_direction"):
            cfg.build_scene(values)

    def test_tracker_defaults_and_overrides(self):
        tc = cfg.build_tracker_config({"lambda_reg": "0.7", "events_per_frame": "2000"})
        assert tc.lambda_reg == 0.7
        assert tc.events_per_frame == 2000
        assert tc.knot_interval == 0.015

    def test_refiner_defaults(self):
        rc = cfg.build_refiner_config({})
        assert rc.window_size == 7
        assert rc.trans_threshold == 0.1
        assert rc.rot_threshold_deg == 5.0

    def test_tracker_config_validation(self):
        with pytest.raises(ValueError):
            cfg.TrackerConfig(events_per_frame=0)
        with pytest.raises(ValueError):
            cfg.TrackerConfig(lambda_reg=-1.0)

    def test_refiner_config_validation(self):
        with pytest.raises(ValueError):
            cfg.RefinerConfig(window_size=1)
        with pytest.raises(ValueError):
            cfg.RefinerConfig(trans_threshold=0.0)

    def test_pose_round_trip_through_string(self):
        from evtrack.geometry import Pose, so3_exp

        p = Pose(so3_exp(np.array([0.2, -0.4, 0.6])), np.array([1.0, -2.0, 3.0]))
        s = cfg.pose_to_str(p)
        q = cfg._pose(s, "test")
        np.testing.assert_allclose(q.matrix(), p.matrix(), atol=1e-7)


class TestPresets:
    @pytest.mark.parametrize("name", ["box.cfg", "can.cfg", "car.cfg"])
    def test_presets_parse_and_build(self, name):
        import os

        path = os.path.join(cfg.PRESET_DIR, name)
        values = cfg.parse_config(path)
        scene = cfg.build_scene(values, base_dir=cfg.PRESET_DIR)
        tc = cfg.build_tracker_config(values)
        rc = cfg.build_refiner_config(values)
        assert scene.duration > 0
        assert tc.events_per_frame >= 1
        assert rc.window_size == 7
        assert tc.knot_interval == pytest.approx(0.015)
