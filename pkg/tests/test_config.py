import math

import pytest

from pillarseg.config import Config, format_config, load_config, parse_config
from pillarseg.errors import ConfigError, InvalidGridSpec


class TestConfig:
    def test_defaults(self):
        cfg = parse_config("")
        assert cfg.grid.W == 1000 and cfg.model.P == 30000 and cfg.train.lr == 1e-3
        assert cfg.train.augment.max_angle == math.pi / 4

    def test_round_trip_defaults(self):
        cfg = Config()
        again = parse_config(format_config(cfg))
        assert again.model == cfg.model and again.train == cfg.train and again.neighbors == cfg.neighbors

    def test_round_trip_custom(self):
        text = (
            "[grid]\nx_min=-6.4\nx_max=6.4\ny_min=-3.2\ny_max=3.2\ncell_xy=0.2\n"
            "[model]\nC=8\noccupancy_mode=2d\nunet_depth=2\n"
            "[train]\nmode=dense\nmax_steps=12\n"
            "[loss]\nweights=" + ", ".join(["1"] * 11 + ["3"]) + "\n"
            "[gt]\nd=10\nmetric=along_track\n"
        )
        cfg = parse_config(text)
        assert cfg.grid.W == 64 and cfg.model.occupancy_mode == "2d" and cfg.train.max_steps == 12
        assert cfg.train.loss_weights[-1] == 3 and cfg.neighbors.metric == "along_track"
        again = parse_config(format_config(cfg))
        assert again.model == cfg.model and again.train == cfg.train and again.neighbors == cfg.neighbors

    @pytest.mark.parametrize("text", [
        "[model]\nbogus=1\n",
        "[nosuch]\n",
        "[model]\nC=abc\n",
        "[loss]\nweights=1, 2\n",
        "not ini",
        "[train]\nmode=other\n",
    ])
    def test_errors(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_invalid_grid(self):
        with pytest.raises((ConfigError, InvalidGridSpec)):
            parse_config("[grid]\ncell_xy=0.3\n")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.ini")
