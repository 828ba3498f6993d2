import json

import pytest

from objrecon.config import ConfigError, RunConfig, parse_sigma_rule

PUBLISHED_DEFAULTS = {
    "grid": {"L": 3, "N0": 16, "gamma": 1.5},
    "rays": {"total": 9600, "keyframes": 6, "per_ray": 14, "surface": 13, "synth_per_ray": 24,
             "sigma_rule": "3σ=5cm"},
    "losses": {"lambda_color": 5, "lambda_mask": 10, "variance_floor": 1e-6},
    "optim": {"lr_grid": 5e-3, "lr_mlp": 3.5e-4, "weight_decay": 0.1},
    "objmap": {"keyframe_every": 25, "buffer": 20, "min_mask_pixels": 100, "box_margin": 0.10,
               "steps_per_frame": 3},
    "library": {"m": 3, "sim_threshold": 0.7, "fitness_threshold": 0.8, "reproj_in_mask": 0.90,
                "depth_tolerance_m": 0.02},
    "mesh": {"resolution_m": 0.005, "cull_tau_m": 0.02},
}


def test_defaults_match_published_values():
    cfg = RunConfig().to_dict()
    for section, values in PUBLISHED_DEFAULTS.items():
        for key, value in values.items():
            assert cfg[section][key] == value, f"{section}.{key}"


def test_derived_objects():
    cfg = RunConfig()
    assert cfg.grid_config().n_params == 64576
    rc = cfg.ray_config()
    assert (rc.n_total, rc.n_surface, rc.n_synth) == (14, 13, 24)
    assert rc.sigma == pytest.approx(0.05 / 3)
    w = cfg.loss_weights()
    assert (w.lambda_color, w.lambda_mask, w.variance_floor, w.variance_gradient) == (5.0, 10.0, 1e-6, False)
    opt = cfg.new_optimizer()
    assert (opt.lr_grid, opt.lr_mlp, opt.weight_decay) == (5e-3, 3.5e-4, 0.1)


def test_overlay_and_precedence():
    base = RunConfig.from_dict({"objmap": {"steps_per_frame": 5}, "seed": 2})
    cfg = RunConfig.from_dict({"seed": 9, "rays": {"total": 100}}, base)
    assert cfg.objmap.steps_per_frame == 5 and cfg.seed == 9 and cfg.rays.total == 100
    assert base.rays.total == 9600  # base untouched
    assert RunConfig.from_dict({"losses": {"lambda_color": 2}}).losses.lambda_color == 2.0


@pytest.mark.parametrize("data, key", [
    ({"bogus": 1}, "bogus"),
    ({"rays": {"totl": 5}}, "rays.totl"),
    ({"rays": {"total": 1.5}}, "rays.total"),
    ({"rays": {"total": True}}, "rays.total"),
    ({"library": {"freeze_grids": "yes"}}, "library.freeze_grids"),
    ({"optim": {"lr_grid": "fast"}}, "optim.lr_grid"),
    ({"rays": 5}, "rays"),
    ({"rays": {"sigma_rule": "about 5cm"}}, "sigma rule"),
])
def test_invalid_configs_name_the_key(data, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        RunConfig.from_dict(data)


def test_load_yaml_and_json(tmp_path):
    (tmp_path / "c.yaml").write_text("objmap:\n  steps_per_frame: 2\nseed: 4\n")
    cfg = RunConfig.load(tmp_path / "c.yaml")
    assert cfg.objmap.steps_per_frame == 2 and cfg.seed == 4
    (tmp_path / "c.json").write_text(json.dumps({"mesh": {"resolution_m": 0.01}}))
    assert RunConfig.load(tmp_path / "c.json").mesh.resolution_m == 0.01
    (tmp_path / "empty.yaml").write_text("")
    assert RunConfig.load(tmp_path / "empty.yaml") == RunConfig()


def test_load_errors_name_file(tmp_path):
    (tmp_path / "bad.yaml").write_text("objmap: {stepz: 1}\n")
    with pytest.raises(ConfigError, match=r"bad\.yaml.*objmap\.stepz"):
        RunConfig.load(tmp_path / "bad.yaml")
    (tmp_path / "list.yaml").write_text("- 1\n")
    with pytest.raises(ConfigError, match="mapping"):
        RunConfig.load(tmp_path / "list.yaml")
    (tmp_path / "broken.yaml").write_text("a: [\n")
    with pytest.raises(ConfigError, match="broken.yaml"):
        RunConfig.load(tmp_path / "broken.yaml")


@pytest.mark.parametrize("rule, value", [("3σ=5cm", 0.05 / 3), ("sigma=10cm", 0.1), ("2 sigma = 4 mm", 0.002),
                                         ("1σ=0.5m", 0.5)])
def test_sigma_rule(rule, value):
    assert parse_sigma_rule(rule) == pytest.approx(value, rel=1e-12)


def test_round_trip_through_dict():
    cfg = RunConfig.from_dict({"library": {"freeze_grids": True}, "seed": 3})
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
