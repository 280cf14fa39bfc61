import pytest

from wcilab.errors import ConfigError
from wcilab.harness.config import RunConfig, dump_config, load_config, parse_config

FULL = """
[run]
name = demo   # trailing comment
seed = 3
thresholds = 10, 20 30
[data]
kind = two-moons
n_train = 40
n_test = 30
d = 2
label_noise = 0.1
[model]
widths = 2 16 2
use_bias = no
[attack]
epsilon = 0.05
step_size = 0.0125
iters = 4
[train]
epochs = 12
batch_size = 8
[scheduler]
kind = wci-dynamic
base_lr = 0.05
warm_epochs = 6
post_decay_lr = 0.005
threshold = 20
mode = rebased
[wci]
every = 2
start_epoch = 6
probes = 5
[bound]
lambda = 100
alpha = 0.1
"""


def test_full_config_values():
    cfg = parse_config(FULL, env={})
    assert cfg.name == "demo" and cfg.seed == 3 and cfg.thresholds == (10.0, 20.0, 30.0)
    assert cfg.data.kind == "two-moons" and cfg.data.n_train == 40 and cfg.data.label_noise == 0.1
    assert cfg.model.widths == (2, 16, 2) and cfg.model.use_bias is False and cfg.model.seed == 3
    assert cfg.train.attack.epsilon == 0.05 and cfg.train.attack.iters == 4
    s = cfg.train.scheduler
    assert s.kind == "wci-dynamic" and s.horizon == 12 and s.milestones == (6, 9)
    assert s.wci.threshold == 20 and s.wci.mode == "rebased" and s.wci.post_decay_lr == 0.005
    assert cfg.train.wci_eval.every == 2 and cfg.train.wci_eval.seed == 3
    assert cfg.train.bound_lambda == 100 and cfg.train.bound_alpha == 0.1


def test_dump_parse_round_trip():
    cfg = parse_config(FULL, env={})
    assert parse_config(dump_config(cfg), env={}) == cfg
    default = parse_config("", env={})
    assert parse_config(dump_config(default), env={}) == default


def test_defaults():
    cfg = parse_config("", env={})
    assert cfg.train.epochs == 60 and cfg.train.scheduler.milestones == (30, 45)
    assert cfg.model.widths == (2, 32, 32, 2)
    assert cfg.train.bound_lambda is None
    assert cfg.thresholds == ()


def test_run_seed_env_override():
    cfg = parse_config(FULL, env={"RUN_SEED": "11"})
    assert cfg.seed == 11 and cfg.train.seed == 11 and cfg.model.seed == 11
    assert parse_config(FULL, env={"RUN_SEED": ""}).seed == 3
    with pytest.raises(ConfigError):
        parse_config(FULL, env={"RUN_SEED": "x"})


@pytest.mark.parametrize(
    "text",
    [
        "[nonsense]\na = 1\n",
        "[train]\nepochz = 3\n",
        "[train]\nepochs = three\n",
        "[model]\nuse_bias = maybe\n",
        "[model]\nwidths = 3 4 2\n",
        "[attack]\nepsilon = -1\n",
        "[bound]\nlambda = big\n",
        "[scheduler]\nkind = exponential\n",
        "no section header\n",
    ],
)
def test_bad_configs_raise_config_error(text):
    with pytest.raises(ConfigError):
        parse_config(text, env={})


def test_with_helpers():
    cfg = parse_config(FULL, env={})
    assert cfg.with_epochs(20).train.scheduler.horizon == 20
    t = parse_config("", env={}).with_threshold(40)
    assert t.train.scheduler.kind == "wci-dynamic" and t.train.scheduler.wci.threshold == 40.0
    assert cfg.with_scheduler("cosine").train.scheduler.kind == "cosine"
    s9 = cfg.with_seed(9)
    assert s9 == parse_config(FULL, env={"RUN_SEED": "9"})


def test_load_config_missing_file(tmp_path):
    with pytest.raises(OSError):
        load_config(tmp_path / "missing.ini")
    p = tmp_path / "c.ini"
    p.write_text(FULL)
    assert isinstance(load_config(p, env={}), RunConfig)


def test_shipped_configs_parse_and_desk_matches_acceptance():
    from pathlib import Path

    from test_acceptance import desk_config

    root = Path(__file__).resolve().parents[1] / "configs"
    cfgs = {p.stem: load_config(p, env={}) for p in sorted(root.glob("*.ini"))}
    assert {"blobs", "desk"} <= set(cfgs)
    assert cfgs["desk"].train == desk_config(0, "piecewise")
    assert cfgs["desk"].data.n_train + cfgs["desk"].data.n_test == 2000
