"""Configuration precedence, parsing, typo rejection, and typed views."""

import pytest

from raglab.config import ENV_SEED, SCHEMA, RunConfig, cli_flag, flag_to_key, load_config


def test_defaults_cover_schema():
    cfg = load_config(env={})
    for sk, (_, default, _) in SCHEMA.items():
        assert cfg[sk] == default
    assert cfg.seed == 0
    assert cfg["retrieval", "temperature"] == 0.05


def test_precedence_file_env_override():
    import tempfile, os

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "run.ini")
        with open(path, "w") as fh:
            fh.write("[run]\nseed = 3\nrun_id = filerun\n[cpt]\nsteps = 7\n")
        cfg = load_config(path, env={})
        assert cfg.seed == 3 and cfg["run", "run_id"] == "filerun"
        assert cfg["cpt", "steps"] == 7
        # env beats file for the seed only
        cfg = load_config(path, env={ENV_SEED: "11"})
        assert cfg.seed == 11 and cfg["run", "run_id"] == "filerun"
        # explicit override beats both
        cfg = load_config(path, overrides={"run.seed": "42"}, env={ENV_SEED: "11"})
        assert cfg.seed == 42


def test_unknown_keys_rejected(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[run]\nseeed = 3\n")
    with pytest.raises(KeyError, match="seeed"):
        load_config(str(path), env={})
    with pytest.raises(KeyError, match="run.sede"):
        load_config(None, overrides={"run.sede": "1"}, env={})


def test_value_parsing_and_bool_forms(tmp_path):
    cfg = load_config(
        None,
        overrides={
            "cpt.lr": "5e-4",
            "run.allow_raw_backbone": "yes",
            "generation.use_retrieved_docs": "0",
        },
        env={},
    )
    assert cfg["cpt", "lr"] == 5e-4
    assert cfg["run", "allow_raw_backbone"] is True
    assert cfg["generation", "use_retrieved_docs"] is False
    with pytest.raises(ValueError, match="boolean"):
        load_config(None, overrides={"run.allow_raw_backbone": "maybe"}, env={})


def test_validation_rules():
    with pytest.raises(ValueError, match="regime"):
        load_config(None, overrides={"run.regime": "other"}, env={})
    with pytest.raises(ValueError, match="top_n"):
        load_config(None, overrides={"inference.top_n": "4"}, env={})
    with pytest.raises(ValueError, match="lam"):
        load_config(None, overrides={"run.lam": "-1"}, env={})


def test_typed_views():
    cfg = load_config(None, overrides={"backbone.d_model": "32", "backbone.n_heads": "2"}, env={})
    bcfg = cfg.backbone_config()
    assert bcfg.d_model == 32 and bcfg.head_dim == 16
    lcfg = cfg.lora_config()
    assert lcfg.rank == 8 and lcfg.alpha == 16.0
    section = cfg.section("retrieval")
    assert section["batch_size"] == 4 and "steps" not in section


def test_replace_and_canonical_json():
    cfg = load_config(env={})
    cfg2 = cfg.replace(run__seed=9, cpt__steps=1)
    assert cfg2.seed == 9 and cfg2["cpt", "steps"] == 1
    assert cfg.seed == 0  # original untouched
    with pytest.raises(KeyError, match="unknown"):
        cfg.replace(run__sede=1)
    j1 = cfg.canonical_json()
    j2 = load_config(env={}).canonical_json()
    assert j1 == j2
    assert j1 != cfg2.canonical_json()
    assert '"seed": 0' in j1


def test_flag_round_trip():
    assert cli_flag("run", "seed") == "--run-seed"
    assert cli_flag("fully_shared", "batch_size") == "--fully-shared-batch-size"
    assert flag_to_key("run__seed") == ("run", "seed")
    assert flag_to_key("fully_shared__batch_size") == ("fully_shared", "batch_size")
    assert flag_to_key("nope__nothing") is None
    # every schema key has a reversible flag dest
    for section, key in SCHEMA:
        assert flag_to_key(f"{section}__{key}") == (section, key)
