import csv
import json
import struct
import hashlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from laghash.checkpoint import MAGIC, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from laghash.cli import cli_main
from laghash.config import RunConfig, apply_overrides, from_dict, from_json, load_config, valid_keys
from laghash.errors import CheckpointError, ConfigError, ContractError
from laghash.hashfield import FieldConfig, count_params, empty_store, init_params
from laghash.image_task import load_image, psnr
from laghash.losses import LossWeights
from laghash.optim import TrainState, adam_step

from conftest import FIXTURES

TINY_IMAGE = {
    "task": "image",
    "seed": 3,
    "field": {"levels": 3, "lagrangian_levels": 1, "base_res": 2, "max_res": 8, "table_size": 64,
              "gaussians_per_bucket": 2, "mlp_hidden": 16, "output_dim": 1},
    "optim": {"steps": 40, "batch": 64, "log_every": 10, "val_pixels": 64},
    "io": {"image": "synthetic:checker:16:4", "out_dir": "out"},
}

TINY_FLAT = {
    "task": "flatland",
    "field": {"levels": 3, "lagrangian_levels": 1, "base_res": 4, "max_res": 16, "table_size": 64,
              "gaussians_per_bucket": 2, "mlp_hidden": 16, "output_dim": 4},
    "optim": {"steps": 20, "log_every": 10},
    "flatland": {"n_cameras": 6, "n_pixels": 8, "holdout_cameras": 2, "samples": 16, "gt_samples": 64,
                 "rays_per_batch": 32},
    "io": {"scene": "builtin:single_disk", "out_dir": "out"},
}


def write_config(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return str(p)


def run(argv, capsys):
    code = cli_main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def assert_error(err, *fragments):
    lines = [ln for ln in err.splitlines() if ln.strip()]
    assert len(lines) == 1 and lines[0].startswith("error: "), err
    for f in fragments:
        assert f in lines[0], (f, lines[0])


def trained_state(cfg: FieldConfig, seed=0):
    p = init_params(cfg, seed)
    st_ = TrainState.for_params(p, seed=seed)
    r = np.random.default_rng(seed)
    for _ in range(3):
        adam_step(st_, p, r.normal(size=len(p)).astype(np.float32))
    st_.rng_state = r.bit_generator.state
    return p, st_


# -- config -------------------------------------------------------------------


configs = st.builds(
    lambda task, levels, lag, b, k, res, steps, lr, seed, lg, delta, out, dtype: RunConfig(
        task=task,
        field=FieldConfig(levels=levels, lagrangian_levels=min(lag, levels), base_res=res, max_res=res * 2**levels,
                          table_size=2**b, gaussians_per_bucket=k, output_dim=4 if task == "flatland" else 3,
                          sigma_decay_steps=steps // 2),
        losses=LossWeights(lambda_guide=lg, huber_delta=delta),
        optim=from_dict({"optim": {"steps": steps, "lr": lr, "dtype": dtype}}).optim,
        seed=seed,
        io=from_dict({"io": {"out_dir": out}}).io,
    ),
    st.sampled_from(["image", "flatland"]),
    st.integers(1, 12),
    st.integers(0, 12),
    st.integers(4, 24),
    st.integers(1, 8),
    st.integers(1, 64),
    st.integers(0, 100_000),
    st.floats(1e-6, 1.0),
    st.integers(0, 2**31),
    st.floats(0, 10),
    st.floats(1e-3, 10),
    st.text(alphabet=st.characters(blacklist_categories=["Cs"]), max_size=20),
    st.sampled_from(["float32", "float64"]),
)


@given(configs)
def test_config_round_trip(cfg):
    assert from_json(cfg.to_json()) == cfg


def test_config_defaults_fill_sigma_horizon():
    cfg = from_dict({"optim": {"steps": 800}})
    assert cfg.field.sigma_decay_steps == 400
    assert from_dict({"optim": {"steps": 800}, "field": {"sigma_decay_steps": 7}}).field.sigma_decay_steps == 7


def test_config_validation():
    with pytest.raises(ConfigError):
        from_dict({"field": {"levels": 2, "lagrangian_levels": 3}})
    with pytest.raises(ConfigError):
        from_dict({"field": {"table_size": 1000}})
    with pytest.raises(ConfigError, match="valid keys"):
        from_dict({"field": {"tablesize": 1024}})
    with pytest.raises(ConfigError):
        from_dict({"task": "nerf"})
    with pytest.raises(ConfigError):
        from_dict({"optim": {"steps": "many"}})


def test_overrides():
    data = apply_overrides({}, ["field.table_size=256", "losses.lambda_guide=0", "io.image=a b.png"])
    cfg = from_dict(data)
    assert cfg.field.table_size == 256 and cfg.losses.lambda_guide == 0.0 and cfg.io.image == "a b.png"
    with pytest.raises(ConfigError, match="field.table_size"):
        apply_overrides({}, ["field.tablesize=3"])
    assert "field.table_size" in valid_keys() and "optim.lr_gaussian" in valid_keys()


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="nope.json"):
        load_config(tmp_path / "nope.json")


# -- checkpoints --------------------------------------------------------------


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    cfg = from_dict(TINY_IMAGE)
    p, st_ = trained_state(cfg.field)
    save_checkpoint(tmp_path / "a.lagh", cfg, p, st_)
    cfg2, p2, st2 = load_checkpoint(tmp_path / "a.lagh")
    assert cfg2 == cfg
    assert p2.values.tobytes() == p.values.tobytes()
    assert p2.names() == p.names()
    assert st2.m.tobytes() == st_.m.astype(np.float32).tobytes()
    assert st2.v.tobytes() == st_.v.astype(np.float32).tobytes()
    assert (st2.step, st2.lr, st2.seed, st2.rng_state) == (3, st_.lr, st_.seed, st_.rng_state)
    # re-encoding the loaded checkpoint gives the same bytes
    assert encode_checkpoint(cfg2, p2, st2) == (tmp_path / "a.lagh").read_bytes()


def test_checkpoint_rejects_float64():
    cfg = from_dict(TINY_IMAGE)
    p = init_params(cfg.field, 0, np.float64)
    with pytest.raises(ContractError):
        encode_checkpoint(cfg, p, TrainState.for_params(p))


def reseal(body: bytes) -> bytes:
    return body + hashlib.sha256(body).digest()


def test_checkpoint_corruption_is_detected():
    cfg = from_dict(TINY_IMAGE)
    p, st_ = trained_state(cfg.field)
    blob = encode_checkpoint(cfg, p, st_)
    with pytest.raises(CheckpointError, match="checksum"):
        decode_checkpoint(blob[:-100])
    flipped = bytearray(blob)
    flipped[200] ^= 0x01
    with pytest.raises(CheckpointError, match="checksum"):
        decode_checkpoint(bytes(flipped))
    with pytest.raises(CheckpointError, match="version"):
        decode_checkpoint(reseal(MAGIC + struct.pack("<H", 99) + blob[6:-32]))
    with pytest.raises(CheckpointError, match="not a"):
        decode_checkpoint(reseal(b"NOPE" + blob[4:-32]))
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"")


def test_checkpoint_param_count_must_match_config():
    cfg = from_dict(TINY_IMAGE)
    p, st_ = trained_state(cfg.field)
    other = from_dict(apply_overrides(TINY_IMAGE, ["field.table_size=128"]))
    with pytest.raises(CheckpointError, match="parameter"):
        decode_checkpoint(encode_checkpoint(other, p, st_))


# -- CLI ----------------------------------------------------------------------


def test_cli_missing_config(tmp_path, capsys):
    missing = str(tmp_path / "absent.json")
    code, _, err = run(["fit-image", "--config", missing], capsys)
    assert code == 1
    assert_error(err, missing)


def test_cli_unknown_set_key(tmp_path, capsys):
    cfg = write_config(tmp_path, TINY_IMAGE)
    code, _, err = run(["fit-image", "--config", cfg, "--set", "field.tablesize=64"], capsys)
    assert code == 1
    assert_error(err, "field.tablesize", "valid keys", "field.table_size", "optim.lr")


@pytest.mark.parametrize(
    "argv_tail, code",
    [
        (["fit-image", "--set", "field.table_size=100"], 1),
        (["fit-image", "--set", "field.lagrangian_levels=9"], 1),
        (["fit-image", "--set", "io.image=missing.png"], 1),
        (["fit-flatland"], 1),
        (["sweep", "--axis", "field.levels", "--values", "1", "--out", "x.csv"], 1),
        (["sweep", "--axis", "field.table_size", "--values", "a,b", "--out", "x.csv"], 1),
        (["eval"], 1),
        (["bogus"], 1),
    ],
)
def test_cli_error_lines(tmp_path, capsys, argv_tail, code):
    cfg = write_config(tmp_path, TINY_IMAGE)
    argv = argv_tail[:1] + (["--config", cfg] if argv_tail[0] != "bogus" else []) + argv_tail[1:]
    got, _, err = run(argv, capsys)
    assert got == code
    assert_error(err)


def test_cli_truncated_checkpoint(tmp_path, capsys):
    cfg = from_dict(TINY_IMAGE)
    p, st_ = trained_state(cfg.field)
    path = tmp_path / "t.lagh"
    path.write_bytes(encode_checkpoint(cfg, p, st_)[:-40])
    code, _, err = run(["eval", "--checkpoint", str(path)], capsys)
    assert code == 2
    assert_error(err, "checksum")


def test_cli_version_mismatch(tmp_path, capsys):
    cfg = from_dict(TINY_IMAGE)
    p, st_ = trained_state(cfg.field)
    blob = encode_checkpoint(cfg, p, st_)
    path = tmp_path / "v.lagh"
    path.write_bytes(reseal(MAGIC + struct.pack("<H", 2) + blob[6:-32]))
    code, _, err = run(["eval", "--checkpoint", str(path)], capsys)
    assert code == 2
    assert_error(err, "version 2")


def test_eval_zero_params_gives_constant_half_psnr(tmp_path, capsys):
    cfg = from_dict(TINY_IMAGE)
    p = empty_store(cfg.field)
    path = tmp_path / "zero.lagh"
    save_checkpoint(path, cfg, p, TrainState.for_params(p))
    code, out, _ = run(["eval", "--checkpoint", str(path)], capsys)
    assert code == 0
    res = json.loads(out)
    target = load_image(TINY_IMAGE["io"]["image"])
    assert res["psnr"] == psnr(np.full_like(target, 0.5), target)
    assert res["params"] == count_params(cfg.field)[0]


def test_fit_image_eval_and_export(tmp_path, capsys):
    cfg = write_config(tmp_path, TINY_IMAGE)
    code, out, err = run(["fit-image", "--config", cfg], capsys)
    assert code == 0, err
    summary = json.loads(out)
    out_dir = tmp_path / "out"
    for name in ("metrics.csv", "checkpoint.lagh", "points.csv", "reconstruction.png"):
        assert (out_dir / name).is_file()
    rows = list(csv.DictReader(open(out_dir / "metrics.csv")))
    assert list(rows[0]) == ["step", "recon", "guide", "dist", "psnr"]
    assert [int(r["step"]) for r in rows] == [0, 10, 20, 30, 40]

    code, out, _ = run(["eval", "--checkpoint", str(out_dir / "checkpoint.lagh")], capsys)
    ev = json.loads(out)
    assert abs(ev["psnr"] - summary["psnr"]) < 1e-4
    assert abs(ev["val_psnr"] - float(rows[-1]["psnr"])) < 1e-4

    pts = tmp_path / "pts.csv"
    code, out, _ = run(["export-points", "--checkpoint", str(out_dir / "checkpoint.lagh"), "--out", str(pts)], capsys)
    assert code == 0
    lines = list(csv.reader(open(pts)))
    assert lines[0] == ["level", "bucket", "k", "mu_x", "mu_y", "sigma"]
    assert len(lines) - 1 == 64 * 2


def test_same_seed_gives_identical_metrics(tmp_path, capsys):
    a = write_config(tmp_path, {**TINY_IMAGE, "io": {**TINY_IMAGE["io"], "out_dir": "a"}}, "a.json")
    b = write_config(tmp_path, {**TINY_IMAGE, "io": {**TINY_IMAGE["io"], "out_dir": "b"}}, "b.json")
    assert run(["fit-image", "--config", a], capsys)[0] == 0
    assert run(["fit-image", "--config", b], capsys)[0] == 0
    assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()
    assert (tmp_path / "a/checkpoint.lagh").read_bytes() != b""
    _, pa, _ = load_checkpoint(tmp_path / "a/checkpoint.lagh")
    _, pb, _ = load_checkpoint(tmp_path / "b/checkpoint.lagh")
    assert pa.values.tobytes() == pb.values.tobytes()


def test_fit_flatland_and_eval(tmp_path, capsys):
    cfg = write_config(tmp_path, TINY_FLAT)
    code, out, err = run(["fit-flatland", "--config", cfg], capsys)
    assert code == 0, err
    summary = json.loads(out)
    assert (tmp_path / "out/holdout_views.csv").is_file()
    code, out, _ = run(["eval", "--checkpoint", str(tmp_path / "out/checkpoint.lagh")], capsys)
    assert abs(json.loads(out)["psnr"] - summary["psnr"]) < 1e-4


def test_fit_command_must_match_task(tmp_path, capsys):
    cfg = write_config(tmp_path, TINY_FLAT)
    code, _, err = run(["fit-image", "--config", cfg], capsys)
    assert code == 1
    assert_error(err, "fit-flatland")


def read_sweep(path):
    return list(csv.DictReader(open(path)))


def test_sweep_row_counts(tmp_path, capsys):
    cfg = write_config(tmp_path, TINY_IMAGE)
    out = tmp_path / "s.csv"
    assert run(["sweep", "--config", cfg, "--axis", "field.table_size", "--values", "1024", "--out", str(out)],
               capsys)[0] == 0
    rows = read_sweep(out)
    assert len(rows) == 1 and list(rows[0]) == ["variant", "params", "psnr", "seconds"]
    assert run(["sweep", "--config", cfg, "--axis", "field.table_size", "--values", "1024", "--baseline", "eulerian",
                "--out", str(out)], capsys)[0] == 0
    rows = read_sweep(out)
    assert len(rows) == 2
    assert {r["variant"].split("[")[0] for r in rows} == {"hybrid", "eulerian"}


def test_sweep_params_increase_and_checkpoints_replay(tmp_path, capsys):
    cfg = write_config(tmp_path, TINY_IMAGE)
    out, ck = tmp_path / "s.csv", tmp_path / "ck"
    argv = ["sweep", "--config", cfg, "--axis", "field.table_size", "--values", "1024,4096,16384",
            "--out", str(out), "--checkpoints", str(ck)]
    assert run(argv, capsys)[0] == 0
    rows = read_sweep(out)
    params = [int(r["params"]) for r in rows]
    assert all(a < b for a, b in zip(params, params[1:]))
    for i, r in enumerate(rows):
        code, line, _ = run(["eval", "--checkpoint", str(ck / f"run{i:02d}.lagh")], capsys)
        assert code == 0
        assert abs(json.loads(line)["psnr"] - float(r["psnr"])) < 1e-4
    # everything but wall time is reproducible
    out2 = tmp_path / "s2.csv"
    assert run(argv[:-4] + ["--out", str(out2)], capsys)[0] == 0
    strip = lambda rows: [(r["variant"], r["params"], r["psnr"]) for r in rows]
    assert strip(read_sweep(out2)) == strip(rows)


def test_fd_check_command(capsys):
    code, out, err = run(["fd-check", "--config", str(FIXTURES / "fd_guidance.json")], capsys)
    assert code == 0, err
    res = json.loads(out)
    assert res["passed"] and res["double"]["max_rel_error"] < 1e-5 and res["single"]["max_rel_error"] < 1e-3


def test_fd_check_failure_exits_2(capsys):
    # a tolerance no finite-difference estimate can meet
    code, _, err = run(["fd-check", "--config", str(FIXTURES / "fd_guidance.json"), "--set", "fd.tolerance=1e-300"],
                       capsys)
    assert code == 2
    assert_error(err, "gradient check failed")
