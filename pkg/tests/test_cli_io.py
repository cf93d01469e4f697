import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from deepcs.cli import main
from deepcs.config import ConfigError, format_config, parse_config
from deepcs.images import load_image, save_image
from deepcs.measurement import SamplingConfig, build_mask
from deepcs.model import build_variant, reconstruct_images
from deepcs.modelfile import MAGIC, ModelFileError, from_bytes, load_model, parse, save_model, to_bytes
from deepcs.reconstructor import ReconWidths

TINY = SamplingConfig(4, 4, 1, 0.5)
TINY_W = ReconWidths(4, 4, 4, 3, 3, 3)


def _image_dir(path, n=8, size=16, channels=1):
    path.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(0)
    yy, xx = np.mgrid[0:size, 0:size] / size
    for i in range(n):
        a, b = rng.uniform(0.5, 3, 2)
        im = 0.5 + 0.4 * np.sin(a * np.pi * xx + b * np.pi * yy)
        im = np.repeat(im[..., None], channels, axis=2)
        save_image(path / f"img{i:02d}.png", im)
    return path


def _config(tmp, data, variant="r2cs_net", **extra):
    lines = {
        "variant": variant, "data_dir": str(data), "block_h": 4, "block_w": 4, "channels": 1,
        "sampling_rate": 0.5, "T": 2, "sigma_train": 0.1, "batch_size": 4, "epochs": 1, "patch_size": 8,
        "seed": 1, "enrich4": 4, "enrich5": 4, "residual": 4, "k4": 3, "k5": 3, "k_res": 3,
        "model_out": str(tmp / f"{variant}.r2cs"), "loss_csv": str(tmp / f"{variant}_loss.csv"),
        "manifest": str(tmp / f"{variant}_manifest.json"),
    }
    lines.update(extra)
    p = tmp / f"{variant}.cfg"
    p.write_text("# tiny run\n" + "\n".join(f"{k} = {v}" for k, v in lines.items()) + "\n")
    return p


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    data = _image_dir(tmp / "data")
    out = {}
    for variant in ("r2cs_net", "rcs"):
        cfg = _config(tmp, data, variant)
        assert main(["train", str(cfg), "--quiet"]) == 0
        out[variant] = tmp / f"{variant}.r2cs"
    out["tmp"], out["data"] = tmp, data
    return out


def _bundle(variant="r2cs_net", mask="dct"):
    b = build_variant(variant, TINY, 3, steps=2, widths=TINY_W, mask_mode=mask)
    b.train_meta = {"note": "x=1", "patch_size": "8"}
    return b


def test_model_roundtrip_bit_exact(tmp_path):
    for variant in ("r2cs_net", "rcs", "random_rcs", "rcs_gd"):
        b = _bundle(variant)
        rng = np.random.default_rng(1)
        for p in b.parameters():
            p.assign(rng.standard_normal(p.shape))
        path = tmp_path / f"{variant}.r2cs"
        save_model(path, b)
        loaded = load_model(path)
        assert loaded.variant == variant and loaded.train_meta == b.train_meta
        ref = b.named_arrays()
        got = loaded.named_arrays()
        assert ref.keys() == got.keys()
        for k in ref:
            assert ref[k].tobytes() == got[k].tobytes(), k
        assert to_bytes(loaded) == path.read_bytes()


def test_custom_mask_roundtrip():
    rng = np.random.default_rng(2)
    q, _ = np.linalg.qr(rng.standard_normal((16, 16)))
    b = _bundle("rcs")
    b.mask = build_mask("custom", TINY, q.reshape(4, 4, 1, 16))
    loaded = from_bytes(to_bytes(b))
    assert loaded.mask.mode == "custom"
    np.testing.assert_array_equal(loaded.mask.kernel, b.mask.kernel.astype(np.float32))


def test_model_file_layout():
    blob = to_bytes(_bundle())
    assert blob[:4] == MAGIC == b"R2CS"
    assert struct.unpack("<H", blob[4:6])[0] == 1
    header, tensors = parse(blob)
    assert header["variant"] == "r2cs_net" and header["mask"] == "dct"
    assert all(a.ndim == 4 and a.dtype == np.float32 for a in tensors.values())


def test_version_bump_rejected():
    blob = bytearray(to_bytes(_bundle()))
    blob[4:6] = struct.pack("<H", 2)
    with pytest.raises(ModelFileError, match="version 2 at offset 4"):
        from_bytes(bytes(blob))


def test_corrupt_file_errors_report_offset():
    blob = to_bytes(_bundle())
    with pytest.raises(ModelFileError, match="offset"):
        from_bytes(blob[:-10])
    with pytest.raises(ModelFileError, match="trailing bytes at offset"):
        from_bytes(blob + b"\0\0")
    with pytest.raises(ModelFileError, match="bad magic at offset 0"):
        from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ModelFileError, match="offset"):
        from_bytes(blob[:9])


def test_config_parsing():
    cfg = parse_config("variant = rcs\nsampling_rate = 0.1  # low\nT=3\n\nenrich4 = 16\n")
    assert cfg.variant == "rcs" and cfg.train.sampling_rate == 0.1 and cfg.train.T == 3
    assert cfg.widths.enrich4 == 16 and cfg.sampling().m == 19
    again = parse_config(format_config(cfg))
    assert again.as_dict() == cfg.as_dict()
    with pytest.raises(ConfigError, match="unknown config key 'learning_rate'"):
        parse_config("learning_rate = 0.1\n")
    with pytest.raises(ConfigError, match="sampling_rate"):
        parse_config("sampling_rate = 1.5\n")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config("T = 3\nT = 4\n")
    with pytest.raises(ConfigError, match="key=value"):
        parse_config("just words\n")
    with pytest.raises(ConfigError, match="bad value"):
        parse_config("T = three\n")
    with pytest.raises(ConfigError):
        parse_config("variant = r2cs_lstm\n")


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 9), st.sampled_from([1, 3])),
              elements=st.floats(0, 1)))
def test_image_roundtrip_within_quantization(tmp_path_factory, x):
    d = tmp_path_factory.mktemp("img")
    for suffix in (".png", ".ppm" if x.shape[2] == 3 else ".pgm"):
        path = d / f"x{suffix}"
        save_image(path, x)
        back = load_image(path, x.shape[2])
        assert back.shape == x.shape
        assert np.abs(back - x).max() <= 1 / 510 + 1e-6


def test_image_load_clamps_and_rounds_half_up(tmp_path):
    p = tmp_path / "h.png"
    save_image(p, np.array([[0.5 / 255, 1.5 / 255, 2.0, -1.0]]))
    np.testing.assert_array_equal(np.round(load_image(p)[0, :, 0] * 255), [1, 2, 255, 0])
    with pytest.raises(ValueError):
        save_image(tmp_path / "x.jpg", np.zeros((2, 2)))


def test_train_outputs_and_determinism(trained, tmp_path):
    tmp, data = trained["tmp"], trained["data"]
    manifest = json.loads((tmp / "r2cs_net_manifest.json").read_text())
    assert manifest["seed"] == 1 and manifest["config"]["variant"] == "r2cs_net"
    assert not set(manifest["train_images"]) & set(manifest["val_images"])
    header = (tmp / "r2cs_net_loss.csv").read_text().splitlines()[0]
    assert header == "epoch,split,loss,psnr"
    cfg = _config(tmp_path, data, "r2cs_net")
    lines = cfg.read_text().replace(str(tmp_path), str(tmp_path / "again"))
    cfg.write_text(lines)
    assert main(["train", str(cfg), "--quiet"]) == 0
    assert (tmp_path / "again" / "r2cs_net.r2cs").read_bytes() == trained["r2cs_net"].read_bytes()


def test_train_bad_config(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("sampling_rate = 1.5\n")
    assert main(["train", str(bad)]) == 2
    assert "sampling_rate" in capsys.readouterr().err
    bad.write_text("epochz = 3\n")
    assert main(["train", str(bad)]) == 2
    assert "epochz" in capsys.readouterr().err


def test_inspect(trained, capsys):
    assert main(["inspect", str(trained["r2cs_net"])]) == 0
    out = capsys.readouterr().out
    assert "recurrent gates:" in out and "variant: r2cs_net" in out
    values = int(out.split("tensor table: ")[1].split()[2])
    assert sum(a.size for a in parse(trained["r2cs_net"].read_bytes())[1].values()) == values
    rows = [l.split() for l in out.split("tensor table: ")[1].splitlines()[1:] if l.startswith("  ")]
    total = int(out.split("total parameters: ")[1].split()[0])
    assert total == sum(int(r[-1]) for r in rows if r[1] == "param")
    assert total == load_model(trained["r2cs_net"]).parameter_count()
    assert sum(int(r[-1]) for r in rows) == values
    assert len([l for l in out.splitlines() if l[:5].strip().isdigit()]) == 21
    assert main(["inspect", str(trained["rcs"])]) == 0
    assert "recurrent gates:" not in capsys.readouterr().out


def test_inspect_errors(tmp_path, trained, capsys):
    assert main(["inspect", str(tmp_path / "missing.r2cs")]) == 2
    assert "not found" in capsys.readouterr().err
    bad = tmp_path / "bad.r2cs"
    bad.write_bytes(trained["rcs"].read_bytes()[:200])
    assert main(["inspect", str(bad)]) == 2
    assert "offset" in capsys.readouterr().err


def test_reconstruct_writes_outputs(trained, tmp_path, capsys):
    img = trained["data"] / "img00.png"
    out = tmp_path / "rec"
    assert main(["reconstruct", str(trained["r2cs_net"]), str(img), "--out", str(out), "--dump-latent"]) == 0
    assert "PSNR" in capsys.readouterr().out
    rec = load_image(out / "img00_recon.png")
    assert rec.shape == (16, 16, 1)
    assert sorted(p.name for p in out.glob("img00_latent_step*.png")) == [f"img00_latent_step{i}.png" for i in range(3)]


def test_reconstruct_pad(trained, tmp_path, capsys):
    odd = tmp_path / "odd.png"
    save_image(odd, np.random.default_rng(0).random((14, 15)))
    assert main(["reconstruct", str(trained["rcs"]), str(odd), "--out", str(tmp_path)]) == 2
    assert "pad" in capsys.readouterr().err
    assert main(["reconstruct", str(trained["rcs"]), str(odd), "--out", str(tmp_path), "--pad", "reflect"]) == 0
    assert load_image(tmp_path / "odd_recon.png").shape == (14, 15, 1)


def test_mask_swap_outputs_match(trained):
    bundle = load_model(trained["r2cs_net"])
    x = np.stack([load_image(trained["data"] / f"img0{i}.png") for i in range(4)])
    ref = reconstruct_images(bundle, x).data
    swapped = reconstruct_images(bundle, x, sensor_mask=build_mask("identity", bundle.cfg)).data
    assert np.abs(ref - swapped).mean() < 1e-4


def test_evaluate_cli(trained, tmp_path, capsys):
    out = tmp_path / "rep.csv"
    argv = ["evaluate", str(trained["r2cs_net"]), str(trained["data"]), "--sigmas", "0", "--out", str(out)]
    assert main(argv) == 0
    rows = out.read_text().splitlines()
    assert rows[0] == "name,sigma,steps,psnr_db,ssim"
    assert len(rows) == 1 + 8 and {r.split(",")[1] for r in rows[1:]} == {"0"}
    first = out.read_text()
    assert main(argv) == 0
    assert out.read_text() == first
    capsys.readouterr()
    assert main(["evaluate", str(trained["r2cs_net"]), str(trained["data"]), "--sigmas", "0,0.1",
                 "--steps-list", "1,2", "--patch", "16"]) == 0
    text = capsys.readouterr().out
    assert text.count("\n") > 4 * 8
    assert main(["evaluate", str(tmp_path / "nope.r2cs"), str(trained["data"])]) == 2
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["evaluate", str(trained["rcs"]), str(empty)]) == 2


def test_gradcheck_cli_fault(capsys):
    assert main(["gradcheck", "--inject-fault"]) == 1
    out = capsys.readouterr().out
    assert "broken_square (fixture)" in out and "FAIL" in out
