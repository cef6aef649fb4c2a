import hashlib

import pytest

from dwshare import layers as L
from dwshare.cli import main
from dwshare.config import RunConfig, parse_text
from dwshare.errors import ConfigError

TINY = """
# tiny network and data so every command runs in seconds
seed = 3
model.widths = 4, 6, 8
model.blocks = 1, 1, 1
model.stem_width = 4
model.input_resolution = 8
data.base = shapes
data.domains = bars, dots
data.shapes.kind = polygons
data.bars.kind = stripes
data.dots.kind = blobs
optim.pretrain.epochs = 2
optim.pretrain.decay_epochs = 1
optim.finetune.epochs = 2
optim.finetune.decay_epochs = 1
optim.gate.epochs = 2
optim.gate.decay_epochs = 1
"""
for _name in ("shapes", "bars", "dots"):
    TINY += f"data.{_name}.classes = 4\ndata.{_name}.train = 32\ndata.{_name}.test = 16\ndata.{_name}.image_size = 8\n"


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(TINY)
    return str(path)


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_config_parsing():
    c = RunConfig(parse_text("seed = 5  # inline\n# whole line\nmodel.preset = full\noptim.gate.epochs = 4\n"
                             "optim.gate.decay_epochs = 2\n"))
    assert c.seed == 5
    assert c.model_config().macro_blocks == ((96, 4), (192, 4), (384, 4))
    assert c.optim("gate").epochs == 4 and c.optim("pretrain").epochs == 20
    with pytest.raises(ConfigError, match="unknown key"):
        parse_text("model.depth = 3\n")
    with pytest.raises(ConfigError):
        RunConfig(parse_text("optim.pretrain.epochs = ten\n"))
    with pytest.raises(ConfigError):
        RunConfig(parse_text("model.sharing_mode = everything\n"))


def test_full_lifecycle(cfg, tmp_path, capsys):
    out = tmp_path / "runs"
    assert main(["pretrain", "--config", cfg, "--out", str(out / "base"), "--serial", "-q"]) == 0
    base = out / "base" / "bundle"
    before = _digest(base)
    assert main(["add-domain", "--config", cfg, "--bundle", str(base), "--domain", "bars",
                 "--out", str(out / "bars"), "-q"]) == 0
    assert _digest(base) == before  # input bundle untouched
    assert main(["add-domain", "--config", cfg, "--bundle", str(out / "bars" / "bundle"), "--domain", "dots",
                 "--out", str(out / "dots"), "-q"]) == 0
    assert main(["train-gate", "--config", cfg, "--bundle", str(out / "dots" / "bundle"), "--domain", "bars",
                 "--region", "late", "--out", str(out / "gate"), "-q"]) == 0
    assert (out / "gate" / "bundle" / "gates").is_dir()
    header = (out / "gate" / "metrics.csv").read_text().splitlines()[0]
    assert header == "epoch,split,loss,accuracy"
    assert (out / "gate" / "config.resolved").is_file()
    capsys.readouterr()
    assert main(["eval", "--config", cfg, "--bundle", str(out / "gate" / "bundle"), "--domain", "bars", "-q"]) == 0
    assert capsys.readouterr().out.startswith("bars error ")
    path = tmp_path / "score.cfg"
    path.write_text(TINY + "score.baseline.bars = 0.5\nscore.baseline.dots = 0.5\n")
    assert main(["score", "--config", str(path), "--bundle", str(out / "gate" / "bundle"),
                 "--out", str(out / "score"), "-q"]) == 0
    assert (out / "score" / "score.csv").read_text().startswith("domain,error,e_max,alpha,contribution")


def test_pretrain_is_byte_reproducible(cfg, tmp_path):
    for name in ("a", "b"):
        assert main(["pretrain", "--config", cfg, "--out", str(tmp_path / name), "--serial", "-q"]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert _digest(tmp_path / "a" / "bundle") == _digest(tmp_path / "b" / "bundle")


def test_seed_flag_overrides(cfg, tmp_path):
    main(["pretrain", "--config", cfg, "--out", str(tmp_path / "a"), "-q"])
    main(["pretrain", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "9", "-q"])
    assert "seed = 9" in (tmp_path / "b" / "config.resolved").read_text()
    assert _digest(tmp_path / "a" / "bundle") != _digest(tmp_path / "b" / "bundle")


def test_score_all_perfect(tmp_path, capsys):
    path = tmp_path / "s.cfg"
    path.write_text("".join(f"score.error.d{i} = 0\nscore.emax.d{i} = 0.5\n" for i in range(10)))
    assert main(["score", "--config", str(path), "-q"]) == 0
    assert capsys.readouterr().out.strip().endswith("score 10000.00")


def test_params_report(tmp_path, capsys):
    path = tmp_path / "p.cfg"
    path.write_text("model.preset = full\ndata.base = imagenet\ndata.imagenet.classes = 1000\n")
    assert main(["params", "--config", str(path), "--out", str(tmp_path / "p"), "-q"]) == 0
    text = capsys.readouterr().out
    assert "1x1 conv share" in text and "next domain adds" in text
    assert (tmp_path / "p" / "params.csv").read_text().startswith("layer,kind,shape,count,owner")


def test_exit_codes(cfg, tmp_path, capsys, monkeypatch):
    bad = tmp_path / "bad.cfg"
    bad.write_text("no.such.key = 1\n")
    assert main(["params", "--config", str(bad), "-q"]) == 2
    assert main(["params", "-q"]) == 2
    assert main(["add-domain", "--config", cfg, "-q"]) == 2
    missing = tmp_path / "m.cfg"
    missing.write_text("data.base = x\ndata.x.manifest = nowhere/manifest.json\n")
    assert main(["pretrain", "--config", str(missing), "--out", str(tmp_path / "o"), "-q"]) == 3
    assert main(["eval", "--config", cfg, "--bundle", str(tmp_path / "nothing"), "-q"]) == 3
    err = capsys.readouterr().err
    assert all(line.startswith("error: ") for line in err.strip().splitlines())

    orig = L.Pointwise.backward

    def flipped(self, grad, param_grads=True):
        dx, g = orig(self, grad, param_grads)
        return -dx, g

    monkeypatch.setattr(L.Pointwise, "backward", flipped)
    assert main(["gradcheck", "-q"]) == 4


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "-q"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 18 and all(line.startswith("PASS") for line in lines)
