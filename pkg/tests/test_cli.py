import json
import subprocess
import sys

import numpy as np
import pytest

from dynflow.cli import main, resolve_config
from dynflow.rendering import load_png

SMALL = ["--set", "synth.width=24", "--set", "synth.height=24", "--set", "synth.focal=43",
         "--set", "synth.frame_count=4", "--set", "synth.lat_steps=6", "--set", "synth.lon_steps=10"]
TINY = ["--set", "field.width=8", "--set", "field.depth=3", "--set", "field.skip=1", "--set", "field.color_width=8",
        "--set", "field.point_bands=2", "--set", "field.time_bands=2", "--set", "field.code_dim=2"]
QUICK = ["--set", "schedule.n_init=2", "--set", "schedule.n_anneal=2", "--set", "schedule.n_final=1",
         "--set", "schedule.rays=16", "--set", "schedule.n_coarse=4", "--set", "schedule.n_fine=4",
         "--set", "schedule.n_pairs=16", "--set", "schedule.n_free=16", "--set", "schedule.n_moco=16",
         "--set", "schedule.pretrain_iters=2", "--set", "schedule.pretrain_views=2",
         "--set", "schedule.pretrain_rays=16", "--set", "schedule.log_every=1"]
FAST_RENDER = ["--set", "render.n_coarse=4", "--set", "render.n_fine=4",
               "--set", "eval.n_coarse=4", "--set", "eval.n_fine=4", "--set", "eval.patch=16"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["synth", "--out", str(out), *SMALL]) == 0
    return out


@pytest.fixture(scope="module")
def trained(data):
    out = data.parent / "train"
    assert main(["train", "--data", str(data), "--out", str(out), *TINY, *QUICK]) == 0
    return out


class TestConfig:
    def test_overrides_parse_json_values(self):
        cfg = resolve_config(None, ["schedule.n_init=5", "render.background=[0,0,0]", "synth.fps=24.5"], 3)
        assert cfg["schedule"]["n_init"] == 5
        assert cfg["render"]["background"] == [0, 0, 0]
        assert cfg["synth"]["fps"] == 24.5
        assert cfg["seed"] == 3

    def test_config_file(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"eval": {"kappa": 0.2}}))
        assert resolve_config(str(p), [], None)["eval"]["kappa"] == 0.2


class TestExitCodes:
    def test_help_via_module(self):
        r = subprocess.run([sys.executable, "-m", "dynflow", "--help"], capture_output=True, text=True)
        assert r.returncode == 0 and "synth" in r.stdout

    @pytest.mark.parametrize("argv", [
        [],
        ["bogus"],
        ["synth"],
        ["train", "--dry-run", "--set", "schedule.nope=1"],
        ["train", "--dry-run", "--set", "nosection.x=1"],
        ["train", "--dry-run", "--set", "schedule.n_init=0"],
        ["train", "--dry-run", "--set", "field.preset=huge"],
        ["train", "--dry-run", "--set", "novalue"],
    ])
    def test_usage_errors_exit_one(self, argv, capsys):
        try:
            code = main(argv)
        except SystemExit as exc:
            code = exc.code
        assert code == 1

    def test_missing_dataset_exits_two(self, tmp_path):
        assert main(["eval", "--data", str(tmp_path / "nope"), "--oracle", "--out", str(tmp_path / "o")]) == 2

    def test_missing_eval_split(self, tmp_path):
        out = tmp_path / "d"
        assert main(["synth", "--out", str(out), *SMALL, "--set", "synth.eval_azimuths_deg=[]"]) == 0
        assert main(["eval", "--data", str(out), "--oracle", "--out", str(tmp_path / "e")]) != 0

    def test_dry_run(self, capsys):
        assert main(["train", "--dry-run", "--set", "schedule.n_init=7"]) == 0
        printed = json.loads(capsys.readouterr().out)
        assert printed["schedule"]["n_init"] == 7


class TestSubcommands:
    def test_synth_deterministic(self, data, tmp_path):
        again = tmp_path / "again"
        assert main(["synth", "--out", str(again), *SMALL]) == 0
        for name in ("frames/0003.png", "masks/0001.png", "eval/frames/0002.png"):
            assert (data / name).read_bytes() == (again / name).read_bytes()
        assert (data / "provenance.json").exists()
        assert json.loads((data / "config.json").read_text())["synth"]["width"] == 24

    def test_train_outputs(self, trained):
        lines = (trained / "metrics.jsonl").read_text().splitlines()
        stages = [json.loads(l)["stage"] for l in lines]
        assert stages.count("pretrain") == 2 and stages.count("init") == 2 and stages.count("joint") == 3
        for name in ("init.npz", "final.npz", "config.json", "provenance.json"):
            assert (trained / name).exists()

    def test_resume_appends(self, data, trained, tmp_path):
        out = tmp_path / "resumed"
        assert main(["train", "--data", str(data), "--out", str(out), "--resume", str(trained / "init.npz"),
                     *TINY, *QUICK]) == 0
        stages = [json.loads(l)["stage"] for l in (out / "metrics.jsonl").read_text().splitlines()]
        assert stages == ["joint"] * 3

    def test_render_orbit(self, data, trained, tmp_path):
        out = tmp_path / "orbit"
        assert main(["render", "--data", str(data), "--checkpoint", str(trained / "final.npz"), "--out", str(out),
                     "--set", "render.camera=orbit", *FAST_RENDER, *SMALL]) == 0
        pngs = sorted(p.name for p in out.glob("*.png"))
        assert pngs == [f"orbit_{j:03d}_f000.png" for j in range(8)]
        assert load_png(out / pngs[0]).shape == (24, 24, 3)

    def test_render_bad_frame(self, data, trained, tmp_path):
        assert main(["render", "--data", str(data), "--checkpoint", str(trained / "final.npz"),
                     "--out", str(tmp_path), "--set", "render.frame=99"]) == 1

    def test_eval_checkpoint(self, data, trained, tmp_path, capsys):
        out = tmp_path / "ev"
        assert main(["eval", "--data", str(data), "--checkpoint", str(trained / "final.npz"), "--out", str(out),
                     *FAST_RENDER]) == 0
        report = json.loads((out / "report.json").read_text())
        assert set(report["means"]) == {"psnr", "oks", "iou"}
        assert (out / "contact_sheet.png").exists()

    def test_eval_oracle(self, data, tmp_path, capsys):
        assert main(["eval", "--data", str(data), "--oracle", "--out", str(tmp_path / "o"),
                     "--set", "eval.patch=16"]) == 0
        means = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert means["iou"] == 1.0 and means["oks"] == 1.0

    def test_study_table(self, tmp_path, capsys):
        assert main(["study", "--out", str(tmp_path), "--set", "study.size=96",
                     "--set", "study.translations=[2,4,8]", "--set", "study.rotations=[5,10]"]) == 0
        table = capsys.readouterr().out.strip().splitlines()
        assert table[0].split() == ["transform", "amount", "psnr_db", "reference_db"]
        assert len(table) == 6
        rows = json.loads((tmp_path / "study.json").read_text())
        vals = [r["psnr"] for r in rows if r["kind"] == "translation"]
        assert vals == sorted(vals, reverse=True)

    def test_study_from_image(self, tmp_path, capsys):
        from dynflow.rendering import save_png
        img = np.full((40, 40, 3), 0.8)
        img[10:30, 15:25] = 0.1
        save_png(img, tmp_path / "x.png")
        assert main(["study", "--image", str(tmp_path / "x.png"), "--set", "study.translations=[1,2]",
                     "--set", "study.rotations=[]"]) == 0
