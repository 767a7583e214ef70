import ast
import json
import sys
from pathlib import Path

import cv2
import numpy as np
import pytest

import firesmoke.cli
from firesmoke.boxmetrics import BBox, LabeledBox, write_records
from firesmoke.cli import main
from firesmoke.runconfig import SCHEMA, RunConfig

TINY = ["--input-size", "64x64", "--backbone-widths", "8,8,8,8", "--head-channels", "8"]
TRAIN = TINY + ["--steps", "3", "--batch-size", "2", "--warmup-steps", "1"]
SYNTH = ["--count", "4", "--image-size", "64x80"]


def files(directory: Path) -> dict[str, bytes]:
    return {str(p.relative_to(directory)): p.read_bytes() for p in sorted(directory.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), *SYNTH]) == 0
    manifest = root / "data" / "synth.manifest"
    assert main(["train", "--manifest", str(manifest), "--out", str(root / "train"), *TRAIN]) == 0
    return manifest, root / "train" / "checkpoint.safetensors"


def test_cli_imports_only_stdlib_and_package():
    tree = ast.parse(Path(firesmoke.cli.__file__).read_text())
    for node in ast.walk(tree):
        if isinstance(node, ast.Import):
            names = [a.name for a in node.names]
        elif isinstance(node, ast.ImportFrom):
            if node.level:
                continue
            names = [node.module]
        else:
            continue
        for name in names:
            top = name.split(".")[0]
            assert top in sys.stdlib_module_names or top == "firesmoke", name


class TestConfig:
    def test_precedence(self):
        assert RunConfig.build()["steps"] == SCHEMA["steps"].default
        assert RunConfig.build({"steps": 7})["steps"] == 7
        cfg = RunConfig.build({"steps": 7}, {"steps": "9"})
        assert cfg["steps"] == 9 and cfg.explicit == {"steps"}

    def test_precedence_through_cli(self, tmp_path, capsys):
        conf = tmp_path / "run.conf"
        conf.write_text("# widths\nbackbone_widths = 8, 8, 8, 8\n")

        def stats(*extra):
            assert main(["stats", "--out", str(tmp_path / "o"), *extra]) == 0
            return capsys.readouterr().out

        cli_only = stats("--backbone-widths", "16,16,16,16")
        assert stats("--config", str(conf), "--backbone-widths", "16,16,16,16") == cli_only
        assert stats("--config", str(conf)) != cli_only

    @pytest.mark.parametrize("text, fragment", [
        ("steps 10\n", ":1:"),
        ("steps = ten\n", ":1:"),
        ("\nlearning_rate = 0.1\n", ":2:"),
    ])
    def test_bad_config_file(self, tmp_path, capsys, text, fragment):
        conf = tmp_path / "bad.conf"
        conf.write_text(text)
        assert main(["stats", "--config", str(conf), "--out", str(tmp_path)]) == 2
        assert f"bad.conf{fragment}" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert main(["stats", "--config", str(tmp_path / "nope.conf"), "--out", str(tmp_path)]) == 2

    def test_bad_override(self, tmp_path, capsys):
        assert main(["stats", "--steps", "x", "--out", str(tmp_path)]) == 2
        assert "steps" in capsys.readouterr().err

    def test_usage_errors(self, tmp_path):
        assert main([]) == 2
        assert main(["train", "--out", str(tmp_path)]) == 2
        assert main(["stats", "--no-such-flag"]) == 2
        assert main(["--version"]) == 0


class TestStats:
    def test_output(self, tmp_path, capsys):
        assert main(["stats", "--out", str(tmp_path), "--stats-sizes", "256x256,512x320"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0].startswith("parameters") and lines[0].endswith(" M)")
        assert lines[1].startswith("mult-adds 256x256") and lines[2].startswith("mult-adds 512x320")
        raw = [int(line.split()[2 if line.startswith("mult") else 1]) for line in lines]
        assert raw[2] == pytest.approx(raw[1] * 2.5, rel=1e-9)
        assert (tmp_path / "stats.txt").read_text() == "\n".join(lines) + "\n"
        assert (tmp_path / "run.json").exists()

    def test_indivisible_size(self, tmp_path):
        assert main(["stats", "--out", str(tmp_path), "--stats-sizes", "250x250"]) == 2


class TestBI:
    def _store(self, path, boxes):
        write_records({"img": boxes}, path)
        return str(path)

    def _run(self, tmp_path, dets, gts, *extra):
        code = main(["bi", "--detections", dets, "--ground-truth", gts, "--out", str(tmp_path / "o"), *extra])
        if code:
            return code, None
        return code, json.loads((tmp_path / "o" / "bi.jsonl").read_text())["avg_bi"]

    def test_identical_store(self, tmp_path):
        boxes = [LabeledBox(BBox(10, 10, 4, 6), "fire", 0.9, "img"), LabeledBox(BBox(30, 30, 8, 8), "smoke", 0.5, "img")]
        store = self._store(tmp_path / "s.txt", boxes)
        assert self._run(tmp_path, store, store) == (0, 1.0)

    def test_area_only_weights_on_disjoint_equal_areas(self, tmp_path):
        dets = self._store(tmp_path / "d.txt", [LabeledBox(BBox(0, 0, 2, 8), "fire", 0.9, "img")])
        gts = self._store(tmp_path / "g.txt", [LabeledBox(BBox(90, 90, 4, 4), "fire", None, "img")])
        assert self._run(tmp_path, dets, gts, "--w1", "1", "--w2", "0", "--pairing", "index") == (0, 1.0)

    def test_bad_weights(self, tmp_path):
        store = self._store(tmp_path / "s.txt", [])
        assert self._run(tmp_path, store, store, "--w1", "0.7", "--w2", "0.7")[0] == 2
        assert self._run(tmp_path, store, store, "--w1", "-1", "--w2", "2")[0] == 2

    def test_missing_store(self, tmp_path):
        assert self._run(tmp_path, str(tmp_path / "a"), str(tmp_path / "b"))[0] == 2

    def test_malformed_store(self, tmp_path):
        bad = tmp_path / "bad.txt"
        bad.write_text("img,fire,0.9,1,2\n")
        assert self._run(tmp_path, str(bad), str(bad))[0] == 2


class TestPipeline:
    def test_synth_train_eval_bytes(self, tmp_path, trained):
        manifest, _ = trained
        for run in ("a", "b"):
            out = tmp_path / run
            assert main(["synth", "--out", str(out / "data"), *SYNTH]) == 0
            assert main(["train", "--manifest", str(out / "data" / "synth.manifest"), "--out", str(out / "train"),
                         *TRAIN]) == 0
            assert main(["eval", "--checkpoint", str(out / "train" / "checkpoint.safetensors"),
                         "--manifest", str(manifest), "--out", str(out / "eval")]) == 0
        a, b = files(tmp_path / "a"), files(tmp_path / "b")
        timing = [k for k in a if k.endswith("timing.json")]
        assert len(timing) == 1
        for k in timing:
            a.pop(k), b.pop(k)
        assert a.keys() == b.keys() and a == b
        assert any(k.endswith("detections.txt") for k in a) and "train/loss.csv" in a

    def test_seed_changes_training(self, tmp_path, trained):
        manifest, ckpt = trained
        assert main(["train", "--manifest", str(manifest), "--out", str(tmp_path), "--seed", "1", *TRAIN]) == 0
        assert (tmp_path / "checkpoint.safetensors").read_bytes() != ckpt.read_bytes()

    def test_eval_rejects_mismatched_architecture(self, tmp_path, trained):
        manifest, ckpt = trained
        assert main(["eval", "--checkpoint", str(ckpt), "--manifest", str(manifest), "--out", str(tmp_path),
                     "--head-channels", "16"]) == 2

    def test_eval_missing_checkpoint(self, tmp_path, trained):
        manifest, _ = trained
        assert main(["eval", "--checkpoint", str(tmp_path / "x"), "--manifest", str(manifest),
                     "--out", str(tmp_path)]) == 2

    def test_train_divergence_exit_code(self, tmp_path, trained, capsys):
        manifest, _ = trained
        code = main(["train", "--manifest", str(manifest), "--out", str(tmp_path), *TINY, "--steps", "40",
                     "--lr", "1e8", "--grad-clip", "0", "--warmup-steps", "0"])
        assert code == 3 and "numeric" in capsys.readouterr().err

    def test_cam(self, tmp_path, trained):
        manifest, ckpt = trained
        image = next(manifest.parent.glob("**/*.png"))
        assert main(["cam", "--checkpoint", str(ckpt), str(image), "--overlay", "--out", str(tmp_path)]) == 0
        for name in (f"{image.stem}_fire.png", f"{image.stem}_smoke_overlay.png"):
            assert (tmp_path / name).exists()
        gray = cv2.imread(str(tmp_path / f"{image.stem}_fire.png"), cv2.IMREAD_UNCHANGED)
        assert gray.ndim == 2 and gray.shape == (64, 64)
        assert (tmp_path / "run.json").exists()

    def test_cam_bad_class(self, tmp_path, trained):
        manifest, ckpt = trained
        image = next(manifest.parent.glob("**/*.png"))
        assert main(["cam", "--checkpoint", str(ckpt), str(image), "--classes", "person",
                     "--out", str(tmp_path)]) == 2
        assert main(["cam", "--checkpoint", str(ckpt), str(image), "--level", "5", "--out", str(tmp_path)]) == 2

    def test_ablate(self, tmp_path, capsys):
        args = ["ablate", "--out", str(tmp_path), *TINY, "--steps", "2", "--batch-size", "2",
                "--train-count", "3", "--test-count", "2", "--image-size", "64x64", "--seeds", "0"]
        assert main(args) == 0
        text = capsys.readouterr().out
        assert "baseline" in text and "+ATDH" in text
        (run,) = [p for p in tmp_path.iterdir() if p.is_dir()]
        assert {"ablation.txt", "ablation.jsonl", "run.json"} <= {p.name for p in run.iterdir()}

    def test_ablate_no_seeds(self, tmp_path):
        assert main(["ablate", "--out", str(tmp_path), "--seeds", ""]) == 2

    def test_ablate_train_needs_test(self, tmp_path, trained):
        manifest, _ = trained
        assert main(["ablate", "--out", str(tmp_path), "--train-manifest", str(manifest)]) == 2


class TestIngest:
    def _video(self, path: Path, frames: int):
        writer = cv2.VideoWriter(str(path), cv2.VideoWriter_fourcc(*"MJPG"), 10, (32, 24))
        rng = np.random.default_rng(frames)
        for _ in range(frames):
            writer.write(rng.integers(0, 255, (24, 32, 3), dtype=np.uint8))
        writer.release()

    def test_ingest_bytes_and_split(self, tmp_path, capsys):
        videos = tmp_path / "videos"
        videos.mkdir()
        self._video(videos / "a.avi", 6)
        self._video(videos / "b.avi", 9)
        for run in ("x", "y"):
            assert main(["ingest", str(videos), "--budget", "10", "--out", str(tmp_path / run)]) == 0
        assert files(tmp_path / "x") == files(tmp_path / "y")
        out = capsys.readouterr().out
        assert "10 images" in out and "7 images" in out and "3 images" in out
        assert (tmp_path / "x" / "run.json").exists()

    def test_missing_input(self, tmp_path):
        assert main(["ingest", str(tmp_path / "none.mp4"), "--out", str(tmp_path)]) == 2
