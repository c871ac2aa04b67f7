import json

import numpy as np
import pytest

from hoisplat.cli import main


@pytest.fixture(scope="module")
def bundles(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    rc = main(["synth", "--out", str(root), "--seed", "3", "--image-size", "48"])
    assert rc == 0
    return root


def test_synth_writes_both_bundles(bundles):
    assert (bundles / "perturbed" / "manifest.json").exists()
    assert (bundles / "gt" / "manifest.json").exists()


def test_optimize_render_convert_evaluate(bundles, tmp_path):
    out = tmp_path / "opt"
    rc = main([
        "optimize", str(bundles / "perturbed"), "--out", str(out),
        "--steps", "2", "--seed", "0", "--guidance", "mock", "--snapshot-every", "1",
    ])
    assert rc == 0
    assert (out / "bundle" / "manifest.json").exists()
    assert (out / "trace.csv").exists()
    snaps = list((out / "snapshots").glob("*.png"))
    assert len(snaps) == 2

    rdir = tmp_path / "renders"
    assert main(["render", str(out / "bundle"), "--out", str(rdir)]) == 0
    for name in ("rgb.png", "alpha_human.png", "alpha_object.png", "depth.png"):
        assert (rdir / name).exists()

    cdir = tmp_path / "conv"
    assert main(["convert", str(out / "bundle"), "--out", str(cdir)]) == 0
    assert (cdir / "human.obj").exists() and (cdir / "object.ply").exists()

    report = tmp_path / "report.json"
    csv_path = tmp_path / "agg.csv"
    rc = main([
        "evaluate", str(out / "bundle"), str(bundles / "gt"),
        "--out", str(report), "--csv", str(csv_path),
    ])
    assert rc == 0
    doc = json.loads(report.read_text())
    assert set(doc) == {"cd_human_cm", "cd_object_cm", "contact_p", "contact_r", "contact_f1", "collision"}
    assert all(np.isfinite(v) for v in doc.values())
    header = csv_path.read_text().splitlines()[0]
    assert header.startswith("sample,cd_human_cm,cd_object_cm")


def test_null_guidance_runs(bundles, tmp_path):
    rc = main([
        "optimize", str(bundles / "perturbed"), "--out", str(tmp_path / "o"),
        "--steps", "1", "--guidance", "null",
    ])
    assert rc == 0


def test_validation_exit_code(tmp_path):
    assert main(["optimize", str(tmp_path / "nope"), "--out", str(tmp_path / "x")]) == 2


def test_guidance_unreachable_exit_code(bundles, tmp_path):
    rc = main([
        "optimize", str(bundles / "perturbed"), "--out", str(tmp_path / "x"),
        "--steps", "1", "--guidance", "http://127.0.0.1:9",
    ])
    assert rc == 4


def test_gradcheck_smoke():
    assert main(["gradcheck", "--scenes", "1", "--stride", "8"]) == 0


def test_render_bad_view_spec(bundles, tmp_path):
    assert main(["render", str(bundles / "gt"), "--out", str(tmp_path / "r"), "--view", "wat"]) == 2
