import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from bgdiff.cli import build_parser, main
from bgdiff.data import read_image, read_mask

SMOKE = ["--preset", "smoke"]


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Corpus plus a three-stage chain of tiny checkpoints built through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth-data", "--out", str(root / "data")]) == 0
    m = str(root / "data" / "manifest.json")
    assert main(["train", *SMOKE, "--stage", "backbone", "--manifest", m, "--out", str(root / "bb"),
                 "--steps", "3"]) == 0
    assert main(["train", *SMOKE, "--stage", "cg_only", "--manifest", m, "--out", str(root / "cg"),
                 "--init", str(root / "bb" / "checkpoint.bgd"), "--steps", "3"]) == 0
    assert main(["train", *SMOKE, "--stage", "cg_pg", "--manifest", m, "--out", str(root / "pg"),
                 "--init", str(root / "cg" / "checkpoint.bgd"), "--steps", "3"]) == 0
    return root


def _record_paths(root):
    rec = json.loads((root / "data" / "manifest.json").read_text())["records"][0]
    return str(root / "data" / rec["image_path"]), str(root / "data" / rec["mask_path"])


def test_every_subcommand_help_lists_its_flags(capsys):
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    assert set(sub.choices) == {"synth-data", "train", "generate", "evaluate", "perturb-preview", "reproduce"}
    for name, sp in sub.choices.items():
        with pytest.raises(SystemExit) as info:
            main([name, "--help"])
        assert info.value.code == 0
        text = capsys.readouterr().out
        for action in sp._actions:
            for flag in action.option_strings:
                assert flag in text, (name, flag)


def test_synth_data_default_config(tmp_path):
    assert main(["synth-data", "--out", str(tmp_path)]) == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert len(manifest["categories"]) == 3
    assert len(manifest["records"]) == 600
    echoed = json.loads((tmp_path / "config.json").read_text())
    assert echoed["dataset"]["records_per_category"] == 200


def test_synth_data_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert main(["synth-data", "--out", str(tmp_path / name), "--data-seed", "7",
                     "--records-per-category", "12"]) == 0
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main(["synth-data", "--out", str(tmp_path / "x"), "--num-categories", "1"]) == 2
    assert "num_categories" in capsys.readouterr().err
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"training": {"epochs": 3}}))
    assert main(["synth-data", "--out", str(tmp_path / "y"), "--config", str(cfg)]) == 2
    cfg.write_text(json.dumps({"colour": 1}))
    assert main(["synth-data", "--out", str(tmp_path / "y"), "--config", str(cfg)]) == 2
    with pytest.raises(SystemExit) as info:
        main(["reproduce", "table_nine"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        main(["train", "--stage", "everything", "--manifest", "m", "--out", "o"])
    assert info.value.code == 2


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 5, "dataset": {"records_per_category": 10, "seed": 2}}))
    assert main(["synth-data", "--out", str(tmp_path / "d"), "--config", str(cfg), "--seed", "9",
                 "--data-seed", "4"]) == 0
    echoed = json.loads((tmp_path / "d" / "config.json").read_text())
    assert echoed["seed"] == 9
    assert echoed["dataset"] == {**echoed["dataset"], "records_per_category": 10, "seed": 4}


def test_train_stage_order_error_exits_2(workspace, tmp_path):
    m = str(workspace / "data" / "manifest.json")
    assert main(["train", *SMOKE, "--stage", "cg_pg", "--manifest", m, "--out", str(tmp_path),
                 "--init", str(workspace / "bb" / "checkpoint.bgd"), "--steps", "2"]) == 2


def test_runtime_failure_exits_1(workspace, tmp_path):
    broken = tmp_path / "broken.bgd"
    broken.write_bytes(b"not an archive")
    m = str(workspace / "data" / "manifest.json")
    assert main(["train", *SMOKE, "--stage", "cg_only", "--manifest", m, "--out", str(tmp_path / "o"),
                 "--init", str(broken)]) == 1


def test_train_outputs_and_provenance(workspace):
    out = workspace / "cg"
    assert {"checkpoint.bgd", "config.json", "invocation.json", "train_log.jsonl"} <= {p.name for p in out.iterdir()}
    inv = json.loads((out / "invocation.json").read_text())
    assert inv["train_config"]["stage"] == "cg_only"
    assert inv["train_config"]["steps"] == 3


def test_generate_single_product(workspace, tmp_path):
    img, mask = _record_paths(workspace)
    out = tmp_path / "g"
    assert main(["generate", *SMOKE, "--checkpoint", str(workspace / "pg" / "checkpoint.bgd"), "--out", str(out),
                 "--product", img, "--mask", mask, "--category", "laptop", "--reference", img,
                 "--reference-mask", mask, "--pg", "on", "--steps", "3"]) == 0
    prov = json.loads((out / "provenance.json").read_text())
    entry = prov["requests"][0]
    assert entry["status"] == "ok" and entry["use_pg"] is True and entry["category_id"] == 0
    generated = read_image(out / entry["file"])
    product = read_image(img)
    m = read_mask(mask).astype(bool)
    np.testing.assert_array_equal(generated[m], product[m])


def test_generate_requires_reference_when_branch_requested(workspace, tmp_path):
    img, mask = _record_paths(workspace)
    base = ["generate", *SMOKE, "--out", str(tmp_path), "--product", img, "--mask", mask, "--category", "0",
            "--pg", "on"]
    assert main([*base, "--checkpoint", str(workspace / "pg" / "checkpoint.bgd")]) == 2
    assert main([*base, "--reference", img, "--checkpoint", str(workspace / "cg" / "checkpoint.bgd")]) == 2
    assert main(["generate", "--checkpoint", str(workspace / "pg" / "checkpoint.bgd"), "--out", str(tmp_path)]) == 2


def test_generate_split_then_evaluate(workspace, tmp_path):
    m = str(workspace / "data" / "manifest.json")
    before = tree_digest(workspace / "data")
    assert main(["generate", *SMOKE, "--checkpoint", str(workspace / "pg" / "checkpoint.bgd"), "--out",
                 str(tmp_path / "pairs"), "--manifest", m, "--split", "eval_pairs", "--steps", "2", "--batched"]) == 0
    ext = str(tmp_path / "extractor.pt")
    for metric in ("sim", "copypaste", "cluster"):
        report = tmp_path / f"{metric}.json"
        assert main(["evaluate", *SMOKE, "--metric", metric, "--manifest", m, "--generated-dir",
                     str(tmp_path / "pairs"), "--extractor", ext, "--out-report", str(report)]) == 0
        data = json.loads(report.read_text())
        assert data["metric"] == metric
    assert -100 <= json.loads((tmp_path / "sim.json").read_text())["similarity"] <= 100
    assert main(["evaluate", *SMOKE, "--metric", "fid", "--manifest", m, "--generated-dir", str(tmp_path / "pairs"),
                 "--extractor", ext, "--out-report", str(tmp_path / "fid.json")]) == 0
    assert json.loads((tmp_path / "fid.json").read_text())["fid"] >= 0
    # too few images for the feature dimension is a usage error
    assert main(["generate", *SMOKE, "--checkpoint", str(workspace / "cg" / "checkpoint.bgd"), "--out",
                 str(tmp_path / "few"), "--manifest", m, "--limit", "10", "--steps", "2"]) == 0
    assert main(["evaluate", *SMOKE, "--metric", "fid", "--manifest", m, "--generated-dir", str(tmp_path / "few"),
                 "--extractor", ext, "--out-report", str(tmp_path / "fid_few.json")]) == 2
    assert tree_digest(workspace / "data") == before


def test_evaluate_ablation_directory_layout(workspace, tmp_path):
    m = str(workspace / "data" / "manifest.json")
    ck = str(workspace / "pg" / "checkpoint.bgd")
    for row, extra in (("b", ["--pg", "off"]), ("c", ["--no-reference-init"]), ("d", [])):
        assert main(["generate", *SMOKE, "--checkpoint", ck, "--out", str(tmp_path / "rows" / row), "--manifest", m,
                     "--split", "eval_pairs", "--steps", "2", "--batched", *extra]) == 0
    report = tmp_path / "ablation.json"
    assert main(["evaluate", *SMOKE, "--metric", "ablation", "--manifest", m, "--generated-dir",
                 str(tmp_path / "rows"), "--out-report", str(report)]) == 0
    data = json.loads(report.read_text())
    assert data["missing"] == ["a"] and data["partial"] is True
    assert set(data["rows"]) == {"b", "c", "d"}
    assert set(data["checks"]) == {"sim_d_gt_b", "sim_d_gt_c"}


def test_perturb_preview_writes_strip(workspace, tmp_path):
    out = tmp_path / "preview.png"
    assert main(["perturb-preview", "--manifest", str(workspace / "data" / "manifest.json"), "--out", str(out),
                 "--seed", "3"]) == 0
    strip = read_image(out)
    assert strip.shape == (32, 32 * 5, 3)
    meta = json.loads(out.with_suffix(".json").read_text())
    assert 0.75 <= meta["sigma"] <= 0.95
    assert len(meta["tiles"]) == 5
