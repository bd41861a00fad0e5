"""
Test Cases for mvad - end-to-end scenarios driven through the command line
"""

from pathlib import Path
from typing import Any, Dict, List

import pandas as pd
import pytest
import yaml

from app import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main


class TestCases:
    """Collection of end-to-end scenarios"""

    __test__ = False

    @staticmethod
    def get_test_cases() -> List[Dict[str, Any]]:
        """Get all scenarios"""
        return [
            TestCases.test_case_1_eval_pipeline(),
            TestCases.test_case_2_detect_single_sample(),
            TestCases.test_case_3_radius_sweep(),
            TestCases.test_case_4_ablation_sweep(),
            TestCases.test_case_5_failure_modes(),
            TestCases.test_case_6_deterministic_pipeline(),
        ]

    @staticmethod
    def test_case_1_eval_pipeline() -> Dict[str, Any]:
        """Test Case 1: evaluation is reproducible"""
        return {
            "id": "TC001",
            "name": "Reproducible evaluation",
            "description": "Evaluate the trained toy model twice into separate directories",
            "steps": [
                ["eval", "--data", "{data}", "--checkpoint", "{checkpoint}", "--bank", "{bank}",
                 "--out", "{out}/eval_a", "--set", "eval.export_maps=true"],
                ["eval", "--data", "{data}", "--checkpoint", "{checkpoint}", "--bank", "{bank}",
                 "--out", "{out}/eval_b"],
            ],
            "expected_outcomes": {
                "exit_codes": [EXIT_OK, EXIT_OK],
                "files": ["eval_a/report.yaml", "eval_a/report.csv", "eval_a/run_config.yaml",
                          "eval_a/maps/00006/view_0.pfm", "eval_a/maps/00006/view_0.png",
                          "eval_b/report.yaml"],
                "identical": [("eval_a/report.yaml", "eval_b/report.yaml")],
            },
        }

    @staticmethod
    def test_case_2_detect_single_sample() -> Dict[str, Any]:
        """Test Case 2: score one sample directory"""
        return {
            "id": "TC002",
            "name": "Single sample detection",
            "description": "Detect on a defective test sample, calibration found next to the dataset",
            "steps": [
                ["detect", "--checkpoint", "{checkpoint}", "--bank", "{bank}",
                 "--sample", "{data}/test/00006", "--out", "{out}/detect"],
            ],
            "expected_outcomes": {
                "exit_codes": [EXIT_OK],
                "files": ["detect/view_0.pfm", "detect/view_2.png", "detect/scores.yaml"],
                "identical": [],
            },
        }

    @staticmethod
    def test_case_3_radius_sweep() -> Dict[str, Any]:
        """Test Case 3: window radius sweep"""
        return {
            "id": "TC003",
            "name": "Radius sweep",
            "description": "Rebuild the bank and re-evaluate for two window radii",
            "steps": [
                ["sweep", "--axis", "radius", "--values", "1", "2", "--data", "{data}",
                 "--checkpoint", "{checkpoint}", "--out", "{out}/sweep_r"],
            ],
            "expected_outcomes": {
                "exit_codes": [EXIT_OK],
                "files": ["sweep_r/sweep_radius.csv", "sweep_r/sweep_radius.txt",
                          "sweep_r/radius_1/report.yaml", "sweep_r/radius_2/bank.bin"],
                "identical": [],
                "table_rows": ("sweep_r/sweep_radius.csv", 2),
            },
        }

    @staticmethod
    def test_case_4_ablation_sweep() -> Dict[str, Any]:
        """Test Case 4: module ablation"""
        return {
            "id": "TC004",
            "name": "Ablation comparison",
            "description": "Train the full model and one without the alignment module",
            "steps": [
                ["sweep", "--axis", "ablation", "--values", "full", "no_mvam", "--data", "{data}",
                 "--out", "{out}/ablation"],
            ],
            "expected_outcomes": {
                "exit_codes": [EXIT_OK],
                "files": ["ablation/sweep_ablation.csv", "ablation/ablation_full/checkpoint.sqlite",
                          "ablation/ablation_no_mvam/report.yaml"],
                "identical": [],
                "table_rows": ("ablation/sweep_ablation.csv", 2),
            },
        }

    @staticmethod
    def test_case_5_failure_modes() -> Dict[str, Any]:
        """Test Case 5: errors map to exit codes"""
        return {
            "id": "TC005",
            "name": "Failure modes",
            "description": "Bad configuration is a usage error, missing inputs are runtime errors",
            "steps": [
                ["eval", "--data", "{data}", "--checkpoint", "{checkpoint}", "--bank", "{bank}",
                 "--out", "{out}/bad", "--set", "score.bogus=1"],
                ["eval", "--data", "{data}", "--checkpoint", "{out}/nope.sqlite", "--bank", "{bank}",
                 "--out", "{out}/bad"],
                ["sweep", "--axis", "ablation", "--values", "no_such_variant", "--data", "{data}",
                 "--out", "{out}/bad"],
                ["detect", "--checkpoint", "{checkpoint}", "--bank", "{bank}",
                 "--sample", "{out}/lonely_sample", "--out", "{out}/bad"],
            ],
            "expected_outcomes": {
                "exit_codes": [EXIT_USAGE, EXIT_RUNTIME, EXIT_USAGE, EXIT_RUNTIME],
                "files": [],
                "identical": [],
            },
        }

    @staticmethod
    def test_case_6_deterministic_pipeline() -> Dict[str, Any]:
        """Test Case 6: deterministic runs are byte-identical"""
        steps = []
        for run in ("det_a", "det_b"):
            root = "{out}/" + run
            steps += [
                ["gen-data", "--out", f"{root}/data", "--deterministic"],
                ["train", "--data", f"{root}/data", "--out", f"{root}/train", "--deterministic"],
                ["build-bank", "--data", f"{root}/data", "--checkpoint", f"{root}/train/checkpoint.sqlite",
                 "--out", f"{root}/bank", "--deterministic"],
                ["eval", "--data", f"{root}/data", "--checkpoint", f"{root}/train/checkpoint.sqlite",
                 "--bank", f"{root}/bank/bank.bin", "--out", f"{root}/eval", "--deterministic"],
            ]
        return {
            "id": "TC006",
            "name": "Deterministic pipeline",
            "description": "gen-data, train, build-bank and eval twice with the same seed",
            "steps": steps,
            "expected_outcomes": {
                "exit_codes": [EXIT_OK] * 8,
                "files": ["det_a/train/checkpoint.sqlite", "det_a/bank/bank.bin", "det_a/eval/report.yaml"],
                "identical": [(f"det_a/{name}", f"det_b/{name}")
                              for name in ("data/calibration.txt", "train/checkpoint.sqlite", "train/losses.csv",
                                           "bank/bank.bin", "eval/report.yaml", "eval/report.csv")],
            },
        }

    @staticmethod
    def smoke_ablation_case() -> Dict[str, Any]:
        """Full-size preset: alignment must pay for itself and training must converge"""
        return {
            "id": "SMOKE",
            "name": "Smoke preset ablation",
            "description": "Default preset, seed 0: full model against the alignment-zeroed model",
            "preset": "smoke",
            "steps": [
                ["gen-data", "--out", "{out}/smoke/data", "--deterministic"],
                ["sweep", "--axis", "ablation", "--values", "full", "no_mvam", "--data", "{out}/smoke/data",
                 "--out", "{out}/smoke/ablation", "--deterministic"],
            ],
            "expected_outcomes": {
                "exit_codes": [EXIT_OK, EXIT_OK],
                "files": ["smoke/ablation/sweep_ablation.csv"],
                "identical": [],
                # (table, minimum full P-AUROC, minimum gain over the second row)
                "ablation_gain": ("smoke/ablation/sweep_ablation.csv", 0.90, 0.03),
                # (loss log, epoch, epoch-mean L_d must fall below this share of epoch 1)
                "loss_drop": ("smoke/ablation/ablation_full/losses.csv", 10, 0.5),
            },
        }


class ScenarioRunner:
    """Runs scenarios through app.main against a prepared workspace"""

    def __init__(self, workspace: Dict[str, Any]):
        self.workspace = workspace
        self.results: List[Dict[str, Any]] = []

    def _fill(self, argv: List[str], preset: str = "tiny") -> List[str]:
        paths = {k: str(v) for k, v in self.workspace.items() if isinstance(v, Path)}
        filled = [arg.format(**paths) for arg in argv]
        if preset != "tiny":
            return filled
        return filled + [f"--set={item}" for item in self.workspace["overrides"]]

    def run_test_case(self, test_case: Dict[str, Any]) -> Dict[str, Any]:
        preset = test_case.get("preset", "tiny")
        codes = [main(self._fill(step, preset)) for step in test_case["steps"]]
        out = self.workspace["out"]
        expected = test_case["expected_outcomes"]
        outcomes = {
            "exit_codes": codes == expected["exit_codes"],
            "files": all((out / f).exists() for f in expected["files"]),
            "identical": all((out / a).read_bytes() == (out / b).read_bytes()
                             for a, b in expected["identical"]),
        }
        if "table_rows" in expected:
            path, rows = expected["table_rows"]
            outcomes["table_rows"] = len(pd.read_csv(out / path)) == rows
        if "ablation_gain" in expected and outcomes["files"]:
            path, floor, gain = expected["ablation_gain"]
            table = pd.read_csv(out / path)
            full, ablated = table["p_auroc"].iloc[0], table["p_auroc"].iloc[1]
            outcomes["ablation_gain"] = bool(full >= floor and full - ablated >= gain)
        if "loss_drop" in expected and outcomes["exit_codes"]:
            path, epoch, share = expected["loss_drop"]
            per_epoch = pd.read_csv(out / path).groupby("epoch")["l_d"].mean()
            outcomes["loss_drop"] = bool(per_epoch.loc[epoch] < share * per_epoch.loc[1])
        result = {"test_case": test_case["id"], "name": test_case["name"],
                  "codes": codes, "outcomes_met": outcomes}
        self.results.append(result)
        return result


# ─────────────────────────────────────────────────────────────────────────────
# pytest entry points
# ─────────────────────────────────────────────────────────────────────────────

@pytest.fixture(scope="module")
def workspace(tmp_path_factory, tiny_dataset_dir, tiny_overrides) -> Dict[str, Any]:
    root = tmp_path_factory.mktemp("scenarios")
    tiny = [f"--set={item}" for item in tiny_overrides]
    assert main(["train", "--data", str(tiny_dataset_dir), "--out", str(root / "train")] + tiny) == EXIT_OK
    checkpoint = root / "train" / "checkpoint.sqlite"
    assert main(["build-bank", "--data", str(tiny_dataset_dir), "--checkpoint", str(checkpoint),
                 "--out", str(root / "bank")] + tiny) == EXIT_OK
    lonely = root / "lonely_sample"
    lonely.mkdir()
    for png in (tiny_dataset_dir / "test" / "00004").glob("view_*.png"):
        (lonely / png.name).write_bytes(png.read_bytes())
    return {"data": tiny_dataset_dir, "checkpoint": checkpoint, "bank": root / "bank" / "bank.bin",
            "out": root, "overrides": list(tiny_overrides)}


@pytest.mark.parametrize("test_case", TestCases.get_test_cases(), ids=lambda case: case["id"])
def test_scenario(workspace, test_case):
    result = ScenarioRunner(workspace).run_test_case(test_case)
    assert all(result["outcomes_met"].values()), result


def test_eval_report_contents(workspace):
    ScenarioRunner(workspace).run_test_case(TestCases.test_case_1_eval_pipeline())
    report = yaml.safe_load((workspace["out"] / "eval_a" / "report.yaml").read_text())
    for name in ("p_auroc", "v_auroc", "s_auroc"):
        assert 0.0 <= report["metrics"][name] <= 1.0
    assert report["config"]["radius"] == 2
    assert report["config"]["levels"] == [4, 3]
    assert report["counts"]["samples"] == 4


def test_detect_scores_are_consistent(workspace):
    ScenarioRunner(workspace).run_test_case(TestCases.test_case_2_detect_single_sample())
    scores = yaml.safe_load((workspace["out"] / "detect" / "scores.yaml").read_text())
    assert len(scores["view_scores"]) == 3
    assert scores["sample_score"] == max(scores["view_scores"])


def test_usage_errors_exit_before_running():
    with pytest.raises(SystemExit) as info:
        main(["eval", "--out", "x"])
    assert info.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as info:
        main(["sweep", "--axis", "bogus", "--values", "1", "--data", "d", "--out", "x"])
    assert info.value.code == EXIT_USAGE


@pytest.mark.slow
def test_smoke_preset_alignment_gain(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    case = TestCases.smoke_ablation_case()
    result = ScenarioRunner({"out": out, "overrides": []}).run_test_case(case)
    table = out / case["expected_outcomes"]["ablation_gain"][0]
    assert all(result["outcomes_met"].values()), (result, table.read_text() if table.exists() else None)
