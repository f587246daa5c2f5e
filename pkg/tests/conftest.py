import json
from pathlib import Path

import pytest

from trialmatch.corpus import (
    ClinicalNote,
    Criterion,
    Dataset,
    EligibilityLabel,
    PatientRecord,
    StructuredRow,
    Trial,
)


def tiny_trial(trial_id: str = "NCT001") -> Trial:
    return Trial(
        trial_id=trial_id,
        criteria=(
            Criterion(f"{trial_id}-I1", "inclusion", "history of fever or chills"),
            Criterion(f"{trial_id}-E1", "exclusion", "prior enrollment elsewhere"),
        ),
    )


def tiny_patient(
    patient_id: str,
    trial_id: str = "NCT001",
    text: str = "patient reports fever and chills overnight",
    label: int = 1,
) -> PatientRecord:
    return PatientRecord(
        patient_id=patient_id,
        trial_id=trial_id,
        notes=(ClinicalNote(f"{patient_id}-n0", text, "2023-04-01"),),
        structured_rows=(
            StructuredRow("demographic", "age", "61", None),
            StructuredRow("diagnosis", "condition", "fever disorder", "2023-03-30"),
        ),
        label=EligibilityLabel(label, "eligible" if label else "ineligible"),
    )


@pytest.fixture
def tiny_dataset() -> Dataset:
    return Dataset(
        patients=[
            tiny_patient("P1", label=1),
            tiny_patient("P2", text="routine visit no complaints noted today", label=0),
        ],
        trials=[tiny_trial()],
    )


@pytest.fixture
def dataset_files(tmp_path: Path, tiny_dataset: Dataset) -> tuple[Path, Path]:
    from trialmatch.corpus import write_dataset

    patients = tmp_path / "patients.jsonl"
    trials = tmp_path / "trials.jsonl"
    write_dataset(tiny_dataset, patients, trials)
    return patients, trials


def write_jsonl(path: Path, objects: list[dict]) -> Path:
    path.write_text(
        "".join(json.dumps(o, ensure_ascii=False) + "\n" for o in objects),
        encoding="utf-8",
    )
    return path
