"""Synthetic recordings: ventilation mechanics, circulation, EIT images and device lags."""

from eitphys.phantom.dataset import (
    CohortConfig,
    Dataset,
    Segment,
    SplitScheme,
    TargetScaler,
    build_dataset,
    crop_segments,
    read_dataset,
    read_manifest,
    split,
    tile_segments,
    write_dataset,
)
from eitphys.phantom.mechanics import MechanicsTrace, simulate_trace
from eitphys.phantom.params import PatientParams, sample_patient
from eitphys.phantom.record import Record, read_record, simulate_record, write_record
from eitphys.phantom.render import Anatomy, anatomy_masks, render_eit

__all__ = [
    "Anatomy",
    "CohortConfig",
    "Dataset",
    "MechanicsTrace",
    "PatientParams",
    "Record",
    "Segment",
    "SplitScheme",
    "TargetScaler",
    "anatomy_masks",
    "build_dataset",
    "crop_segments",
    "read_dataset",
    "read_manifest",
    "read_record",
    "render_eit",
    "sample_patient",
    "simulate_record",
    "simulate_trace",
    "split",
    "tile_segments",
    "write_dataset",
    "write_record",
]
