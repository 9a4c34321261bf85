"""Volume/mask/flow file I/O (NIfTI-1, NRRD) and session persistence."""

from .nifti import read_nifti, write_nifti
from .nrrdio import read_nrrd, write_nrrd
from .session import (
    Session,
    Study,
    annotation_from_dict,
    annotation_to_dict,
    contour_from_dict,
    file_sha256,
    load_flow,
    load_mask,
    load_session,
    load_study,
    load_volume,
    save_mask,
    save_session,
    save_volume,
    session_from_dict,
    session_to_dict,
)

__all__ = [
    "Session", "Study", "annotation_from_dict", "annotation_to_dict",
    "contour_from_dict", "file_sha256", "load_flow", "load_mask",
    "load_session", "load_study", "load_volume", "read_nifti", "read_nrrd",
    "save_mask", "save_session", "save_volume", "session_from_dict",
    "session_to_dict", "write_nifti", "write_nrrd",
]
