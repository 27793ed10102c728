"""Lensless microscopy with a tilted image sensor.

Simulation of tilted-sensor diffraction frames, calibration of shifts,
distance and tilt from the frames themselves, pixel-super-resolved
multi-height phase retrieval, and the file formats and metrics around it.
"""
from .calibration import (
    FocusDistance,
    FocusSearch,
    autofocus_distance,
    estimate_shift,
    estimate_tilt_angle,
    focus_metric,
    register_dataset,
)
from .errors import (
    BandEdgeError,
    DegenerateGeometry,
    DomainError,
    IntegrityError,
    NoFocusSignal,
    ParseError,
    PeakAmbiguity,
    TiltLensError,
)
from .field import ComplexField, Geometry, ShiftVector, field_energy, fourier_shift, upsample_nearest
from .forward import (
    BarGroup,
    NoiseModel,
    RawFrame,
    downsample_intensity,
    simulate_dataset,
    simulate_measurement,
    synth_object,
)
from .io import load_dataset, load_field, save_dataset, save_field
from .metrics import Report, compute_metrics
from .mosaic import stitch_grid
from .propagation import TiltSpec, angular_spectrum_propagate, jacobian_weight, tilt_spectrum_remap
from .recon import (
    ReconConfig,
    ReconResult,
    equivalent_height,
    initialize_wavefront,
    magnitude_project,
    reconstruct,
    recover_object,
)

__version__ = "0.1.0"
