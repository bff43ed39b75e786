"""Real-time inviscid flow on a sphere with far-field acoustics and synthesis."""

from .acoustics import (ForceHistory, ForceSample, ObserverConfig,
                        SpectralPeakSet, SurfaceQuadrature, detect_peaks,
                        fibonacci_sphere, fwh_pressure, sliding_spectrum,
                        surface_force)
from .engine import AnalysisConfig, Engine, EngineConfig, bench, run_headless
from .fields import cp_extend, cp_extend_vector, trilinear_interpolate
from .fluid import (FlowState, ForcingSpec, PoissonOperator, SolverConfig,
                    SolverFailure, advect, apply_forcing, assemble_laplacian,
                    enforce_obstacle_bc, project, scalar_transport,
                    solve_pressure, step)
from .geometry import (GridSpec, NarrowBand, Obstacle, SphereSurface,
                       build_cube_band, build_narrow_band, bump_displacement,
                       closest_point, obstacle_sdf, tangent_project)
from .mms import (MMSConfig, MMSReport, convergence_rates, forcing_f,
                  l2_error, mms_fields, run_verification, scalar_source_S)
from .synth import (AudioBlock, HysteresisSpec, OscillatorBank, SynthConfig,
                    amplitude_envelope, fallback_tone, render_block,
                    update_bank, write_wav)

__version__ = "0.1.0"
