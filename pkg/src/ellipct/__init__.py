"""Ellipsoid attenuation fields for sparse-view X-ray synthesis and CT reconstruction."""

from .exceptions import (ConfigError, ContractViolationError,
                         DegenerateProjectionError, EllipctError,
                         EmptySeedError, InvalidParameterError, NumericalError,
                         TrainingDivergedError)
from .geometry import (ChordResult, Conic2D, Ellipsoid, EllipsoidSet,
                       OrientedBox2D, Ray, TileGrid, ViewFrame, chord,
                       covariance, l_max, obb_of_conic, project_silhouette,
                       tiles_overlapping)
from .metrics import MetricReport, psnr, ssim, stack_report, volume_metrics
from .optim import GradientRecord, TrainConfig, TrainState, backward, loss, train
from .phantoms import PhantomSpec, make_phantom, voxelize
from .projector import (ConeBeamGeometry, SegmentList, accumulate,
                        correct_segments, generate_ray, oracle_raymarch,
                        render_linear, render_stack, render_view)
from .recon import (LinearProjector, VoxelVolume, cgls, hybrid_init, recon_ct,
                    sart, tv_denoise)
from .seeding import SeedConfig, extract_points, seed_ellipsoids, seed_from_volume

__version__ = "0.1.0"
