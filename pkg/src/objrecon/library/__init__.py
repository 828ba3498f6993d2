"""Object library: entries, descriptors, registration and prior reuse."""
from .descriptor import DescriptorView, compute_view_descriptor, cosine, load_embedding, view_descriptor
from .entry import (Library, LibraryEntry, RenderedView, build_entry, load_entry, render_surface_depth,
                    render_view, save_entry, scaled_intrinsics)
from .prior import (RetrievalCandidate, Verification, attempt_prior, initialize_from_prior, live_cloud,
                    object_descriptor, register_to_entry, retrieve, synthesize_keyframes, verify_registration)
from .registration import (IcpParams, RansacParams, RegistrationResult, compute_fpfh, estimate_normals,
                           icp_point_to_plane, kabsch, prepare_cloud, ransac_register, rescore,
                           rotation_error_deg)
