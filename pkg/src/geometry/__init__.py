from geometry.homography import (Homography, homography_key, identity, make_homography,
                                 pairwise_from_poses, project_point, project_points,
                                 rescale_homography)
from geometry.view_graph import ViewGraph, build_view_graph
from geometry.window import (AlignmentPlan, PosEncodingConfig, SearchCandidate,
                             build_alignment_plan, positional_encoding, search_window)
