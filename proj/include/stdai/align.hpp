#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "stdai/bundle.hpp"
#include "stdai/image.hpp"
#include "stdai/transform.hpp"

namespace stdai {

struct Keypoint {
    double x = 0.0, y = 0.0;  // sub-pixel position, full-resolution coords
    double scale = 0.0;       // detection blur sigma, full-resolution units
    double angle = 0.0;       // dominant orientation, radians
    double response = 0.0;    // |difference-of-Gaussians| at the extremum
    int octave = 0;
};

struct Descriptor {
    std::array<float, 128> v{};
};

struct Features {
    std::vector<Keypoint> keypoints;
    std::vector<Descriptor> descriptors;
};

struct SiftParams {
    int octaves = 3;
    double sigma0 = 1.6;
    double contrast_thresh = 0.015;
    double edge_ratio = 10.0;
};

// Difference-of-Gaussians extrema over an octave pyramid with 4x4x8
// gradient-orientation-histogram descriptors, orientation-normalized.
// Keypoints come back sorted by response, strongest first, at most
// max_count of them. A featureless image yields an empty list.
Features detect_keypoints(const ImageF& gray, int max_count, const SiftParams& p = {});

struct Match {
    int a = 0, b = 0;
    float dist = 0.0f;
};

// Nearest neighbour in descriptor space, Lowe ratio test, then a mutual
// one-to-one check. Both feature sets must be nonempty.
std::vector<Match> match_descriptors(const Features& fa, const Features& fb, double ratio = 0.8);

enum class TransformFamily { Similarity, Affine };

TransformFamily transform_family_from_string(const std::string& name);

struct RansacParams {
    TransformFamily family = TransformFamily::Similarity;
    double inlier_thresh_px = 2.0;
    int max_iters = 2000;
    double confidence = 0.995;
};

struct RansacResult {
    Transform2D transform;  // maps frame-A points onto frame B
    std::vector<int> inliers;
    double inlier_ratio = 0.0;
    bool low_confidence = false;  // inlier ratio below 0.2
};

// pa[i] corresponds to pb[i]. Sampling order is derived from the sorted
// correspondences, so the result does not depend on input permutation.
RansacResult estimate_transform_ransac(const std::vector<Vec2>& pa, const std::vector<Vec2>& pb,
                                       const RansacParams& rp, std::uint64_t seed);

struct AlignedCentral {
    ImageU8 histology;
    Tensor expression;  // [G,H,W]
    std::vector<std::uint8_t> mask;
    std::vector<std::uint8_t> validity;  // 1 where the preimage had full bilinear support
};

// Resamples the central section in the adjacent frame: histology and
// expression bilinearly, the mask by nearest neighbour.
AlignedCentral warp_central(const Section& central, const Transform2D& central_to_adj,
                            int out_w, int out_h);

struct AlignParams {
    SiftParams sift;
    int max_keypoints = 600;
    double match_ratio = 0.8;
    RansacParams ransac;
};

struct AlignOutcome {
    Transform2D transform;  // central -> adjacent
    int keypoints_central = 0;
    int keypoints_adjacent = 0;
    int matches = 0;
    int inliers = 0;
    bool low_confidence = false;
};

AlignOutcome align_images(const ImageU8& central, const ImageU8& adjacent, const AlignParams& p,
                          std::uint64_t seed);

}  // namespace stdai
