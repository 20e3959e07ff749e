#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <compare>
#include <vector>

#include "synthid/tensor.hpp"

namespace synthid {

/// Discrete identity tuple of the oracle world.
struct IdentityFactors {
    int hue = 0;
    int shade = 0;
    int length = 0;
    int width = 0;
    int shape = 0;
    auto operator<=>(const IdentityFactors&) const = default;
};

/// Oracle-world pose: translation in pose units and in-plane rotation (rad).
struct PoseFactors {
    double tx = 0.0;
    double ty = 0.0;
    double roll = 0.0;
    bool operator==(const PoseFactors&) const = default;
};

struct OracleFactors {
    IdentityFactors identity;
    PoseFactors pose;
};

/// Images [B,C,H,W] with values in [-1, 1]. `truth` holds the generating
/// factors for oracle renders and is empty for anything else.
struct ImageBatch {
    Tensor<float> pixels;
    std::vector<OracleFactors> truth;

    int batch() const { return pixels.rank() ? pixels.dim(0) : 0; }
    int channels() const { return pixels.dim(1); }
    int height() const { return pixels.dim(2); }
    int width() const { return pixels.dim(3); }
    bool has_truth() const { return !truth.empty(); }

    Tensor<float> image(int i) const {
        Tensor<float> t = pixels.rows(i, i + 1);
        t.shape.erase(t.shape.begin());
        return t;
    }
};

/// (yaw, pitch, roll). For the oracle world these carry (tx, ty, rotation).
using PoseVector = std::array<double, 3>;

/// Unit-norm identity embedding.
struct EmbeddingVector {
    std::vector<double> e;

    double norm() const {
        double s = 0.0;
        for (double v : e) s += v * v;
        return std::sqrt(s);
    }
    double dot(const EmbeddingVector& o) const {
        double s = 0.0;
        for (std::size_t i = 0; i < e.size(); ++i) s += e[i] * o.e[i];
        return s;
    }
};

inline double angle_between(const EmbeddingVector& a, const EmbeddingVector& b) {
    return std::acos(std::clamp(a.dot(b), -1.0, 1.0));
}

inline double pose_sq_distance(const PoseVector& a, const PoseVector& b) {
    double s = 0.0;
    for (int i = 0; i < 3; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
}

} // namespace synthid
