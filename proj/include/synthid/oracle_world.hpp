#pragma once

// Procedural ground-truth world.
//
// Each identity is a coloured, elongated glyph: a discrete tuple of hue,
// shade, length, width and outline shape. Pose is a 2-D placement of that
// glyph: translation (tx, ty) in pose units of resolution/8 pixels, and an
// in-plane rotation `roll` in radians. Background is -1 in every channel.
//
// Besides rendering, this header provides the differentiable pixel readout
// used by the oracle providers: intensity-weighted image moments give the
// pose (centroid and principal-axis angle) and a pose-invariant identity
// descriptor (chromaticity, brightness, area, elongation, spread, kurtosis).

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "synthid/ops.hpp"
#include "synthid/rng.hpp"
#include "synthid/types.hpp"

namespace synthid {

struct OracleWorldSpec {
    int resolution = 32;
    int n_hues = 12;
    int n_shades = 3;
    int n_lengths = 3;
    int n_widths = 3;
    int n_shapes = 2;
    double max_shift = 1.5;  // pose units
    double max_roll = 0.6;   // radians
    std::uint64_t seed = 0;  // renderer seed: hue phase of the palette

    static constexpr int kChannels = 3;

    double pose_unit_px() const { return resolution / 8.0; }
    int identity_count() const { return n_hues * n_shades * n_lengths * n_widths * n_shapes; }

    IdentityFactors identity(int index) const {
        if (index < 0 || index >= identity_count())
            throw ArgumentError("identity index " + std::to_string(index) + " outside [0, " +
                                std::to_string(identity_count()) + ")");
        IdentityFactors f;
        f.shape = index % n_shapes;
        index /= n_shapes;
        f.width = index % n_widths;
        index /= n_widths;
        f.length = index % n_lengths;
        index /= n_lengths;
        f.shade = index % n_shades;
        f.hue = index / n_shades;
        return f;
    }

    int index_of(const IdentityFactors& f) const {
        validate(f);
        return (((f.hue * n_shades + f.shade) * n_lengths + f.length) * n_widths + f.width) * n_shapes + f.shape;
    }

    void validate(const IdentityFactors& f) const {
        auto in = [](int v, int n) { return v >= 0 && v < n; };
        if (!in(f.hue, n_hues) || !in(f.shade, n_shades) || !in(f.length, n_lengths) || !in(f.width, n_widths) ||
            !in(f.shape, n_shapes))
            throw ArgumentError("identity factors outside the world's ranges");
    }

    void validate(const PoseFactors& p) const {
        constexpr double slack = 1e-9;
        if (!(std::abs(p.tx) <= max_shift + slack) || !(std::abs(p.ty) <= max_shift + slack) ||
            !(std::abs(p.roll) <= max_roll + slack))
            throw ArgumentError("pose factors outside the world's ranges");
    }

    PoseFactors sample_pose(Rng& rng) const {
        PoseFactors p;
        p.tx = rng.uniform(-max_shift, max_shift);
        p.ty = rng.uniform(-max_shift, max_shift);
        p.roll = rng.uniform(-max_roll, max_roll);
        return p;
    }

    std::array<double, 3> color(const IdentityFactors& f) const {
        static constexpr double kSat[] = {1.0, 0.55, 1.0};
        static constexpr double kVal[] = {1.0, 0.95, 0.6};
        const double phase = (mix64(seed) >> 11) * 0x1.0p-53 / n_hues;
        double h = std::fmod(static_cast<double>(f.hue) / n_hues + phase, 1.0) * 6.0;
        const double s = kSat[f.shade % 3], v = kVal[f.shade % 3];
        const int sector = static_cast<int>(h) % 6;
        const double frac = h - std::floor(h);
        const double p = v * (1 - s), q = v * (1 - s * frac), t = v * (1 - s * (1 - frac));
        switch (sector) {
        case 0: return {v, t, p};
        case 1: return {q, v, p};
        case 2: return {p, v, t};
        case 3: return {p, q, v};
        case 4: return {t, p, v};
        default: return {v, p, q};
        }
    }

    double half_length_px(const IdentityFactors& f) const {
        static constexpr double kLen[] = {5.0, 6.5, 8.0};
        return kLen[f.length % 3] * resolution / 32.0;
    }
    double half_width_px(const IdentityFactors& f) const {
        static constexpr double kWid[] = {2.0, 2.75, 3.5};
        return kWid[f.width % 3] * resolution / 32.0;
    }
};

/// Draw identity indices (without replacement) for a private pool.
inline std::vector<int> sample_identity_pool(const OracleWorldSpec& spec, int count, std::uint64_t seed,
                                             const std::vector<int>& exclude = {}) {
    std::vector<int> all;
    for (int i = 0; i < spec.identity_count(); ++i)
        if (std::find(exclude.begin(), exclude.end(), i) == exclude.end()) all.push_back(i);
    if (count > static_cast<int>(all.size()))
        throw ArgumentError("requested " + std::to_string(count) + " identities but only " +
                            std::to_string(all.size()) + " are available");
    Rng rng(seed);
    std::shuffle(all.begin(), all.end(), rng.engine());
    all.resize(static_cast<std::size_t>(count));
    return all;
}

/// Deterministic antialiased render of one glyph, [3,H,W] in [-1, 1].
inline Tensor<float> render_glyph(const IdentityFactors& id, const PoseFactors& pose, const OracleWorldSpec& spec) {
    spec.validate(id);
    spec.validate(pose);
    const int r = spec.resolution;
    constexpr int kSub = 4;
    const double a = spec.half_length_px(id), b = spec.half_width_px(id);
    const double expo = id.shape == 0 ? 2.0 : 4.0;
    const double cx = pose.tx * spec.pose_unit_px(), cy = pose.ty * spec.pose_unit_px();
    const double cr = std::cos(pose.roll), sr = std::sin(pose.roll);
    const auto rgb = spec.color(id);
    Tensor<float> img({3, r, r}, -1.0f);
    for (int y = 0; y < r; ++y)
        for (int x = 0; x < r; ++x) {
            int hits = 0;
            for (int sy = 0; sy < kSub; ++sy)
                for (int sx = 0; sx < kSub; ++sx) {
                    const double px = x + (sx + 0.5) / kSub - r / 2.0 - cx;
                    const double py = y + (sy + 0.5) / kSub - r / 2.0 - cy;
                    const double gx = cr * px + sr * py, gy = -sr * px + cr * py;
                    if (std::pow(std::abs(gx / a), expo) + std::pow(std::abs(gy / b), expo) <= 1.0) ++hits;
                }
            const double cover = static_cast<double>(hits) / (kSub * kSub);
            for (int c = 0; c < 3; ++c)
                img[(static_cast<std::size_t>(c) * r + y) * r + x] = static_cast<float>(-1.0 + 2.0 * cover * rgb[c]);
        }
    return img;
}

/// Render a batch; the result carries its generating factors.
inline ImageBatch render_oracle(std::span<const OracleFactors> factors, const OracleWorldSpec& spec) {
    ImageBatch out;
    const int r = spec.resolution;
    out.pixels = Tensor<float>({static_cast<int>(factors.size()), 3, r, r});
    const std::size_t per = static_cast<std::size_t>(3) * r * r;
    for (std::size_t i = 0; i < factors.size(); ++i) {
        auto img = render_glyph(factors[i].identity, factors[i].pose, spec);
        std::copy(img.data.begin(), img.data.end(), out.pixels.data.begin() + static_cast<std::ptrdiff_t>(i * per));
    }
    out.truth.assign(factors.begin(), factors.end());
    return out;
}

inline ImageBatch render_oracle(const IdentityFactors& id, const PoseFactors& pose, const OracleWorldSpec& spec) {
    const OracleFactors f{id, pose};
    return render_oracle(std::span<const OracleFactors>(&f, 1), spec);
}

/// Readout of image moments, per image of a batch.
template <typename T>
struct MomentReadout {
    ag::Var<T> pose;      // [B,3]: tx, ty (pose units), roll (rad)
    ag::Var<T> features;  // [B,kOracleFeatures] pose-invariant identity descriptor
};

inline constexpr int kOracleFeatures = 8;

/// Differentiable moment readout of [B,3,H,W] images.
template <typename T>
MomentReadout<T> oracle_moments(const ag::Var<T>& images, const OracleWorldSpec& spec) {
    using ag::Var;
    const int n = images.dim(0), r = spec.resolution;
    if (images.shape() != Shape{n, 3, r, r})
        throw ConfigError("oracle readout expects [B,3," + std::to_string(r) + "," + std::to_string(r) + "], got " +
                          shape_str(images.shape()));
    const int hw = r * r;
    constexpr T kMassFloor = T(0.1);
    constexpr T kTiny = T(1e-6);

    Tensor<T> ub({n, hw}), vb({n, hw});
    for (int i = 0; i < n; ++i)
        for (int y = 0; y < r; ++y)
            for (int x = 0; x < r; ++x) {
                ub[static_cast<std::size_t>(i) * hw + y * r + x] = static_cast<T>(x + 0.5 - r / 2.0);
                vb[static_cast<std::size_t>(i) * hw + y * r + x] = static_cast<T>(y + 0.5 - r / 2.0);
            }
    const auto u = Var<T>::constant(std::move(ub));
    const auto v = Var<T>::constant(std::move(vb));

    const auto q = ag::add_scalar(ag::scale(images, T(0.5)), T(0.5));  // [B,3,H,W] in [0,1]
    const auto mass = ag::sum_middle(q, n, 3, hw);                      // [B,HW]
    const auto w = ag::clamp_min(ag::add_scalar(mass, -kMassFloor), T(0));
    const auto total = ag::add_scalar(ag::sum_cols(w), kTiny);  // [B]
    auto wmean = [&](const Var<T>& field) { return ag::div(ag::sum_cols(ag::mul(w, field)), total); };

    const auto cx = wmean(u), cy = wmean(v);
    const auto du = ag::sub_colvec(u, cx), dv = ag::sub_colvec(v, cy);
    const auto m20 = wmean(ag::square(du)), m02 = wmean(ag::square(dv)), m11 = wmean(ag::mul(du, dv));
    const auto half_diff = ag::scale(ag::sub(m20, m02), T(0.5));
    const auto roll = ag::scale(ag::atan2(ag::scale(m11, T(2)), ag::add_scalar(ag::scale(half_diff, T(2)), kTiny)),
                                T(0.5));
    const T unit = static_cast<T>(spec.pose_unit_px());
    MomentReadout<T> out;
    out.pose = ag::stack_cols<T>({ag::scale(cx, T(1) / unit), ag::scale(cy, T(1) / unit), roll});

    // Principal second moments.
    const auto half_tr = ag::scale(ag::add(m20, m02), T(0.5));
    const auto radius = ag::sqrt(ag::add_scalar(ag::add(ag::square(half_diff), ag::square(m11)), T(1e-8)));
    const auto major = ag::add_scalar(ag::add(half_tr, radius), T(1e-2));
    const auto minor = ag::add_scalar(ag::clamp_min(ag::sub(half_tr, radius), T(0)), T(1e-2));

    std::vector<Var<T>> feats;
    const auto weighted_mass = ag::add_scalar(ag::sum_cols(ag::mul(mass, w)), kTiny);
    for (int c = 0; c < 3; ++c)
        feats.push_back(ag::div(ag::sum_cols(ag::mul(ag::channel(q, c, 3), w)), weighted_mass));
    const auto brightness = ag::div(weighted_mass, ag::add_scalar(ag::sum_cols(w), kTiny));
    feats.push_back(brightness);
    feats.push_back(ag::log(ag::add_scalar(ag::div(total, brightness), T(1))));
    feats.push_back(ag::log(ag::div(major, minor)));
    feats.push_back(ag::log(ag::add_scalar(ag::add(major, minor), kTiny)));
    const auto along = ag::add(ag::mul_colvec(du, ag::cos(roll)), ag::mul_colvec(dv, ag::sin(roll)));
    feats.push_back(ag::div(wmean(ag::square(ag::square(along))), ag::add_scalar(ag::square(major), kTiny)));
    out.features = ag::stack_cols<T>(feats);
    return out;
}

} // namespace synthid
