#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "shortlong/core.hpp"
#include "shortlong/io.hpp"
#include "shortlong/regress.hpp"

namespace shortlong {

/// Estimated P_test / P_train over short-horizon features, from a logistic
/// train-vs-test discriminator. Without a model the ratio is the constant 1.
struct DensityRatio {
    std::optional<LogisticModel> model;
    double clip_max = 20.0;
    /// n_train / n_test, undoing the class imbalance of the discriminator.
    double prior_correction = 1.0;

    bool constant() const { return !model.has_value(); }
    static DensityRatio unit(double clip_max = 20.0);
};

/// `c` is the inverse L2 strength of the discriminator. The fit is a convex
/// problem solved to convergence, so `seed` only keeps the interface uniform.
DensityRatio fit_density_ratio(std::span<const FeatureVector> train_feats,
                               std::span<const FeatureVector> test_feats, double clip_max = 20.0,
                               std::uint64_t seed = 0, double c = 1.0);

double ratio(const DensityRatio& dr, const FeatureVector& x);
std::vector<double> ratios(const DensityRatio& dr, std::span<const FeatureVector> xs);

Json to_json(const DensityRatio& dr);
DensityRatio density_ratio_from_json(const Json& j);

}  // namespace shortlong
