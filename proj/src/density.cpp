#include "shortlong/density.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace shortlong {

DensityRatio DensityRatio::unit(double clip_max) {
    if (!(clip_max > 0.0)) throw Error("DensityRatio: clip_max must be > 0");
    DensityRatio dr;
    dr.clip_max = clip_max;
    return dr;
}

namespace {

Eigen::MatrixXd stack(std::span<const FeatureVector> a, std::span<const FeatureVector> b) {
    const Eigen::Index d = static_cast<Eigen::Index>(a[0].size());
    Eigen::MatrixXd x(static_cast<Eigen::Index>(a.size() + b.size()), d);
    Eigen::Index row = 0;
    for (auto part : {a, b})
        for (const auto& f : part) {
            if (static_cast<Eigen::Index>(f.size()) != d)
                throw Error("fit_density_ratio: feature vectors differ in length");
            x.row(row++) = Eigen::Map<const Eigen::RowVectorXd>(f.values.data(), d);
        }
    return x;
}

}  // namespace

DensityRatio fit_density_ratio(std::span<const FeatureVector> train_feats,
                               std::span<const FeatureVector> test_feats, double clip_max,
                               std::uint64_t, double c) {
    if (train_feats.empty() || test_feats.empty())
        throw Error("fit_density_ratio: train and test feature sets must be nonempty");
    if (!(clip_max > 0.0)) throw Error("fit_density_ratio: clip_max must be > 0");
    const Eigen::MatrixXd x = stack(train_feats, test_feats);
    Eigen::VectorXd labels = Eigen::VectorXd::Zero(x.rows());
    labels.tail(static_cast<Eigen::Index>(test_feats.size())).setOnes();
    DensityRatio dr;
    dr.model = logistic_fit(x, labels, c);
    dr.clip_max = clip_max;
    dr.prior_correction =
        static_cast<double>(train_feats.size()) / static_cast<double>(test_feats.size());
    return dr;
}

namespace {

double odds_to_ratio(const DensityRatio& dr, double logit) {
    // p/(1-p) = exp(logit); computed in log space to avoid overflow.
    const double log_r = logit + std::log(dr.prior_correction);
    if (log_r >= std::log(dr.clip_max)) return dr.clip_max;
    return std::clamp(std::exp(log_r), 0.0, dr.clip_max);
}

}  // namespace

double ratio(const DensityRatio& dr, const FeatureVector& x) {
    if (dr.constant()) return std::min(1.0, dr.clip_max);
    const auto& m = *dr.model;
    if (static_cast<Eigen::Index>(x.size()) != m.coef.size())
        throw Error("ratio: feature has " + std::to_string(x.size()) + " entries, model expects " +
                    std::to_string(m.coef.size()));
    Eigen::MatrixXd row = Eigen::Map<const Eigen::RowVectorXd>(x.values.data(), m.coef.size());
    const double logit = (m.x.apply_rows(row) * m.coef)(0) + m.intercept;
    return odds_to_ratio(dr, logit);
}

std::vector<double> ratios(const DensityRatio& dr, std::span<const FeatureVector> xs) {
    std::vector<double> out;
    out.reserve(xs.size());
    for (const auto& x : xs) out.push_back(ratio(dr, x));
    return out;
}

Json to_json(const DensityRatio& dr) {
    Json j{{"clip_max", dr.clip_max}, {"prior_correction", dr.prior_correction}};
    j["model"] = dr.model ? to_json(*dr.model) : Json(nullptr);
    return j;
}

DensityRatio density_ratio_from_json(const Json& j) {
    DensityRatio dr;
    dr.clip_max = j.at("clip_max").get<double>();
    dr.prior_correction = j.value("prior_correction", 1.0);
    if (j.contains("model") && !j["model"].is_null()) dr.model = logistic_model_from_json(j["model"]);
    return dr;
}

}  // namespace shortlong
