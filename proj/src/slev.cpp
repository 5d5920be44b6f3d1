#include "shortlong/slev.hpp"

#include <algorithm>
#include <limits>
#include <map>
#include <numeric>
#include <string>

namespace shortlong {

SlevRows slev_rows(const PolicyDataset& train, int ell, bool include_rewards) {
    struct Row {
        std::string id;
        FeatureVector f;
        double y;
    };
    std::vector<Row> rows;
    rows.reserve(train.records.size());
    for (const auto& rec : train.records) {
        if (!rec.true_value) throw Error("slev_fit: training record of " + rec.policy_id + " has no value");
        if (rec.length() < static_cast<std::size_t>(train.horizon))
            throw Error("slev_fit: training record of " + rec.policy_id + " is shorter than the horizon");
        rows.push_back({rec.policy_id, featurize_short(rec, ell, include_rewards), *rec.true_value});
    }
    std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
        if (a.id != b.id) return a.id < b.id;
        if (a.f.values != b.f.values) return a.f.values < b.f.values;
        return a.y < b.y;
    });
    SlevRows out;
    for (auto& r : rows) {
        out.policy_ids.push_back(std::move(r.id));
        out.features.push_back(std::move(r.f));
        out.targets.push_back(r.y);
    }
    return out;
}

SlevModel slev_fit(const PolicyDataset& train, int ell, bool include_rewards,
                   std::span<const MlpHyper> hyper_grid, int k, const DensityRatio& density,
                   std::uint64_t seed, Exec exec) {
    if (hyper_grid.empty()) throw Error("slev_fit: empty hyperparameter grid");
    if (k < 2) throw Error("slev_fit: k must be >= 2");
    if (train.records.empty()) throw Error("slev_fit: empty training set");

    const SlevRows rows = slev_rows(train, ell, include_rewards);
    const std::size_t n = rows.targets.size();
    const std::size_t dim = rows.features[0].size();

    // Policies in sorted order -> folds -> per-row fold index.
    std::vector<std::string> policies = rows.policy_ids;
    policies.erase(std::unique(policies.begin(), policies.end()), policies.end());
    const auto folds = kfold_split(policies.size(), static_cast<std::size_t>(k), seed);
    std::map<std::string, std::size_t> fold_of;
    for (std::size_t f = 0; f < folds.size(); ++f)
        for (std::size_t p : folds[f]) fold_of[policies[p]] = f;

    RegressionData all;
    all.x.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
    all.y.resize(static_cast<Eigen::Index>(n), 1);
    all.weights.resize(static_cast<Eigen::Index>(n));
    std::vector<std::size_t> row_fold(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto ii = static_cast<Eigen::Index>(i);
        all.x.row(ii) = Eigen::Map<const Eigen::RowVectorXd>(rows.features[i].values.data(),
                                                             static_cast<Eigen::Index>(dim));
        all.y(ii, 0) = rows.targets[i];
        all.weights(ii) = ratio(density, rows.features[i]);
        row_fold[i] = fold_of.at(rows.policy_ids[i]);
    }
    auto subset = [&](std::size_t f, bool held) {
        std::vector<Eigen::Index> idx;
        for (std::size_t i = 0; i < n; ++i)
            if ((row_fold[i] == f) == held) idx.push_back(static_cast<Eigen::Index>(i));
        return RegressionData{all.x(idx, Eigen::all), all.y(idx, Eigen::all), all.weights(idx)};
    };

    const std::size_t nk = static_cast<std::size_t>(k);
    const std::size_t jobs = hyper_grid.size() * nk;
    std::vector<RegressionModel> models(jobs);
    std::vector<double> losses(jobs);
    for_each_index(
        jobs,
        [&](std::size_t j) {
            const std::size_t h = j / nk, f = j % nk;
            MlpHyper hyper = hyper_grid[h];
            if (hyper.layer_sizes.size() < 2) hyper.layer_sizes = {0, 1};
            hyper.layer_sizes.front() = static_cast<int>(dim);
            hyper.layer_sizes.back() = 1;
            try {
                models[j] = mlp_fit(subset(f, false), hyper, derive_seed(seed, {h, f}));
                losses[j] = weighted_loss(models[j], subset(f, true));
            } catch (const Error& e) {
                throw Error("slev_fit: fold " + std::to_string(f) + ", hyper " + std::to_string(h) +
                            ": " + e.what());
            }
        },
        exec);

    SlevModel m;
    m.cv_losses.assign(hyper_grid.size(), 0.0);
    for (std::size_t j = 0; j < jobs; ++j) m.cv_losses[j / nk] += losses[j];
    m.best_index = static_cast<std::size_t>(
        std::min_element(m.cv_losses.begin(), m.cv_losses.end()) - m.cv_losses.begin());
    m.best_hyper = hyper_grid[m.best_index];
    for (std::size_t f = 0; f < nk; ++f) m.members.push_back(std::move(models[m.best_index * nk + f]));
    m.density = density;
    m.ell = ell;
    m.include_rewards = include_rewards;
    return m;
}

double slev_predict(const SlevModel& model, const PolicyRecord& record, int ell) {
    if (ell != model.ell)
        throw Error("slev_predict: model was fit for ell=" + std::to_string(model.ell) + ", got " +
                    std::to_string(ell));
    if (model.members.empty()) throw Error("slev_predict: model has no members");
    const FeatureVector x = featurize_short(record, ell, model.include_rewards);
    double sum = 0.0;
    for (const auto& m : model.members) sum += m.predict(x.values)[0];
    return sum / static_cast<double>(model.members.size());
}

double slev_predict_policy(const SlevModel& model, std::span<const PolicyRecord> records, int ell) {
    if (records.empty()) throw Error("slev_predict_policy: no records");
    double sum = 0.0;
    for (const auto& r : records) sum += slev_predict(model, r, ell);
    return sum / static_cast<double>(records.size());
}

}  // namespace shortlong
