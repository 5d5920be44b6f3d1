#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "shortlong/core.hpp"
#include "shortlong/density.hpp"
#include "shortlong/regress.hpp"

namespace shortlong {

/// Averaged fold models at the selected hyperparameters.
struct SlevModel {
    std::vector<RegressionModel> members;
    MlpHyper best_hyper;
    std::size_t best_index = 0;
    DensityRatio density;
    int ell = 0;
    bool include_rewards = true;
    /// Weighted validation loss summed over folds, one entry per grid point.
    std::vector<double> cv_losses;
};

/// Short-horizon features of every record with the record's value as target.
/// Rows are sorted by (policy id, features) so that record order never
/// matters downstream.
struct SlevRows {
    std::vector<std::string> policy_ids;
    std::vector<FeatureVector> features;
    std::vector<double> targets;
};

SlevRows slev_rows(const PolicyDataset& train, int ell, bool include_rewards);

/// k-fold cross-validated, density-ratio weighted MLP regression from
/// ell-step prefixes to full-horizon values. Folds split policies, never a
/// policy's records. The (hyper, fold) fits run through `exec`; Exec::serial
/// gives the reference result and Exec::parallel must match it exactly.
SlevModel slev_fit(const PolicyDataset& train, int ell, bool include_rewards,
                   std::span<const MlpHyper> hyper_grid, int k, const DensityRatio& density,
                   std::uint64_t seed, Exec exec = Exec::parallel);

/// Mean of the member predictions for one record.
double slev_predict(const SlevModel& model, const PolicyRecord& record, int ell);

/// Mean of slev_predict over a policy's records.
double slev_predict_policy(const SlevModel& model, std::span<const PolicyRecord> records, int ell);

}  // namespace shortlong
