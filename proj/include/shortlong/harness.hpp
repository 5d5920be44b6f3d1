#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "shortlong/baselines.hpp"
#include "shortlong/core.hpp"
#include "shortlong/density.hpp"
#include "shortlong/envs.hpp"
#include "shortlong/io.hpp"
#include "shortlong/policygen.hpp"
#include "shortlong/sled.hpp"
#include "shortlong/slev.hpp"

namespace shortlong {

// ---------------------------------------------------------------- metrics

double rmse(std::span<const double> preds, std::span<const double> truths);

/// Linear-interpolation percentile, q in [0, 100].
double percentile(std::span<const double> values, double q);

/// true = unsafe (predicted value below threshold).
std::vector<bool> safety_detect(std::span<const double> preds, double threshold);
double safety_accuracy(const std::vector<bool>& flags, const std::vector<bool>& truth_flags);

enum class ThresholdMode { percentile, absolute };

struct SafetyThreshold {
    ThresholdMode mode = ThresholdMode::percentile;
    /// Percentile of training policy values, or the absolute threshold.
    double value = 10.0;

    double resolve(std::span<const double> train_values) const;
};

// ---------------------------------------------------------------- risk bound

struct BoundInputs {
    double m = 1.0;
    double v_max = 1.0;
    int n = 100;
    int f = 1;
    double delta = 0.05;
    double w_err = 0.0;
};

/// M V^2 sqrt(log(2F/delta) / (2n)) + V^2 (M sqrt(log(2/delta)) / sqrt(n) + w_err);
/// holds with probability at least 1 - 4 delta.
double risk_bound(const BoundInputs& b);

/// One-dimensional covariate-shift problem with a closed-form density ratio:
/// x ~ N(0, 1) for training and N(test_mean, test_sd^2) for testing,
/// y = 0.9 g(x) + 0.1 V u with u ~ U(0, 1), hypotheses V sigmoid(theta_j x).
struct BoundExperiment {
    double test_mean = 0.5;
    double test_sd = 0.8;
    double v_max = 1.0;
    int n = 500;
    int hypotheses = 8;
    double delta = 0.05;
    /// Slope of the target function g(x) = V sigmoid(target_slope x).
    double target_slope = 1.3;
};

struct CoverageReport {
    int trials = 0;
    int covered = 0;
    double coverage = 0.0;
    double bound = 0.0;
    double m = 0.0;
    double median_gap = 0.0;
    std::vector<double> gaps;
};

/// Supremum of the analytic ratio; throws when it is unbounded.
double bound_experiment_m(const BoundExperiment& e);

/// Per trial: draw n training points, pick the hypothesis minimizing the
/// ratio-weighted empirical risk, compare with its exact test risk (numerical
/// quadrature). Coverage is the share of trials whose gap is within the bound.
CoverageReport verify_bound_empirically(const BoundExperiment& e, int trials, std::uint64_t seed,
                                        Exec exec = Exec::parallel);

// ---------------------------------------------------------------- experiments

struct ExperimentConfig {
    std::string env_id = "hiv";
    /// Fractions of the horizon; ignored when `ells` is nonempty.
    std::vector<double> ell_fractions = {0.025, 0.05, 0.10, 0.25};
    std::vector<int> ells;
    std::vector<std::uint64_t> seeds = {0, 1, 2};
    std::vector<std::string> methods = {"slev", "fqe", "mean", "avg", "last"};

    /// Start states per policy, shared by training and test policies.
    int n_init_states = 250;
    /// Rollouts per (policy, start state).
    int n_rollouts = 1;
    double perturbation_rate = 0.6;
    bool include_rewards = true;

    std::vector<MlpHyper> slev_grid;
    int k = 10;
    bool weighted = false;
    double clip_max = 20.0;
    double density_c = 1.0;

    std::vector<DynamicsCandidate> dynamics;
    std::vector<AdapterFamily> adapters = {AdapterFamily::affine_output, AdapterFamily::input_shift};
    int sled_k = 5;

    FqeConfig fqe;
    PolicyGenConfig policies;
    SafetyThreshold safety;
    std::string output_dir = "results";
};

/// Full-scale defaults for "hiv" or "kidney".
ExperimentConfig default_config(const std::string& env_id);

Json to_json(const ExperimentConfig& c);
ExperimentConfig experiment_config_from_json(const Json& j);

/// FNV-1a over the canonical JSON dump.
std::string config_hash(const ExperimentConfig& c);

std::unique_ptr<Environment> make_environment(const ExperimentConfig& c);
int horizon_of(const ExperimentConfig& c);

/// Prefix lengths in steps; fractions are rounded and clamped to [1, L-1].
std::vector<int> resolve_ells(const ExperimentConfig& c);

/// Default hyperparameter grid for the env (learning rates x weight
/// decays, rescaled to standardized targets).
std::vector<MlpHyper> default_slev_grid(const std::string& env_id);
std::vector<DynamicsCandidate> default_dynamics_grid();

struct ExperimentData {
    PolicySets policies;
    /// Full-horizon records of the training policies, with values.
    PolicyDataset train;
    /// Full-horizon records of the test policies, with values. Estimators only
    /// ever see truncate(test, ell).
    PolicyDataset test;
    std::vector<State> init_states;
};

ExperimentData generate_experiment_data(const ExperimentConfig& c, std::uint64_t seed,
                                        Exec exec = Exec::parallel);

/// Records grouped by policy id, in first-appearance order.
std::vector<std::pair<std::string, std::vector<PolicyRecord>>> group_by_policy(const PolicyDataset& d);

/// Mean true value per policy, same order as group_by_policy.
std::vector<double> policy_values(const PolicyDataset& d);

struct RunRow {
    std::string method;
    std::string env;
    int ell = 0;
    std::uint64_t seed = 0;
    std::string policy_id;
    double prediction = 0.0;
    double truth = 0.0;
};

struct SafetyRow {
    std::string method;
    int ell = 0;
    std::uint64_t seed = 0;
    double threshold = 0.0;
    double accuracy = 0.0;
};

/// Predictions of one method at one ell for every test policy, in
/// group_by_policy order.
std::vector<double> predict_method(const std::string& method, const ExperimentConfig& c,
                                   const ExperimentData& data, int ell, std::uint64_t seed,
                                   Exec exec = Exec::parallel);

struct ExperimentResult {
    std::vector<RunRow> runs;
    std::vector<SafetyRow> safety;
    std::map<std::uint64_t, double> thresholds;
};

ExperimentResult run_experiment(const ExperimentConfig& c, Exec exec = Exec::parallel);

struct AggregateRow {
    std::string method;
    int ell = 0;
    double mean = 0.0;
    /// Sample standard deviation over seeds (0 for a single seed).
    double sd = 0.0;
    std::size_t n_seeds = 0;
};

/// Per-seed RMSE over policies, then mean and sd over seeds; sorted by
/// (method, ell).
std::vector<AggregateRow> aggregate_rmse(std::span<const RunRow> runs);
std::vector<AggregateRow> aggregate_safety(std::span<const SafetyRow> rows);

/// RMSE of one (method, ell, seed) cell.
double run_rmse(std::span<const RunRow> runs, const std::string& method, int ell, std::uint64_t seed);

// ---------------------------------------------------------------- battery

struct BatteryConfig {
    int n_train = 41;
    int n_test = 83;
    double a = 0.01;
    double b = -1.386;
    double noise_sd = 5e-6;
    /// Lifetimes: two-component log-normal mixture (short- and long-lived
    /// cells), clamped to [min_lifetime, max_lifetime].
    double low_fraction = 0.3;
    double low_median = 400.0;
    double low_log_sd = 0.1;
    double high_median = 1100.0;
    double high_log_sd = 0.25;
    int min_lifetime = 150;
    int max_lifetime = 2300;
    double filter_below = 700.0;
    double threshold = kLifeThreshold;
    int prefix_cycles = 5;
    int k = 10;
    int dq_folds = 10;
};

Json to_json(const BatteryConfig& c);
BatteryConfig battery_config_from_json(const Json& j);

struct BatterySplit {
    std::vector<CapacityCurve> train;
    std::vector<CapacityCurve> test;
};

BatterySplit battery_generate(const BatteryConfig& c, std::uint64_t seed);

struct BatteryRow {
    std::string method;
    std::string train_set;
    std::uint64_t seed = 0;
    int n_train = 0;
    double accuracy = 0.0;
};

/// SLED (base curve + lifetime fit), the delta-Q logistic classifier and the
/// majority class, each trained on all training curves and on those with
/// lifetime < filter_below, scored on the test curves.
std::vector<BatteryRow> run_battery(const BatteryConfig& c, const BatterySplit& split,
                                    std::uint64_t seed);

// ---------------------------------------------------------------- reporting

void write_runs_csv(const std::filesystem::path& path, std::span<const RunRow> runs);
void write_predictions_csv(const std::filesystem::path& path, std::span<const RunRow> runs);
std::vector<RunRow> read_runs_csv(const std::filesystem::path& path);

/// Writes runs.csv, aggregate.csv, safety.csv, battery.csv (when rows are
/// given) and manifest.json into `dir`.
void report(const std::filesystem::path& dir, const ExperimentConfig& c, const ExperimentResult& r,
            std::span<const BatteryRow> battery = {});

}  // namespace shortlong
