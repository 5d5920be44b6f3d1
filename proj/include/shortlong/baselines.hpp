#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "shortlong/core.hpp"
#include "shortlong/policygen.hpp"
#include "shortlong/regress.hpp"
#include "shortlong/sled.hpp"

namespace shortlong {

// ---------------------------------------------------------------- FQE

MlpHyper fqe_default_hyper();

struct FqeConfig {
    /// The reported value stays undiscounted; gamma only shapes the Q target.
    double gamma = 0.98;
    int sweeps = 50;
    /// Tuples sampled (with replacement) per sweep.
    int batch_tuples = 1000;
    /// Adam updates per sweep after the first.
    int updates_per_sweep = 100;
    /// Architecture, optimizer and the budget of the first sweep.
    MlpHyper hyper = fqe_default_hyper();
    StateEncoding encoding;
    /// Abort when the Bellman loss exceeds this multiple of the first sweep's.
    double divergence_factor = 1e6;
};

Json to_json(const FqeConfig& c);
FqeConfig fqe_config_from_json(const Json& j);

/// Q-function of a fixed target policy over (encoded state, action vector).
struct QModel {
    RegressionModel q;
    double gamma = 0.0;
    StateEncoding encoding;
    std::vector<double> bellman_loss;

    double value(const State& s, const Action& a) const;
};

/// Fitted Q-evaluation: regress Q(s, a) onto R(s') + gamma Q(s', pi(s')) over
/// tuples pooled from every training trajectory.
QModel fqe_fit(const PolicyDataset& train, const Policy& target, const FqeConfig& cfg,
               std::uint64_t seed);

/// Mean of Q(s, pi(s)) over init_states. With `initial_reward`, R(s) is added
/// so the result is on the scale of returns that count the start state.
double fqe_value(const QModel& q, const Policy& target, std::span<const State> init_states,
                 const RewardFn& initial_reward = {}, std::uint64_t seed = 0);

// ---------------------------------------------------------------- online dynamics

/// Affine model (s, a) -> s' fit on on-policy prefix transitions only.
struct OnlineDynamics {
    /// (d + action_dim + 1) x d; last row is the offset.
    Eigen::MatrixXd w;

    State predict(const State& s, const Action& a) const;
};

/// Minimum-norm least squares when ridge is 0.
OnlineDynamics online_dynamics_fit(std::span<const Trajectory> prefixes, int ell, double ridge = 0.0);

/// Observed r_0..r_ell plus rewards of states rolled out through the learned
/// model while executing the target policy on predicted states.
double online_dynamics_value(const OnlineDynamics& model, const Policy& target,
                             const Trajectory& prefix, int ell, int horizon, const RewardFn& reward,
                             std::uint64_t seed);

/// Fit on the pooled prefixes of a policy's records; mean value over them.
double online_policy_value(std::span<const PolicyRecord> records, const Policy& target, int ell,
                          int horizon, const RewardFn& reward, std::uint64_t seed,
                          double ridge = 0.0);

// ---------------------------------------------------------------- extrapolation

/// (n_full / n_obs) * sum(rewards) with n_obs = rewards.size().
double avg_reward_extrapolate(std::span<const double> rewards, int n_full);

/// n_full * last reward.
double last_reward_extrapolate(std::span<const double> rewards, int n_full);

/// Mean over a policy's trajectories of the extrapolated first ell+1 rewards
/// to horizon+1 observations.
double avg_reward_policy_value(std::span<const PolicyRecord> records, int ell, int horizon);
double last_reward_policy_value(std::span<const PolicyRecord> records, int ell, int horizon);

/// Mean training value; the same prediction for every test policy.
double offpolicy_mean(const PolicyDataset& train);

// ---------------------------------------------------------------- battery baselines

inline constexpr double kDeltaQFloor = 1e-12;

/// log(max(|capacity(5) - capacity(4)|, kDeltaQFloor)); capacities[i] is cycle i+1.
double delta_q_feature(std::span<const double> capacities);

struct DeltaQClassifier {
    LogisticModel model;
    double c = 1.0;
    /// Set when the training labels contain a single class.
    std::optional<LifeGroup> constant;
    /// Mean fold accuracy per candidate C.
    std::vector<double> cv_accuracy;

    LifeGroup predict(double feature) const;
};

/// Ten C values log-spaced over [1e-4, 1e4].
std::vector<double> default_c_grid();

/// Logistic classifier on the scalar feature; C picked by stratified k-fold
/// accuracy (ties to the smaller C), then refit on everything.
DeltaQClassifier delta_q_classify(std::span<const double> features, std::span<const LifeGroup> labels,
                                  int folds = 10, std::span<const double> c_grid = {});

/// Most frequent training label; ties go to `low`.
LifeGroup majority_class(std::span<const LifeGroup> labels);

}  // namespace shortlong
