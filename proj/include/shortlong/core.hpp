#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "shortlong/parallel.hpp"

namespace shortlong {

using Rng = std::mt19937_64;

/// Raised for contract violations and numerical failures anywhere in the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Normalized state vector of an environment.
struct State {
    std::vector<double> values;

    State() = default;
    explicit State(std::vector<double> v) : values(std::move(v)) {}
    State(std::initializer_list<double> v) : values(v) {}

    std::size_t size() const { return values.size(); }
    double operator[](std::size_t i) const { return values[i]; }
    double& operator[](std::size_t i) { return values[i]; }
    bool operator==(const State&) const = default;
};

struct Action {
    int id = -1;
    std::vector<double> vector;

    bool operator==(const Action&) const = default;
};

/// One rollout. Rewards are stored for every visited state, so a trajectory
/// with T transitions carries T+1 states and T+1 rewards.
struct Trajectory {
    std::vector<State> states;
    std::vector<Action> actions;
    std::vector<double> rewards;

    std::size_t length() const { return actions.size(); }
    bool operator==(const Trajectory&) const = default;
};

/// All rollouts of one policy from one start state.
struct PolicyRecord {
    std::string policy_id;
    std::vector<Trajectory> trajectories;
    std::optional<double> true_value;

    std::size_t length() const;
    bool operator==(const PolicyRecord&) const = default;
};

struct PolicyDataset {
    std::vector<PolicyRecord> records;
    int horizon = 0;
    std::string env_id;

    /// Distinct policy ids in order of first appearance.
    std::vector<std::string> policy_ids() const;
    bool operator==(const PolicyDataset&) const = default;
};

struct FeatureVector {
    std::vector<double> values;

    std::size_t size() const { return values.size(); }
    bool operator==(const FeatureVector&) const = default;
};

class Environment {
public:
    virtual ~Environment() = default;

    virtual std::string id() const = 0;
    virtual std::size_t state_dim() const = 0;
    virtual std::size_t action_dim() const = 0;
    virtual int horizon() const = 0;
    virtual bool stochastic() const = 0;
    virtual double reward(const State& s) const = 0;
    virtual State step(const State& s, const Action& a, Rng& rng) const = 0;
};

class Policy {
public:
    virtual ~Policy() = default;

    virtual std::string id() const = 0;
    virtual Action act(const State& s, Rng& rng) const = 0;
    virtual bool stochastic() const { return false; }
};

/// SplitMix64 finalizer.
std::uint64_t mix64(std::uint64_t x);

/// Child seed for a job addressed by `path` under `root`. Each path element is
/// folded in with mix64, so a job's seed depends only on its coordinates and
/// never on scheduling order.
std::uint64_t derive_seed(std::uint64_t root, std::initializer_list<std::uint64_t> path);

bool all_finite(std::span<const double> v);

Trajectory rollout(const Environment& env, const Policy& policy, const State& start,
                   int horizon, std::uint64_t seed);

/// Undiscounted sum of all stored rewards.
double return_of(const Trajectory& traj);

/// Mean return over init_states x n_rollouts, rollout (i, r) seeded with
/// derive_seed(seed, {i, r}).
double policy_value_mc(const Environment& env, const Policy& policy,
                       std::span<const State> init_states, int n_rollouts, int horizon,
                       std::uint64_t seed, Exec exec = Exec::parallel);

/// One record per start state; true_value is the mean return of its rollouts.
std::vector<PolicyRecord> collect_records(const Environment& env, const Policy& policy,
                                          std::span<const State> init_states, int n_rollouts,
                                          int horizon, std::uint64_t seed,
                                          Exec exec = Exec::parallel);

/// Flattened short-horizon features, rollout-major then time-minor:
/// for each rollout, states[0..ell] concatenated, followed (optionally) by
/// rewards[0..ell].
FeatureVector featurize_short(const PolicyRecord& record, int ell, bool include_rewards);

std::size_t feature_length(std::size_t state_dim, int ell, bool include_rewards,
                           std::size_t n_rollouts);

/// Copy of `record` cut to its first `ell` transitions with the ground truth
/// removed; what an estimator is allowed to see of a test policy.
PolicyRecord truncate(const PolicyRecord& record, int ell);

PolicyDataset truncate(const PolicyDataset& data, int ell);

}  // namespace shortlong
