#pragma once

#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "shortlong/core.hpp"
#include "shortlong/envs.hpp"
#include "shortlong/io.hpp"
#include "shortlong/regress.hpp"

namespace shortlong {

enum class PolicyKind { fqi_greedy, discrete_controller, continuous_controller };

const char* to_string(PolicyKind k);
PolicyKind policy_kind_from_string(const std::string& s);

/// Fields that do not apply to `kind` stay empty.
struct PolicySpec {
    PolicyKind kind = PolicyKind::fqi_greedy;
    std::vector<Action> action_set;
    std::optional<double> gamma;
    std::optional<int> iterations;
    std::optional<int> n_bins;
    std::optional<double> epsilon;

    bool operator==(const PolicySpec&) const = default;
};

Json to_json(const PolicySpec& s);
PolicySpec policy_spec_from_json(const Json& j);

/// How states enter a Q-network. HIV compartments span several orders of
/// magnitude, so they are fed as log10 of the raw value.
struct StateEncoding {
    bool log10 = false;
    /// Multiplier that undoes state normalization before the log.
    double scale = 1.0;

    bool operator==(const StateEncoding&) const = default;
};

Json to_json(const StateEncoding& e);
StateEncoding state_encoding_from_json(const Json& j);

/// Encoded state followed by the action vector.
std::vector<double> encode_state_action(const StateEncoding& enc, const State& s, const Action& a);

/// Rows: one per (state, action) pair, states outer, actions inner.
Eigen::MatrixXd encode_state_actions(const StateEncoding& enc, std::span<const State> states,
                                     std::span<const Action> actions);

/// Greedy policy w.r.t. a learned Q-function; ties go to the earlier action.
class QGreedyPolicy final : public Policy {
public:
    QGreedyPolicy(std::string id, PolicySpec spec, StateEncoding enc, RegressionModel q)
        : id_(std::move(id)), spec_(std::move(spec)), enc_(enc), q_(std::move(q)) {}

    std::string id() const override { return id_; }
    Action act(const State& s, Rng& rng) const override;

    /// Q-values of every action in the action set at `s`.
    std::vector<double> q_values(const State& s) const;
    const PolicySpec& spec() const { return spec_; }
    const StateEncoding& encoding() const { return enc_; }
    const RegressionModel& q() const { return q_; }

private:
    std::string id_;
    PolicySpec spec_;
    StateEncoding enc_;
    RegressionModel q_;
};

/// Fixed action every step.
class ConstantPolicy final : public Policy {
public:
    ConstantPolicy(std::string id, Action a) : id_(std::move(id)), action_(std::move(a)) {}
    std::string id() const override { return id_; }
    Action act(const State&, Rng&) const override { return action_; }

private:
    std::string id_;
    Action action_;
};

/// Uniformly random action from a finite set.
class UniformRandomPolicy final : public Policy {
public:
    UniformRandomPolicy(std::string id, std::vector<Action> actions)
        : id_(std::move(id)), actions_(std::move(actions)) {}
    std::string id() const override { return id_; }
    Action act(const State& s, Rng& rng) const override;
    bool stochastic() const override { return true; }

private:
    std::string id_;
    std::vector<Action> actions_;
};

using PolicyPtr = std::shared_ptr<const Policy>;

// ---------------------------------------------------------------- FQI

struct FqiConfig {
    StateEncoding encoding;
    MlpHyper hyper;
};

/// Exploration rollouts with uniformly random actions, start states taken
/// from `init_states` in turn.
std::vector<Trajectory> exploration_data(const Environment& env, const std::vector<Action>& actions,
                                         std::span<const State> init_states, int n_rollouts,
                                         int horizon, std::uint64_t seed,
                                         Exec exec = Exec::parallel);

/// Greedy policies after 1..iterations sweeps of fitted Q-iteration; element
/// i holds the policy after i+1 sweeps. Each sweep regresses
/// Q(s, a) onto R(s') + gamma * max_a' Q_prev(s', a') over the exploration
/// transitions whose action is in `action_set`.
std::vector<std::shared_ptr<const QGreedyPolicy>> fqi_train_snapshots(
    const std::string& id_prefix, const std::vector<Action>& action_set, double gamma,
    int iterations, std::span<const Trajectory> exploration, const FqiConfig& cfg,
    std::uint64_t seed);

std::shared_ptr<const QGreedyPolicy> fqi_train(const std::string& id,
                                               const std::vector<Action>& action_set, double gamma,
                                               int iterations,
                                               std::span<const Trajectory> exploration,
                                               const FqiConfig& cfg, std::uint64_t seed);

// ---------------------------------------------------------------- controllers

struct ControllerConfig {
    KidneyConfig env;
    /// Discrete controller: dose = gain * (hb_target - Hb), clamped to [0, 1].
    double hb_target = 12.5;
    double gain = 0.5;
    /// Continuous controller: dose used when no previous dose is recorded.
    double start_dose = 0.5;
    double min_dose = 0.05;
};

/// Kidney dose controllers mixed with an epsilon-random action.
class ControllerPolicy final : public Policy {
public:
    struct Decision {
        Action action;
        bool random = false;
    };

    ControllerPolicy(std::string id, PolicySpec spec, ControllerConfig cfg)
        : id_(std::move(id)), spec_(std::move(spec)), cfg_(cfg) {}

    std::string id() const override { return id_; }
    Action act(const State& s, Rng& rng) const override { return decide(s, rng).action; }
    bool stochastic() const override { return spec_.epsilon.value_or(0.0) > 0.0; }

    Decision decide(const State& s, Rng& rng) const;
    /// The controller's dose without exploration.
    double target_dose(const State& s) const;

    const PolicySpec& spec() const { return spec_; }
    const ControllerConfig& config() const { return cfg_; }

private:
    std::string id_;
    PolicySpec spec_;
    ControllerConfig cfg_;
};

std::shared_ptr<const ControllerPolicy> make_controller_policy(const std::string& id,
                                                               const PolicySpec& spec,
                                                               const ControllerConfig& cfg = {});

// ---------------------------------------------------------------- policy sets

/// log10 state encoding and a small ReLU network.
FqiConfig default_hiv_fqi();

struct HivPolicyConfig {
    HivConfig env;
    std::vector<double> train_gammas = {0.7, 0.75, 0.8, 0.85, 0.9, 0.95, 0.98};
    std::vector<double> test_gammas = {0.5, 0.8, 0.9, 0.98};
    int iterations = 10;
    int n_train = 70;
    int n_test = 40;
    int exploration_rollouts = 50;
    int exploration_init_states = 50;
    double perturbation_rate = 0.6;
    FqiConfig fqi = default_hiv_fqi();
};

struct KidneyPolicyConfig {
    ControllerConfig controller;
    int n_train = 200;
    int n_test = 40;
    int min_bins = 5;
    int max_bins = 20;
    double min_epsilon = 0.05;
    double max_epsilon = 0.5;
};

struct PolicyGenConfig {
    HivPolicyConfig hiv;
    KidneyPolicyConfig kidney;
};

Json to_json(const PolicyGenConfig& c);
PolicyGenConfig policy_gen_config_from_json(const Json& j);

struct PolicySets {
    std::vector<PolicyPtr> train;
    std::vector<PolicyPtr> test;
};

PolicySets generate_policy_sets(const std::string& env_id, const PolicyGenConfig& cfg,
                                std::uint64_t seed, Exec exec = Exec::parallel);

Json policy_to_json(const Policy& p);
PolicyPtr policy_from_json(const Json& j);
Json to_json(const PolicySets& sets);
PolicySets policy_sets_from_json(const Json& j);

}  // namespace shortlong
