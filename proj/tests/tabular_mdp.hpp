#pragma once

#include <array>
#include <string>
#include <vector>

#include "shortlong/baselines.hpp"
#include "shortlong/core.hpp"

namespace tabular {

using namespace shortlong;

/// Five states (one-hot), two actions, deterministic transitions, reward
/// attached to the state reached.
struct Mdp {
    static constexpr int kStates = 5;
    static constexpr int kActions = 2;
    std::array<std::array<int, kActions>, kStates> next{{{1, 2}, {2, 0}, {3, 4}, {4, 1}, {0, 3}}};
    std::array<double, kStates> reward{0.0, 0.2, 0.5, 1.0, 0.1};
    /// Target policy action per state.
    std::array<int, kStates> target{1, 0, 1, 1, 0};
};

inline State one_hot(int s) {
    State out(std::vector<double>(Mdp::kStates, 0.0));
    out[static_cast<std::size_t>(s)] = 1.0;
    return out;
}

inline int index_of(const State& s) {
    for (int i = 0; i < Mdp::kStates; ++i)
        if (s[static_cast<std::size_t>(i)] > 0.5) return i;
    throw Error("tabular: not a one-hot state");
}

inline Action action(int a) { return Action{a, {static_cast<double>(a)}}; }

class Env final : public Environment {
public:
    explicit Env(Mdp m) : m_(m) {}
    std::string id() const override { return "tabular"; }
    std::size_t state_dim() const override { return Mdp::kStates; }
    std::size_t action_dim() const override { return 1; }
    int horizon() const override { return 20; }
    bool stochastic() const override { return false; }
    double reward(const State& s) const override { return m_.reward[static_cast<std::size_t>(index_of(s))]; }
    State step(const State& s, const Action& a, Rng&) const override {
        return one_hot(m_.next[static_cast<std::size_t>(index_of(s))][static_cast<std::size_t>(a.id)]);
    }

private:
    Mdp m_;
};

class TargetPolicy final : public Policy {
public:
    explicit TargetPolicy(Mdp m) : m_(m) {}
    std::string id() const override { return "target"; }
    Action act(const State& s, Rng&) const override {
        return action(m_.target[static_cast<std::size_t>(index_of(s))]);
    }

private:
    Mdp m_;
};

class RandomPolicy final : public Policy {
public:
    std::string id() const override { return "behavior"; }
    Action act(const State&, Rng& rng) const override {
        return action(std::uniform_int_distribution<int>(0, Mdp::kActions - 1)(rng));
    }
    bool stochastic() const override { return true; }
};

/// Exact Q of the target policy: Q(s,a) = R(s') + gamma Q(s', pi(s')).
inline std::array<std::array<double, Mdp::kActions>, Mdp::kStates> exact_q(const Mdp& m, double gamma) {
    std::array<std::array<double, Mdp::kActions>, Mdp::kStates> q{};
    for (int it = 0; it < 5000; ++it) {
        auto nq = q;
        for (int s = 0; s < Mdp::kStates; ++s)
            for (int a = 0; a < Mdp::kActions; ++a) {
                const int sn = m.next[s][a];
                nq[s][a] = m.reward[sn] + gamma * q[sn][m.target[sn]];
            }
        q = nq;
    }
    return q;
}

/// Uniform-random behavior data from every state.
inline PolicyDataset behavior_data(const Mdp& m, int rollouts_per_state, std::uint64_t seed) {
    Env env(m);
    RandomPolicy behavior;
    PolicyDataset d;
    d.horizon = 20;
    d.env_id = "tabular";
    std::vector<State> starts;
    for (int s = 0; s < Mdp::kStates; ++s) starts.push_back(one_hot(s));
    d.records = collect_records(env, behavior, starts, rollouts_per_state, 20, seed, Exec::serial);
    return d;
}

inline FqeConfig oracle_config(double gamma) {
    FqeConfig c;
    c.gamma = gamma;
    c.sweeps = 150;
    c.batch_tuples = 1000;
    c.updates_per_sweep = 200;
    c.hyper.layer_sizes = {0, 32, 32, 1};
    c.hyper.learning_rate = 1e-3;
    c.hyper.max_updates = 2000;
    c.hyper.validation_fraction = 0.0;
    return c;
}

/// Largest |Q_fqe - Q_exact| over all state-action pairs.
inline double sup_error(const QModel& q, const Mdp& m, double gamma) {
    const auto exact = exact_q(m, gamma);
    double worst = 0.0;
    for (int s = 0; s < Mdp::kStates; ++s)
        for (int a = 0; a < Mdp::kActions; ++a)
            worst = std::max(worst, std::abs(q.value(one_hot(s), action(a)) - exact[s][a]));
    return worst;
}

}  // namespace tabular
