#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "shortlong/core.hpp"

namespace testutil {

using namespace shortlong;

/// s' = A s, reward = sum of state components (or a constant).
class LinearEnv final : public Environment {
public:
    LinearEnv(Eigen::MatrixXd a, int horizon, std::optional<double> constant_reward = {})
        : a_(std::move(a)), horizon_(horizon), constant_(constant_reward) {}

    std::string id() const override { return "linear"; }
    std::size_t state_dim() const override { return static_cast<std::size_t>(a_.rows()); }
    std::size_t action_dim() const override { return 1; }
    int horizon() const override { return horizon_; }
    bool stochastic() const override { return false; }
    double reward(const State& s) const override {
        if (constant_) return *constant_;
        double r = 0.0;
        for (double v : s.values) r += v;
        return r;
    }
    State step(const State& s, const Action&, Rng&) const override {
        Eigen::VectorXd x = Eigen::Map<const Eigen::VectorXd>(s.values.data(), s.size());
        Eigen::VectorXd y = a_ * x;
        return State(std::vector<double>(y.data(), y.data() + y.size()));
    }
    const Eigen::MatrixXd& matrix() const { return a_; }

private:
    Eigen::MatrixXd a_;
    int horizon_;
    std::optional<double> constant_;
};

inline LinearEnv identity_env(std::size_t d, int horizon, std::optional<double> r = 1.0) {
    return LinearEnv(Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d)),
                     horizon, r);
}

/// Scalar action whose value is a policy-specific constant.
class FixedScalarPolicy final : public Policy {
public:
    FixedScalarPolicy(std::string id, double v) : id_(std::move(id)), v_(v) {}
    std::string id() const override { return id_; }
    Action act(const State&, Rng&) const override { return Action{0, {v_}}; }

private:
    std::string id_;
    double v_;
};

inline bool close_rel(double a, double b, double tol) {
    return std::abs(a - b) <= tol * std::max(1.0, std::max(std::abs(a), std::abs(b)));
}

}  // namespace testutil
