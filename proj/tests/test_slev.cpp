#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "shortlong/harness.hpp"
#include "shortlong/slev.hpp"

using namespace shortlong;

namespace {

/// Policies with a level theta; rewards r_t = theta + noise_sd * z_t over a
/// one-dimensional zero state. Values come from `value_fn(rewards)`.
template <class ValueFn>
PolicyDataset synthetic(int n_policies, int records_per_policy, int horizon, double noise_sd,
                        std::uint64_t seed, ValueFn value_fn, const std::string& prefix = "p") {
    Rng rng(seed);
    std::uniform_real_distribution<double> level(0.0, 1.0);
    std::normal_distribution<double> z(0.0, 1.0);
    PolicyDataset d;
    d.horizon = horizon;
    d.env_id = "synthetic";
    for (int p = 0; p < n_policies; ++p) {
        const double theta = level(rng);
        char id[32];
        std::snprintf(id, sizeof id, "%s%03d", prefix.c_str(), p);
        for (int r = 0; r < records_per_policy; ++r) {
            Trajectory t;
            for (int s = 0; s <= horizon; ++s) {
                t.states.push_back(State{0.0});
                t.rewards.push_back(theta + noise_sd * z(rng));
                if (s < horizon) t.actions.push_back(Action{0, {0.0}});
            }
            PolicyRecord rec;
            rec.policy_id = id;
            rec.true_value = value_fn(t.rewards);
            rec.trajectories = {std::move(t)};
            d.records.push_back(std::move(rec));
        }
    }
    return d;
}

std::vector<MlpHyper> linear_grid() {
    MlpHyper lin;
    lin.layer_sizes = {0, 1};
    lin.learning_rate = 1e-2;
    lin.max_updates = 3000;
    lin.patience = 30;
    MlpHyper small = lin;
    small.layer_sizes = {0, 16, 1};
    small.learning_rate = 1e-3;
    return {lin, small};
}

double holdout_rmse(const SlevModel& m, const PolicyDataset& test, int ell) {
    std::vector<double> preds, truths;
    for (const auto& r : test.records) {
        preds.push_back(slev_predict(m, truncate(r, ell), ell));
        truths.push_back(*r.true_value);
    }
    return rmse(preds, truths);
}

}  // namespace

TEST_CASE("realizable mapping: value is three times the prefix reward sum") {
    const int ell = 5;
    auto value = [&](const std::vector<double>& r) {
        double s = 0.0;
        for (int t = 0; t <= ell; ++t) s += r[t];
        return 3.0 * s;
    };
    auto train = synthetic(60, 3, 20, 0.5, 1, value);
    auto test = synthetic(20, 3, 20, 0.5, 2, value, "q");
    auto grid = linear_grid();
    auto m = slev_fit(train, ell, true, grid, 10, DensityRatio::unit(), 3);
    CHECK(m.members.size() == 10);
    double lo = 1e9, hi = -1e9;
    for (const auto& r : test.records) {
        lo = std::min(lo, *r.true_value);
        hi = std::max(hi, *r.true_value);
    }
    CHECK(holdout_rmse(m, test, ell) < 0.02 * (hi - lo));
    CHECK(holdout_rmse(m, train, ell) < 0.01 * (hi - lo));
}

TEST_CASE("a unit-valued fitted ratio reproduces the unweighted fit bit for bit") {
    auto value = [](const std::vector<double>& r) { return r[0] + r[1]; };
    auto train = synthetic(20, 2, 10, 0.3, 4, value);
    auto grid = linear_grid();
    DensityRatio one;
    one.model = LogisticModel{Standardizer::identity(4), Eigen::VectorXd::Zero(4), 0.0};
    auto a = slev_fit(train, 1, true, grid, 5, DensityRatio::unit(), 9);
    auto b = slev_fit(train, 1, true, grid, 5, one, 9);
    for (const auto& r : train.records) CHECK(slev_predict(a, r, 1) == slev_predict(b, r, 1));
}

TEST_CASE("record order does not matter") {
    auto value = [](const std::vector<double>& r) { return 2.0 * r[0] + r[2]; };
    auto train = synthetic(25, 2, 10, 0.3, 5, value);
    auto reversed = train;
    std::reverse(reversed.records.begin(), reversed.records.end());
    auto grid = linear_grid();
    auto a = slev_fit(train, 2, true, grid, 5, DensityRatio::unit(), 1);
    auto b = slev_fit(reversed, 2, true, grid, 5, DensityRatio::unit(), 1);
    CHECK(a.best_index == b.best_index);
    CHECK(a.cv_losses == b.cv_losses);
    for (const auto& r : train.records) CHECK(slev_predict(a, r, 2) == slev_predict(b, r, 2));
}

TEST_CASE("serial and parallel fits agree exactly") {
    auto value = [](const std::vector<double>& r) { return r[0] * r[1]; };
    auto train = synthetic(20, 2, 8, 0.3, 6, value);
    auto grid = linear_grid();
    auto a = slev_fit(train, 3, true, grid, 4, DensityRatio::unit(), 2, Exec::serial);
    auto b = slev_fit(train, 3, true, grid, 4, DensityRatio::unit(), 2, Exec::parallel);
    CHECK(a.cv_losses == b.cv_losses);
    for (const auto& r : train.records) CHECK(slev_predict(a, r, 3) == slev_predict(b, r, 3));
}

TEST_CASE("more prefix gives no worse held-out error") {
    const int horizon = 20;
    auto value = [](const std::vector<double>& r) {
        double s = 0.0;
        for (double x : r) s += x;
        return s;
    };
    std::vector<double> short_err, long_err;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto train = synthetic(60, 2, horizon, 1.0, 10 + seed, value);
        auto test = synthetic(30, 2, horizon, 1.0, 100 + seed, value, "q");
        auto grid = linear_grid();
        grid.resize(1);
        auto m1 = slev_fit(train, 1, true, grid, 5, DensityRatio::unit(), seed);
        auto m10 = slev_fit(train, 10, true, grid, 5, DensityRatio::unit(), seed);
        short_err.push_back(holdout_rmse(m1, test, 1));
        long_err.push_back(holdout_rmse(m10, test, 10));
    }
    std::sort(short_err.begin(), short_err.end());
    std::sort(long_err.begin(), long_err.end());
    CHECK(long_err[2] <= short_err[2]);
}

TEST_CASE("prediction is the mean over identical members") {
    auto value = [](const std::vector<double>& r) { return r[0]; };
    auto train = synthetic(10, 1, 5, 0.3, 7, value);
    auto grid = linear_grid();
    auto m = slev_fit(train, 1, true, grid, 2, DensityRatio::unit(), 0);
    SlevModel same = m;
    same.members = {m.members[0], m.members[0], m.members[0]};
    for (const auto& r : train.records) {
        const auto x = featurize_short(r, 1, true);
        CHECK(slev_predict(same, r, 1) == doctest::Approx(m.members[0].predict(x.values)[0]).epsilon(1e-15));
        CHECK(std::isfinite(slev_predict(m, r, 1)));
    }
}

TEST_CASE("slev rejects bad input") {
    auto value = [](const std::vector<double>& r) { return r[0]; };
    auto train = synthetic(10, 1, 5, 0.3, 8, value);
    std::vector<MlpHyper> empty;
    CHECK_THROWS_AS(slev_fit(train, 1, true, empty, 2, DensityRatio::unit(), 0), Error);
    auto grid = linear_grid();
    CHECK_THROWS_AS(slev_fit(train, 1, true, grid, 1, DensityRatio::unit(), 0), Error);
    auto m = slev_fit(train, 2, true, grid, 2, DensityRatio::unit(), 0);
    CHECK_THROWS_AS(slev_predict(m, truncate(train.records[0], 1), 2), Error);
    auto no_value = train;
    no_value.records[0].true_value.reset();
    CHECK_THROWS_AS(slev_fit(no_value, 1, true, grid, 2, DensityRatio::unit(), 0), Error);
}
