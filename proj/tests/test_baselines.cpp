#include <doctest.h>

#include <cmath>

#include "shortlong/baselines.hpp"
#include "shortlong/envs.hpp"
#include "shortlong/harness.hpp"
#include "shortlong/policygen.hpp"
#include "tabular_mdp.hpp"
#include "test_util.hpp"

using namespace shortlong;
using testutil::FixedScalarPolicy;

TEST_CASE("FQE with gamma 0 regresses the immediate reward") {
    tabular::Mdp m;
    auto data = tabular::behavior_data(m, 10, 1);
    tabular::TargetPolicy pi(m);
    auto q = fqe_fit(data, pi, tabular::oracle_config(0.0), 2);
    for (int s = 0; s < tabular::Mdp::kStates; ++s)
        for (int a = 0; a < tabular::Mdp::kActions; ++a)
            CHECK(std::abs(q.value(tabular::one_hot(s), tabular::action(a)) - m.reward[m.next[s][a]]) <= 1e-3);
}

TEST_CASE("FQE matches exact evaluation on a tabular MDP") {
    tabular::Mdp m;
    auto data = tabular::behavior_data(m, 10, 1);
    tabular::TargetPolicy pi(m);
    auto q = fqe_fit(data, pi, tabular::oracle_config(0.9), 3);
    CHECK(tabular::sup_error(q, m, 0.9) <= 1e-2);

    // fqe_value: single start state gives Q there; the value of the policy
    // from every start is the mean of Q(s, pi(s)).
    const auto exact = tabular::exact_q(m, 0.9);
    std::vector<State> one{tabular::one_hot(2)};
    CHECK(fqe_value(q, pi, one) == q.value(one[0], tabular::action(m.target[2])));
    std::vector<State> all;
    double j = 0.0;
    for (int s = 0; s < tabular::Mdp::kStates; ++s) {
        all.push_back(tabular::one_hot(s));
        j += exact[s][m.target[s]] / tabular::Mdp::kStates;
    }
    CHECK(std::abs(fqe_value(q, pi, all) - j) <= 1e-2);
    CHECK(fqe_value(q, pi, all) == fqe_value(q, pi, all));
    CHECK(q.bellman_loss.size() == 149);
}

TEST_CASE("FQE validates its configuration") {
    tabular::Mdp m;
    auto data = tabular::behavior_data(m, 2, 1);
    tabular::TargetPolicy pi(m);
    auto cfg = tabular::oracle_config(0.9);
    cfg.sweeps = 0;
    CHECK_THROWS_AS(fqe_fit(data, pi, cfg, 0), Error);
    cfg = tabular::oracle_config(1.5);
    CHECK_THROWS_AS(fqe_fit(data, pi, cfg, 0), Error);
    auto back = fqe_config_from_json(to_json(tabular::oracle_config(0.9)));
    CHECK(back.sweeps == 150);
    CHECK(back.hyper == tabular::oracle_config(0.9).hyper);
}

TEST_CASE("online dynamics learns an identity map") {
    auto env = testutil::identity_env(2, 10, 1.0);
    FixedScalarPolicy pol("p", 0.0);
    std::vector<Trajectory> prefixes;
    for (const auto& s : std::vector<State>{{0.1, 0.5}, {-0.4, 0.2}, {0.7, -0.3}, {0.0, 0.9}})
        prefixes.push_back(truncate(PolicyRecord{"p", {rollout(env, pol, s, 10, 0)}, {}}, 3).trajectories[0]);
    auto m = online_dynamics_fit(prefixes, 3);
    for (const auto& s : std::vector<State>{{0.3, 0.3}, {-1.0, 2.0}}) {
        auto p = m.predict(s, Action{0, {0.0}});
        CHECK(std::abs(p[0] - s[0]) <= 1e-3);
        CHECK(std::abs(p[1] - s[1]) <= 1e-3);
    }
    auto one = [](const State&) { return 1.0; };
    CHECK(online_dynamics_value(m, pol, prefixes[0], 3, 10, one, 0) == 11.0);
}

TEST_CASE("online dynamics is unidentified from three HIV steps") {
    HivEnv env;
    ConstantPolicy both("both", hiv_actions()[2]);
    auto reward = [&](const State& s) { return env.reward(s); };
    auto s0 = hiv_initial_states(1, 0.0, 0)[0];
    auto traj = rollout(env, both, s0, 200, 0);
    const double truth = return_of(traj);
    std::vector<PolicyRecord> recs{truncate(PolicyRecord{"both", {traj}, {}}, 3)};
    double v = 0.0;
    try {
        v = online_policy_value(recs, both, 3, 200, reward, 0);
    } catch (const Error&) {
        v = std::numeric_limits<double>::infinity();
    }
    CHECK_FALSE(std::abs(v - truth) <= 0.1 * std::abs(truth));
}

TEST_CASE("online rollout matches calc_returns on the same linear model") {
    Eigen::MatrixXd a(2, 2);
    a << 0.9, 0.05, -0.1, 0.8;
    testutil::LinearEnv env(a, 15, std::nullopt);
    FixedScalarPolicy pol("p", 0.0);
    auto traj = rollout(env, pol, State{0.4, -0.6}, 15, 0);
    OnlineDynamics m;
    m.w = Eigen::MatrixXd::Zero(4, 2);
    m.w.topRows(2) = a.transpose();
    auto g = GlobalDynamics::linear(a, Eigen::VectorXd::Zero(2));
    auto reward = [&](const State& s) { return env.reward(s); };
    const double online = online_dynamics_value(m, pol, traj, 4, 15, reward, 0);
    const double sled = calc_returns(g, identity_adapter(AdapterFamily::identity, 2), traj, 4, 15, reward);
    CHECK(online == doctest::Approx(sled).epsilon(1e-14));
    CHECK(online == doctest::Approx(return_of(traj)).epsilon(1e-12));
}

TEST_CASE("extrapolators") {
    const std::vector<double> ones(5, 1.0);
    CHECK(avg_reward_extrapolate(ones, 31) == 31.0);
    const std::vector<double> zeros(3, 0.0);
    CHECK(avg_reward_extrapolate(zeros, 31) == 0.0);
    CHECK(avg_reward_extrapolate(zeros, 1000) == 0.0);
    CHECK(last_reward_extrapolate(std::vector<double>{0.4, 0.0}, 31) == 0.0);
    CHECK(last_reward_extrapolate(std::vector<double>{0.25, 0.25}, 31) == 31 * 0.25);
    CHECK_THROWS_AS(avg_reward_extrapolate(std::vector<double>{}, 3), Error);
    CHECK_THROWS_AS(avg_reward_extrapolate(ones, 4), Error);
    CHECK_THROWS_AS(last_reward_extrapolate(std::vector<double>{}, 3), Error);
}

TEST_CASE("extrapolators are exact on constant-reward trajectories") {
    for (double r : {0.0, 0.3, 1.0, 2.5}) {
        auto env = testutil::identity_env(2, 30, r);
        FixedScalarPolicy pol("p", 0.0);
        auto recs = collect_records(env, pol, std::vector<State>{{0.1, 0.2}, {0.3, 0.4}}, 1, 30, 0);
        for (int ell : {0, 1, 5, 29}) {
            CHECK(avg_reward_policy_value(recs, ell, 30) == doctest::Approx(*recs[0].true_value).epsilon(1e-14));
            CHECK(last_reward_policy_value(recs, ell, 30) == doctest::Approx(*recs[0].true_value).epsilon(1e-14));
        }
    }
}

TEST_CASE("off-policy mean") {
    PolicyDataset d;
    for (double v : {1.0, 2.0, 3.0}) d.records.push_back(PolicyRecord{"p", {}, v});
    CHECK(offpolicy_mean(d) == 2.0);
    PolicyDataset one;
    one.records.push_back(PolicyRecord{"p", {}, 4.5});
    CHECK(offpolicy_mean(one) == 4.5);
    CHECK_THROWS_AS(offpolicy_mean(PolicyDataset{}), Error);
    d.records[1].true_value.reset();
    CHECK_THROWS_AS(offpolicy_mean(d), Error);
}

TEST_CASE("delta-Q feature and classifier") {
    auto a = battery_synthesize(0.01, -1.386, 400, 0.0, 400, 0);
    auto b = a;
    CHECK(delta_q_feature(a.capacities) == delta_q_feature(b.capacities));
    std::vector<double> flat(6, 1.0);
    CHECK(delta_q_feature(flat) == std::log(kDeltaQFloor));
    CHECK_THROWS_AS(delta_q_feature(std::vector<double>{1, 1, 1, 1}), Error);

    // A threshold on the feature separates the groups perfectly.
    std::vector<double> x;
    std::vector<LifeGroup> y;
    for (int i = 0; i < 40; ++i) {
        x.push_back(i < 20 ? -6.0 + 0.1 * i : -10.0 + 0.1 * (i - 20));
        y.push_back(i < 20 ? LifeGroup::low : LifeGroup::high);
    }
    auto clf = delta_q_classify(x, y, 5);
    int correct = 0;
    for (std::size_t i = 0; i < x.size(); ++i) correct += clf.predict(x[i]) == y[i];
    CHECK(correct >= 36);
    CHECK(default_c_grid().size() == 10);
    CHECK(default_c_grid().front() == doctest::Approx(1e-4));
    CHECK(default_c_grid().back() == doctest::Approx(1e4));

    std::vector<LifeGroup> only_low(5, LifeGroup::low);
    auto constant = delta_q_classify(std::vector<double>{1, 2, 3, 4, 5}, only_low, 5);
    CHECK(constant.predict(100.0) == LifeGroup::low);
}

TEST_CASE("majority class") {
    CHECK(majority_class(std::vector<LifeGroup>{LifeGroup::high, LifeGroup::low, LifeGroup::high}) == LifeGroup::high);
    CHECK(majority_class(std::vector<LifeGroup>{LifeGroup::high, LifeGroup::low}) == LifeGroup::low);
}

TEST_CASE("battery: delta-Q beats the majority class on full data and SLED is stable under filtering") {
    BatteryConfig cfg;
    auto split = battery_generate(cfg, 0);
    CHECK(split.train.size() == 41);
    CHECK(split.test.size() == 83);
    auto rows = run_battery(cfg, split, 0);
    auto acc = [&](const std::string& method, const std::string& set) {
        for (const auto& r : rows)
            if (r.method == method && r.train_set == set) return r.accuracy;
        FAIL("missing row " << method << "/" << set);
        return 0.0;
    };
    CHECK(acc("delta_q", "full") > acc("majority", "full"));
    CHECK(acc("delta_q", "filtered") < acc("delta_q", "full") - 0.2);
    CHECK(std::abs(acc("sled", "full") - acc("sled", "filtered")) < 0.05);
}
