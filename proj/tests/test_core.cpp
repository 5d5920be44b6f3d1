#include <doctest.h>

#include <sstream>

#include "shortlong/envs.hpp"
#include "shortlong/io.hpp"
#include "shortlong/policygen.hpp"
#include "test_util.hpp"

using namespace shortlong;
using testutil::FixedScalarPolicy;

TEST_CASE("rollout under identity dynamics keeps the start state") {
    auto env = testutil::identity_env(3, 3);
    FixedScalarPolicy pol("p", 0.0);
    State s0{0.1, -0.2, 0.3};
    auto traj = rollout(env, pol, s0, 3, 7);
    REQUIRE(traj.states.size() == 4);
    REQUIRE(traj.rewards.size() == 4);
    REQUIRE(traj.length() == 3);
    for (const auto& s : traj.states) CHECK(s == s0);
}

TEST_CASE("rollout is bit-identical for equal seeds") {
    KidneyEnv env;
    auto pol = make_controller_policy(
        "eps", PolicySpec{PolicyKind::discrete_controller, {}, {}, {}, 10, 0.3});
    auto s0 = kidney_initial_states(1, 3)[0];
    auto a = rollout(env, *pol, s0, 30, 99);
    auto b = rollout(env, *pol, s0, 30, 99);
    CHECK(a == b);
    auto c = rollout(env, *pol, s0, 30, 100);
    CHECK_FALSE(a == c);
}

TEST_CASE("HIV rollout under both drugs stays finite and nonnegative") {
    HivEnv env;
    ConstantPolicy both("both", hiv_actions()[2]);
    auto s0 = hiv_initial_states(1, 0.0, 0)[0];
    auto traj = rollout(env, both, s0, 200, 0);
    for (const auto& s : traj.states) {
        CHECK(all_finite(s.values));
        for (double v : s.values) CHECK(v >= 0.0);
    }
}

TEST_CASE("return_of sums the stored rewards") {
    Trajectory t;
    t.rewards = {0, 0, 0};
    CHECK(return_of(t) == 0.0);
    t.rewards = {1, 2, 3};
    CHECK(return_of(t) == 6.0);
    Trajectory empty;
    CHECK_THROWS_AS(return_of(empty), Error);
}

TEST_CASE("return_of matches the reward function over visited states") {
    KidneyEnv env;
    auto pol = make_controller_policy(
        "c", PolicySpec{PolicyKind::continuous_controller, {}, {}, {}, {}, 0.2});
    for (const auto& s0 : kidney_initial_states(5, 11)) {
        auto traj = rollout(env, *pol, s0, 30, 5);
        double g = 0.0;
        for (const auto& s : traj.states) g += env.reward(s);
        CHECK(return_of(traj) == doctest::Approx(g).epsilon(1e-14));
        CHECK(traj.rewards.size() == 31);
        CHECK(return_of(traj) <= 31.0);
    }
}

TEST_CASE("policy value on a constant-reward env counts L+1 rewards") {
    auto env = testutil::identity_env(2, 30, 1.0);
    FixedScalarPolicy pol("p", 0.0);
    std::vector<State> starts{State{0.0, 0.0}, State{1.0, 2.0}};
    CHECK(policy_value_mc(env, pol, starts, 1, 30, 0) == 31.0);
}

TEST_CASE("deterministic env: rollouts collapse the Monte-Carlo mean") {
    HivEnv env;
    ConstantPolicy rti("rti", hiv_actions()[0]);
    auto starts = hiv_initial_states(3, 0.3, 4);
    double manual = 0.0;
    for (const auto& s : starts) manual += return_of(rollout(env, rti, s, 20, 1));
    manual /= 3.0;
    CHECK(policy_value_mc(env, rti, starts, 1, 20, 0) == manual);
    CHECK(policy_value_mc(env, rti, starts, 5, 20, 0) == doctest::Approx(manual).epsilon(1e-14));
}

TEST_CASE("stochastic kidney policy: standard error shrinks with 30 rollouts") {
    KidneyEnv env;
    auto pol = make_controller_policy(
        "eps", PolicySpec{PolicyKind::discrete_controller, {}, {}, {}, 10, 0.5});
    std::vector<State> start{kidney_initial_states(1, 2)[0]};
    auto spread = [&](int n_rollouts) {
        std::vector<double> v;
        for (std::uint64_t s = 0; s < 40; ++s)
            v.push_back(policy_value_mc(env, *pol, start, n_rollouts, 30, s));
        double m = 0.0;
        for (double x : v) m += x;
        m /= v.size();
        double var = 0.0;
        for (double x : v) var += (x - m) * (x - m);
        return std::sqrt(var / (v.size() - 1));
    };
    const double sd1 = spread(1);
    const double sd30 = spread(30);
    CHECK(sd30 < sd1);
    const double ratio = sd1 / sd30;
    CHECK(ratio > std::sqrt(30.0) / 2.0);
    CHECK(ratio < std::sqrt(30.0) * 2.0);
}

TEST_CASE("featurize_short lengths") {
    PolicyRecord rec;
    Trajectory t;
    t.states = {State{1, 2}, State{3, 4}};
    t.actions = {Action{0, {0.0}}};
    t.rewards = {0.5, 0.6};
    rec.trajectories = {t};
    auto fv = featurize_short(rec, 1, true);
    CHECK(fv.size() == 6);
    CHECK(fv.values == std::vector<double>{1, 2, 3, 4, 0.5, 0.6});
    CHECK(featurize_short(rec, 1, false).size() == 4);

    CHECK(feature_length(5, 3, true, 30) == 720);
    KidneyEnv env;
    auto pol = make_controller_policy(
        "c", PolicySpec{PolicyKind::discrete_controller, {}, {}, {}, 5, 0.1});
    auto starts = kidney_initial_states(1, 0);
    auto recs = collect_records(env, *pol, starts, 30, 30, 0);
    CHECK(featurize_short(recs[0], 3, true).size() == 720);
    CHECK(featurize_short(recs[0], 3, true).size() - featurize_short(recs[0], 3, false).size() ==
          4 * 30);
    CHECK_THROWS_AS(featurize_short(recs[0], 31, true), Error);
}

TEST_CASE("featurize_short is injective on prefixes") {
    PolicyRecord a;
    Trajectory t;
    t.states = {State{1, 2}, State{3, 4}, State{5, 6}};
    t.actions = {Action{0, {0.0}}, Action{0, {0.0}}};
    t.rewards = {0.1, 0.2, 0.3};
    a.trajectories = {t};
    PolicyRecord b = a;
    b.trajectories[0].rewards[1] = 0.25;
    PolicyRecord c = a;
    c.trajectories[0].states[1].values[0] = 3.5;
    CHECK(featurize_short(a, 2, true) != featurize_short(b, 2, true));
    CHECK(featurize_short(a, 2, true) != featurize_short(c, 2, true));
    CHECK(featurize_short(a, 2, false) != featurize_short(c, 2, false));
    // Changes after the prefix are invisible.
    PolicyRecord d = a;
    d.trajectories[0].states[2].values[0] = 9.0;
    CHECK(featurize_short(a, 1, true) == featurize_short(d, 1, true));
}

TEST_CASE("truncate hides the ground truth and later steps") {
    HivEnv env;
    ConstantPolicy pi("pi", hiv_actions()[1]);
    auto recs = collect_records(env, pi, hiv_initial_states(2, 0.2, 0), 1, 10, 0);
    auto cut = truncate(recs[0], 4);
    CHECK_FALSE(cut.true_value.has_value());
    CHECK(cut.trajectories[0].states.size() == 5);
    CHECK(cut.trajectories[0].rewards.size() == 5);
    CHECK(cut.trajectories[0].actions.size() == 4);
    CHECK(cut.trajectories[0].states[4] == recs[0].trajectories[0].states[4]);
    CHECK_THROWS_AS(truncate(recs[0], 11), Error);
}

TEST_CASE("serial and parallel record collection agree bit for bit") {
    KidneyEnv env;
    auto pol = make_controller_policy(
        "eps", PolicySpec{PolicyKind::discrete_controller, {}, {}, {}, 10, 0.4});
    auto starts = kidney_initial_states(8, 5);
    auto a = collect_records(env, *pol, starts, 4, 30, 17, Exec::serial);
    auto b = collect_records(env, *pol, starts, 4, 30, 17, Exec::parallel);
    CHECK(a == b);
}

TEST_CASE("derive_seed depends only on coordinates") {
    CHECK(derive_seed(1, {2, 3}) == derive_seed(1, {2, 3}));
    CHECK(derive_seed(1, {2, 3}) != derive_seed(1, {3, 2}));
    CHECK(derive_seed(1, {2}) != derive_seed(2, {2}));
}

TEST_CASE("JSONL round trip preserves every double") {
    HivEnv env;
    ConstantPolicy rti("rti", hiv_actions()[0]);
    PolicyDataset d;
    d.horizon = 15;
    d.env_id = "hiv";
    d.records = collect_records(env, rti, hiv_initial_states(3, 0.6, 8), 2, 15, 3);
    std::stringstream ss;
    write_jsonl(ss, d);
    auto back = read_jsonl(ss);
    // Action ids are not part of the file format; the vectors are.
    for (auto& r : d.records)
        for (auto& t : r.trajectories)
            for (auto& a : t.actions) a.id = -1;
    CHECK(back == d);
    CHECK(back.policy_ids() == std::vector<std::string>{"rti"});
}
