#include <doctest.h>

#include <cmath>

#include "shortlong/envs.hpp"
#include "shortlong/policygen.hpp"
#include "shortlong/sled.hpp"
#include "test_util.hpp"

using namespace shortlong;
using testutil::FixedScalarPolicy;
using testutil::LinearEnv;

namespace {

Eigen::MatrixXd stable_matrix() {
    Eigen::MatrixXd a(3, 3);
    a << 0.9, 0.1, 0.0, -0.05, 0.8, 0.1, 0.02, 0.0, 0.95;
    return a;
}

std::vector<State> random_states(int n, std::uint64_t seed, std::size_t d = 3) {
    Rng rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<State> out;
    for (int i = 0; i < n; ++i) {
        State s;
        for (std::size_t j = 0; j < d; ++j) s.values.push_back(u(rng));
        out.push_back(s);
    }
    return out;
}

PolicyDataset linear_dataset(const Environment& env, int n_policies, int horizon, std::uint64_t seed) {
    PolicyDataset d;
    d.horizon = horizon;
    d.env_id = env.id();
    for (int p = 0; p < n_policies; ++p) {
        FixedScalarPolicy pol("p" + std::to_string(p), 0.1 * p);
        auto recs = collect_records(env, pol, random_states(3, seed + p), 1, horizon, seed);
        d.records.insert(d.records.end(), recs.begin(), recs.end());
    }
    return d;
}

/// s' = A s + noise.
class NoisyLinearEnv final : public Environment {
public:
    NoisyLinearEnv(Eigen::MatrixXd a, double sd) : a_(std::move(a)), sd_(sd) {}
    std::string id() const override { return "noisy-linear"; }
    std::size_t state_dim() const override { return static_cast<std::size_t>(a_.rows()); }
    std::size_t action_dim() const override { return 1; }
    int horizon() const override { return 20; }
    bool stochastic() const override { return true; }
    double reward(const State& s) const override { return s[0]; }
    State step(const State& s, const Action&, Rng& rng) const override {
        std::normal_distribution<double> z(0.0, sd_);
        Eigen::VectorXd y = a_ * Eigen::Map<const Eigen::VectorXd>(s.values.data(), s.size());
        State out(std::vector<double>(y.data(), y.data() + y.size()));
        for (auto& v : out.values) v += z(rng);
        return out;
    }

private:
    Eigen::MatrixXd a_;
    double sd_;
};

CurveModel true_base(double a = 0.01, double b = -1.386) {
    CurveModel m;
    m.family = CurveFamily::negexp;
    m.shape = {a, b};
    return m;
}

}  // namespace

TEST_CASE("linear system identification") {
    LinearEnv env(stable_matrix(), 20);
    auto data = linear_dataset(env, 6, 20, 1);
    std::vector<DynamicsCandidate> cands{{DynamicsFamily::linear, 0.0, {}}};
    auto g = fit_global_model(data, cands, 3, 0);
    REQUIRE(g.family() == DynamicsFamily::linear);
    const Eigen::MatrixXd err = g.matrix() - stable_matrix();
    CHECK(err.operatorNorm() <= 1e-3);
    CHECK(g.offset().norm() <= 1e-3);
}

TEST_CASE("cross-validation prefers the generating linear family") {
    int linear_wins = 0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        NoisyLinearEnv env(stable_matrix(), 1e-3);
        auto data = linear_dataset(env, 8, 20, 10 + seed);
        MlpHyper h;
        h.layer_sizes = {0, 32, 0};
        h.max_updates = 800;
        std::vector<DynamicsCandidate> cands{{DynamicsFamily::linear, 0.0, {}},
                                             {DynamicsFamily::mlp, 0.0, h}};
        auto g = fit_global_model(data, cands, 4, seed);
        if (g.family() == DynamicsFamily::linear) ++linear_wins;
    }
    CHECK(linear_wins >= 4);
}

TEST_CASE("one transition pair is interpolated exactly") {
    Eigen::MatrixXd s(1, 3), next(1, 3);
    s << 0.3, -0.2, 0.5;
    next << 0.1, 0.4, -0.7;
    auto g = fit_dynamics({DynamicsFamily::linear, 0.0, {}}, s, next, 0);
    auto p = g.predict(State{0.3, -0.2, 0.5});
    for (int j = 0; j < 3; ++j) CHECK(std::abs(p[j] - next(0, j)) <= 1e-12);
}

TEST_CASE("identity adapters reproduce the global model exactly") {
    auto g = GlobalDynamics::linear(stable_matrix(), Eigen::VectorXd::Constant(3, 0.01));
    for (auto fam : {AdapterFamily::identity, AdapterFamily::affine_output, AdapterFamily::input_shift}) {
        auto a = identity_adapter(fam, 3);
        CHECK(static_cast<std::size_t>(a.params.size()) == adapter_parameter_count(fam, 3));
        for (const auto& s : random_states(20, 3)) CHECK(a.apply(g, s) == g.predict(s));
    }
}

TEST_CASE("adapter on data generated by the global model stays at identity") {
    LinearEnv env(stable_matrix(), 20);
    auto g = GlobalDynamics::linear(stable_matrix(), Eigen::VectorXd::Zero(3));
    FixedScalarPolicy pol("p", 0.0);
    std::vector<Trajectory> prefixes;
    for (const auto& s : random_states(3, 4)) prefixes.push_back(rollout(env, pol, s, 10, 0));
    const std::vector<AdapterFamily> fams{AdapterFamily::affine_output, AdapterFamily::input_shift};
    auto a = fit_adapter(g, prefixes, 10, fams, 5, 0);
    auto id = identity_adapter(a.family, 3);
    CHECK((a.params - id.params).norm() <= 1e-6);
    double err_adapted = 0.0, err_global = 0.0;
    for (const auto& t : prefixes)
        for (std::size_t k = 0; k < 10; ++k) {
            const auto p = a.apply(g, t.states[k]);
            const auto q = g.predict(t.states[k]);
            for (int j = 0; j < 3; ++j) {
                err_adapted += std::pow(p[j] - t.states[k + 1][j], 2);
                err_global += std::pow(q[j] - t.states[k + 1][j], 2);
            }
        }
    CHECK(err_adapted <= err_global + 1e-20);
}

TEST_CASE("affine adapter recovers a 1.1 output scale from ten steps") {
    Eigen::MatrixXd a = stable_matrix();
    LinearEnv scaled(1.1 * a, 20);
    auto g = GlobalDynamics::linear(a, Eigen::VectorXd::Zero(3));
    FixedScalarPolicy pol("p", 0.0);
    std::vector<Trajectory> prefixes{rollout(scaled, pol, State{0.8, -0.6, 0.9}, 10, 0)};
    const std::vector<AdapterFamily> fams{AdapterFamily::affine_output};
    auto fit = fit_adapter(g, prefixes, 10, fams, 5, 0);
    REQUIRE(fit.family == AdapterFamily::affine_output);
    for (int j = 0; j < 3; ++j) CHECK(std::abs(fit.params(j) - 1.1) <= 0.05 * 1.1);
}

TEST_CASE("too few transitions force the identity fallback") {
    auto g = GlobalDynamics::linear(stable_matrix(), Eigen::VectorXd::Zero(3));
    LinearEnv env(stable_matrix(), 5);
    FixedScalarPolicy pol("p", 0.0);
    std::vector<Trajectory> prefixes{rollout(env, pol, State{0.1, 0.2, 0.3}, 5, 0)};
    const std::vector<AdapterFamily> fams{AdapterFamily::affine_output, AdapterFamily::input_shift};
    auto a = fit_adapter(g, prefixes, 1, fams, 5, 0);
    CHECK(a.family == AdapterFamily::identity);
    CHECK(a.fallback);
}

TEST_CASE("calc_returns on identity dynamics with constant reward") {
    auto env = testutil::identity_env(2, 30, 1.0);
    FixedScalarPolicy pol("p", 0.0);
    auto traj = rollout(env, pol, State{0.5, 0.5}, 30, 0);
    auto g = GlobalDynamics::linear(Eigen::MatrixXd::Identity(2, 2), Eigen::VectorXd::Zero(2));
    auto id = identity_adapter(AdapterFamily::identity, 2);
    auto one = [](const State&) { return 1.0; };
    CHECK(calc_returns(g, id, truncate(PolicyRecord{"p", {traj}, {}}, 5).trajectories[0], 5, 30, one) == 31.0);
    auto affine_id = identity_adapter(AdapterFamily::affine_output, 2);
    auto r = [](const State& s) { return s[0] - 2.0 * s[1]; };
    CHECK(calc_returns(g, affine_id, traj, 5, 30, r) == calc_returns(g, id, traj, 5, 30, r));
}

TEST_CASE("oracle dynamics reproduce Monte-Carlo returns") {
    HivEnv env;
    ConstantPolicy rti("rti", hiv_actions()[0]);
    const Action act = hiv_actions()[0];
    auto oracle = GlobalDynamics::function(6, [&](const State& s) { return env.advance(s, act); });
    auto id = identity_adapter(AdapterFamily::identity, 6);
    for (const auto& s0 : hiv_initial_states(3, 0.6, 1)) {
        auto traj = rollout(env, rti, s0, 40, 0);
        const double mc = return_of(traj);
        for (int ell : {1, 10, 39}) {
            const double v = calc_returns(oracle, id, truncate(PolicyRecord{"x", {traj}, {}}, ell).trajectories[0],
                                          ell, 40, [&](const State& s) { return env.reward(s); });
            CHECK(std::abs(v - mc) <= 1e-9 * std::abs(mc));
        }
    }
}

TEST_CASE("global dynamics and curve models survive JSON") {
    auto g = GlobalDynamics::linear(stable_matrix(), Eigen::VectorXd::Constant(3, 0.2));
    auto back = global_dynamics_from_json(Json::parse(to_json(g).dump()));
    for (const auto& s : random_states(5, 6)) CHECK(back.predict(s) == g.predict(s));
    CurveModel m = true_base();
    m.lfc = 612.5;
    m.y_shift = 0.01;
    auto mb = curve_model_from_json(Json::parse(to_json(m).dump()));
    CHECK(mb.eval(100.0) == m.eval(100.0));
}

TEST_CASE("battery base fit recovers the generating curve") {
    // A steep shape keeps cycle 1 on the plateau, where normalization is exact.
    std::vector<CapacityCurve> curves;
    for (int i = 0; i < 12; ++i)
        curves.push_back(battery_synthesize(0.05, -1.386, 400 + 50 * i, 0.0, 400 + 50 * i, i));
    auto m = battery_fit_base(curves, 10);
    CHECK(m.family == CurveFamily::negexp);
    CHECK(std::abs(m.shape[0] - 0.05) <= 1e-4);
    CHECK(std::abs(m.shape[1] + 1.386) <= 1e-4);
    double resid = 0.0;
    for (const auto& c : curves)
        for (int t = 1; t <= *c.lifetime; ++t) {
            const auto norm = normalize_capacity(c.capacities);
            resid += std::pow(m.base(*c.lifetime - t) - norm[static_cast<std::size_t>(t - 1)], 2);
        }
    CHECK(resid < 1e-8);
}

TEST_CASE("battery base fit picks the linear family for linear curves") {
    std::vector<CapacityCurve> curves;
    const double p[2] = {-0.0004, 0.8};
    for (int i = 0; i < 12; ++i) {
        curves.push_back(battery_synthesize_family(CurveFamily::linear, p, 300 + 40 * i, 0.0, 300 + 40 * i, i));
    }
    CHECK(battery_fit_base(curves, 10).family == CurveFamily::linear);
}

TEST_CASE("battery base fit works with a single curve") {
    std::vector<CapacityCurve> one{battery_synthesize(0.01, -1.386, 300, 0.0, 300, 0)};
    auto m = battery_fit_base(one, 10);
    for (double x : {0.0, 100.0, 250.0}) CHECK(std::isfinite(m.base(x)));
    std::vector<CapacityCurve> none;
    CHECK_THROWS_AS(battery_fit_base(none, 10), Error);
}

TEST_CASE("lifetime from a noiseless five-cycle prefix") {
    for (int life : {400, 600, 1100}) {
        auto c = battery_synthesize(0.01, -1.386, life, 0.0, life, 0);
        auto f = battery_fit_lifetime(true_base(), curve_prefix(c, 5));
        REQUIRE(f.ok);
        CHECK(std::abs(f.lfc - life) <= 1.0);
    }
}

TEST_CASE("lifetime estimate under small prefix noise") {
    int within = 0;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        auto c = battery_synthesize(0.01, -1.386, 600, 1e-6, 700, seed + 1);
        auto f = battery_fit_lifetime(true_base(), curve_prefix(c, 5));
        if (std::abs(f.lfc - 600.0) <= 60.0) ++within;
    }
    CHECK(within >= 45);
}

TEST_CASE("a constant capacity offset does not move the lifetime estimate") {
    auto c = battery_synthesize(0.01, -1.386, 600, 0.0, 700, 0);
    auto shifted = c;
    for (double& v : shifted.capacities) v += 0.01;
    auto a = battery_fit_lifetime(true_base(), curve_prefix(c, 5));
    auto b = battery_fit_lifetime(true_base(), curve_prefix(shifted, 5));
    CHECK(std::abs(a.lfc - b.lfc) <= 1e-6);
    CHECK_THROWS_AS(battery_fit_lifetime(true_base(), curve_prefix(c, 1)), Error);
}

TEST_CASE("life-group threshold convention") {
    CHECK(kLifeThreshold == 550.0);
    CHECK(battery_classify(549.9) == LifeGroup::low);
    CHECK(battery_classify(550.0) == LifeGroup::high);
    CHECK(battery_classify(100.0, 50.0) == LifeGroup::high);
    CHECK_THROWS_AS(battery_classify(100.0, 0.0), Error);
}
