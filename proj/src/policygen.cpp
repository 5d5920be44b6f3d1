#include "shortlong/policygen.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace shortlong {

const char* to_string(PolicyKind k) {
    switch (k) {
        case PolicyKind::fqi_greedy: return "fqi_greedy";
        case PolicyKind::discrete_controller: return "discrete_controller";
        case PolicyKind::continuous_controller: return "continuous_controller";
    }
    return "?";
}

PolicyKind policy_kind_from_string(const std::string& s) {
    if (s == "fqi_greedy") return PolicyKind::fqi_greedy;
    if (s == "discrete_controller") return PolicyKind::discrete_controller;
    if (s == "continuous_controller") return PolicyKind::continuous_controller;
    throw Error("unknown policy kind '" + s + "'");
}

namespace {

Json action_json(const Action& a) { return {{"id", a.id}, {"vector", a.vector}}; }

Action action_from_json(const Json& j) {
    return {j.at("id").get<int>(), j.at("vector").get<std::vector<double>>()};
}

bool same_action(const Action& a, const Action& b) {
    if (a.id >= 0 && b.id >= 0) return a.id == b.id;
    return a.vector == b.vector;
}

}  // namespace

Json to_json(const PolicySpec& s) {
    Json j;
    j["kind"] = to_string(s.kind);
    if (!s.action_set.empty()) {
        Json acts = Json::array();
        for (const auto& a : s.action_set) acts.push_back(action_json(a));
        j["action_set"] = acts;
    }
    if (s.gamma) j["gamma"] = *s.gamma;
    if (s.iterations) j["iterations"] = *s.iterations;
    if (s.n_bins) j["n_bins"] = *s.n_bins;
    if (s.epsilon) j["epsilon"] = *s.epsilon;
    return j;
}

PolicySpec policy_spec_from_json(const Json& j) {
    PolicySpec s;
    s.kind = policy_kind_from_string(j.at("kind").get<std::string>());
    if (j.contains("action_set"))
        for (const auto& a : j["action_set"]) s.action_set.push_back(action_from_json(a));
    if (j.contains("gamma")) s.gamma = j["gamma"].get<double>();
    if (j.contains("iterations")) s.iterations = j["iterations"].get<int>();
    if (j.contains("n_bins")) s.n_bins = j["n_bins"].get<int>();
    if (j.contains("epsilon")) s.epsilon = j["epsilon"].get<double>();
    return s;
}

Json to_json(const StateEncoding& e) { return {{"log10", e.log10}, {"scale", e.scale}}; }

StateEncoding state_encoding_from_json(const Json& j) {
    return {j.value("log10", false), j.value("scale", 1.0)};
}

namespace {

double encode_value(const StateEncoding& enc, double v) {
    if (!enc.log10) return v;
    return std::log10(std::max(v * enc.scale, 0.0) + 1.0);
}

}  // namespace

std::vector<double> encode_state_action(const StateEncoding& enc, const State& s, const Action& a) {
    std::vector<double> out;
    out.reserve(s.size() + a.vector.size());
    for (double v : s.values) out.push_back(encode_value(enc, v));
    out.insert(out.end(), a.vector.begin(), a.vector.end());
    return out;
}

Eigen::MatrixXd encode_state_actions(const StateEncoding& enc, std::span<const State> states,
                                     std::span<const Action> actions) {
    if (states.empty() || actions.empty()) return {};
    const Eigen::Index d = static_cast<Eigen::Index>(states[0].size());
    const Eigen::Index da = static_cast<Eigen::Index>(actions[0].vector.size());
    Eigen::MatrixXd x(static_cast<Eigen::Index>(states.size() * actions.size()), d + da);
    Eigen::Index row = 0;
    for (const auto& s : states) {
        Eigen::RowVectorXd enc_s(d);
        for (Eigen::Index j = 0; j < d; ++j) enc_s(j) = encode_value(enc, s.values[j]);
        for (const auto& a : actions) {
            x.row(row).head(d) = enc_s;
            for (Eigen::Index j = 0; j < da; ++j) x(row, d + j) = a.vector[j];
            ++row;
        }
    }
    return x;
}

// ---------------------------------------------------------------- policies

std::vector<double> QGreedyPolicy::q_values(const State& s) const {
    const Eigen::MatrixXd x = encode_state_actions(enc_, std::span<const State>(&s, 1), spec_.action_set);
    const Eigen::MatrixXd q = q_.predict_rows(x);
    return {q.data(), q.data() + q.size()};
}

Action QGreedyPolicy::act(const State& s, Rng&) const {
    const auto q = q_values(s);
    const auto best = std::max_element(q.begin(), q.end());
    return spec_.action_set[static_cast<std::size_t>(best - q.begin())];
}

Action UniformRandomPolicy::act(const State&, Rng& rng) const {
    std::uniform_int_distribution<std::size_t> pick(0, actions_.size() - 1);
    return actions_[pick(rng)];
}

double ControllerPolicy::target_dose(const State& s) const {
    const double hb = s[0] * cfg_.env.state_scale;
    if (spec_.kind == PolicyKind::discrete_controller) {
        const int n = spec_.n_bins.value();
        const double raw = std::clamp(cfg_.gain * (cfg_.hb_target - hb), 0.0, 1.0);
        const double step = 1.0 / static_cast<double>(n - 1);
        return std::round(raw / step) * step;
    }
    const double prev = s[3] * cfg_.env.state_scale / cfg_.env.dose_unit;
    const auto [low, high] = cfg_.env.hb_healthy_range;
    if (hb < low) return std::max(prev, cfg_.min_dose) * 1.25;
    if (hb > high) return prev * 0.75;
    return prev < cfg_.min_dose ? cfg_.start_dose : prev;
}

ControllerPolicy::Decision ControllerPolicy::decide(const State& s, Rng& rng) const {
    const double eps = spec_.epsilon.value_or(0.0);
    if (eps > 0.0) {
        std::uniform_real_distribution<double> coin(0.0, 1.0);
        if (coin(rng) < eps) {
            double dose;
            if (spec_.kind == PolicyKind::discrete_controller) {
                const int n = spec_.n_bins.value();
                std::uniform_int_distribution<int> bin(0, n - 1);
                dose = static_cast<double>(bin(rng)) / static_cast<double>(n - 1);
            } else {
                dose = coin(rng);
            }
            return {{-1, {dose}}, true};
        }
    }
    return {{-1, {target_dose(s)}}, false};
}

std::shared_ptr<const ControllerPolicy> make_controller_policy(const std::string& id,
                                                               const PolicySpec& spec,
                                                               const ControllerConfig& cfg) {
    if (spec.kind == PolicyKind::fqi_greedy)
        throw Error("make_controller_policy: spec kind is not a controller");
    if (spec.kind == PolicyKind::discrete_controller && spec.n_bins.value_or(0) < 2)
        throw Error("make_controller_policy: discrete controller needs n_bins >= 2");
    if (spec.epsilon && (*spec.epsilon < 0.0 || *spec.epsilon >= 1.0))
        throw Error("make_controller_policy: epsilon must lie in [0, 1)");
    return std::make_shared<ControllerPolicy>(id, spec, cfg);
}

// ---------------------------------------------------------------- FQI

std::vector<Trajectory> exploration_data(const Environment& env, const std::vector<Action>& actions,
                                         std::span<const State> init_states, int n_rollouts,
                                         int horizon, std::uint64_t seed, Exec exec) {
    if (init_states.empty()) throw Error("exploration_data: empty initial-state pool");
    if (actions.empty()) throw Error("exploration_data: empty action set");
    const UniformRandomPolicy explorer("explore", actions);
    std::vector<Trajectory> out(static_cast<std::size_t>(n_rollouts));
    for_each_index(
        out.size(),
        [&](std::size_t i) {
            out[i] = rollout(env, explorer, init_states[i % init_states.size()], horizon,
                             derive_seed(seed, {i}));
        },
        exec);
    return out;
}

std::vector<std::shared_ptr<const QGreedyPolicy>> fqi_train_snapshots(
    const std::string& id_prefix, const std::vector<Action>& action_set, double gamma,
    int iterations, std::span<const Trajectory> exploration, const FqiConfig& cfg,
    std::uint64_t seed) {
    if (iterations < 1) throw Error("fqi_train: iterations must be >= 1");
    if (action_set.empty()) throw Error("fqi_train: empty action set");
    if (gamma < 0.0 || gamma > 1.0) throw Error("fqi_train: gamma must lie in [0, 1]");

    std::vector<State> next_states;
    std::vector<std::vector<double>> rows;
    std::vector<double> rewards;
    std::vector<bool> seen(action_set.size(), false);
    for (const auto& traj : exploration) {
        for (std::size_t t = 0; t < traj.actions.size(); ++t) {
            const auto it = std::find_if(action_set.begin(), action_set.end(),
                                         [&](const Action& a) { return same_action(a, traj.actions[t]); });
            if (it == action_set.end()) continue;
            seen[static_cast<std::size_t>(it - action_set.begin())] = true;
            rows.push_back(encode_state_action(cfg.encoding, traj.states[t], *it));
            next_states.push_back(traj.states[t + 1]);
            rewards.push_back(traj.rewards[t + 1]);
        }
    }
    if (rows.empty()) throw Error("fqi_train: exploration data contains no action from the action set");
    if (std::find(seen.begin(), seen.end(), false) != seen.end())
        throw Error("fqi_train: exploration data does not cover every action in the action set");

    const Eigen::Index n = static_cast<Eigen::Index>(rows.size());
    const Eigen::Index na = static_cast<Eigen::Index>(action_set.size());
    RegressionData data;
    data.x.resize(n, static_cast<Eigen::Index>(rows[0].size()));
    for (Eigen::Index i = 0; i < n; ++i)
        data.x.row(i) = Eigen::Map<const Eigen::RowVectorXd>(rows[i].data(), data.x.cols());
    data.weights = Eigen::VectorXd::Ones(n);
    const Eigen::Map<const Eigen::VectorXd> r(rewards.data(), n);
    const Eigen::MatrixXd next_x = encode_state_actions(cfg.encoding, next_states, action_set);

    MlpHyper hyper = cfg.hyper;
    if (hyper.layer_sizes.empty()) hyper.layer_sizes = {0, 1};
    hyper.layer_sizes.front() = static_cast<int>(data.x.cols());
    hyper.layer_sizes.back() = 1;

    PolicySpec spec;
    spec.kind = PolicyKind::fqi_greedy;
    spec.action_set = action_set;
    spec.gamma = gamma;

    std::vector<std::shared_ptr<const QGreedyPolicy>> out;
    Eigen::VectorXd target = r;
    for (int k = 1; k <= iterations; ++k) {
        data.y = target;
        RegressionModel q = mlp_fit(data, hyper, derive_seed(seed, {static_cast<std::uint64_t>(k)}));
        if (k < iterations && gamma > 0.0) {
            const Eigen::MatrixXd qn = q.predict_rows(next_x);
            const Eigen::Map<const Eigen::MatrixXd> grid(qn.data(), na, n);
            target = r + gamma * grid.colwise().maxCoeff().transpose();
        }
        spec.iterations = k;
        out.push_back(std::make_shared<QGreedyPolicy>(id_prefix + "-it" + std::to_string(k), spec,
                                                      cfg.encoding, std::move(q)));
    }
    return out;
}

std::shared_ptr<const QGreedyPolicy> fqi_train(const std::string& id,
                                               const std::vector<Action>& action_set, double gamma,
                                               int iterations,
                                               std::span<const Trajectory> exploration,
                                               const FqiConfig& cfg, std::uint64_t seed) {
    auto snaps = fqi_train_snapshots(id, action_set, gamma, iterations, exploration, cfg, seed);
    auto last = snaps.back();
    return std::make_shared<QGreedyPolicy>(id, last->spec(), last->encoding(), last->q());
}

// ---------------------------------------------------------------- policy sets

FqiConfig default_hiv_fqi() {
    FqiConfig c;
    c.encoding = {true, 1e5};
    c.hyper.layer_sizes = {0, 50, 25, 10, 1};
    c.hyper.learning_rate = 1e-3;
    c.hyper.max_updates = 1500;
    c.hyper.batch_size = 100;
    c.hyper.patience = 5;
    return c;
}

namespace {

std::string gamma_tag(double g) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", g);
    return buf;
}

struct FqiJob {
    std::string prefix;
    std::vector<Action> actions;
    double gamma;
    bool test;
};

std::vector<PolicyPtr> subsample(std::vector<PolicyPtr> grid, int count, std::uint64_t seed,
                                 const char* what) {
    if (count < 0 || static_cast<std::size_t>(count) > grid.size())
        throw Error(std::string("generate_policy_sets: ") + what + " grid has " +
                    std::to_string(grid.size()) + " policies, " + std::to_string(count) + " requested");
    if (static_cast<std::size_t>(count) == grid.size()) return grid;
    std::vector<std::size_t> idx(grid.size());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(static_cast<std::size_t>(count));
    std::sort(idx.begin(), idx.end());
    std::vector<PolicyPtr> out;
    for (std::size_t i : idx) out.push_back(grid[i]);
    return out;
}

PolicySets hiv_policy_sets(const HivPolicyConfig& cfg, std::uint64_t seed, Exec exec) {
    const HivEnv env(cfg.env);
    const auto pool = hiv_initial_states(cfg.exploration_init_states, cfg.perturbation_rate,
                                         derive_seed(seed, {1}), cfg.env);
    const auto explore = exploration_data(env, hiv_actions(), pool, cfg.exploration_rollouts,
                                          cfg.env.horizon, derive_seed(seed, {2}), exec);
    std::vector<FqiJob> jobs;
    for (double g : cfg.train_gammas)
        jobs.push_back({"hiv-train-g" + gamma_tag(g), hiv_treatment_actions(), g, false});
    for (double g : cfg.test_gammas) jobs.push_back({"hiv-test-g" + gamma_tag(g), hiv_actions(), g, true});

    std::vector<std::vector<std::shared_ptr<const QGreedyPolicy>>> snaps(jobs.size());
    for_each_index(
        jobs.size(),
        [&](std::size_t j) {
            snaps[j] = fqi_train_snapshots(jobs[j].prefix, jobs[j].actions, jobs[j].gamma,
                                           cfg.iterations, explore, cfg.fqi, derive_seed(seed, {3, j}));
        },
        exec);
    std::vector<PolicyPtr> train, test;
    for (std::size_t j = 0; j < jobs.size(); ++j)
        for (auto& p : snaps[j]) (jobs[j].test ? test : train).push_back(p);
    return {subsample(std::move(train), cfg.n_train, derive_seed(seed, {4}), "train"),
            subsample(std::move(test), cfg.n_test, derive_seed(seed, {5}), "test")};
}

PolicySets kidney_policy_sets(const KidneyPolicyConfig& cfg, std::uint64_t seed) {
    if (cfg.min_bins < 2 || cfg.max_bins < cfg.min_bins) throw Error("kidney policies: bad bin range");
    if (!(cfg.min_epsilon >= 0.0 && cfg.max_epsilon < 1.0 && cfg.min_epsilon <= cfg.max_epsilon))
        throw Error("kidney policies: bad epsilon range");
    PolicySets sets;
    for (int i = 0; i < cfg.n_train; ++i) {
        Rng rng(derive_seed(seed, {6, static_cast<std::uint64_t>(i)}));
        PolicySpec spec;
        spec.kind = PolicyKind::discrete_controller;
        spec.n_bins = std::uniform_int_distribution<int>(cfg.min_bins, cfg.max_bins)(rng);
        spec.epsilon = std::uniform_real_distribution<double>(cfg.min_epsilon, cfg.max_epsilon)(rng);
        sets.train.push_back(
            make_controller_policy("kidney-train-" + std::to_string(i), spec, cfg.controller));
    }
    for (int i = 0; i < cfg.n_test; ++i) {
        Rng rng(derive_seed(seed, {7, static_cast<std::uint64_t>(i)}));
        PolicySpec spec;
        spec.kind = PolicyKind::continuous_controller;
        spec.epsilon = std::uniform_real_distribution<double>(cfg.min_epsilon, cfg.max_epsilon)(rng);
        sets.test.push_back(
            make_controller_policy("kidney-test-" + std::to_string(i), spec, cfg.controller));
    }
    return sets;
}

}  // namespace

PolicySets generate_policy_sets(const std::string& env_id, const PolicyGenConfig& cfg,
                                std::uint64_t seed, Exec exec) {
    if (env_id == "hiv") return hiv_policy_sets(cfg.hiv, seed, exec);
    if (env_id == "kidney") return kidney_policy_sets(cfg.kidney, seed);
    throw Error("generate_policy_sets: unknown env_id '" + env_id + "'");
}

// ---------------------------------------------------------------- JSON

namespace {

Json controller_json(const ControllerConfig& c) {
    return {{"hb_target", c.hb_target},
            {"gain", c.gain},
            {"start_dose", c.start_dose},
            {"min_dose", c.min_dose},
            {"state_scale", c.env.state_scale},
            {"dose_unit", c.env.dose_unit},
            {"hb_healthy_range", c.env.hb_healthy_range}};
}

ControllerConfig controller_from_json(const Json& j) {
    ControllerConfig c;
    c.hb_target = j.value("hb_target", c.hb_target);
    c.gain = j.value("gain", c.gain);
    c.start_dose = j.value("start_dose", c.start_dose);
    c.min_dose = j.value("min_dose", c.min_dose);
    c.env.state_scale = j.value("state_scale", c.env.state_scale);
    c.env.dose_unit = j.value("dose_unit", c.env.dose_unit);
    if (j.contains("hb_healthy_range"))
        c.env.hb_healthy_range = j["hb_healthy_range"].get<std::array<double, 2>>();
    return c;
}

}  // namespace

Json policy_to_json(const Policy& p) {
    if (const auto* q = dynamic_cast<const QGreedyPolicy*>(&p))
        return {{"id", q->id()},
                {"spec", to_json(q->spec())},
                {"encoding", to_json(q->encoding())},
                {"q", to_json(q->q())}};
    if (const auto* c = dynamic_cast<const ControllerPolicy*>(&p))
        return {{"id", c->id()}, {"spec", to_json(c->spec())}, {"controller", controller_json(c->config())}};
    throw Error("policy_to_json: policy '" + p.id() + "' has no JSON form");
}

PolicyPtr policy_from_json(const Json& j) {
    const auto id = j.at("id").get<std::string>();
    const auto spec = policy_spec_from_json(j.at("spec"));
    if (spec.kind == PolicyKind::fqi_greedy)
        return std::make_shared<QGreedyPolicy>(id, spec, state_encoding_from_json(j.at("encoding")),
                                               regression_model_from_json(j.at("q")));
    return make_controller_policy(id, spec, controller_from_json(j.at("controller")));
}

Json to_json(const PolicySets& sets) {
    Json train = Json::array(), test = Json::array();
    for (const auto& p : sets.train) train.push_back(policy_to_json(*p));
    for (const auto& p : sets.test) test.push_back(policy_to_json(*p));
    return {{"train", train}, {"test", test}};
}

PolicySets policy_sets_from_json(const Json& j) {
    PolicySets s;
    for (const auto& p : j.at("train")) s.train.push_back(policy_from_json(p));
    for (const auto& p : j.at("test")) s.test.push_back(policy_from_json(p));
    return s;
}

Json to_json(const PolicyGenConfig& c) {
    const auto& h = c.hiv;
    const auto& k = c.kidney;
    return {{"hiv",
             {{"horizon", h.env.horizon},
              {"train_gammas", h.train_gammas},
              {"test_gammas", h.test_gammas},
              {"iterations", h.iterations},
              {"n_train", h.n_train},
              {"n_test", h.n_test},
              {"exploration_rollouts", h.exploration_rollouts},
              {"exploration_init_states", h.exploration_init_states},
              {"perturbation_rate", h.perturbation_rate},
              {"fqi_encoding", to_json(h.fqi.encoding)},
              {"fqi_hyper", to_json(h.fqi.hyper)}}},
            {"kidney",
             {{"horizon", k.controller.env.horizon},
              {"n_train", k.n_train},
              {"n_test", k.n_test},
              {"min_bins", k.min_bins},
              {"max_bins", k.max_bins},
              {"min_epsilon", k.min_epsilon},
              {"max_epsilon", k.max_epsilon},
              {"noise_sd", k.controller.env.noise_sd},
              {"controller", controller_json(k.controller)}}}};
}

PolicyGenConfig policy_gen_config_from_json(const Json& j) {
    PolicyGenConfig c;
    if (j.contains("hiv")) {
        const auto& h = j["hiv"];
        auto& o = c.hiv;
        o.env.horizon = h.value("horizon", o.env.horizon);
        o.train_gammas = h.value("train_gammas", o.train_gammas);
        o.test_gammas = h.value("test_gammas", o.test_gammas);
        o.iterations = h.value("iterations", o.iterations);
        o.n_train = h.value("n_train", o.n_train);
        o.n_test = h.value("n_test", o.n_test);
        o.exploration_rollouts = h.value("exploration_rollouts", o.exploration_rollouts);
        o.exploration_init_states = h.value("exploration_init_states", o.exploration_init_states);
        o.perturbation_rate = h.value("perturbation_rate", o.perturbation_rate);
        if (h.contains("fqi_encoding")) o.fqi.encoding = state_encoding_from_json(h["fqi_encoding"]);
        if (h.contains("fqi_hyper")) o.fqi.hyper = mlp_hyper_from_json(h["fqi_hyper"]);
    }
    if (j.contains("kidney")) {
        const auto& k = j["kidney"];
        auto& o = c.kidney;
        const KidneyConfig env = o.controller.env;
        if (k.contains("controller")) o.controller = controller_from_json(k["controller"]);
        o.controller.env.horizon = k.value("horizon", env.horizon);
        o.controller.env.noise_sd = k.value("noise_sd", env.noise_sd);
        o.n_train = k.value("n_train", o.n_train);
        o.n_test = k.value("n_test", o.n_test);
        o.min_bins = k.value("min_bins", o.min_bins);
        o.max_bins = k.value("max_bins", o.max_bins);
        o.min_epsilon = k.value("min_epsilon", o.min_epsilon);
        o.max_epsilon = k.value("max_epsilon", o.max_epsilon);
    }
    return c;
}

}  // namespace shortlong
