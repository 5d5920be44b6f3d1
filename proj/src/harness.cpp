#include "shortlong/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <tuple>
#include <unordered_map>

namespace shortlong {

// ---------------------------------------------------------------- metrics

double rmse(std::span<const double> preds, std::span<const double> truths) {
    if (preds.size() != truths.size())
        throw Error("rmse: length mismatch (" + std::to_string(preds.size()) + " predictions, " +
                    std::to_string(truths.size()) + " truths)");
    if (preds.empty()) throw Error("rmse: empty input");
    double s = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const double d = preds[i] - truths[i];
        s += d * d;
    }
    return std::sqrt(s / static_cast<double>(preds.size()));
}

double percentile(std::span<const double> values, double q) {
    if (values.empty()) throw Error("percentile: empty input");
    if (!(q >= 0.0 && q <= 100.0)) throw Error("percentile: q must be in [0, 100]");
    std::vector<double> v(values.begin(), values.end());
    std::sort(v.begin(), v.end());
    const double pos = q / 100.0 * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return v[lo] + frac * (v[hi] - v[lo]);
}

std::vector<bool> safety_detect(std::span<const double> preds, double threshold) {
    if (!std::isfinite(threshold)) throw Error("safety_detect: threshold must be finite");
    std::vector<bool> flags(preds.size());
    for (std::size_t i = 0; i < preds.size(); ++i) flags[i] = preds[i] < threshold;
    return flags;
}

double safety_accuracy(const std::vector<bool>& flags, const std::vector<bool>& truth_flags) {
    if (flags.size() != truth_flags.size()) throw Error("safety_accuracy: length mismatch");
    if (flags.empty()) throw Error("safety_accuracy: empty input");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < flags.size(); ++i) hit += flags[i] == truth_flags[i];
    return static_cast<double>(hit) / static_cast<double>(flags.size());
}

double SafetyThreshold::resolve(std::span<const double> train_values) const {
    if (mode == ThresholdMode::absolute) return value;
    return percentile(train_values, value);
}

// ---------------------------------------------------------------- risk bound

double risk_bound(const BoundInputs& b) {
    if (!(b.m > 0.0) || !(b.v_max > 0.0) || b.n < 1 || b.f < 1)
        throw Error("risk_bound: M, V, n and F must be positive");
    if (!(b.delta > 0.0 && b.delta <= 0.25)) throw Error("risk_bound: delta must be in (0, 0.25]");
    if (b.w_err < 0.0) throw Error("risk_bound: w_err must be >= 0");
    const double n = static_cast<double>(b.n);
    const double v2 = b.v_max * b.v_max;
    const double uniform = b.m * v2 * std::sqrt(std::log(2.0 * b.f / b.delta) / (2.0 * n));
    const double weight = v2 * (b.m * std::sqrt(std::log(2.0 / b.delta)) / std::sqrt(n) + b.w_err);
    return uniform + weight;
}

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

struct RatioShape {
    double s;
    double mu;
    double ratio(double x) const {
        const double e = 0.5 * x * x - (x - mu) * (x - mu) / (2.0 * s * s);
        return std::exp(e) / s;
    }
};

std::vector<double> hypothesis_slopes(int f) {
    std::vector<double> th(static_cast<std::size_t>(f));
    for (int j = 0; j < f; ++j)
        th[static_cast<std::size_t>(j)] = f == 1 ? 1.0 : -2.0 + 5.0 * j / static_cast<double>(f - 1);
    return th;
}

}  // namespace

double bound_experiment_m(const BoundExperiment& e) {
    if (!(e.test_sd > 0.0)) throw Error("bound experiment: test_sd must be > 0");
    const double s2 = e.test_sd * e.test_sd;
    const double alpha = 1.0 / (2.0 * s2) - 0.5;
    if (std::abs(alpha) < 1e-15) {
        if (e.test_mean != 0.0)
            throw Error("bound experiment: density ratio is unbounded (equal variances, shifted mean)");
        return 1.0 / e.test_sd;
    }
    if (alpha < 0.0)
        throw Error("bound experiment: density ratio is unbounded (test variance exceeds train variance)");
    const double beta = e.test_mean / s2;
    const double gamma = e.test_mean * e.test_mean / (2.0 * s2);
    return std::exp(beta * beta / (4.0 * alpha) - gamma) / e.test_sd;
}

CoverageReport verify_bound_empirically(const BoundExperiment& e, int trials, std::uint64_t seed,
                                        Exec exec) {
    if (trials < 1) throw Error("verify_bound_empirically: trials must be >= 1");
    if (e.n < 1 || e.hypotheses < 1) throw Error("verify_bound_empirically: n and F must be >= 1");
    const double m = bound_experiment_m(e);
    const RatioShape w{e.test_sd, e.test_mean};
    const double v = e.v_max;
    const auto theta = hypothesis_slopes(e.hypotheses);
    auto target = [&](double x) { return v * sigmoid(e.target_slope * x); };

    // Exact test risk per hypothesis: E_u[(f - 0.9 g - 0.1 V u)^2] in closed form
    // over u, then composite Simpson over x in mean +- 10 sd.
    const double noise_var = 0.01 * v * v / 12.0;
    std::vector<double> test_risk(theta.size());
    {
        const int panels = 4000;
        const double lo = e.test_mean - 10.0 * e.test_sd;
        const double hi = e.test_mean + 10.0 * e.test_sd;
        const double h = (hi - lo) / panels;
        const double norm = 1.0 / (e.test_sd * std::sqrt(2.0 * M_PI));
        for (std::size_t j = 0; j < theta.size(); ++j) {
            double acc = 0.0;
            for (int i = 0; i <= panels; ++i) {
                const double x = lo + h * i;
                const double z = (x - e.test_mean) / e.test_sd;
                const double pdf = norm * std::exp(-0.5 * z * z);
                const double bias = v * sigmoid(theta[j] * x) - 0.9 * target(x) - 0.05 * v;
                const double wgt = (i == 0 || i == panels) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0);
                acc += wgt * pdf * (bias * bias + noise_var);
            }
            test_risk[j] = acc * h / 3.0;
        }
    }

    CoverageReport rep;
    rep.trials = trials;
    rep.m = m;
    rep.bound = risk_bound({m, v, e.n, e.hypotheses, e.delta, 0.0});
    rep.gaps.assign(static_cast<std::size_t>(trials), 0.0);
    for_each_index(
        static_cast<std::size_t>(trials),
        [&](std::size_t t) {
            Rng rng(derive_seed(seed, {t}));
            std::normal_distribution<double> gx(0.0, 1.0);
            std::uniform_real_distribution<double> gu(0.0, 1.0);
            std::vector<double> xs(static_cast<std::size_t>(e.n)), ys(xs.size());
            for (std::size_t i = 0; i < xs.size(); ++i) {
                xs[i] = gx(rng);
                ys[i] = 0.9 * target(xs[i]) + 0.1 * v * gu(rng);
            }
            std::size_t best = 0;
            double best_risk = 0.0;
            for (std::size_t j = 0; j < theta.size(); ++j) {
                double acc = 0.0;
                for (std::size_t i = 0; i < xs.size(); ++i) {
                    const double d = v * sigmoid(theta[j] * xs[i]) - ys[i];
                    acc += w.ratio(xs[i]) * d * d;
                }
                acc /= static_cast<double>(xs.size());
                if (j == 0 || acc < best_risk) {
                    best = j;
                    best_risk = acc;
                }
            }
            rep.gaps[t] = std::abs(test_risk[best] - best_risk);
        },
        exec);
    for (double g : rep.gaps) rep.covered += g <= rep.bound;
    rep.coverage = static_cast<double>(rep.covered) / trials;
    std::vector<double> sorted = rep.gaps;
    rep.median_gap = percentile(sorted, 50.0);
    return rep;
}

// ---------------------------------------------------------------- config

std::vector<MlpHyper> default_slev_grid(const std::string& env_id) {
    // The loss is a per-sample mean on standardized targets, so the weight
    // decays of the reference grid are divided by the training-set size scale
    // (about 1e4 samples).
    std::vector<double> lrs = {1e-3, 1e-4};
    std::vector<double> decays = env_id == "kidney" ? std::vector<double>{1e-4, 1e-5}
                                                    : std::vector<double>{2.5e-3, 1e-3, 1e-4, 1e-5};
    std::vector<MlpHyper> grid;
    for (double lr : lrs)
        for (double wd : decays) {
            MlpHyper h;
            h.layer_sizes = env_id == "kidney" ? std::vector<int>{0, 64, 32, 1}
                                               : std::vector<int>{0, 50, 25, 10, 1};
            h.learning_rate = lr;
            h.weight_decay = wd;
            h.max_updates = 8000;
            h.batch_size = 100;
            h.patience = 10;
            grid.push_back(h);
        }
    return grid;
}

std::vector<DynamicsCandidate> default_dynamics_grid() {
    std::vector<DynamicsCandidate> grid;
    grid.push_back({DynamicsFamily::linear, 0.0, {}});
    grid.push_back({DynamicsFamily::linear, 1e-3, {}});
    DynamicsCandidate net;
    net.family = DynamicsFamily::mlp;
    net.hyper.layer_sizes = {0, 64, 64, 0};
    net.hyper.learning_rate = 1e-3;
    net.hyper.max_updates = 4000;
    net.hyper.patience = 5;
    grid.push_back(net);
    return grid;
}

ExperimentConfig default_config(const std::string& env_id) {
    if (env_id != "hiv" && env_id != "kidney") throw Error("unknown env '" + env_id + "'");
    ExperimentConfig c;
    c.env_id = env_id;
    c.slev_grid = default_slev_grid(env_id);
    c.dynamics = default_dynamics_grid();
    if (env_id == "kidney") {
        c.n_init_states = 100;
        c.n_rollouts = 30;
        c.fqe.encoding = {};
    } else {
        c.n_init_states = 250;
        c.n_rollouts = 1;
        c.fqe.encoding = c.policies.hiv.fqi.encoding;
    }
    return c;
}

namespace {

Json threshold_json(const SafetyThreshold& t) {
    return {{"mode", t.mode == ThresholdMode::absolute ? "absolute" : "percentile"},
            {"value", t.value}};
}

SafetyThreshold threshold_from_json(const Json& j) {
    SafetyThreshold t;
    const std::string mode = j.value("mode", std::string("percentile"));
    if (mode == "absolute")
        t.mode = ThresholdMode::absolute;
    else if (mode == "percentile")
        t.mode = ThresholdMode::percentile;
    else
        throw Error("safety threshold mode must be 'absolute' or 'percentile', got '" + mode + "'");
    t.value = j.value("value", t.value);
    return t;
}

Json candidate_json(const DynamicsCandidate& c) {
    Json j = {{"family", to_string(c.family)}, {"ridge", c.ridge}};
    if (c.family == DynamicsFamily::mlp) j["hyper"] = to_json(c.hyper);
    return j;
}

DynamicsCandidate candidate_from_json(const Json& j) {
    DynamicsCandidate c;
    c.family = dynamics_family_from_string(j.at("family").get<std::string>());
    c.ridge = j.value("ridge", 0.0);
    if (j.contains("hyper")) c.hyper = mlp_hyper_from_json(j["hyper"]);
    return c;
}

}  // namespace

Json to_json(const ExperimentConfig& c) {
    Json grid = Json::array();
    for (const auto& h : c.slev_grid) grid.push_back(to_json(h));
    Json dyn = Json::array();
    for (const auto& d : c.dynamics) dyn.push_back(candidate_json(d));
    std::vector<std::string> adapters;
    for (auto a : c.adapters) adapters.emplace_back(to_string(a));
    return {{"env_id", c.env_id},
            {"ell_fractions", c.ell_fractions},
            {"ells", c.ells},
            {"seeds", c.seeds},
            {"methods", c.methods},
            {"n_init_states", c.n_init_states},
            {"n_rollouts", c.n_rollouts},
            {"perturbation_rate", c.perturbation_rate},
            {"include_rewards", c.include_rewards},
            {"slev_grid", grid},
            {"k", c.k},
            {"weighted", c.weighted},
            {"clip_max", c.clip_max},
            {"density_c", c.density_c},
            {"dynamics", dyn},
            {"adapters", adapters},
            {"sled_k", c.sled_k},
            {"fqe", to_json(c.fqe)},
            {"policies", to_json(c.policies)},
            {"safety", threshold_json(c.safety)},
            {"output_dir", c.output_dir}};
}

ExperimentConfig experiment_config_from_json(const Json& j) {
    const std::string env = j.value("env_id", std::string("hiv"));
    ExperimentConfig c = default_config(env);
    if (j.contains("ell_fractions")) c.ell_fractions = j["ell_fractions"].get<std::vector<double>>();
    if (j.contains("ells")) c.ells = j["ells"].get<std::vector<int>>();
    if (j.contains("seeds")) c.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
    if (j.contains("methods")) c.methods = j["methods"].get<std::vector<std::string>>();
    c.n_init_states = j.value("n_init_states", c.n_init_states);
    c.n_rollouts = j.value("n_rollouts", c.n_rollouts);
    c.perturbation_rate = j.value("perturbation_rate", c.perturbation_rate);
    c.include_rewards = j.value("include_rewards", c.include_rewards);
    if (j.contains("slev_grid")) {
        c.slev_grid.clear();
        for (const auto& h : j["slev_grid"]) c.slev_grid.push_back(mlp_hyper_from_json(h));
    }
    c.k = j.value("k", c.k);
    c.weighted = j.value("weighted", c.weighted);
    c.clip_max = j.value("clip_max", c.clip_max);
    c.density_c = j.value("density_c", c.density_c);
    if (j.contains("dynamics")) {
        c.dynamics.clear();
        for (const auto& d : j["dynamics"]) c.dynamics.push_back(candidate_from_json(d));
    }
    if (j.contains("adapters")) {
        c.adapters.clear();
        for (const auto& a : j["adapters"]) c.adapters.push_back(adapter_family_from_string(a.get<std::string>()));
    }
    c.sled_k = j.value("sled_k", c.sled_k);
    // Partial blocks override only the keys they name.
    if (j.contains("fqe")) {
        Json f = to_json(c.fqe);
        f.update(j["fqe"], true);
        c.fqe = fqe_config_from_json(f);
    }
    if (j.contains("policies")) {
        Json p = to_json(c.policies);
        p.update(j["policies"], true);
        c.policies = policy_gen_config_from_json(p);
    }
    if (j.contains("safety")) c.safety = threshold_from_json(j["safety"]);
    c.output_dir = j.value("output_dir", c.output_dir);
    return c;
}

std::string config_hash(const ExperimentConfig& c) {
    const std::string s = to_json(c).dump();
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::unique_ptr<Environment> make_environment(const ExperimentConfig& c) {
    if (c.env_id == "hiv") return std::make_unique<HivEnv>(c.policies.hiv.env);
    if (c.env_id == "kidney") return std::make_unique<KidneyEnv>(c.policies.kidney.controller.env);
    throw Error("unknown env '" + c.env_id + "'");
}

int horizon_of(const ExperimentConfig& c) { return make_environment(c)->horizon(); }

std::vector<int> resolve_ells(const ExperimentConfig& c) {
    const int horizon = horizon_of(c);
    std::vector<int> out;
    if (!c.ells.empty()) {
        for (int ell : c.ells) {
            if (ell < 1 || ell >= horizon)
                throw Error("ell " + std::to_string(ell) + " outside [1, " + std::to_string(horizon - 1) + "]");
            out.push_back(ell);
        }
    } else {
        for (double f : c.ell_fractions) {
            if (!(f > 0.0 && f < 1.0)) throw Error("ell fractions must lie in (0, 1)");
            const int ell = std::clamp(static_cast<int>(std::lround(f * horizon)), 1, horizon - 1);
            out.push_back(ell);
        }
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

// ---------------------------------------------------------------- data

ExperimentData generate_experiment_data(const ExperimentConfig& c, std::uint64_t seed, Exec exec) {
    if (c.n_init_states < 1 || c.n_rollouts < 1) throw Error("n_init_states and n_rollouts must be >= 1");
    auto env = make_environment(c);
    const int horizon = env->horizon();
    ExperimentData d;
    d.policies = generate_policy_sets(c.env_id, c.policies, derive_seed(seed, {10}), exec);
    if (c.env_id == "hiv")
        d.init_states = hiv_initial_states(c.n_init_states, c.perturbation_rate, derive_seed(seed, {11}),
                                           c.policies.hiv.env);
    else
        d.init_states = kidney_initial_states(c.n_init_states, derive_seed(seed, {11}),
                                              c.policies.kidney.controller.env);

    auto collect = [&](const std::vector<PolicyPtr>& pols, std::uint64_t tag, PolicyDataset& out) {
        std::vector<std::vector<PolicyRecord>> per(pols.size());
        for_each_index(
            pols.size(),
            [&](std::size_t i) {
                per[i] = collect_records(*env, *pols[i], d.init_states, c.n_rollouts, horizon,
                                         derive_seed(seed, {tag, i}), Exec::serial);
            },
            exec);
        out.horizon = horizon;
        out.env_id = c.env_id;
        for (auto& v : per)
            for (auto& r : v) out.records.push_back(std::move(r));
    };
    collect(d.policies.train, 12, d.train);
    collect(d.policies.test, 13, d.test);
    return d;
}

std::vector<std::pair<std::string, std::vector<PolicyRecord>>> group_by_policy(const PolicyDataset& d) {
    std::vector<std::pair<std::string, std::vector<PolicyRecord>>> out;
    std::unordered_map<std::string, std::size_t> index;
    for (const auto& r : d.records) {
        auto [it, inserted] = index.try_emplace(r.policy_id, out.size());
        if (inserted) out.emplace_back(r.policy_id, std::vector<PolicyRecord>{});
        out[it->second].second.push_back(r);
    }
    return out;
}

std::vector<double> policy_values(const PolicyDataset& d) {
    std::vector<std::string> order;
    std::unordered_map<std::string, std::pair<double, std::size_t>> acc;
    for (const auto& r : d.records) {
        if (!r.true_value) throw Error("policy_values: record of '" + r.policy_id + "' has no value");
        auto [it, inserted] = acc.try_emplace(r.policy_id, 0.0, 0);
        if (inserted) order.push_back(r.policy_id);
        it->second.first += *r.true_value;
        it->second.second += 1;
    }
    std::vector<double> out;
    out.reserve(order.size());
    for (const auto& id : order) {
        const auto& [s, n] = acc.at(id);
        out.push_back(s / static_cast<double>(n));
    }
    return out;
}

// ---------------------------------------------------------------- methods

namespace {

const Policy& find_policy(const std::vector<PolicyPtr>& pols, const std::string& id) {
    for (const auto& p : pols)
        if (p->id() == id) return *p;
    throw Error("no policy with id '" + id + "'");
}

std::vector<State> start_states(std::span<const PolicyRecord> records) {
    std::vector<State> s;
    for (const auto& r : records)
        for (const auto& t : r.trajectories) s.push_back(t.states.front());
    return s;
}

/// Per-seed state shared across ell values: the global dynamics model and
/// the ell-independent predictions.
struct SeedCache {
    std::optional<GlobalDynamics> global;
    std::map<std::string, std::vector<double>> fixed;
};

std::vector<double> predict_impl(const std::string& method, const ExperimentConfig& c,
                                 const ExperimentData& data, int ell, std::uint64_t seed, Exec exec,
                                 SeedCache& cache) {
    const auto groups = group_by_policy(data.test);
    const int horizon = data.test.horizon;
    if (ell < 1 || ell >= horizon) throw Error("ell must lie in [1, L-1]");
    auto env = make_environment(c);
    const RewardFn reward = [e = env.get()](const State& s) { return e->reward(s); };
    std::vector<std::vector<PolicyRecord>> prefixes(groups.size());
    for (std::size_t p = 0; p < groups.size(); ++p)
        for (const auto& r : groups[p].second) prefixes[p].push_back(truncate(r, ell));
    std::vector<double> out(groups.size(), 0.0);

    if (method == "mean") {
        out.assign(groups.size(), offpolicy_mean(data.train));
    } else if (method == "avg" || method == "last") {
        for (std::size_t p = 0; p < groups.size(); ++p)
            out[p] = method == "avg" ? avg_reward_policy_value(prefixes[p], ell, horizon)
                                     : last_reward_policy_value(prefixes[p], ell, horizon);
    } else if (method == "slev") {
        PolicyDataset reg = data.train;
        DensityRatio dr = DensityRatio::unit(c.clip_max);
        if (c.weighted) {
            auto ids = data.train.policy_ids();
            Rng rng(derive_seed(seed, {30, static_cast<std::uint64_t>(ell)}));
            std::shuffle(ids.begin(), ids.end(), rng);
            const std::set<std::string> density_half(ids.begin(), ids.begin() + ids.size() / 2);
            reg.records.clear();
            std::vector<FeatureVector> train_feats, test_feats;
            for (const auto& r : data.train.records) {
                if (density_half.count(r.policy_id))
                    train_feats.push_back(featurize_short(r, ell, c.include_rewards));
                else
                    reg.records.push_back(r);
            }
            for (const auto& v : prefixes)
                for (const auto& r : v) test_feats.push_back(featurize_short(r, ell, c.include_rewards));
            dr = fit_density_ratio(train_feats, test_feats, c.clip_max,
                                   derive_seed(seed, {31, static_cast<std::uint64_t>(ell)}), c.density_c);
        }
        const auto model = slev_fit(reg, ell, c.include_rewards, c.slev_grid, c.k, dr,
                                    derive_seed(seed, {32, static_cast<std::uint64_t>(ell)}), exec);
        for (std::size_t p = 0; p < groups.size(); ++p)
            out[p] = slev_predict_policy(model, prefixes[p], ell);
    } else if (method == "sled") {
        if (!cache.global)
            cache.global = fit_global_model(data.train, c.dynamics, c.sled_k, derive_seed(seed, {40}), exec);
        for_each_index(
            groups.size(),
            [&](std::size_t p) {
                try {
                    out[p] = sled_policy_value(*cache.global, prefixes[p], ell, horizon, c.adapters,
                                               c.sled_k, reward,
                                               derive_seed(seed, {41, static_cast<std::uint64_t>(ell), p}));
                } catch (const Error&) {
                    out[p] = std::numeric_limits<double>::quiet_NaN();
                }
            },
            exec);
    } else if (method == "online") {
        for_each_index(
            groups.size(),
            [&](std::size_t p) {
                const Policy& pol = find_policy(data.policies.test, groups[p].first);
                try {
                    out[p] = online_policy_value(prefixes[p], pol, ell, horizon, reward,
                                                 derive_seed(seed, {50, static_cast<std::uint64_t>(ell), p}));
                } catch (const Error&) {
                    out[p] = std::numeric_limits<double>::quiet_NaN();
                }
            },
            exec);
    } else if (method == "fqe") {
        for_each_index(
            groups.size(),
            [&](std::size_t p) {
                const Policy& pol = find_policy(data.policies.test, groups[p].first);
                const auto starts = start_states(prefixes[p]);
                try {
                    const QModel q = fqe_fit(data.train, pol, c.fqe, derive_seed(seed, {60, p}));
                    out[p] = fqe_value(q, pol, starts, reward, derive_seed(seed, {61, p}));
                } catch (const Error&) {
                    out[p] = std::numeric_limits<double>::quiet_NaN();
                }
            },
            exec);
    } else {
        throw Error("unknown method '" + method + "' (expected slev, sled, fqe, online, avg, last, mean)");
    }
    return out;
}

bool ell_independent(const std::string& method) { return method == "fqe" || method == "mean"; }

}  // namespace

std::vector<double> predict_method(const std::string& method, const ExperimentConfig& c,
                                   const ExperimentData& data, int ell, std::uint64_t seed, Exec exec) {
    SeedCache cache;
    return predict_impl(method, c, data, ell, seed, exec, cache);
}

ExperimentResult run_experiment(const ExperimentConfig& c, Exec exec) {
    if (c.seeds.empty()) throw Error("run_experiment: no seeds");
    if (c.methods.empty()) throw Error("run_experiment: no methods");
    const auto ells = resolve_ells(c);
    ExperimentResult res;
    for (std::uint64_t seed : c.seeds) {
        const ExperimentData data = generate_experiment_data(c, seed, exec);
        const auto groups = group_by_policy(data.test);
        const auto truths = policy_values(data.test);
        const auto train_values = policy_values(data.train);
        const double threshold = c.safety.resolve(train_values);
        res.thresholds[seed] = threshold;
        const auto truth_flags = safety_detect(truths, threshold);
        SeedCache cache;
        for (const auto& method : c.methods) {
            for (int ell : ells) {
                std::vector<double> preds;
                if (ell_independent(method) && cache.fixed.count(method)) {
                    preds = cache.fixed[method];
                } else {
                    preds = predict_impl(method, c, data, ell, seed, exec, cache);
                    if (ell_independent(method)) cache.fixed[method] = preds;
                }
                for (std::size_t p = 0; p < groups.size(); ++p)
                    res.runs.push_back({method, c.env_id, ell, seed, groups[p].first, preds[p], truths[p]});
                res.safety.push_back(
                    {method, ell, seed, threshold, safety_accuracy(safety_detect(preds, threshold), truth_flags)});
            }
        }
    }
    return res;
}

namespace {

double sample_sd(std::span<const double> v) {
    if (v.size() < 2) return 0.0;
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double s = 0.0;
    for (double x : v) s += (x - mean) * (x - mean);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

AggregateRow summarize(const std::string& method, int ell, const std::vector<double>& per_seed) {
    AggregateRow row;
    row.method = method;
    row.ell = ell;
    row.n_seeds = per_seed.size();
    row.mean = std::accumulate(per_seed.begin(), per_seed.end(), 0.0) / static_cast<double>(per_seed.size());
    row.sd = sample_sd(per_seed);
    return row;
}

}  // namespace

double run_rmse(std::span<const RunRow> runs, const std::string& method, int ell, std::uint64_t seed) {
    std::vector<double> p, t;
    for (const auto& r : runs)
        if (r.method == method && r.ell == ell && r.seed == seed) {
            p.push_back(r.prediction);
            t.push_back(r.truth);
        }
    return rmse(p, t);
}

std::vector<AggregateRow> aggregate_rmse(std::span<const RunRow> runs) {
    std::map<std::tuple<std::string, int, std::uint64_t>, std::pair<std::vector<double>, std::vector<double>>> cells;
    for (const auto& r : runs) {
        auto& cell = cells[{r.method, r.ell, r.seed}];
        cell.first.push_back(r.prediction);
        cell.second.push_back(r.truth);
    }
    std::map<std::pair<std::string, int>, std::vector<double>> per;
    for (const auto& [key, cell] : cells)
        per[{std::get<0>(key), std::get<1>(key)}].push_back(rmse(cell.first, cell.second));
    std::vector<AggregateRow> out;
    for (const auto& [key, v] : per) out.push_back(summarize(key.first, key.second, v));
    return out;
}

std::vector<AggregateRow> aggregate_safety(std::span<const SafetyRow> rows) {
    std::map<std::pair<std::string, int>, std::map<std::uint64_t, double>> per;
    for (const auto& r : rows) per[{r.method, r.ell}][r.seed] = r.accuracy;
    std::vector<AggregateRow> out;
    for (const auto& [key, m] : per) {
        std::vector<double> v;
        for (const auto& [s, a] : m) v.push_back(a);
        out.push_back(summarize(key.first, key.second, v));
    }
    return out;
}

// ---------------------------------------------------------------- battery

Json to_json(const BatteryConfig& c) {
    return {{"n_train", c.n_train},
            {"n_test", c.n_test},
            {"a", c.a},
            {"b", c.b},
            {"noise_sd", c.noise_sd},
            {"low_fraction", c.low_fraction},
            {"low_median", c.low_median},
            {"low_log_sd", c.low_log_sd},
            {"high_median", c.high_median},
            {"high_log_sd", c.high_log_sd},
            {"min_lifetime", c.min_lifetime},
            {"max_lifetime", c.max_lifetime},
            {"filter_below", c.filter_below},
            {"threshold", c.threshold},
            {"prefix_cycles", c.prefix_cycles},
            {"k", c.k},
            {"dq_folds", c.dq_folds}};
}

BatteryConfig battery_config_from_json(const Json& j) {
    BatteryConfig c;
    c.n_train = j.value("n_train", c.n_train);
    c.n_test = j.value("n_test", c.n_test);
    c.a = j.value("a", c.a);
    c.b = j.value("b", c.b);
    c.noise_sd = j.value("noise_sd", c.noise_sd);
    c.low_fraction = j.value("low_fraction", c.low_fraction);
    c.low_median = j.value("low_median", c.low_median);
    c.low_log_sd = j.value("low_log_sd", c.low_log_sd);
    c.high_median = j.value("high_median", c.high_median);
    c.high_log_sd = j.value("high_log_sd", c.high_log_sd);
    c.min_lifetime = j.value("min_lifetime", c.min_lifetime);
    c.max_lifetime = j.value("max_lifetime", c.max_lifetime);
    c.filter_below = j.value("filter_below", c.filter_below);
    c.threshold = j.value("threshold", c.threshold);
    c.prefix_cycles = j.value("prefix_cycles", c.prefix_cycles);
    c.k = j.value("k", c.k);
    c.dq_folds = j.value("dq_folds", c.dq_folds);
    return c;
}

BatterySplit battery_generate(const BatteryConfig& c, std::uint64_t seed) {
    if (c.n_train < 1 || c.n_test < 1) throw Error("battery_generate: need training and test curves");
    if (c.prefix_cycles >= c.min_lifetime) throw Error("battery_generate: min_lifetime must exceed prefix_cycles");
    Rng rng(derive_seed(seed, {20}));
    std::normal_distribution<double> z(0.0, 1.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    BatterySplit out;
    const int total = c.n_train + c.n_test;
    for (int i = 0; i < total; ++i) {
        const bool low = u(rng) < c.low_fraction;
        const double draw = low ? c.low_median * std::exp(c.low_log_sd * z(rng))
                                : c.high_median * std::exp(c.high_log_sd * z(rng));
        const int life = std::clamp(static_cast<int>(std::lround(draw)), c.min_lifetime, c.max_lifetime);
        CapacityCurve curve = battery_synthesize(c.a, c.b, life, c.noise_sd, life,
                                                 derive_seed(seed, {21, static_cast<std::uint64_t>(i)}));
        char id[32];
        std::snprintf(id, sizeof id, "cell-%03d", i);
        curve.id = id;
        (i < c.n_train ? out.train : out.test).push_back(std::move(curve));
    }
    return out;
}

std::vector<BatteryRow> run_battery(const BatteryConfig& c, const BatterySplit& split, std::uint64_t seed) {
    auto truth = [&](const CapacityCurve& cv) {
        if (!cv.lifetime) throw Error("run_battery: curve '" + cv.id + "' has no lifetime");
        return battery_classify(static_cast<double>(*cv.lifetime), c.threshold);
    };
    std::vector<LifeGroup> test_labels;
    std::vector<double> test_dq;
    for (const auto& cv : split.test) {
        test_labels.push_back(truth(cv));
        test_dq.push_back(delta_q_feature(cv.capacities));
    }
    auto score = [&](const std::vector<LifeGroup>& pred) {
        std::size_t hit = 0;
        for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == test_labels[i];
        return static_cast<double>(hit) / static_cast<double>(pred.size());
    };

    std::vector<BatteryRow> rows;
    for (const std::string set : {"full", "filtered"}) {
        std::vector<CapacityCurve> train;
        for (const auto& cv : split.train)
            if (set == "full" || (cv.lifetime && *cv.lifetime < c.filter_below)) train.push_back(cv);
        if (train.empty()) throw Error("run_battery: no training curves in the " + set + " set");
        const int n = static_cast<int>(train.size());

        const CurveModel base = battery_fit_base(train, c.k);
        std::vector<LifeGroup> sled_pred;
        for (const auto& cv : split.test) {
            const auto fit = battery_fit_lifetime(base, curve_prefix(cv, c.prefix_cycles));
            sled_pred.push_back(battery_classify(fit.lfc, c.threshold));
        }
        rows.push_back({"sled", set, seed, n, score(sled_pred)});

        std::vector<double> feats;
        std::vector<LifeGroup> labels;
        for (const auto& cv : train) {
            feats.push_back(delta_q_feature(cv.capacities));
            labels.push_back(truth(cv));
        }
        const auto clf = delta_q_classify(feats, labels, c.dq_folds);
        std::vector<LifeGroup> dq_pred;
        for (double f : test_dq) dq_pred.push_back(clf.predict(f));
        rows.push_back({"delta_q", set, seed, n, score(dq_pred)});

        const LifeGroup maj = majority_class(labels);
        rows.push_back({"majority", set, seed, n, score(std::vector<LifeGroup>(split.test.size(), maj))});
    }
    return rows;
}

// ---------------------------------------------------------------- reporting

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    return out;
}

}  // namespace

void write_runs_csv(const std::filesystem::path& path, std::span<const RunRow> runs) {
    auto out = open_out(path);
    out << "method,env,ell,seed,policy_id,prediction,truth\n";
    for (const auto& r : runs)
        out << r.method << ',' << r.env << ',' << r.ell << ',' << r.seed << ',' << r.policy_id << ','
            << format_double(r.prediction) << ',' << format_double(r.truth) << '\n';
}

void write_predictions_csv(const std::filesystem::path& path, std::span<const RunRow> runs) {
    auto out = open_out(path);
    out << "policy_id,ell,prediction,truth\n";
    for (const auto& r : runs)
        out << r.policy_id << ',' << r.ell << ',' << format_double(r.prediction) << ','
            << format_double(r.truth) << '\n';
}

std::vector<RunRow> read_runs_csv(const std::filesystem::path& path) {
    const CsvTable t = read_csv(path);
    const int cm = t.column("method"), ce = t.column("env"), cl = t.column("ell"), cs = t.column("seed"),
              cp = t.column("policy_id"), cpr = t.column("prediction"), ct = t.column("truth");
    if (cm < 0 || ce < 0 || cl < 0 || cs < 0 || cp < 0 || cpr < 0 || ct < 0)
        throw Error(path.string() + ": expected columns method,env,ell,seed,policy_id,prediction,truth");
    std::vector<RunRow> rows;
    for (const auto& r : t.rows)
        rows.push_back({r[cm], r[ce], std::stoi(r[cl]), std::stoull(r[cs]), r[cp], std::stod(r[cpr]),
                        std::stod(r[ct])});
    return rows;
}

void report(const std::filesystem::path& dir, const ExperimentConfig& c, const ExperimentResult& r,
            std::span<const BatteryRow> battery) {
    if (r.runs.empty() && battery.empty()) throw Error("report: no results");
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw Error("cannot create " + dir.string() + ": " + ec.message());

    Json files = Json::array();
    if (!r.runs.empty()) {
        write_runs_csv(dir / "runs.csv", r.runs);
        auto out = open_out(dir / "aggregate.csv");
        out << "method,ell,rmse_mean,rmse_sd\n";
        for (const auto& a : aggregate_rmse(r.runs))
            out << a.method << ',' << a.ell << ',' << format_double(a.mean) << ',' << format_double(a.sd) << '\n';
        files.push_back("runs.csv");
        files.push_back("aggregate.csv");
    }
    if (!r.safety.empty()) {
        auto out = open_out(dir / "safety.csv");
        out << "method,ell,accuracy_mean,accuracy_sd\n";
        for (const auto& a : aggregate_safety(r.safety))
            out << a.method << ',' << a.ell << ',' << format_double(a.mean) << ',' << format_double(a.sd) << '\n';
        files.push_back("safety.csv");
    }
    if (!battery.empty()) {
        auto out = open_out(dir / "battery.csv");
        out << "method,train_set,seed,n_train,accuracy\n";
        for (const auto& b : battery)
            out << b.method << ',' << b.train_set << ',' << b.seed << ',' << b.n_train << ','
                << format_double(b.accuracy) << '\n';
        files.push_back("battery.csv");
    }
    Json thresholds = Json::object();
    for (const auto& [s, t] : r.thresholds) thresholds[std::to_string(s)] = t;
    const Json manifest = {{"config", to_json(c)},
                           {"config_hash", config_hash(c)},
                           {"seeds", c.seeds},
                           {"ells", r.runs.empty() ? std::vector<int>{} : resolve_ells(c)},
                           {"safety_thresholds", thresholds},
                           {"files", files}};
    write_json_file(dir / "manifest.json", manifest);
}

}  // namespace shortlong
