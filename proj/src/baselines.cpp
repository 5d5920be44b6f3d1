#include "shortlong/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace shortlong {

// ---------------------------------------------------------------- FQE

MlpHyper fqe_default_hyper() {
    MlpHyper h;
    h.layer_sizes = {0, 50, 25, 10, 1};
    h.learning_rate = 1e-3;
    h.max_updates = 1000;
    h.batch_size = 100;
    h.patience = 5;
    return h;
}

Json to_json(const FqeConfig& c) {
    return {{"gamma", c.gamma},
            {"sweeps", c.sweeps},
            {"batch_tuples", c.batch_tuples},
            {"updates_per_sweep", c.updates_per_sweep},
            {"hyper", to_json(c.hyper)},
            {"encoding", to_json(c.encoding)},
            {"divergence_factor", c.divergence_factor}};
}

FqeConfig fqe_config_from_json(const Json& j) {
    FqeConfig c;
    c.gamma = j.value("gamma", c.gamma);
    c.sweeps = j.value("sweeps", c.sweeps);
    c.batch_tuples = j.value("batch_tuples", c.batch_tuples);
    c.updates_per_sweep = j.value("updates_per_sweep", c.updates_per_sweep);
    if (j.contains("hyper")) c.hyper = mlp_hyper_from_json(j["hyper"]);
    if (j.contains("encoding")) c.encoding = state_encoding_from_json(j["encoding"]);
    c.divergence_factor = j.value("divergence_factor", c.divergence_factor);
    return c;
}

double QModel::value(const State& s, const Action& a) const {
    return q.predict(encode_state_action(encoding, s, a))[0];
}

QModel fqe_fit(const PolicyDataset& train, const Policy& target, const FqeConfig& cfg,
               std::uint64_t seed) {
    if (cfg.sweeps < 1) throw Error("fqe_fit: sweeps must be >= 1");
    if (cfg.gamma < 0.0 || cfg.gamma > 1.0) throw Error("fqe_fit: gamma must lie in [0, 1]");
    std::vector<std::vector<double>> rows;
    std::vector<State> next;
    std::vector<double> rewards;
    for (const auto& rec : train.records)
        for (const auto& t : rec.trajectories)
            for (std::size_t i = 0; i < t.actions.size(); ++i) {
                rows.push_back(encode_state_action(cfg.encoding, t.states[i], t.actions[i]));
                next.push_back(t.states[i + 1]);
                rewards.push_back(t.rewards[i + 1]);
            }
    if (rows.empty()) throw Error("fqe_fit: training data holds no transitions");
    const std::size_t n = rows.size();
    const Eigen::Index dx = static_cast<Eigen::Index>(rows[0].size());

    Rng rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    auto sample = [&] {
        std::vector<std::size_t> idx;
        if (static_cast<std::size_t>(cfg.batch_tuples) >= n) {
            idx.resize(n);
            std::iota(idx.begin(), idx.end(), 0);
        } else {
            for (int i = 0; i < cfg.batch_tuples; ++i) idx.push_back(pick(rng));
        }
        return idx;
    };
    auto batch_data = [&](const std::vector<std::size_t>& idx) {
        RegressionData d;
        d.x.resize(static_cast<Eigen::Index>(idx.size()), dx);
        d.y.resize(static_cast<Eigen::Index>(idx.size()), 1);
        d.weights = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(idx.size()));
        for (std::size_t i = 0; i < idx.size(); ++i) {
            d.x.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::RowVectorXd>(rows[idx[i]].data(), dx);
            d.y(static_cast<Eigen::Index>(i), 0) = rewards[idx[i]];
        }
        return d;
    };

    MlpHyper hyper = cfg.hyper;
    if (hyper.layer_sizes.size() < 2) hyper.layer_sizes = {0, 1};
    hyper.layer_sizes.front() = static_cast<int>(dx);
    hyper.layer_sizes.back() = 1;

    QModel qm;
    qm.gamma = cfg.gamma;
    qm.encoding = cfg.encoding;
    {
        const auto idx = sample();
        qm.q = mlp_fit(batch_data(idx), hyper, derive_seed(seed, {0}));
    }
    double first_loss = 0.0;
    for (int sweep = 1; sweep < cfg.sweeps; ++sweep) {
        const auto idx = sample();
        RegressionData d = batch_data(idx);
        Eigen::MatrixXd xn(static_cast<Eigen::Index>(idx.size()), dx);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const auto enc = encode_state_action(cfg.encoding, next[idx[i]], target.act(next[idx[i]], rng));
            xn.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::RowVectorXd>(enc.data(), dx);
        }
        d.y.col(0) += cfg.gamma * qm.q.predict_rows(xn).col(0);
        const double loss = (qm.q.predict_rows(d.x) - d.y).squaredNorm() / static_cast<double>(idx.size());
        if (!std::isfinite(loss)) throw Error("fqe_fit: non-finite Bellman loss at sweep " + std::to_string(sweep));
        if (sweep == 1) first_loss = std::max(loss, 1e-12);
        if (loss > cfg.divergence_factor * first_loss)
            throw Error("fqe_fit: diverged at sweep " + std::to_string(sweep));
        qm.bellman_loss.push_back(loss);
        qm.q.set_output_standardizer(Standardizer::fit(d.y));
        mlp_continue(qm.q, d, cfg.updates_per_sweep, hyper.batch_size, hyper.learning_rate,
                     hyper.weight_decay, derive_seed(seed, {static_cast<std::uint64_t>(sweep)}));
    }
    return qm;
}

double fqe_value(const QModel& q, const Policy& target, std::span<const State> init_states,
                 const RewardFn& initial_reward, std::uint64_t seed) {
    if (init_states.empty()) throw Error("fqe_value: no initial states");
    double sum = 0.0;
    for (std::size_t i = 0; i < init_states.size(); ++i) {
        Rng rng(derive_seed(seed, {i}));
        const State& s = init_states[i];
        sum += q.value(s, target.act(s, rng));
        if (initial_reward) sum += initial_reward(s);
    }
    return sum / static_cast<double>(init_states.size());
}

// ---------------------------------------------------------------- online dynamics

State OnlineDynamics::predict(const State& s, const Action& a) const {
    const Eigen::Index d = static_cast<Eigen::Index>(s.size());
    const Eigen::Index da = static_cast<Eigen::Index>(a.vector.size());
    if (d + da + 1 != w.rows()) throw Error("OnlineDynamics: input dimension mismatch");
    Eigen::RowVectorXd x(d + da + 1);
    x << Eigen::Map<const Eigen::RowVectorXd>(s.values.data(), d),
        Eigen::Map<const Eigen::RowVectorXd>(a.vector.data(), da), 1.0;
    const Eigen::RowVectorXd y = x * w;
    return State(std::vector<double>(y.data(), y.data() + y.size()));
}

OnlineDynamics online_dynamics_fit(std::span<const Trajectory> prefixes, int ell, double ridge) {
    const Transitions tr = collect_transitions(prefixes, ell);
    if (tr.s.rows() < 2) throw Error("online_dynamics_fit: need at least 2 transitions");
    const Eigen::Index n = tr.s.rows(), d = tr.s.cols(), da = tr.actions.cols();
    Eigen::MatrixXd x(n, d + da + 1);
    x << tr.s, tr.actions, Eigen::VectorXd::Ones(n);
    OnlineDynamics m;
    if (ridge > 0.0) {
        Eigen::MatrixXd gram = x.transpose() * x;
        gram.diagonal().head(d + da).array() += ridge;
        m.w = gram.ldlt().solve(x.transpose() * tr.next);
    } else {
        m.w = x.completeOrthogonalDecomposition().solve(tr.next);
    }
    return m;
}

double online_dynamics_value(const OnlineDynamics& model, const Policy& target,
                             const Trajectory& prefix, int ell, int horizon, const RewardFn& reward,
                             std::uint64_t seed) {
    if (ell < 0 || prefix.length() < static_cast<std::size_t>(ell))
        throw Error("online_dynamics_value: prefix shorter than ell=" + std::to_string(ell));
    double total = 0.0;
    for (int t = 0; t <= ell; ++t) total += prefix.rewards[static_cast<std::size_t>(t)];
    Rng rng(seed);
    State s = prefix.states[static_cast<std::size_t>(ell)];
    for (int t = ell + 1; t <= horizon; ++t) {
        s = model.predict(s, target.act(s, rng));
        if (!all_finite(s.values))
            throw Error("online_dynamics_value: non-finite predicted state at step " + std::to_string(t));
        total += reward(s);
    }
    return total;
}

double online_policy_value(std::span<const PolicyRecord> records, const Policy& target, int ell,
                          int horizon, const RewardFn& reward, std::uint64_t seed, double ridge) {
    std::vector<Trajectory> prefixes;
    for (const auto& r : records)
        for (const auto& t : r.trajectories) prefixes.push_back(t);
    if (prefixes.empty()) throw Error("online_policy_value: no trajectories");
    const OnlineDynamics m = online_dynamics_fit(prefixes, ell, ridge);
    double sum = 0.0;
    for (std::size_t i = 0; i < prefixes.size(); ++i)
        sum += online_dynamics_value(m, target, prefixes[i], ell, horizon, reward, derive_seed(seed, {i}));
    return sum / static_cast<double>(prefixes.size());
}

// ---------------------------------------------------------------- extrapolation

double avg_reward_extrapolate(std::span<const double> rewards, int n_full) {
    if (rewards.empty()) throw Error("avg_reward_extrapolate: no rewards");
    if (n_full < static_cast<int>(rewards.size()))
        throw Error("avg_reward_extrapolate: n_full smaller than the number of observations");
    const double sum = std::accumulate(rewards.begin(), rewards.end(), 0.0);
    return static_cast<double>(n_full) / static_cast<double>(rewards.size()) * sum;
}

double last_reward_extrapolate(std::span<const double> rewards, int n_full) {
    if (rewards.empty()) throw Error("last_reward_extrapolate: no rewards");
    return static_cast<double>(n_full) * rewards.back();
}

namespace {

template <class Fn>
double mean_over_prefixes(std::span<const PolicyRecord> records, int ell, Fn&& fn) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& r : records)
        for (const auto& t : r.trajectories) {
            if (t.rewards.size() < static_cast<std::size_t>(ell) + 1)
                throw Error("extrapolation: trajectory shorter than ell=" + std::to_string(ell));
            sum += fn(std::span<const double>(t.rewards.data(), static_cast<std::size_t>(ell) + 1));
            ++n;
        }
    if (n == 0) throw Error("extrapolation: no trajectories");
    return sum / static_cast<double>(n);
}

}  // namespace

double avg_reward_policy_value(std::span<const PolicyRecord> records, int ell, int horizon) {
    return mean_over_prefixes(records, ell, [&](std::span<const double> r) {
        return avg_reward_extrapolate(r, horizon + 1);
    });
}

double last_reward_policy_value(std::span<const PolicyRecord> records, int ell, int horizon) {
    return mean_over_prefixes(records, ell, [&](std::span<const double> r) {
        return last_reward_extrapolate(r, horizon + 1);
    });
}

double offpolicy_mean(const PolicyDataset& train) {
    if (train.records.empty()) throw Error("offpolicy_mean: empty dataset");
    double sum = 0.0;
    for (const auto& r : train.records) {
        if (!r.true_value) throw Error("offpolicy_mean: record of " + r.policy_id + " has no value");
        sum += *r.true_value;
    }
    return sum / static_cast<double>(train.records.size());
}

// ---------------------------------------------------------------- battery baselines

double delta_q_feature(std::span<const double> capacities) {
    if (capacities.size() < 5) throw Error("delta_q_feature: need capacities for cycles 4 and 5");
    return std::log(std::max(std::abs(capacities[4] - capacities[3]), kDeltaQFloor));
}

LifeGroup DeltaQClassifier::predict(double feature) const {
    if (constant) return *constant;
    return model.probability(std::span<const double>(&feature, 1)) >= 0.5 ? LifeGroup::high : LifeGroup::low;
}

std::vector<double> default_c_grid() {
    std::vector<double> cs;
    for (int i = 0; i < 10; ++i) cs.push_back(std::pow(10.0, -4.0 + 8.0 * i / 9.0));
    return cs;
}

namespace {

DeltaQClassifier fit_fixed_c(std::span<const double> x, std::span<const LifeGroup> y, double c) {
    DeltaQClassifier clf;
    clf.c = c;
    const bool has_low = std::find(y.begin(), y.end(), LifeGroup::low) != y.end();
    const bool has_high = std::find(y.begin(), y.end(), LifeGroup::high) != y.end();
    if (!has_low || !has_high) {
        clf.constant = has_high ? LifeGroup::high : LifeGroup::low;
        return clf;
    }
    Eigen::MatrixXd xm(static_cast<Eigen::Index>(x.size()), 1);
    Eigen::VectorXd lab(static_cast<Eigen::Index>(x.size()));
    for (std::size_t i = 0; i < x.size(); ++i) {
        xm(static_cast<Eigen::Index>(i), 0) = x[i];
        lab(static_cast<Eigen::Index>(i)) = y[i] == LifeGroup::high ? 1.0 : 0.0;
    }
    clf.model = logistic_fit(xm, lab, c);
    return clf;
}

}  // namespace

DeltaQClassifier delta_q_classify(std::span<const double> features, std::span<const LifeGroup> labels,
                                  int folds, std::span<const double> c_grid) {
    if (features.size() != labels.size() || features.empty())
        throw Error("delta_q_classify: features and labels must be nonempty and of equal length");
    const auto defaults = default_c_grid();
    if (c_grid.empty()) c_grid = defaults;
    const std::size_t n = features.size();
    const std::size_t nk = std::min<std::size_t>(static_cast<std::size_t>(std::max(folds, 2)), n);

    // Stratified folds: each class dealt round-robin in index order.
    std::vector<std::size_t> fold_of(n);
    std::size_t next[2] = {0, 0};
    for (std::size_t i = 0; i < n; ++i) {
        const int cls = labels[i] == LifeGroup::high ? 1 : 0;
        fold_of[i] = next[cls]++ % nk;
    }
    std::vector<double> acc(c_grid.size(), 0.0);
    for (std::size_t c = 0; c < c_grid.size(); ++c) {
        for (std::size_t f = 0; f < nk; ++f) {
            std::vector<double> xt;
            std::vector<LifeGroup> yt;
            std::vector<std::size_t> val;
            for (std::size_t i = 0; i < n; ++i) {
                if (fold_of[i] == f) {
                    val.push_back(i);
                } else {
                    xt.push_back(features[i]);
                    yt.push_back(labels[i]);
                }
            }
            if (val.empty() || xt.empty()) continue;
            const auto clf = fit_fixed_c(xt, yt, c_grid[c]);
            std::size_t hit = 0;
            for (std::size_t i : val) hit += clf.predict(features[i]) == labels[i];
            acc[c] += static_cast<double>(hit) / static_cast<double>(val.size()) / static_cast<double>(nk);
        }
    }
    const std::size_t best = static_cast<std::size_t>(std::max_element(acc.begin(), acc.end()) - acc.begin());
    DeltaQClassifier out = fit_fixed_c(features, labels, c_grid[best]);
    out.cv_accuracy = std::move(acc);
    return out;
}

LifeGroup majority_class(std::span<const LifeGroup> labels) {
    if (labels.empty()) throw Error("majority_class: no labels");
    const auto highs = std::count(labels.begin(), labels.end(), LifeGroup::high);
    return 2 * static_cast<std::size_t>(highs) > labels.size() ? LifeGroup::high : LifeGroup::low;
}

}  // namespace shortlong
