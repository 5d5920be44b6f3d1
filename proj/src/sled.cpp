#include "shortlong/sled.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

namespace shortlong {

const char* to_string(DynamicsFamily f) {
    switch (f) {
        case DynamicsFamily::linear: return "linear";
        case DynamicsFamily::mlp: return "mlp";
        case DynamicsFamily::function: return "function";
    }
    return "?";
}

DynamicsFamily dynamics_family_from_string(const std::string& s) {
    if (s == "linear") return DynamicsFamily::linear;
    if (s == "mlp") return DynamicsFamily::mlp;
    if (s == "function") return DynamicsFamily::function;
    throw Error("unknown dynamics family '" + s + "'");
}

GlobalDynamics GlobalDynamics::linear(Eigen::MatrixXd a, Eigen::VectorXd b) {
    if (a.rows() != a.cols() || b.size() != a.rows())
        throw Error("GlobalDynamics::linear: A must be d x d and b of length d");
    GlobalDynamics g;
    g.family_ = DynamicsFamily::linear;
    g.dim_ = static_cast<std::size_t>(a.rows());
    g.a_ = std::move(a);
    g.b_ = std::move(b);
    return g;
}

GlobalDynamics GlobalDynamics::mlp(RegressionModel model) {
    if (model.input_dim() != model.output_dim())
        throw Error("GlobalDynamics::mlp: network must map d inputs to d outputs");
    GlobalDynamics g;
    g.family_ = DynamicsFamily::mlp;
    g.dim_ = static_cast<std::size_t>(model.input_dim());
    g.net_ = std::move(model);
    return g;
}

GlobalDynamics GlobalDynamics::function(std::size_t state_dim, std::function<State(const State&)> f) {
    GlobalDynamics g;
    g.family_ = DynamicsFamily::function;
    g.dim_ = state_dim;
    g.fn_ = std::move(f);
    return g;
}

State GlobalDynamics::predict(const State& s) const {
    if (s.size() != dim_)
        throw Error("GlobalDynamics: state has " + std::to_string(s.size()) + " entries, expected " +
                    std::to_string(dim_));
    switch (family_) {
        case DynamicsFamily::linear: {
            const Eigen::Map<const Eigen::VectorXd> x(s.values.data(), static_cast<Eigen::Index>(dim_));
            const Eigen::VectorXd y = a_ * x + b_;
            return State(std::vector<double>(y.data(), y.data() + y.size()));
        }
        case DynamicsFamily::mlp: return State(net_.predict(s.values));
        case DynamicsFamily::function: return fn_(s);
    }
    return s;
}

Eigen::MatrixXd GlobalDynamics::predict_rows(const Eigen::MatrixXd& s) const {
    switch (family_) {
        case DynamicsFamily::linear: {
            Eigen::MatrixXd out = s * a_.transpose();
            out.rowwise() += b_.transpose();
            return out;
        }
        case DynamicsFamily::mlp: return net_.predict_rows(s);
        case DynamicsFamily::function: {
            Eigen::MatrixXd out(s.rows(), static_cast<Eigen::Index>(dim_));
            for (Eigen::Index i = 0; i < s.rows(); ++i) {
                const Eigen::RowVectorXd row = s.row(i);
                const State next = fn_(State(std::vector<double>(row.data(), row.data() + row.size())));
                out.row(i) = Eigen::Map<const Eigen::RowVectorXd>(next.values.data(), out.cols());
            }
            return out;
        }
    }
    return s;
}

Eigen::VectorXd GlobalDynamics::flat_parameters() const {
    switch (family_) {
        case DynamicsFamily::linear: {
            Eigen::VectorXd p(a_.size() + b_.size());
            p << Eigen::Map<const Eigen::VectorXd>(a_.data(), a_.size()), b_;
            return p;
        }
        case DynamicsFamily::mlp: return net_.net().flat_parameters();
        case DynamicsFamily::function: return {};
    }
    return {};
}

Json to_json(const GlobalDynamics& g) {
    Json j{{"family", to_string(g.family())}, {"state_dim", g.state_dim()}};
    switch (g.family()) {
        case DynamicsFamily::linear:
            j["a"] = std::vector<double>(g.matrix().data(), g.matrix().data() + g.matrix().size());
            j["b"] = std::vector<double>(g.offset().data(), g.offset().data() + g.offset().size());
            break;
        case DynamicsFamily::mlp: j["model"] = to_json(g.network()); break;
        case DynamicsFamily::function: throw Error("a function-backed dynamics model has no JSON form");
    }
    return j;
}

GlobalDynamics global_dynamics_from_json(const Json& j) {
    const auto family = dynamics_family_from_string(j.at("family").get<std::string>());
    if (family == DynamicsFamily::mlp) return GlobalDynamics::mlp(regression_model_from_json(j.at("model")));
    if (family == DynamicsFamily::linear) {
        const auto d = j.at("state_dim").get<Eigen::Index>();
        const auto a = j.at("a").get<std::vector<double>>();
        const auto b = j.at("b").get<std::vector<double>>();
        if (static_cast<Eigen::Index>(a.size()) != d * d || static_cast<Eigen::Index>(b.size()) != d)
            throw Error("global_dynamics_from_json: size mismatch");
        return GlobalDynamics::linear(Eigen::Map<const Eigen::MatrixXd>(a.data(), d, d),
                                      Eigen::Map<const Eigen::VectorXd>(b.data(), d));
    }
    throw Error("a function-backed dynamics model cannot be loaded");
}

Transitions collect_transitions(std::span<const Trajectory> trajectories, int max_steps) {
    std::size_t n = 0;
    for (const auto& t : trajectories)
        n += max_steps < 0 ? t.length() : std::min<std::size_t>(t.length(), static_cast<std::size_t>(max_steps));
    Transitions tr;
    if (n == 0) return tr;
    const Eigen::Index d = static_cast<Eigen::Index>(trajectories.front().states.front().size());
    Eigen::Index da = 0;
    for (const auto& t : trajectories)
        if (!t.actions.empty()) {
            da = static_cast<Eigen::Index>(t.actions.front().vector.size());
            break;
        }
    tr.s.resize(static_cast<Eigen::Index>(n), d);
    tr.next.resize(static_cast<Eigen::Index>(n), d);
    tr.actions.resize(static_cast<Eigen::Index>(n), da);
    Eigen::Index row = 0;
    for (std::size_t g = 0; g < trajectories.size(); ++g) {
        const auto& t = trajectories[g];
        const std::size_t steps =
            max_steps < 0 ? t.length() : std::min<std::size_t>(t.length(), static_cast<std::size_t>(max_steps));
        for (std::size_t i = 0; i < steps; ++i, ++row) {
            tr.s.row(row) = Eigen::Map<const Eigen::RowVectorXd>(t.states[i].values.data(), d);
            tr.next.row(row) = Eigen::Map<const Eigen::RowVectorXd>(t.states[i + 1].values.data(), d);
            if (da > 0) tr.actions.row(row) = Eigen::Map<const Eigen::RowVectorXd>(t.actions[i].vector.data(), da);
            tr.group.push_back(g);
        }
    }
    return tr;
}

GlobalDynamics fit_dynamics(const DynamicsCandidate& c, const Eigen::MatrixXd& s,
                            const Eigen::MatrixXd& next, std::uint64_t seed) {
    if (s.rows() == 0) throw Error("fit_global_model: empty transition pool");
    const Eigen::Index d = s.cols();
    switch (c.family) {
        case DynamicsFamily::linear: {
            Eigen::MatrixXd x(s.rows(), d + 1);
            x << s, Eigen::VectorXd::Ones(s.rows());
            Eigen::MatrixXd w;
            if (c.ridge > 0.0) {
                Eigen::MatrixXd gram = x.transpose() * x;
                gram.diagonal().head(d).array() += c.ridge;
                w = gram.ldlt().solve(x.transpose() * next);
            } else {
                w = x.completeOrthogonalDecomposition().solve(next);
            }
            return GlobalDynamics::linear(w.topRows(d).transpose(), w.row(d).transpose());
        }
        case DynamicsFamily::mlp: {
            MlpHyper h = c.hyper;
            if (h.layer_sizes.size() < 2) h.layer_sizes = {0, 0};
            h.layer_sizes.front() = static_cast<int>(d);
            h.layer_sizes.back() = static_cast<int>(d);
            return GlobalDynamics::mlp(
                mlp_fit(RegressionData{s, next, Eigen::VectorXd::Ones(s.rows())}, h, seed));
        }
        case DynamicsFamily::function: throw Error("fit_dynamics: the function family is not fitted");
    }
    throw Error("fit_dynamics: unknown family");
}

namespace {

double mean_squared_error(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& truth) {
    if (pred.rows() == 0) return 0.0;
    const double mse = (pred - truth).rowwise().squaredNorm().sum() / static_cast<double>(pred.rows());
    return std::isfinite(mse) ? mse : std::numeric_limits<double>::infinity();
}

std::vector<Eigen::Index> rows_where(const std::vector<std::size_t>& fold_of, std::size_t f, bool held) {
    std::vector<Eigen::Index> idx;
    for (std::size_t i = 0; i < fold_of.size(); ++i)
        if ((fold_of[i] == f) == held) idx.push_back(static_cast<Eigen::Index>(i));
    return idx;
}

}  // namespace

GlobalDynamics fit_global_model(const PolicyDataset& train,
                                std::span<const DynamicsCandidate> candidates, int k,
                                std::uint64_t seed, Exec exec) {
    if (candidates.empty()) throw Error("fit_global_model: no candidate families");
    if (k < 2) throw Error("fit_global_model: k must be >= 2");
    std::vector<Trajectory> trajs;
    std::vector<std::string> owner;
    for (const auto& r : train.records)
        for (const auto& t : r.trajectories) {
            trajs.push_back(t);
            owner.push_back(r.policy_id);
        }
    const Transitions tr = collect_transitions(trajs);
    if (tr.s.rows() == 0) throw Error("fit_global_model: empty transition pool");

    std::vector<std::string> policies = owner;
    std::sort(policies.begin(), policies.end());
    policies.erase(std::unique(policies.begin(), policies.end()), policies.end());
    const std::size_t n = static_cast<std::size_t>(tr.s.rows());
    std::vector<std::size_t> fold_of(n);
    std::size_t nk = static_cast<std::size_t>(k);
    if (policies.size() >= nk) {
        std::map<std::string, std::size_t> pf;
        const auto folds = kfold_split(policies.size(), nk, seed);
        for (std::size_t f = 0; f < nk; ++f)
            for (std::size_t p : folds[f]) pf[policies[p]] = f;
        for (std::size_t i = 0; i < n; ++i) fold_of[i] = pf.at(owner[tr.group[i]]);
    } else {
        nk = std::min(nk, n);
        if (nk < 2) throw Error("fit_global_model: need at least two transitions for cross-validation");
        const auto folds = kfold_split(n, nk, seed);
        for (std::size_t f = 0; f < nk; ++f)
            for (std::size_t i : folds[f]) fold_of[i] = f;
    }

    const std::size_t jobs = candidates.size() * nk;
    std::vector<double> losses(jobs);
    for_each_index(
        jobs,
        [&](std::size_t j) {
            const std::size_t c = j / nk, f = j % nk;
            const auto tr_idx = rows_where(fold_of, f, false);
            const auto va_idx = rows_where(fold_of, f, true);
            const GlobalDynamics g = fit_dynamics(candidates[c], tr.s(tr_idx, Eigen::all),
                                                  tr.next(tr_idx, Eigen::all), derive_seed(seed, {c, f}));
            losses[j] = mean_squared_error(g.predict_rows(tr.s(va_idx, Eigen::all)),
                                           tr.next(va_idx, Eigen::all));
        },
        exec);
    std::vector<double> summed(candidates.size(), 0.0);
    for (std::size_t j = 0; j < jobs; ++j) summed[j / nk] += losses[j];
    const std::size_t best =
        static_cast<std::size_t>(std::min_element(summed.begin(), summed.end()) - summed.begin());
    GlobalDynamics g = fit_dynamics(candidates[best], tr.s, tr.next, derive_seed(seed, {best, nk}));
    g.selected = best;
    g.cv_losses = std::move(summed);
    return g;
}

// ---------------------------------------------------------------- adapters

const char* to_string(AdapterFamily f) {
    switch (f) {
        case AdapterFamily::identity: return "identity";
        case AdapterFamily::affine_output: return "affine";
        case AdapterFamily::input_shift: return "shift";
    }
    return "?";
}

AdapterFamily adapter_family_from_string(const std::string& s) {
    if (s == "identity") return AdapterFamily::identity;
    if (s == "affine" || s == "affine_output") return AdapterFamily::affine_output;
    if (s == "shift" || s == "input_shift") return AdapterFamily::input_shift;
    throw Error("unknown adapter family '" + s + "'");
}

std::size_t adapter_parameter_count(AdapterFamily f, std::size_t d) {
    switch (f) {
        case AdapterFamily::identity: return 0;
        case AdapterFamily::affine_output: return 2 * d;
        case AdapterFamily::input_shift: return d;
    }
    return 0;
}

Adapter identity_adapter(AdapterFamily family, std::size_t d) {
    Adapter a;
    a.family = family;
    const auto dd = static_cast<Eigen::Index>(d);
    switch (family) {
        case AdapterFamily::identity: a.params.resize(0); break;
        case AdapterFamily::affine_output:
            a.params = Eigen::VectorXd::Zero(2 * dd);
            a.params.head(dd).setOnes();
            break;
        case AdapterFamily::input_shift: a.params = Eigen::VectorXd::Zero(dd); break;
    }
    return a;
}

State Adapter::apply(const GlobalDynamics& g, const State& s) const {
    switch (family) {
        case AdapterFamily::identity: return g.predict(s);
        case AdapterFamily::affine_output: {
            State p = g.predict(s);
            const std::size_t d = p.size();
            for (std::size_t j = 0; j < d; ++j)
                p[j] = params(static_cast<Eigen::Index>(j)) * p[j] + params(static_cast<Eigen::Index>(d + j));
            return p;
        }
        case AdapterFamily::input_shift: {
            State shifted = s;
            for (std::size_t j = 0; j < s.size(); ++j) shifted[j] += params(static_cast<Eigen::Index>(j));
            return g.predict(shifted);
        }
    }
    return g.predict(s);
}

namespace {

Eigen::MatrixXd apply_rows(const GlobalDynamics& g, const Adapter& a, const Eigen::MatrixXd& s) {
    switch (a.family) {
        case AdapterFamily::identity: return g.predict_rows(s);
        case AdapterFamily::affine_output: {
            const Eigen::Index d = s.cols();
            Eigen::MatrixXd p = g.predict_rows(s);
            p.array().rowwise() *= a.params.head(d).transpose().array();
            p.rowwise() += a.params.tail(d).transpose();
            return p;
        }
        case AdapterFamily::input_shift: {
            Eigen::MatrixXd shifted = s;
            shifted.rowwise() += a.params.transpose();
            return g.predict_rows(shifted);
        }
    }
    return g.predict_rows(s);
}

}  // namespace

Adapter fit_adapter_family(const GlobalDynamics& g, AdapterFamily family, const Eigen::MatrixXd& s,
                           const Eigen::MatrixXd& next) {
    const Eigen::Index d = s.cols();
    Adapter a = identity_adapter(family, static_cast<std::size_t>(d));
    if (family == AdapterFamily::identity || s.rows() == 0) return a;
    if (family == AdapterFamily::affine_output) {
        // Per-dimension least squares with a vanishing pull toward identity so
        // that constant predictions stay well posed.
        const Eigen::MatrixXd p = g.predict_rows(s);
        const double n = static_cast<double>(s.rows());
        const double rho = 1e-8 * n;
        for (Eigen::Index j = 0; j < d; ++j) {
            const double spp = p.col(j).squaredNorm(), sp = p.col(j).sum();
            const double spy = p.col(j).dot(next.col(j)), sy = next.col(j).sum();
            Eigen::Matrix2d m;
            m << spp + rho, sp, sp, n + rho;
            const Eigen::Vector2d sol = m.ldlt().solve(Eigen::Vector2d(spy + rho, sy));
            a.params(j) = sol(0);
            a.params(d + j) = sol(1);
        }
        return a;
    }
    const std::size_t m = static_cast<std::size_t>(s.rows() * d);
    auto residuals = [&](std::span<const double> delta, std::span<double> out) {
        Adapter trial = a;
        trial.params = Eigen::Map<const Eigen::VectorXd>(delta.data(), d);
        const Eigen::MatrixXd diff = apply_rows(g, trial, s) - next;
        std::copy(diff.data(), diff.data() + diff.size(), out.begin());
    };
    NllsOptions opts;
    opts.n_starts = 1;
    opts.max_iterations = 100;
    const auto res = least_squares(residuals, m, std::vector<double>(static_cast<std::size_t>(d), 0.0),
                                   Bounds::unbounded(static_cast<std::size_t>(d)), opts);
    a.params = Eigen::Map<const Eigen::VectorXd>(res.params.data(), d);
    return a;
}

Adapter fit_adapter(const GlobalDynamics& g, std::span<const Trajectory> prefixes, int ell,
                    std::span<const AdapterFamily> families, int k, std::uint64_t seed) {
    const std::size_t d = g.state_dim();
    if (ell < 0) throw Error("fit_adapter: ell must be >= 0");
    for (const auto& t : prefixes)
        if (t.length() < static_cast<std::size_t>(ell))
            throw Error("fit_adapter: prefix has " + std::to_string(t.length()) + " steps, ell=" +
                        std::to_string(ell));
    const Transitions tr = collect_transitions(prefixes, ell);
    const std::size_t n = static_cast<std::size_t>(tr.s.rows());

    std::vector<AdapterFamily> cands{AdapterFamily::identity};
    bool requested = false;
    for (auto f : families) {
        if (f == AdapterFamily::identity) continue;
        requested = true;
        if (n >= adapter_parameter_count(f, d) + 1 && n >= 2) cands.push_back(f);
    }
    if (cands.size() == 1) {
        Adapter a = identity_adapter(AdapterFamily::identity, d);
        a.fallback = requested;
        return a;
    }
    const std::size_t nk = std::min<std::size_t>(static_cast<std::size_t>(std::max(k, 2)), n);
    const auto folds = kfold_split(n, nk, seed);
    std::vector<std::size_t> fold_of(n);
    for (std::size_t f = 0; f < nk; ++f)
        for (std::size_t i : folds[f]) fold_of[i] = f;
    std::vector<double> losses(cands.size(), 0.0);
    for (std::size_t c = 0; c < cands.size(); ++c)
        for (std::size_t f = 0; f < nk; ++f) {
            const auto tr_idx = rows_where(fold_of, f, false);
            const auto va_idx = rows_where(fold_of, f, true);
            const Adapter a =
                fit_adapter_family(g, cands[c], tr.s(tr_idx, Eigen::all), tr.next(tr_idx, Eigen::all));
            const Eigen::MatrixXd diff = apply_rows(g, a, tr.s(va_idx, Eigen::all)) - tr.next(va_idx, Eigen::all);
            const double sse = diff.squaredNorm();
            losses[c] += std::isfinite(sse) ? sse : std::numeric_limits<double>::infinity();
        }
    const std::size_t best =
        static_cast<std::size_t>(std::min_element(losses.begin(), losses.end()) - losses.begin());
    Adapter a = fit_adapter_family(g, cands[best], tr.s, tr.next);
    a.cv_losses = std::move(losses);
    return a;
}

double calc_returns(const GlobalDynamics& g, const Adapter& adapter, const Trajectory& prefix,
                    int ell, int horizon, const RewardFn& reward) {
    if (ell < 0 || prefix.length() < static_cast<std::size_t>(ell) ||
        prefix.rewards.size() < static_cast<std::size_t>(ell) + 1)
        throw Error("calc_returns: prefix shorter than ell=" + std::to_string(ell));
    if (ell > horizon)
        throw Error("calc_returns: ell=" + std::to_string(ell) + " exceeds the horizon " +
                    std::to_string(horizon));
    double total = 0.0;
    for (int t = 0; t <= ell; ++t) total += prefix.rewards[static_cast<std::size_t>(t)];
    State s = prefix.states[static_cast<std::size_t>(ell)];
    for (int t = ell + 1; t <= horizon; ++t) {
        s = adapter.apply(g, s);
        if (!all_finite(s.values))
            throw Error("calc_returns: non-finite predicted state at step " + std::to_string(t));
        total += reward(s);
    }
    return total;
}

double sled_policy_value(const GlobalDynamics& g, std::span<const PolicyRecord> records, int ell,
                         int horizon, std::span<const AdapterFamily> families, int k,
                         const RewardFn& reward, std::uint64_t seed, Adapter* fitted) {
    std::vector<Trajectory> prefixes;
    for (const auto& r : records)
        for (const auto& t : r.trajectories) prefixes.push_back(t);
    if (prefixes.empty()) throw Error("sled_policy_value: no trajectories");
    const Adapter a = fit_adapter(g, prefixes, ell, families, k, seed);
    double sum = 0.0;
    for (const auto& t : prefixes) sum += calc_returns(g, a, t, ell, horizon, reward);
    if (fitted) *fitted = a;
    return sum / static_cast<double>(prefixes.size());
}

// ---------------------------------------------------------------- battery

Json to_json(const CurveModel& m) {
    Json j{{"family", to_string(m.family)}, {"shape", m.shape}, {"lfc", m.lfc}};
    j["y_shift"] = m.y_shift ? Json(*m.y_shift) : Json(nullptr);
    return j;
}

CurveModel curve_model_from_json(const Json& j) {
    CurveModel m;
    m.family = curve_family_from_string(j.at("family").get<std::string>());
    m.shape = j.at("shape").get<std::vector<double>>();
    m.lfc = j.value("lfc", 0.0);
    if (j.contains("y_shift") && !j["y_shift"].is_null()) m.y_shift = j["y_shift"].get<double>();
    return m;
}

std::vector<double> normalize_capacity(std::span<const double> capacities) {
    if (capacities.empty()) return {};
    const double shift = *std::max_element(capacities.begin(), capacities.end()) - 1.0;
    std::vector<double> out(capacities.begin(), capacities.end());
    for (double& v : out) v -= shift;
    return out;
}

namespace {

std::vector<CurvePoint> aligned_points(const CapacityCurve& c) {
    if (!c.lifetime) throw Error("battery_fit_base: curve '" + c.id + "' has no lifetime");
    const auto norm = normalize_capacity(c.capacities);
    std::vector<CurvePoint> pts;
    pts.reserve(norm.size());
    for (std::size_t i = 0; i < norm.size(); ++i)
        pts.push_back({static_cast<double>(*c.lifetime) - static_cast<double>(i + 1), norm[i]});
    return pts;
}

/// Closed-form start for each family: least squares for the polynomials and
/// for the logit of the values in the sigmoid case.
std::vector<double> initial_shape(CurveFamily f, std::span<const CurvePoint> pts) {
    const int deg = f == CurveFamily::quadratic ? 2 : 1;
    Eigen::MatrixXd x(static_cast<Eigen::Index>(pts.size()), deg + 1);
    Eigen::VectorXd y(static_cast<Eigen::Index>(pts.size()));
    Eigen::Index rows = 0;
    for (const auto& p : pts) {
        double target = p.value;
        if (f == CurveFamily::negexp) {
            if (p.value <= 1e-3 || p.value >= 1.0 - 1e-6) continue;
            target = std::log(p.value / (1.0 - p.value));
        }
        for (int j = 0; j <= deg; ++j) x(rows, j) = std::pow(p.t, deg - j);
        y(rows++) = target;
    }
    if (rows < deg + 1) {
        if (f == CurveFamily::negexp) return {0.005, -1.4};
        return std::vector<double>(static_cast<std::size_t>(deg + 1), 0.0);
    }
    const Eigen::VectorXd c = x.topRows(rows).colPivHouseholderQr().solve(y.head(rows));
    if (f == CurveFamily::negexp) return {c(0), -c(1)};  // logit = a x - b
    return std::vector<double>(c.data(), c.data() + c.size());
}

std::vector<double> fit_shape(CurveFamily f, std::span<const CurvePoint> pts) {
    NllsOptions opts;
    opts.n_starts = 2;
    opts.max_iterations = 100;
    opts.jitter = 0.1;
    return nlls_fit(f, pts, initial_shape(f, pts), Bounds::unbounded(parameter_count(f)), opts).params;
}

double curve_sse(CurveFamily f, std::span<const double> shape, std::span<const CurvePoint> pts) {
    double s = 0.0;
    for (const auto& p : pts) {
        const double r = curve_eval(f, shape, p.t) - p.value;
        s += r * r;
    }
    return std::isfinite(s) ? s : std::numeric_limits<double>::infinity();
}

}  // namespace

CurveModel battery_fit_base(std::span<const CapacityCurve> train_curves, int k,
                            std::span<const CurveFamily> families) {
    if (train_curves.empty()) throw Error("battery_fit_base: no training curves");
    static const std::vector<CurveFamily> kAll{CurveFamily::negexp, CurveFamily::linear,
                                               CurveFamily::quadratic};
    if (families.empty()) families = kAll;
    std::vector<std::vector<CurvePoint>> per_curve;
    for (const auto& c : train_curves) per_curve.push_back(aligned_points(c));
    const std::size_t n = per_curve.size();

    std::size_t nk = static_cast<std::size_t>(std::max(k, 2));
    if (n < nk) nk = 5;
    if (n < nk) nk = n;

    auto pool = [&](auto&& keep) {
        std::vector<CurvePoint> out;
        for (std::size_t i = 0; i < n; ++i)
            if (keep(i)) out.insert(out.end(), per_curve[i].begin(), per_curve[i].end());
        return out;
    };
    CurveModel m;
    m.cv_losses.assign(families.size(), 0.0);
    if (nk >= 2) {
        const auto folds = kfold_split(n, nk, 0);
        std::vector<std::size_t> fold_of(n);
        for (std::size_t f = 0; f < nk; ++f)
            for (std::size_t i : folds[f]) fold_of[i] = f;
        for (std::size_t c = 0; c < families.size(); ++c)
            for (std::size_t f = 0; f < nk; ++f) {
                const auto train = pool([&](std::size_t i) { return fold_of[i] != f; });
                const auto val = pool([&](std::size_t i) { return fold_of[i] == f; });
                m.cv_losses[c] += curve_sse(families[c], fit_shape(families[c], train), val) /
                                  static_cast<double>(std::max<std::size_t>(val.size(), 1));
            }
    } else {
        const auto all = pool([](std::size_t) { return true; });
        for (std::size_t c = 0; c < families.size(); ++c)
            m.cv_losses[c] = curve_sse(families[c], fit_shape(families[c], all), all);
    }
    const std::size_t best = static_cast<std::size_t>(
        std::min_element(m.cv_losses.begin(), m.cv_losses.end()) - m.cv_losses.begin());
    m.family = families[best];
    m.shape = fit_shape(m.family, pool([](std::size_t) { return true; }));
    return m;
}

namespace {

constexpr double kMaxLifetime = 20000.0;

struct ShiftFit {
    double lfc;
    double y;
    double sse;
};

/// Least squares over lfc (and y when `with_shift`): dense grid over lfc with
/// the optimal y in closed form, then a local refinement.
ShiftFit fit_shift(const CurveModel& base, std::span<const CurvePoint> pts, bool with_shift) {
    double t_last = 0.0;
    for (const auto& p : pts) t_last = std::max(t_last, p.t);
    auto sse_at = [&](double lfc, double* y_out) {
        double y = 0.0;
        if (with_shift) {
            for (const auto& p : pts) y += p.value - base.base(lfc - p.t);
            y /= static_cast<double>(pts.size());
        }
        double s = 0.0;
        for (const auto& p : pts) {
            const double r = base.base(lfc - p.t) + y - p.value;
            s += r * r;
        }
        if (y_out) *y_out = y;
        return std::isfinite(s) ? s : std::numeric_limits<double>::infinity();
    };
    double best_lfc = t_last, best = std::numeric_limits<double>::infinity();
    for (double lfc = t_last; lfc <= kMaxLifetime; lfc += 1.0) {
        const double s = sse_at(lfc, nullptr);
        if (s < best) {
            best = s;
            best_lfc = lfc;
        }
    }
    std::vector<double> init{best_lfc};
    Bounds bounds{{t_last}, {kMaxLifetime}};
    if (with_shift) {
        double y0 = 0.0;
        sse_at(best_lfc, &y0);
        init.push_back(y0);
        bounds.lower.push_back(-std::numeric_limits<double>::infinity());
        bounds.upper.push_back(std::numeric_limits<double>::infinity());
    }
    auto residuals = [&](std::span<const double> q, std::span<double> out) {
        const double y = with_shift ? q[1] : 0.0;
        for (std::size_t i = 0; i < pts.size(); ++i) out[i] = base.base(q[0] - pts[i].t) + y - pts[i].value;
    };
    NllsOptions opts;
    opts.n_starts = 1;
    opts.max_iterations = 100;
    if (pts.size() < init.size()) return {best_lfc, init.size() > 1 ? init[1] : 0.0, best};
    const auto res = least_squares(residuals, pts.size(), init, bounds, opts);
    return {res.params[0], with_shift ? res.params[1] : 0.0, res.residual};
}

}  // namespace

LifetimeFit battery_fit_lifetime(const CurveModel& base, std::span<const CurvePoint> prefix, int k) {
    if (prefix.size() < 2) throw Error("battery_fit_lifetime: need at least 2 prefix points");
    std::vector<double> caps;
    for (const auto& p : prefix) caps.push_back(p.value);
    const auto norm = normalize_capacity(caps);
    std::vector<CurvePoint> pts;
    for (std::size_t i = 0; i < prefix.size(); ++i) pts.push_back({prefix[i].t, norm[i]});

    LifetimeFit out;
    try {
        // The shifted class needs a spare point in every training fold.
        const bool shift_ok = pts.size() >= 3;
        bool use_shift = false;
        if (shift_ok) {
            const std::size_t n = pts.size();
            const std::size_t nk = std::min<std::size_t>(static_cast<std::size_t>(std::max(k, 2)), n);
            const auto folds = kfold_split(n, nk, 0);
            double loss[2] = {0.0, 0.0};
            for (int cls = 0; cls < 2; ++cls)
                for (const auto& fold : folds) {
                    std::vector<CurvePoint> tr, va;
                    for (std::size_t i = 0; i < n; ++i)
                        (std::find(fold.begin(), fold.end(), i) != fold.end() ? va : tr).push_back(pts[i]);
                    const ShiftFit f = fit_shift(base, tr, cls == 1);
                    for (const auto& p : va) {
                        const double r = base.base(f.lfc - p.t) + f.y - p.value;
                        loss[cls] += r * r;
                    }
                }
            use_shift = loss[1] < loss[0];
        }
        const ShiftFit f = fit_shift(base, pts, use_shift);
        out.lfc = f.lfc;
        if (use_shift) out.y_shift = f.y;
        out.residual = f.sse;
        out.ok = std::isfinite(f.lfc) && std::isfinite(f.sse);
    } catch (const Error&) {
        out.ok = false;
    }
    if (!out.ok) out.lfc = std::numeric_limits<double>::quiet_NaN();
    return out;
}

const char* to_string(LifeGroup g) { return g == LifeGroup::low ? "low" : "high"; }

LifeGroup battery_classify(double lfc, double threshold) {
    if (!(threshold > 0.0)) throw Error("battery_classify: threshold must be > 0");
    return lfc < threshold ? LifeGroup::low : LifeGroup::high;
}

std::vector<CurvePoint> curve_prefix(const CapacityCurve& curve, int n_cycles) {
    if (n_cycles < 0 || static_cast<std::size_t>(n_cycles) > curve.capacities.size())
        throw Error("curve_prefix: curve '" + curve.id + "' has fewer than " + std::to_string(n_cycles) +
                    " cycles");
    std::vector<CurvePoint> pts;
    for (int c = 1; c <= n_cycles; ++c) pts.push_back({static_cast<double>(c), curve.at_cycle(c)});
    return pts;
}

}  // namespace shortlong
