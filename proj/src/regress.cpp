#include "shortlong/regress.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace shortlong {

// ---------------------------------------------------------------- hyper JSON

Json to_json(const MlpHyper& h) {
    return {{"layer_sizes", h.layer_sizes},
            {"learning_rate", h.learning_rate},
            {"weight_decay", h.weight_decay},
            {"max_updates", h.max_updates},
            {"batch_size", h.batch_size},
            {"patience", h.patience},
            {"eval_every", h.eval_every},
            {"validation_fraction", h.validation_fraction},
            {"standardize", h.standardize}};
}

MlpHyper mlp_hyper_from_json(const Json& j) {
    MlpHyper h;
    h.layer_sizes = j.at("layer_sizes").get<std::vector<int>>();
    h.learning_rate = j.value("learning_rate", h.learning_rate);
    h.weight_decay = j.value("weight_decay", h.weight_decay);
    h.max_updates = j.value("max_updates", h.max_updates);
    h.batch_size = j.value("batch_size", h.batch_size);
    h.patience = j.value("patience", h.patience);
    h.eval_every = j.value("eval_every", h.eval_every);
    h.validation_fraction = j.value("validation_fraction", h.validation_fraction);
    h.standardize = j.value("standardize", h.standardize);
    return h;
}

// ---------------------------------------------------------------- Mlp

Mlp::Mlp(std::vector<int> layer_sizes) : sizes_(std::move(layer_sizes)) {
    if (sizes_.size() < 2) throw Error("Mlp: need at least input and output sizes");
    for (int s : sizes_)
        if (s < 1) throw Error("Mlp: layer sizes must be positive");
    for (std::size_t l = 1; l < sizes_.size(); ++l) {
        weights.push_back(Eigen::MatrixXd::Zero(sizes_[l], sizes_[l - 1]));
        biases.push_back(Eigen::VectorXd::Zero(sizes_[l]));
    }
}

void Mlp::init_random(Rng& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t l = 0; l < weights.size(); ++l) {
        const bool last = l + 1 == weights.size();
        const double sd = std::sqrt((last ? 1.0 : 2.0) / static_cast<double>(weights[l].cols()));
        for (Eigen::Index c = 0; c < weights[l].cols(); ++c)
            for (Eigen::Index r = 0; r < weights[l].rows(); ++r) weights[l](r, c) = sd * normal(rng);
        biases[l].setZero();
    }
}

std::size_t Mlp::parameter_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < weights.size(); ++l) n += weights[l].size() + biases[l].size();
    return n;
}

Eigen::MatrixXd Mlp::forward(const Eigen::MatrixXd& x) const {
    if (x.rows() != input_dim())
        throw Error("Mlp::forward: input has " + std::to_string(x.rows()) + " features, expected " +
                    std::to_string(input_dim()));
    Eigen::MatrixXd a = x;
    for (std::size_t l = 0; l < weights.size(); ++l) {
        Eigen::MatrixXd z = weights[l] * a;
        z.colwise() += biases[l];
        if (l + 1 < weights.size()) z = z.cwiseMax(0.0);
        a = std::move(z);
    }
    return a;
}

double Mlp::loss_and_gradient(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y,
                              const Eigen::VectorXd& w, double weight_decay,
                              Eigen::VectorXd* grad) const {
    const std::size_t n_layers = weights.size();
    const double n = static_cast<double>(x.cols());
    std::vector<Eigen::MatrixXd> acts;
    acts.reserve(n_layers + 1);
    acts.push_back(x);
    for (std::size_t l = 0; l < n_layers; ++l) {
        Eigen::MatrixXd z = weights[l] * acts.back();
        z.colwise() += biases[l];
        if (l + 1 < n_layers) z = z.cwiseMax(0.0);
        acts.push_back(std::move(z));
    }
    const Eigen::MatrixXd diff = acts.back() - y;
    const Eigen::RowVectorXd sq = diff.colwise().squaredNorm();
    double loss = sq.dot(w) / n;
    double norm2 = 0.0;
    if (weight_decay != 0.0) {
        for (std::size_t l = 0; l < n_layers; ++l)
            norm2 += weights[l].squaredNorm() + biases[l].squaredNorm();
        loss += weight_decay * norm2;
    }
    if (!grad) return loss;

    grad->resize(static_cast<Eigen::Index>(parameter_count()));
    // Gradient blocks are written back to front, so compute offsets first.
    std::vector<Eigen::Index> offset(n_layers);
    Eigen::Index off = 0;
    for (std::size_t l = 0; l < n_layers; ++l) {
        offset[l] = off;
        off += weights[l].size() + biases[l].size();
    }
    Eigen::MatrixXd delta = diff * (2.0 / n);
    delta.array().rowwise() *= w.transpose().array();
    for (std::size_t l = n_layers; l-- > 0;) {
        const Eigen::MatrixXd gw = delta * acts[l].transpose();
        const Eigen::VectorXd gb = delta.rowwise().sum();
        Eigen::Map<Eigen::MatrixXd>(grad->data() + offset[l], gw.rows(), gw.cols()) = gw;
        grad->segment(offset[l] + gw.size(), gb.size()) = gb;
        if (l > 0) {
            Eigen::MatrixXd back = weights[l].transpose() * delta;
            back.array() *= (acts[l].array() > 0.0).cast<double>();
            delta = std::move(back);
        }
    }
    if (weight_decay != 0.0) *grad += (2.0 * weight_decay) * flat_parameters();
    return loss;
}

Eigen::VectorXd Mlp::flat_parameters() const {
    Eigen::VectorXd theta(static_cast<Eigen::Index>(parameter_count()));
    Eigen::Index off = 0;
    for (std::size_t l = 0; l < weights.size(); ++l) {
        Eigen::Map<Eigen::MatrixXd>(theta.data() + off, weights[l].rows(), weights[l].cols()) =
            weights[l];
        off += weights[l].size();
        theta.segment(off, biases[l].size()) = biases[l];
        off += biases[l].size();
    }
    return theta;
}

void Mlp::set_flat_parameters(const Eigen::VectorXd& theta) {
    if (theta.size() != static_cast<Eigen::Index>(parameter_count()))
        throw Error("Mlp::set_flat_parameters: size mismatch");
    Eigen::Index off = 0;
    for (std::size_t l = 0; l < weights.size(); ++l) {
        weights[l] = Eigen::Map<const Eigen::MatrixXd>(theta.data() + off, weights[l].rows(),
                                                       weights[l].cols());
        off += weights[l].size();
        biases[l] = theta.segment(off, biases[l].size());
        off += biases[l].size();
    }
}

// ---------------------------------------------------------------- Standardizer

Standardizer Standardizer::identity(int dim) {
    return {Eigen::VectorXd::Zero(dim), Eigen::VectorXd::Ones(dim)};
}

Standardizer Standardizer::fit(const Eigen::MatrixXd& data) {
    Standardizer s;
    const double n = static_cast<double>(data.rows());
    s.mean = data.colwise().mean().transpose();
    s.scale.resize(data.cols());
    for (Eigen::Index j = 0; j < data.cols(); ++j) {
        const double var = (data.col(j).array() - s.mean(j)).square().sum() / std::max(n, 1.0);
        const double sd = std::sqrt(var);
        s.scale(j) = sd > 1e-12 * std::max(1.0, std::abs(s.mean(j))) ? sd : 1.0;
    }
    return s;
}

Eigen::MatrixXd Standardizer::apply_rows(const Eigen::MatrixXd& data) const {
    Eigen::MatrixXd out = data.rowwise() - mean.transpose();
    out.array().rowwise() /= scale.transpose().array();
    return out;
}

Eigen::MatrixXd Standardizer::invert_rows(const Eigen::MatrixXd& data) const {
    Eigen::MatrixXd out = data;
    out.array().rowwise() *= scale.transpose().array();
    out.rowwise() += mean.transpose();
    return out;
}

// ---------------------------------------------------------------- RegressionModel

std::vector<double> RegressionModel::predict(std::span<const double> x) const {
    if (static_cast<int>(x.size()) != input_dim())
        throw Error("predict: input has " + std::to_string(x.size()) + " features, model expects " +
                    std::to_string(input_dim()));
    Eigen::MatrixXd row = Eigen::Map<const Eigen::RowVectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
    const Eigen::MatrixXd out = predict_rows(row);
    return {out.data(), out.data() + out.size()};
}

Eigen::MatrixXd RegressionModel::predict_rows(const Eigen::MatrixXd& x) const {
    if (x.cols() != input_dim())
        throw Error("predict: input has " + std::to_string(x.cols()) + " features, model expects " +
                    std::to_string(input_dim()));
    const Eigen::MatrixXd z = net_.forward(x_.apply_rows(x).transpose());
    return y_.invert_rows(z.transpose());
}

void RegressionModel::set_output_standardizer(const Standardizer& y) {
    if (y.mean.size() != output_dim() || y.scale.size() != output_dim())
        throw Error("set_output_standardizer: dimension mismatch");
    // new_z = (old_z * s1 + m1 - m2) / s2, applied to the last affine layer.
    const Eigen::ArrayXd ratio = y_.scale.array() / y.scale.array();
    auto& w = net_.weights.back();
    auto& b = net_.biases.back();
    w.array().colwise() *= ratio;
    b = ((b.array() * y_.scale.array() + y_.mean.array() - y.mean.array()) / y.scale.array()).matrix();
    y_ = y;
}

namespace {

Json vector_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Eigen::VectorXd vector_from_json(const Json& j) {
    const auto d = j.get<std::vector<double>>();
    return Eigen::Map<const Eigen::VectorXd>(d.data(), static_cast<Eigen::Index>(d.size()));
}

Json standardizer_json(const Standardizer& s) {
    return {{"mean", vector_json(s.mean)}, {"scale", vector_json(s.scale)}};
}

Standardizer standardizer_from_json(const Json& j) {
    return {vector_from_json(j.at("mean")), vector_from_json(j.at("scale"))};
}

}  // namespace

Json to_json(const RegressionModel& m) {
    const Eigen::VectorXd theta = m.net().flat_parameters();
    return {{"layer_sizes", m.net().layer_sizes()},
            {"parameters", vector_json(theta)},
            {"x_standardizer", standardizer_json(m.x_standardizer())},
            {"y_standardizer", standardizer_json(m.y_standardizer())}};
}

RegressionModel regression_model_from_json(const Json& j) {
    Mlp net(j.at("layer_sizes").get<std::vector<int>>());
    net.set_flat_parameters(vector_from_json(j.at("parameters")));
    return {std::move(net), standardizer_from_json(j.at("x_standardizer")),
            standardizer_from_json(j.at("y_standardizer"))};
}

// ---------------------------------------------------------------- fitting

RegressionData make_regression_data(std::span<const FeatureVector> x,
                                    std::span<const std::vector<double>> y,
                                    std::span<const double> weights) {
    if (x.size() != y.size() || x.size() != weights.size())
        throw Error("mlp_fit: X, y and weights must have equal lengths");
    if (x.empty()) throw Error("mlp_fit: no training rows");
    RegressionData d;
    const Eigen::Index n = static_cast<Eigen::Index>(x.size());
    const Eigen::Index dx = static_cast<Eigen::Index>(x[0].size());
    const Eigen::Index dy = static_cast<Eigen::Index>(y[0].size());
    d.x.resize(n, dx);
    d.y.resize(n, dy);
    d.weights.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        if (static_cast<Eigen::Index>(x[i].size()) != dx || static_cast<Eigen::Index>(y[i].size()) != dy)
            throw Error("mlp_fit: ragged rows");
        for (Eigen::Index j = 0; j < dx; ++j) d.x(i, j) = x[i].values[j];
        for (Eigen::Index j = 0; j < dy; ++j) d.y(i, j) = y[i][j];
        d.weights(i) = weights[i];
    }
    return d;
}

namespace {

void validate(const RegressionData& d) {
    if (d.x.rows() == 0) throw Error("mlp_fit: no training rows");
    if (d.y.rows() != d.x.rows() || d.weights.size() != d.x.rows())
        throw Error("mlp_fit: X, y and weights must have equal lengths");
    if ((d.weights.array() < 0.0).any()) throw Error("mlp_fit: weights must be >= 0");
    if (!d.x.allFinite() || !d.y.allFinite() || !d.weights.allFinite())
        throw Error("mlp_fit: non-finite training data");
}

struct Adam {
    Eigen::VectorXd m, v;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    long t = 0;

    explicit Adam(Eigen::Index n) : m(Eigen::VectorXd::Zero(n)), v(Eigen::VectorXd::Zero(n)) {}

    void step(Eigen::VectorXd& theta, const Eigen::VectorXd& g, double lr) {
        ++t;
        m = beta1 * m + (1.0 - beta1) * g;
        v = beta2 * v + (1.0 - beta2) * g.cwiseProduct(g);
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        theta.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
    }
};

/// Draws minibatches as consecutive slices of per-epoch permutations.
class Batcher {
public:
    Batcher(Eigen::Index n, int batch, Rng& rng) : n_(n), batch_(batch), rng_(rng) {
        perm_.resize(static_cast<std::size_t>(n));
        std::iota(perm_.begin(), perm_.end(), 0);
        pos_ = n;
    }

    bool full() const { return batch_ <= 0 || batch_ >= n_; }

    std::vector<Eigen::Index> next() {
        std::vector<Eigen::Index> idx;
        idx.reserve(static_cast<std::size_t>(batch_));
        while (static_cast<int>(idx.size()) < batch_) {
            if (pos_ >= n_) {
                std::shuffle(perm_.begin(), perm_.end(), rng_);
                pos_ = 0;
            }
            idx.push_back(perm_[static_cast<std::size_t>(pos_++)]);
        }
        return idx;
    }

private:
    Eigen::Index n_;
    int batch_;
    Rng& rng_;
    std::vector<Eigen::Index> perm_;
    Eigen::Index pos_;
};

struct Prepared {
    Eigen::MatrixXd x;  // features x samples, standardized
    Eigen::MatrixXd y;  // outputs x samples, standardized
    Eigen::VectorXd w;
};

Prepared prepare(const RegressionData& d, const std::vector<Eigen::Index>& rows,
                 const Standardizer& sx, const Standardizer& sy) {
    Prepared p;
    p.x = sx.apply_rows(d.x(rows, Eigen::all)).transpose();
    p.y = sy.apply_rows(d.y(rows, Eigen::all)).transpose();
    p.w = d.weights(rows);
    return p;
}

double data_loss(const Mlp& net, const Prepared& p) {
    if (p.x.cols() == 0) return 0.0;
    return net.loss_and_gradient(p.x, p.y, p.w, 0.0, nullptr);
}

void run_adam(Mlp& net, const Prepared& train, int updates, int batch_size, double lr, double wd,
              Rng& rng, const std::function<bool(int)>& checkpoint) {
    Eigen::VectorXd theta = net.flat_parameters();
    Adam adam(theta.size());
    Batcher batcher(train.x.cols(), batch_size, rng);
    Eigen::VectorXd grad;
    Mlp work = net;
    for (int u = 1; u <= updates; ++u) {
        work.set_flat_parameters(theta);
        double loss;
        if (batcher.full()) {
            loss = work.loss_and_gradient(train.x, train.y, train.w, wd, &grad);
        } else {
            const auto idx = batcher.next();
            loss = work.loss_and_gradient(train.x(Eigen::all, idx), train.y(Eigen::all, idx),
                                          train.w(idx), wd, &grad);
        }
        if (!std::isfinite(loss) || !grad.allFinite())
            throw Error("mlp_fit: non-finite loss at update " + std::to_string(u));
        adam.step(theta, grad, lr);
        if (checkpoint) {
            net.set_flat_parameters(theta);
            if (!checkpoint(u)) return;
        }
    }
    net.set_flat_parameters(theta);
}

}  // namespace

RegressionModel mlp_fit(const RegressionData& data, const MlpHyper& hyper, std::uint64_t seed,
                        FitReport* report) {
    validate(data);
    std::vector<int> sizes = hyper.layer_sizes;
    if (sizes.size() < 2) throw Error("mlp_fit: layer_sizes needs input and output entries");
    if (sizes.front() == 0) sizes.front() = static_cast<int>(data.x.cols());
    if (sizes.back() == 0) sizes.back() = static_cast<int>(data.y.cols());
    if (sizes.front() != data.x.cols() || sizes.back() != data.y.cols())
        throw Error("mlp_fit: layer_sizes do not match data (" + std::to_string(data.x.cols()) +
                    " inputs, " + std::to_string(data.y.cols()) + " outputs)");
    if (hyper.max_updates < 0) throw Error("mlp_fit: max_updates must be >= 0");

    Rng rng(seed);
    const Eigen::Index n = data.rows();
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Eigen::Index n_val = 0;
    if (hyper.validation_fraction > 0.0 && n >= 10) {
        std::shuffle(order.begin(), order.end(), rng);
        n_val = std::max<Eigen::Index>(1, static_cast<Eigen::Index>(hyper.validation_fraction * n));
    }
    std::vector<Eigen::Index> val_rows(order.begin(), order.begin() + n_val);
    std::vector<Eigen::Index> train_rows(order.begin() + n_val, order.end());
    std::sort(val_rows.begin(), val_rows.end());
    std::sort(train_rows.begin(), train_rows.end());

    Standardizer sx = Standardizer::identity(static_cast<int>(data.x.cols()));
    Standardizer sy = Standardizer::identity(static_cast<int>(data.y.cols()));
    if (hyper.standardize) {
        sx = Standardizer::fit(data.x(train_rows, Eigen::all));
        sy = Standardizer::fit(data.y(train_rows, Eigen::all));
    }
    const Prepared train = prepare(data, train_rows, sx, sy);
    const Prepared val = prepare(data, val_rows, sx, sy);

    Mlp net(sizes);
    net.init_random(rng);

    FitReport rep;
    const int eval_every = std::max(1, hyper.eval_every);
    double best = std::numeric_limits<double>::infinity();
    Eigen::VectorXd best_theta = net.flat_parameters();
    int bad = 0;
    int stopped = hyper.max_updates;
    auto checkpoint = [&](int u) {
        if (u % eval_every != 0 && u != hyper.max_updates) return true;
        rep.train_loss_curve.push_back(data_loss(net, train));
        if (n_val == 0) return true;
        const double vl = data_loss(net, val);
        if (vl < best) {
            best = vl;
            best_theta = net.flat_parameters();
            bad = 0;
        } else if (++bad >= hyper.patience) {
            stopped = u;
            return false;
        }
        return true;
    };
    run_adam(net, train, hyper.max_updates, hyper.batch_size, hyper.learning_rate,
             hyper.weight_decay, rng, checkpoint);
    if (n_val > 0 && std::isfinite(best)) net.set_flat_parameters(best_theta);

    RegressionModel model(std::move(net), std::move(sx), std::move(sy));
    if (report) {
        rep.stopped_at_update = stopped;
        RegressionData held;
        const auto& rows = n_val > 0 ? val_rows : train_rows;
        held.x = data.x(rows, Eigen::all);
        held.y = data.y(rows, Eigen::all);
        held.weights = data.weights(rows);
        rep.validation_loss = weighted_loss(model, held);
        *report = std::move(rep);
    }
    return model;
}

RegressionModel mlp_fit(std::span<const FeatureVector> x, std::span<const std::vector<double>> y,
                        std::span<const double> weights, const MlpHyper& hyper,
                        std::uint64_t seed, FitReport* report) {
    return mlp_fit(make_regression_data(x, y, weights), hyper, seed, report);
}

void mlp_continue(RegressionModel& model, const RegressionData& data, int updates, int batch_size,
                  double learning_rate, double weight_decay, std::uint64_t seed) {
    validate(data);
    std::vector<Eigen::Index> rows(static_cast<std::size_t>(data.rows()));
    std::iota(rows.begin(), rows.end(), 0);
    const Prepared train = prepare(data, rows, model.x_standardizer(), model.y_standardizer());
    Rng rng(seed);
    run_adam(model.net(), train, updates, batch_size, learning_rate, weight_decay, rng, {});
}

std::vector<double> mlp_predict(const RegressionModel& model, const FeatureVector& x) {
    return model.predict(x.values);
}

double weighted_loss(const RegressionModel& model, const RegressionData& data) {
    if (data.rows() == 0) return 0.0;
    const Eigen::MatrixXd pred = model.predict_rows(data.x);
    const Eigen::VectorXd sq = (pred - data.y).rowwise().squaredNorm();
    return sq.dot(data.weights) / static_cast<double>(data.rows());
}

// ---------------------------------------------------------------- k-fold

std::vector<std::vector<std::size_t>> kfold_split(std::size_t n_items, std::size_t k,
                                                  std::uint64_t seed) {
    if (k < 2) throw Error("kfold_split: k must be >= 2");
    if (k > n_items)
        throw Error("kfold_split: k=" + std::to_string(k) + " exceeds the number of items (" +
                    std::to_string(n_items) + ")");
    std::vector<std::size_t> perm(n_items);
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(seed);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<std::vector<std::size_t>> folds(k);
    for (std::size_t i = 0; i < n_items; ++i) folds[i % k].push_back(perm[i]);
    for (auto& f : folds) std::sort(f.begin(), f.end());
    return folds;
}

std::vector<std::size_t> kfold_train_indices(const std::vector<std::vector<std::size_t>>& folds,
                                             std::size_t f, std::size_t n_items) {
    std::vector<bool> held(n_items, false);
    for (std::size_t i : folds.at(f)) held[i] = true;
    std::vector<std::size_t> out;
    out.reserve(n_items - folds[f].size());
    for (std::size_t i = 0; i < n_items; ++i)
        if (!held[i]) out.push_back(i);
    return out;
}

// ---------------------------------------------------------------- NLLS

Bounds Bounds::unbounded(std::size_t n) {
    return {std::vector<double>(n, -std::numeric_limits<double>::infinity()),
            std::vector<double>(n, std::numeric_limits<double>::infinity())};
}

void Bounds::project(std::span<double> p) const {
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (i < lower.size()) p[i] = std::max(p[i], lower[i]);
        if (i < upper.size()) p[i] = std::min(p[i], upper[i]);
    }
}

namespace {

double sum_squares(const Eigen::VectorXd& r) {
    return r.allFinite() ? r.squaredNorm() : std::numeric_limits<double>::infinity();
}

NllsResult levenberg_marquardt(const ResidualFn& fn, std::size_t m, std::vector<double> p,
                               const Bounds& bounds, const NllsOptions& opts) {
    const std::size_t n = p.size();
    Eigen::VectorXd r(static_cast<Eigen::Index>(m));
    auto eval = [&](const std::vector<double>& q, Eigen::VectorXd& out) {
        fn(q, std::span<double>(out.data(), m));
        return sum_squares(out);
    };
    bounds.project(p);
    double cost = eval(p, r);
    NllsResult res{p, cost, false};
    if (!std::isfinite(cost)) return res;

    Eigen::MatrixXd jac(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
    Eigen::VectorXd rp(static_cast<Eigen::Index>(m)), rm(static_cast<Eigen::Index>(m));
    double lambda = 1e-3;
    for (int it = 0; it < opts.max_iterations; ++it) {
        // Central-difference Jacobian.
        for (std::size_t j = 0; j < n; ++j) {
            const double h = 1e-6 * std::max(1.0, std::abs(p[j]));
            std::vector<double> qp = p, qm = p;
            qp[j] += h;
            qm[j] -= h;
            eval(qp, rp);
            eval(qm, rm);
            jac.col(static_cast<Eigen::Index>(j)) = (rp - rm) / (2.0 * h);
        }
        if (!jac.allFinite()) break;
        const Eigen::MatrixXd jtj = jac.transpose() * jac;
        const Eigen::VectorXd jtr = jac.transpose() * r;
        if (jtr.norm() <= 1e-300) {
            res.converged = true;
            break;
        }
        bool improved = false;
        for (int tries = 0; tries < 30 && !improved; ++tries) {
            Eigen::MatrixXd a = jtj;
            for (Eigen::Index d = 0; d < a.rows(); ++d) a(d, d) += lambda * std::max(jtj(d, d), 1e-12);
            const Eigen::VectorXd step = a.ldlt().solve(-jtr);
            std::vector<double> q(n);
            for (std::size_t j = 0; j < n; ++j) q[j] = p[j] + step(static_cast<Eigen::Index>(j));
            bounds.project(q);
            Eigen::VectorXd rq(static_cast<Eigen::Index>(m));
            const double c = eval(q, rq);
            if (c < cost) {
                const double rel = (cost - c) / std::max(cost, 1e-300);
                p = std::move(q);
                r = std::move(rq);
                cost = c;
                lambda = std::max(lambda / 3.0, 1e-12);
                improved = true;
                if (rel < opts.tolerance || cost == 0.0) res.converged = true;
            } else {
                lambda *= 4.0;
            }
        }
        if (!improved) {
            res.converged = true;
            break;
        }
        if (res.converged) break;
    }
    res.params = p;
    res.residual = cost;
    return res;
}

}  // namespace

NllsResult least_squares(const ResidualFn& residuals, std::size_t n_residuals,
                         std::vector<double> init, const Bounds& bounds, const NllsOptions& opts) {
    if (n_residuals < init.size())
        throw Error("nlls: need at least as many data points as parameters");
    Rng rng(opts.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    NllsResult best;
    best.residual = std::numeric_limits<double>::infinity();
    const int starts = std::max(1, opts.n_starts);
    for (int s = 0; s < starts; ++s) {
        std::vector<double> p = init;
        if (s > 0)
            for (double& v : p) v += opts.jitter * std::max(std::abs(v), 1e-2) * normal(rng);
        NllsResult r = levenberg_marquardt(residuals, n_residuals, std::move(p), bounds, opts);
        if (r.residual < best.residual) best = std::move(r);
    }
    if (!std::isfinite(best.residual)) throw Error("nlls: no finite-loss solution found");
    return best;
}

NllsResult nlls_fit(CurveFamily family, std::span<const CurvePoint> data, std::vector<double> init,
                    const Bounds& bounds, const NllsOptions& opts) {
    if (init.size() != parameter_count(family)) throw Error("nlls_fit: wrong number of initial parameters");
    auto fn = [family, data](std::span<const double> p, std::span<double> out) {
        for (std::size_t i = 0; i < data.size(); ++i)
            out[i] = curve_eval(family, p, data[i].t) - data[i].value;
    };
    return least_squares(fn, data.size(), std::move(init), bounds, opts);
}

// ---------------------------------------------------------------- logistic

double LogisticModel::probability(std::span<const double> features) const {
    if (static_cast<Eigen::Index>(features.size()) != coef.size())
        throw Error("LogisticModel: feature dimension mismatch");
    Eigen::MatrixXd row = Eigen::Map<const Eigen::RowVectorXd>(
        features.data(), static_cast<Eigen::Index>(features.size()));
    return probability_rows(row)(0);
}

Eigen::VectorXd LogisticModel::probability_rows(const Eigen::MatrixXd& features) const {
    const Eigen::VectorXd z = (x.apply_rows(features) * coef).array() + intercept;
    return z.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
}

LogisticModel logistic_fit(const Eigen::MatrixXd& x, const Eigen::VectorXd& labels, double c,
                           const Eigen::VectorXd* sample_weights) {
    if (x.rows() == 0 || labels.size() != x.rows()) throw Error("logistic_fit: bad input sizes");
    if (!(c > 0.0)) throw Error("logistic_fit: C must be > 0");
    const bool has0 = (labels.array() < 0.5).any();
    const bool has1 = (labels.array() > 0.5).any();
    if (!has0 || !has1) throw Error("logistic_fit: need both classes in the training data");

    LogisticModel m;
    m.x = Standardizer::fit(x);
    const Eigen::MatrixXd xs = m.x.apply_rows(x);
    const Eigen::Index n = xs.rows(), d = xs.cols();
    Eigen::MatrixXd design(n, d + 1);
    design.leftCols(d) = xs;
    design.col(d).setOnes();
    const Eigen::VectorXd w = sample_weights ? *sample_weights : Eigen::VectorXd::Ones(n);

    Eigen::VectorXd beta = Eigen::VectorXd::Zero(d + 1);
    auto objective = [&](const Eigen::VectorXd& b) {
        const Eigen::VectorXd z = design * b;
        double loss = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            // log(1 + exp(z)) - y z, computed stably.
            const double zi = z(i);
            const double softplus = zi > 0 ? zi + std::log1p(std::exp(-zi)) : std::log1p(std::exp(zi));
            loss += w(i) * (softplus - labels(i) * zi);
        }
        return 0.5 * b.head(d).squaredNorm() + c * loss;
    };
    double f = objective(beta);
    for (int it = 0; it < 100; ++it) {
        const Eigen::VectorXd z = design * beta;
        const Eigen::VectorXd p = z.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
        Eigen::VectorXd grad = c * design.transpose() * (w.array() * (p - labels).array()).matrix();
        grad.head(d) += beta.head(d);
        const Eigen::VectorXd curv = (w.array() * p.array() * (1.0 - p.array())).matrix() * c;
        Eigen::MatrixXd hess = design.transpose() * curv.asDiagonal() * design;
        for (Eigen::Index j = 0; j < d; ++j) hess(j, j) += 1.0;
        hess(d, d) += 1e-10;
        const Eigen::VectorXd step = hess.ldlt().solve(grad);
        double t = 1.0;
        bool moved = false;
        for (int ls = 0; ls < 40; ++ls) {
            const Eigen::VectorXd cand = beta - t * step;
            const double fc = objective(cand);
            if (fc <= f) {
                const double gain = f - fc;
                beta = cand;
                f = fc;
                moved = gain > 1e-14 * std::max(1.0, std::abs(f));
                break;
            }
            t *= 0.5;
        }
        if (!moved) break;
    }
    m.coef = beta.head(d);
    m.intercept = beta(d);
    return m;
}

Json to_json(const LogisticModel& m) {
    return {{"x_standardizer", standardizer_json(m.x)},
            {"coef", vector_json(m.coef)},
            {"intercept", m.intercept}};
}

LogisticModel logistic_model_from_json(const Json& j) {
    LogisticModel m;
    m.x = standardizer_from_json(j.at("x_standardizer"));
    m.coef = vector_from_json(j.at("coef"));
    m.intercept = j.at("intercept").get<double>();
    return m;
}

}  // namespace shortlong
