#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "shortlong/core.hpp"
#include "shortlong/envs.hpp"
#include "shortlong/io.hpp"

namespace shortlong {

// ---------------------------------------------------------------- MLP

struct MlpHyper {
    /// Input size first, output size last. Callers that build features may
    /// leave the input entry as 0 and have it filled in by mlp_fit.
    std::vector<int> layer_sizes;
    double learning_rate = 1e-3;
    double weight_decay = 0.0;
    int max_updates = 8000;
    int batch_size = 100;
    /// Early stopping: number of consecutive non-improving validation checks.
    int patience = 10;
    int eval_every = 100;
    /// Share of rows held out inside mlp_fit for early stopping.
    double validation_fraction = 0.1;
    /// Z-score inputs and targets; predictions are mapped back.
    bool standardize = true;

    bool operator==(const MlpHyper&) const = default;
};

Json to_json(const MlpHyper& h);
MlpHyper mlp_hyper_from_json(const Json& j);

struct FitReport {
    std::vector<double> train_loss_curve;
    double validation_loss = 0.0;
    int stopped_at_update = 0;
};

/// Fully connected ReLU network; the output layer is linear.
class Mlp {
public:
    Mlp() = default;
    /// All parameters zero.
    explicit Mlp(std::vector<int> layer_sizes);

    void init_random(Rng& rng);

    std::vector<int> layer_sizes() const { return sizes_; }
    int input_dim() const { return sizes_.empty() ? 0 : sizes_.front(); }
    int output_dim() const { return sizes_.empty() ? 0 : sizes_.back(); }
    std::size_t parameter_count() const;

    /// Columns are samples: X is (input x n), result is (output x n).
    Eigen::MatrixXd forward(const Eigen::MatrixXd& x) const;

    /// Data term (1/n) sum_i w_i ||f(x_i) - y_i||^2 plus weight_decay * ||theta||^2.
    /// Fills `grad` (same layout as flat_parameters) when non-null.
    double loss_and_gradient(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y,
                             const Eigen::VectorXd& w, double weight_decay,
                             Eigen::VectorXd* grad) const;

    Eigen::VectorXd flat_parameters() const;
    void set_flat_parameters(const Eigen::VectorXd& theta);

    std::vector<Eigen::MatrixXd> weights;
    std::vector<Eigen::VectorXd> biases;

private:
    std::vector<int> sizes_;
};

/// Per-feature affine map to zero mean / unit scale. Constant features keep
/// scale 1.
struct Standardizer {
    Eigen::VectorXd mean;
    Eigen::VectorXd scale;

    static Standardizer identity(int dim);
    /// Rows of `data` are samples.
    static Standardizer fit(const Eigen::MatrixXd& data);
    Eigen::MatrixXd apply_rows(const Eigen::MatrixXd& data) const;
    Eigen::MatrixXd invert_rows(const Eigen::MatrixXd& data) const;
};

/// Trained predictor: standardize, forward, de-standardize.
class RegressionModel {
public:
    RegressionModel() = default;
    RegressionModel(Mlp net, Standardizer x, Standardizer y)
        : net_(std::move(net)), x_(std::move(x)), y_(std::move(y)) {}

    int input_dim() const { return net_.input_dim(); }
    int output_dim() const { return net_.output_dim(); }

    std::vector<double> predict(std::span<const double> x) const;
    /// Rows are samples.
    Eigen::MatrixXd predict_rows(const Eigen::MatrixXd& x) const;

    const Mlp& net() const { return net_; }
    Mlp& net() { return net_; }
    const Standardizer& x_standardizer() const { return x_; }
    const Standardizer& y_standardizer() const { return y_; }

    /// Switches the target standardization without changing predictions (the
    /// output layer absorbs the change). Lets warm-started fits follow
    /// targets whose scale drifts.
    void set_output_standardizer(const Standardizer& y);

private:
    Mlp net_;
    Standardizer x_;
    Standardizer y_;
};

Json to_json(const RegressionModel& m);
RegressionModel regression_model_from_json(const Json& j);

/// Rows are samples; `weights` has one entry per row.
struct RegressionData {
    Eigen::MatrixXd x;
    Eigen::MatrixXd y;
    Eigen::VectorXd weights;

    Eigen::Index rows() const { return x.rows(); }
};

RegressionData make_regression_data(std::span<const FeatureVector> x,
                                    std::span<const std::vector<double>> y,
                                    std::span<const double> weights);

/// Weighted least-squares MLP fit with Adam and early stopping on an internal
/// validation slice. Deterministic given seed.
RegressionModel mlp_fit(const RegressionData& data, const MlpHyper& hyper, std::uint64_t seed,
                        FitReport* report = nullptr);

RegressionModel mlp_fit(std::span<const FeatureVector> x, std::span<const std::vector<double>> y,
                        std::span<const double> weights, const MlpHyper& hyper,
                        std::uint64_t seed, FitReport* report = nullptr);

/// Further Adam updates on an already trained model, keeping its
/// standardizers fixed (fresh optimizer moments). Used by the iterative
/// fitters (FQI, FQE) to warm start each sweep.
void mlp_continue(RegressionModel& model, const RegressionData& data, int updates, int batch_size,
                  double learning_rate, double weight_decay, std::uint64_t seed);

std::vector<double> mlp_predict(const RegressionModel& model, const FeatureVector& x);

/// (1/n) sum_i w_i ||f(x_i) - y_i||^2 in the original target units.
double weighted_loss(const RegressionModel& model, const RegressionData& data);

// ---------------------------------------------------------------- k-fold

/// k disjoint validation index sets covering 0..n-1, sizes within one of
/// each other, each sorted ascending. Assignment depends only on (n, k, seed).
std::vector<std::vector<std::size_t>> kfold_split(std::size_t n_items, std::size_t k,
                                                  std::uint64_t seed);

/// Complement of fold `f` in 0..n-1.
std::vector<std::size_t> kfold_train_indices(const std::vector<std::vector<std::size_t>>& folds,
                                             std::size_t f, std::size_t n_items);

// ---------------------------------------------------------------- NLLS

struct Bounds {
    std::vector<double> lower;
    std::vector<double> upper;

    static Bounds unbounded(std::size_t n);
    void project(std::span<double> p) const;
};

struct NllsOptions {
    int n_starts = 16;
    int max_iterations = 200;
    /// Relative size of the Gaussian jitter applied to restarts.
    double jitter = 0.5;
    double tolerance = 1e-15;
    std::uint64_t seed = 0;
};

struct NllsResult {
    std::vector<double> params;
    /// Sum of squared residuals at `params`.
    double residual = 0.0;
    bool converged = false;
};

using ResidualFn = std::function<void(std::span<const double> params, std::span<double> out)>;

/// Bounded Levenberg-Marquardt (Gauss-Newton steps with adaptive damping and
/// projection onto the box), restarted from n_starts jittered copies of
/// `init`; the first start is `init` itself, so the result never has a larger
/// residual than the starting point.
NllsResult least_squares(const ResidualFn& residuals, std::size_t n_residuals,
                         std::vector<double> init, const Bounds& bounds,
                         const NllsOptions& opts = {});

struct CurvePoint {
    double t;
    double value;
};

NllsResult nlls_fit(CurveFamily family, std::span<const CurvePoint> data, std::vector<double> init,
                    const Bounds& bounds, const NllsOptions& opts = {});

// ---------------------------------------------------------------- logistic

/// L2-regularized binary logistic regression on standardized inputs:
/// minimizes 0.5 ||coef||^2 + C * sum_i w_i logloss_i (intercept unpenalized).
struct LogisticModel {
    Standardizer x;
    Eigen::VectorXd coef;
    double intercept = 0.0;

    double probability(std::span<const double> features) const;
    /// Rows are samples.
    Eigen::VectorXd probability_rows(const Eigen::MatrixXd& features) const;
};

LogisticModel logistic_fit(const Eigen::MatrixXd& x, const Eigen::VectorXd& labels, double c,
                           const Eigen::VectorXd* sample_weights = nullptr);

Json to_json(const LogisticModel& m);
LogisticModel logistic_model_from_json(const Json& j);

}  // namespace shortlong
