#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "shortlong/core.hpp"
#include "shortlong/envs.hpp"
#include "shortlong/io.hpp"
#include "shortlong/regress.hpp"

namespace shortlong {

// ---------------------------------------------------------------- global dynamics

enum class DynamicsFamily { linear, mlp, function };

const char* to_string(DynamicsFamily f);
DynamicsFamily dynamics_family_from_string(const std::string& s);

/// One entry of the model-selection grid for the global dynamics.
struct DynamicsCandidate {
    DynamicsFamily family = DynamicsFamily::linear;
    /// Linear family: ridge penalty on the matrix entries (0 = minimum-norm
    /// least squares).
    double ridge = 0.0;
    /// MLP family.
    MlpHyper hyper;
};

/// Policy-independent next-state model s -> s'. Actions are never an input.
class GlobalDynamics {
public:
    GlobalDynamics() = default;

    static GlobalDynamics linear(Eigen::MatrixXd a, Eigen::VectorXd b);
    static GlobalDynamics mlp(RegressionModel model);
    /// Wraps a known transition map, e.g. the true simulator under a fixed
    /// deterministic policy.
    static GlobalDynamics function(std::size_t state_dim, std::function<State(const State&)> f);

    DynamicsFamily family() const { return family_; }
    std::size_t state_dim() const { return dim_; }
    State predict(const State& s) const;
    /// Rows are states.
    Eigen::MatrixXd predict_rows(const Eigen::MatrixXd& s) const;
    Eigen::VectorXd flat_parameters() const;

    const Eigen::MatrixXd& matrix() const { return a_; }
    const Eigen::VectorXd& offset() const { return b_; }
    const RegressionModel& network() const { return net_; }

    /// Filled by fit_global_model: chosen grid index and summed fold losses.
    std::size_t selected = 0;
    std::vector<double> cv_losses;

private:
    DynamicsFamily family_ = DynamicsFamily::linear;
    std::size_t dim_ = 0;
    Eigen::MatrixXd a_;
    Eigen::VectorXd b_;
    RegressionModel net_;
    std::function<State(const State&)> fn_;
};

Json to_json(const GlobalDynamics& g);
GlobalDynamics global_dynamics_from_json(const Json& j);

/// Consecutive state pairs of trajectories, first `max_steps` transitions of
/// each (all when negative). Rows are samples.
struct Transitions {
    Eigen::MatrixXd s;
    Eigen::MatrixXd next;
    Eigen::MatrixXd actions;
    /// Index of the source trajectory's owner (record) for grouped folds.
    std::vector<std::size_t> group;
};

Transitions collect_transitions(std::span<const Trajectory> trajectories, int max_steps = -1);

/// Fits one candidate to the given pairs.
GlobalDynamics fit_dynamics(const DynamicsCandidate& c, const Eigen::MatrixXd& s,
                            const Eigen::MatrixXd& next, std::uint64_t seed);

/// Pools every transition of the training set and picks the candidate with the
/// lowest k-fold validation error (folds over policies when there are at
/// least k of them, otherwise over transitions), then refits it on the pool.
GlobalDynamics fit_global_model(const PolicyDataset& train,
                                std::span<const DynamicsCandidate> candidates, int k,
                                std::uint64_t seed, Exec exec = Exec::parallel);

// ---------------------------------------------------------------- adapters

enum class AdapterFamily { identity, affine_output, input_shift };

const char* to_string(AdapterFamily f);
AdapterFamily adapter_family_from_string(const std::string& s);

/// identity: 0; affine_output: 2d (s' = alpha * f(s) + beta); input_shift: d
/// (s' = f(s + delta)).
std::size_t adapter_parameter_count(AdapterFamily f, std::size_t state_dim);

struct Adapter {
    AdapterFamily family = AdapterFamily::identity;
    Eigen::VectorXd params;
    /// True when too few transitions were available and identity was forced.
    bool fallback = false;
    /// Summed validation error per candidate family tried.
    std::vector<double> cv_losses;

    State apply(const GlobalDynamics& g, const State& s) const;
};

/// The parameters for which the adapted model equals the global one.
Adapter identity_adapter(AdapterFamily family, std::size_t state_dim);

/// Fits one family on the given pairs with the global model frozen.
Adapter fit_adapter_family(const GlobalDynamics& g, AdapterFamily family, const Eigen::MatrixXd& s,
                           const Eigen::MatrixXd& next);

/// Fits the adapter on the first `ell` transitions of every prefix (pooled),
/// choosing by k-fold CV among `families` plus identity. Families needing more
/// parameters than the pooled transitions allow are skipped; if none is left
/// the identity adapter is returned with `fallback` set.
Adapter fit_adapter(const GlobalDynamics& g, std::span<const Trajectory> prefixes, int ell,
                    std::span<const AdapterFamily> families, int k, std::uint64_t seed);

using RewardFn = std::function<double(const State&)>;

/// Observed rewards r_0..r_ell plus the rewards of states ell+1..L rolled out
/// autoregressively from s_ell through the adapted model.
double calc_returns(const GlobalDynamics& g, const Adapter& adapter, const Trajectory& prefix,
                    int ell, int horizon, const RewardFn& reward);

/// Per-policy SLED value: adapter fit on the pooled prefixes of all records,
/// then the mean of calc_returns over every trajectory.
double sled_policy_value(const GlobalDynamics& g, std::span<const PolicyRecord> records, int ell,
                         int horizon, std::span<const AdapterFamily> families, int k,
                         const RewardFn& reward, std::uint64_t seed, Adapter* fitted = nullptr);

// ---------------------------------------------------------------- battery

/// Capacity model on the cycles-remaining axis: value(t) = base(lfc - t) + y_shift.
struct CurveModel {
    CurveFamily family = CurveFamily::negexp;
    std::vector<double> shape;
    double lfc = 0.0;
    std::optional<double> y_shift;
    std::vector<double> cv_losses;

    double base(double x) const { return curve_eval(family, shape, x); }
    double eval(double cycle) const { return base(lfc - cycle) + y_shift.value_or(0.0); }
};

Json to_json(const CurveModel& m);
CurveModel curve_model_from_json(const Json& j);

/// Capacities shifted so that their maximum is 1.
std::vector<double> normalize_capacity(std::span<const double> capacities);

/// Right-aligns every training curve at its lifetime, normalizes capacities and
/// picks the family with the lowest k-fold (over curves) validation error.
/// k drops to 5 when there are fewer curves than folds, and to the number of
/// curves below that.
CurveModel battery_fit_base(std::span<const CapacityCurve> train_curves, int k = 10,
                            std::span<const CurveFamily> families = {});

struct LifetimeFit {
    /// NaN when the optimizer found no finite solution.
    double lfc = 0.0;
    std::optional<double> y_shift;
    double residual = 0.0;
    bool ok = true;
};

/// Estimates the lifetime of a cell from its first cycles (t = cycle,
/// value = capacity), choosing by cross-validation between a pure horizontal
/// shift and a shift plus vertical offset of the base curve.
LifetimeFit battery_fit_lifetime(const CurveModel& base, std::span<const CurvePoint> prefix,
                                 int k = 5);

enum class LifeGroup { low, high };

const char* to_string(LifeGroup g);

inline constexpr double kLifeThreshold = 550.0;

/// low iff lfc < threshold.
LifeGroup battery_classify(double lfc, double threshold = kLifeThreshold);

/// First `n_cycles` points of a curve in the form battery_fit_lifetime expects.
std::vector<CurvePoint> curve_prefix(const CapacityCurve& curve, int n_cycles);

}  // namespace shortlong
