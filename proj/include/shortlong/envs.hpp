#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <utility>
#include <vector>

#include "shortlong/core.hpp"

namespace shortlong {

// ---------------------------------------------------------------- HIV

struct HivConfig {
    double state_scale = 1e5;
    double reward_scale = 1e8;
    double step_days = 5.0;
    int horizon = 200;
    /// Tolerances of the adaptive integrator, applied to raw (unnormalized) state.
    double rel_tol = 1e-9;
    double abs_tol = 1e-9;
};

/// RTI, PI, both, none; ids 0..3.
std::vector<Action> hiv_actions();
/// The three treatment actions used by historical policies.
std::vector<Action> hiv_treatment_actions();

/// Raw default "unhealthy" patient state (T1, T2, T1*, T2*, V, E).
inline constexpr std::array<double, 6> kHivDefaultState = {163573.0, 5.0, 11945.0,
                                                           46.0,     63919.0, 24.0};

/// Six-compartment HIV infection model under RTI/PI efficacies (e1, e2) given
/// by the action vector. States are divided by state_scale; the reward keeps
/// only the state-dependent part (immune effectors minus viral load) divided
/// by reward_scale.
class HivEnv final : public Environment {
public:
    explicit HivEnv(HivConfig cfg = {}) : cfg_(cfg) {}

    std::string id() const override { return "hiv"; }
    std::size_t state_dim() const override { return 6; }
    std::size_t action_dim() const override { return 2; }
    int horizon() const override { return cfg_.horizon; }
    bool stochastic() const override { return false; }
    double reward(const State& s) const override;
    State step(const State& s, const Action& a, Rng& rng) const override;

    /// Deterministic step, no rng needed.
    State advance(const State& s, const Action& a) const;
    const HivConfig& config() const { return cfg_; }

private:
    HivConfig cfg_;
};

/// Right-hand side of the ODE in raw units; exposed for independent checks.
std::array<double, 6> hiv_derivative(const std::array<double, 6>& y, double rti, double pi);

/// One treatment period: next normalized state and its reward.
std::pair<State, double> hiv_step(const State& state, const Action& action,
                                  const HivConfig& cfg = {});

/// default + default * Uniform(-rate, rate) per component, normalized.
std::vector<State> hiv_initial_states(int n, double rate, std::uint64_t seed,
                                      const HivConfig& cfg = {});

// ---------------------------------------------------------------- kidney

/// Surrogate anemia-management model. Raw state is
/// (Hb_t, Hb_{t-1}, Hb_{t-2}, dose_{t-1}, dose_{t-2}) with Hb in g/dL and doses
/// in micrograms (action value x dose_unit); everything is divided by
/// state_scale. Hb relaxes toward an anemic baseline and rises with a
/// saturating, one-step-lagged dose response.
struct KidneyConfig {
    double state_scale = 500.0;
    double reward_scale = 10.0;
    int horizon = 30;
    std::array<double, 2> hb_healthy_range = {10.0, 12.0};
    double hb_baseline = 7.0;
    double relaxation = 0.25;
    double dose_emax = 2.25;
    double dose_ec50 = 1.0;
    double lag_weight = 0.4;
    double noise_sd = 0.1;
    /// Maximum admissible action; larger doses are clamped.
    double max_dose = 5.0;
    double dose_unit = 100.0;
    double hb_min = 0.0;
    double hb_max = 25.0;
    /// Width (g/dL) of the reward falloff outside the healthy range.
    double reward_width = 0.75;
    /// Weight of the current Hb in the reward; the rest goes to the previous Hb.
    double reward_current_weight = 0.7;
};

class KidneyEnv final : public Environment {
public:
    explicit KidneyEnv(KidneyConfig cfg = {}) : cfg_(cfg) {}

    std::string id() const override { return "kidney"; }
    std::size_t state_dim() const override { return 5; }
    std::size_t action_dim() const override { return 1; }
    int horizon() const override { return cfg_.horizon; }
    bool stochastic() const override { return cfg_.noise_sd > 0.0; }
    double reward(const State& s) const override;
    State step(const State& s, const Action& a, Rng& rng) const override;

    const KidneyConfig& config() const { return cfg_; }
    /// Denormalized current Hb.
    double hemoglobin(const State& s) const { return s[0] * cfg_.state_scale; }
    /// Previous dose as an action value.
    double last_dose(const State& s) const { return s[3] * cfg_.state_scale / cfg_.dose_unit; }

private:
    KidneyConfig cfg_;
};

std::pair<State, double> kidney_step(const State& state, double dose, Rng& rng,
                                     const KidneyConfig& cfg = {});

/// Hb ~ Uniform[8, 13]; lags equal the initial Hb, no prior doses.
std::vector<State> kidney_initial_states(int n, std::uint64_t seed, const KidneyConfig& cfg = {});

// ---------------------------------------------------------------- battery

enum class CurveFamily { negexp, linear, quadratic };

const char* to_string(CurveFamily f);
CurveFamily curve_family_from_string(const std::string& s);
std::size_t parameter_count(CurveFamily f);

/// negexp: 1/(1+exp(-a x + b)); linear: a x + b; quadratic: a x^2 + b x + c.
double curve_eval(CurveFamily f, std::span<const double> params, double x);

/// Capacity per discharge cycle; capacities[i] belongs to cycle i + 1.
struct CapacityCurve {
    std::string id;
    std::vector<double> capacities;
    /// Ground-truth lifetime in cycles, when known.
    std::optional<int> lifetime;

    double at_cycle(int cycle) const { return capacities.at(static_cast<std::size_t>(cycle - 1)); }
};

inline constexpr double kEndOfLifeFraction = 0.8;

/// First cycle whose capacity falls below fraction x (capacity of cycle 1), or
/// nullopt if it never does.
std::optional<int> end_of_life_cycle(const CapacityCurve& curve,
                                     double fraction = kEndOfLifeFraction);

/// Curves are right-aligned at their lifetime: capacity(t) = f(lifetime - t) +
/// noise, where x = lifetime - t counts the cycles left. With a > 0 the curve
/// is strictly decreasing and all same-(a, b) curves coincide once shifted by
/// their lifetimes.
CapacityCurve battery_synthesize(double a, double b, int lifetime, double noise_sd, int n_cycles,
                                 std::uint64_t seed);

CapacityCurve battery_synthesize_family(CurveFamily family, std::span<const double> params,
                                        int lifetime, double noise_sd, int n_cycles,
                                        std::uint64_t seed);

/// CSV schema: [curve_id,]cycle,capacity[,lifetime]. Without curve_id the file
/// holds a single curve.
void write_curves_csv(std::ostream& out, std::span<const CapacityCurve> curves);
void write_curves_csv(const std::filesystem::path& path, std::span<const CapacityCurve> curves);
std::vector<CapacityCurve> read_curves_csv(std::istream& in);
std::vector<CapacityCurve> read_curves_csv(const std::filesystem::path& path);

}  // namespace shortlong
