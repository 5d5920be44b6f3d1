#include "shortlong/envs.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <string>

#include <boost/numeric/odeint.hpp>

#include "shortlong/io.hpp"

namespace shortlong {

// ---------------------------------------------------------------- HIV

namespace hiv {
// Standard published constants of the six-compartment model (rates per day).
constexpr double kLambda1 = 1.0e4;   // type 1 target cell production
constexpr double kD1 = 0.01;         // type 1 death rate
constexpr double kK1 = 8.0e-7;       // type 1 infection rate
constexpr double kLambda2 = 31.98;   // type 2 target cell production
constexpr double kD2 = 0.01;         // type 2 death rate
constexpr double kF = 0.34;          // RTI efficacy reduction in type 2 cells
constexpr double kK2 = 1.0e-4;       // type 2 infection rate
constexpr double kDelta = 0.7;       // infected cell death rate
constexpr double kM1 = 1.0e-5;       // immune clearance, type 1
constexpr double kM2 = 1.0e-5;       // immune clearance, type 2
constexpr double kNT = 100.0;        // virions per infected cell
constexpr double kC = 13.0;          // virus clearance
constexpr double kRho1 = 1.0;        // virions infecting a type 1 cell
constexpr double kRho2 = 1.0;        // virions infecting a type 2 cell
constexpr double kLambdaE = 1.0;     // effector production
constexpr double kBE = 0.3;          // max effector birth rate
constexpr double kKb = 100.0;        // birth saturation
constexpr double kDE = 0.25;         // max effector death rate
constexpr double kKd = 500.0;        // death saturation
constexpr double kDeltaE = 0.1;      // effector natural death
// Reward weights (state-dependent part only).
constexpr double kRewardViral = 0.1;
constexpr double kRewardEffector = 1000.0;
}  // namespace hiv

std::vector<Action> hiv_actions() {
    return {{0, {0.7, 0.0}}, {1, {0.0, 0.3}}, {2, {0.7, 0.3}}, {3, {0.0, 0.0}}};
}

std::vector<Action> hiv_treatment_actions() {
    auto all = hiv_actions();
    all.pop_back();
    return all;
}

std::array<double, 6> hiv_derivative(const std::array<double, 6>& y, double e1, double e2) {
    using namespace hiv;
    const double t1 = y[0], t2 = y[1], i1 = y[2], i2 = y[3], v = y[4], e = y[5];
    const double inf1 = (1.0 - e1) * kK1 * v * t1;
    const double inf2 = (1.0 - kF * e1) * kK2 * v * t2;
    const double infected = i1 + i2;
    return {
        kLambda1 - kD1 * t1 - inf1,
        kLambda2 - kD2 * t2 - inf2,
        inf1 - kDelta * i1 - kM1 * e * i1,
        inf2 - kDelta * i2 - kM2 * e * i2,
        (1.0 - e2) * kNT * kDelta * infected - kC * v -
            ((1.0 - e1) * kRho1 * kK1 * t1 + (1.0 - kF * e1) * kRho2 * kK2 * t2) * v,
        kLambdaE + kBE * infected / (infected + kKb) * e - kDE * infected / (infected + kKd) * e -
            kDeltaE * e,
    };
}

double HivEnv::reward(const State& s) const {
    if (s.size() != 6) throw Error("HivEnv::reward: state must have 6 components");
    const double v = s[4] * cfg_.state_scale;
    const double e = s[5] * cfg_.state_scale;
    return (hiv::kRewardEffector * e - hiv::kRewardViral * v) / cfg_.reward_scale;
}

State HivEnv::advance(const State& s, const Action& a) const {
    namespace odeint = boost::numeric::odeint;
    using Vec = std::array<double, 6>;
    if (s.size() != 6) throw Error("HivEnv::step: state must have 6 components");
    if (a.vector.size() != 2) throw Error("HivEnv::step: action must be a 2-vector");
    for (std::size_t i = 0; i < 6; ++i)
        if (!(s[i] >= 0.0))
            throw Error("HivEnv::step: state component " + std::to_string(i) + " is negative");

    const double e1 = a.vector[0];
    const double e2 = a.vector[1];
    Vec y;
    for (std::size_t i = 0; i < 6; ++i) y[i] = s[i] * cfg_.state_scale;

    auto rhs = [e1, e2](const Vec& x, Vec& dxdt, double) { dxdt = hiv_derivative(x, e1, e2); };
    auto stepper = odeint::make_controlled<odeint::runge_kutta_dopri5<Vec>>(cfg_.abs_tol, cfg_.rel_tol);
    odeint::integrate_adaptive(stepper, rhs, y, 0.0, cfg_.step_days, cfg_.step_days / 20.0);

    State out;
    out.values.resize(6);
    for (std::size_t i = 0; i < 6; ++i) {
        if (!std::isfinite(y[i]))
            throw Error("HivEnv::step: integration produced a non-finite value in component " +
                        std::to_string(i));
        // Round-off can leave a compartment a hair below zero near extinction.
        out[i] = std::max(y[i], 0.0) / cfg_.state_scale;
    }
    return out;
}

State HivEnv::step(const State& s, const Action& a, Rng&) const { return advance(s, a); }

std::pair<State, double> hiv_step(const State& state, const Action& action, const HivConfig& cfg) {
    HivEnv env(cfg);
    State next = env.advance(state, action);
    const double r = env.reward(next);
    return {std::move(next), r};
}

std::vector<State> hiv_initial_states(int n, double rate, std::uint64_t seed, const HivConfig& cfg) {
    if (!(rate >= 0.0 && rate < 1.0)) throw Error("hiv_initial_states: rate must be in [0, 1)");
    Rng rng(seed);
    std::uniform_real_distribution<double> u(-rate, rate);
    std::vector<State> out;
    out.reserve(n);
    for (int k = 0; k < n; ++k) {
        State s;
        s.values.resize(6);
        for (std::size_t i = 0; i < 6; ++i) {
            const double factor = rate > 0.0 ? 1.0 + u(rng) : 1.0;
            s[i] = kHivDefaultState[i] * factor / cfg.state_scale;
        }
        out.push_back(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------- kidney

namespace {

double dose_response(const KidneyConfig& cfg, double dose) { return dose / (dose + cfg.dose_ec50); }

double healthy_bump(const KidneyConfig& cfg, double hb) {
    const double lo = cfg.hb_healthy_range[0];
    const double hi = cfg.hb_healthy_range[1];
    const double dist = hb < lo ? lo - hb : (hb > hi ? hb - hi : 0.0);
    return std::exp(-dist * dist / (2.0 * cfg.reward_width * cfg.reward_width));
}

}  // namespace

double KidneyEnv::reward(const State& s) const {
    if (s.size() != 5) throw Error("KidneyEnv::reward: state must have 5 components");
    const double hb = s[0] * cfg_.state_scale;
    const double hb_prev = s[1] * cfg_.state_scale;
    const double raw = cfg_.reward_scale * (cfg_.reward_current_weight * healthy_bump(cfg_, hb) +
                                            (1.0 - cfg_.reward_current_weight) *
                                                healthy_bump(cfg_, hb_prev));
    return raw / cfg_.reward_scale;
}

State KidneyEnv::step(const State& s, const Action& a, Rng& rng) const {
    if (s.size() != 5) throw Error("KidneyEnv::step: state must have 5 components");
    if (a.vector.size() != 1) throw Error("KidneyEnv::step: action must be a scalar dose");
    if (!(a.vector[0] >= 0.0)) throw Error("KidneyEnv::step: dose must be >= 0");
    const double dose = std::min(a.vector[0], cfg_.max_dose);
    const double hb = s[0] * cfg_.state_scale;
    const double prev_dose = s[3] * cfg_.state_scale / cfg_.dose_unit;

    const double effect = cfg_.dose_emax * ((1.0 - cfg_.lag_weight) * dose_response(cfg_, dose) +
                                            cfg_.lag_weight * dose_response(cfg_, prev_dose));
    double next_hb = hb + cfg_.relaxation * (cfg_.hb_baseline - hb) + effect;
    if (cfg_.noise_sd > 0.0) next_hb += std::normal_distribution<double>(0.0, cfg_.noise_sd)(rng);
    next_hb = std::clamp(next_hb, cfg_.hb_min, cfg_.hb_max);

    State out;
    out.values = {next_hb / cfg_.state_scale, s[0], s[1], dose * cfg_.dose_unit / cfg_.state_scale,
                  s[3]};
    return out;
}

std::pair<State, double> kidney_step(const State& state, double dose, Rng& rng,
                                     const KidneyConfig& cfg) {
    KidneyEnv env(cfg);
    State next = env.step(state, Action{0, {dose}}, rng);
    const double r = env.reward(next);
    return {std::move(next), r};
}

std::vector<State> kidney_initial_states(int n, std::uint64_t seed, const KidneyConfig& cfg) {
    Rng rng(seed);
    std::uniform_real_distribution<double> u(8.0, 13.0);
    std::vector<State> out;
    out.reserve(n);
    for (int k = 0; k < n; ++k) {
        const double hb = u(rng) / cfg.state_scale;
        out.push_back(State{hb, hb, hb, 0.0, 0.0});
    }
    return out;
}

// ---------------------------------------------------------------- battery

const char* to_string(CurveFamily f) {
    switch (f) {
        case CurveFamily::negexp: return "negexp";
        case CurveFamily::linear: return "linear";
        case CurveFamily::quadratic: return "quadratic";
    }
    return "?";
}

CurveFamily curve_family_from_string(const std::string& s) {
    if (s == "negexp") return CurveFamily::negexp;
    if (s == "linear") return CurveFamily::linear;
    if (s == "quadratic") return CurveFamily::quadratic;
    throw Error("unknown curve family '" + s + "'");
}

std::size_t parameter_count(CurveFamily f) { return f == CurveFamily::quadratic ? 3 : 2; }

double curve_eval(CurveFamily f, std::span<const double> p, double x) {
    if (p.size() != parameter_count(f)) throw Error("curve_eval: wrong parameter count");
    switch (f) {
        case CurveFamily::negexp: return 1.0 / (1.0 + std::exp(-p[0] * x + p[1]));
        case CurveFamily::linear: return p[0] * x + p[1];
        case CurveFamily::quadratic: return (p[0] * x + p[1]) * x + p[2];
    }
    return 0.0;
}

std::optional<int> end_of_life_cycle(const CapacityCurve& curve, double fraction) {
    if (curve.capacities.empty()) return std::nullopt;
    const double limit = fraction * curve.capacities.front();
    for (std::size_t i = 0; i < curve.capacities.size(); ++i)
        if (curve.capacities[i] < limit) return static_cast<int>(i) + 1;
    return std::nullopt;
}

CapacityCurve battery_synthesize_family(CurveFamily family, std::span<const double> params,
                                        int lifetime, double noise_sd, int n_cycles,
                                        std::uint64_t seed) {
    if (lifetime > n_cycles) throw Error("battery_synthesize: lifetime exceeds n_cycles");
    if (noise_sd < 0.0) throw Error("battery_synthesize: noise_sd must be >= 0");
    Rng rng(seed);
    std::normal_distribution<double> noise(0.0, noise_sd > 0.0 ? noise_sd : 1.0);
    CapacityCurve c;
    c.lifetime = lifetime;
    c.capacities.resize(static_cast<std::size_t>(n_cycles));
    for (int t = 1; t <= n_cycles; ++t) {
        double q = curve_eval(family, params, static_cast<double>(lifetime - t));
        if (noise_sd > 0.0) q += noise(rng);
        c.capacities[static_cast<std::size_t>(t - 1)] = q;
    }
    return c;
}

CapacityCurve battery_synthesize(double a, double b, int lifetime, double noise_sd, int n_cycles,
                                 std::uint64_t seed) {
    if (!(a > 0.0)) throw Error("battery_synthesize: a must be > 0");
    const double p[2] = {a, b};
    return battery_synthesize_family(CurveFamily::negexp, p, lifetime, noise_sd, n_cycles, seed);
}

void write_curves_csv(std::ostream& out, std::span<const CapacityCurve> curves) {
    bool with_lifetime = true;
    for (const auto& c : curves) with_lifetime = with_lifetime && c.lifetime.has_value();
    out << "curve_id,cycle,capacity" << (with_lifetime ? ",lifetime" : "") << '\n';
    for (std::size_t k = 0; k < curves.size(); ++k) {
        const auto& c = curves[k];
        const std::string id = c.id.empty() ? std::to_string(k) : c.id;
        for (std::size_t i = 0; i < c.capacities.size(); ++i) {
            out << id << ',' << (i + 1) << ',' << format_double(c.capacities[i]);
            if (with_lifetime) out << ',' << *c.lifetime;
            out << '\n';
        }
    }
}

void write_curves_csv(const std::filesystem::path& path, std::span<const CapacityCurve> curves) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    write_curves_csv(out, curves);
}

std::vector<CapacityCurve> read_curves_csv(std::istream& in) {
    const CsvTable t = read_csv(in);
    const int id_col = t.column("curve_id");
    const int cycle_col = t.column("cycle");
    const int cap_col = t.column("capacity");
    const int life_col = t.column("lifetime");
    if (cycle_col < 0 || cap_col < 0) throw Error("read_curves_csv: need cycle and capacity columns");

    std::vector<CapacityCurve> curves;
    std::map<std::string, std::size_t> index;
    for (const auto& row : t.rows) {
        const std::string id = id_col >= 0 ? row[id_col] : std::string("0");
        auto [it, inserted] = index.try_emplace(id, curves.size());
        if (inserted) {
            curves.emplace_back();
            curves.back().id = id;
        }
        CapacityCurve& c = curves[it->second];
        const int cycle = std::stoi(row[cycle_col]);
        if (cycle != static_cast<int>(c.capacities.size()) + 1)
            throw Error("read_curves_csv: cycles of curve " + id + " must be consecutive from 1");
        c.capacities.push_back(std::stod(row[cap_col]));
        if (life_col >= 0 && !row[life_col].empty()) c.lifetime = std::stoi(row[life_col]);
    }
    return curves;
}

std::vector<CapacityCurve> read_curves_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot read " + path.string());
    return read_curves_csv(in);
}

}  // namespace shortlong
