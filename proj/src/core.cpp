#include "shortlong/core.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <string>
#include <unordered_set>

namespace shortlong {

int worker_count() {
    if (const char* env = std::getenv("SHORTLONG_WORKERS")) {
        const int n = std::atoi(env);
        if (n > 0) return n;
    }
#if defined(_OPENMP)
    return omp_get_max_threads();
#else
    return 1;
#endif
}

std::size_t PolicyRecord::length() const {
    if (trajectories.empty()) return 0;
    std::size_t len = trajectories.front().length();
    for (const auto& t : trajectories) len = std::min(len, t.length());
    return len;
}

std::vector<std::string> PolicyDataset::policy_ids() const {
    std::vector<std::string> ids;
    std::unordered_set<std::string> seen;
    for (const auto& r : records)
        if (seen.insert(r.policy_id).second) ids.push_back(r.policy_id);
    return ids;
}

std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t root, std::initializer_list<std::uint64_t> path) {
    std::uint64_t s = mix64(root);
    for (std::uint64_t p : path) s = mix64(s ^ mix64(p + 0x632be59bd9b4e019ULL));
    return s;
}

bool all_finite(std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

Trajectory rollout(const Environment& env, const Policy& policy, const State& start,
                   int horizon, std::uint64_t seed) {
    if (horizon < 1) throw Error("rollout: horizon must be >= 1");
    if (start.size() != env.state_dim())
        throw Error("rollout: start state has dimension " + std::to_string(start.size()) +
                    ", environment expects " + std::to_string(env.state_dim()));
    if (!all_finite(start.values)) throw Error("rollout: start state is not finite");

    Rng rng(seed);
    Trajectory traj;
    traj.states.reserve(horizon + 1);
    traj.actions.reserve(horizon);
    traj.rewards.reserve(horizon + 1);
    traj.states.push_back(start);
    traj.rewards.push_back(env.reward(start));
    for (int t = 0; t < horizon; ++t) {
        Action a = policy.act(traj.states.back(), rng);
        State next = env.step(traj.states.back(), a, rng);
        if (!all_finite(next.values))
            throw Error("rollout: non-finite state at step " + std::to_string(t) + " (env " +
                        env.id() + ", policy " + policy.id() + ")");
        traj.rewards.push_back(env.reward(next));
        traj.actions.push_back(std::move(a));
        traj.states.push_back(std::move(next));
    }
    return traj;
}

double return_of(const Trajectory& traj) {
    if (traj.rewards.empty()) throw Error("return_of: empty trajectory");
    double g = 0.0;
    for (double r : traj.rewards) g += r;
    return g;
}

std::vector<PolicyRecord> collect_records(const Environment& env, const Policy& policy,
                                          std::span<const State> init_states, int n_rollouts,
                                          int horizon, std::uint64_t seed, Exec exec) {
    if (n_rollouts < 1) throw Error("collect_records: n_rollouts must be >= 1");
    const std::size_t n_states = init_states.size();
    const std::size_t n_jobs = n_states * static_cast<std::size_t>(n_rollouts);
    std::vector<Trajectory> trajs(n_jobs);
    for_each_index(
        n_jobs,
        [&](std::size_t job) {
            const std::size_t i = job / n_rollouts;
            const std::size_t r = job % n_rollouts;
            trajs[job] = rollout(env, policy, init_states[i], horizon, derive_seed(seed, {i, r}));
        },
        exec);

    std::vector<PolicyRecord> records(n_states);
    for (std::size_t i = 0; i < n_states; ++i) {
        PolicyRecord& rec = records[i];
        rec.policy_id = policy.id();
        double sum = 0.0;
        for (int r = 0; r < n_rollouts; ++r) {
            Trajectory& t = trajs[i * n_rollouts + r];
            sum += return_of(t);
            rec.trajectories.push_back(std::move(t));
        }
        rec.true_value = sum / n_rollouts;
    }
    return records;
}

double policy_value_mc(const Environment& env, const Policy& policy,
                       std::span<const State> init_states, int n_rollouts, int horizon,
                       std::uint64_t seed, Exec exec) {
    if (init_states.empty()) throw Error("policy_value_mc: no initial states");
    const auto records = collect_records(env, policy, init_states, n_rollouts, horizon, seed, exec);
    double sum = 0.0;
    for (const auto& r : records) sum += *r.true_value;
    return sum / static_cast<double>(records.size());
}

std::size_t feature_length(std::size_t state_dim, int ell, bool include_rewards,
                           std::size_t n_rollouts) {
    const std::size_t steps = static_cast<std::size_t>(ell) + 1;
    return n_rollouts * (steps * state_dim + (include_rewards ? steps : 0));
}

FeatureVector featurize_short(const PolicyRecord& record, int ell, bool include_rewards) {
    if (ell < 0) throw Error("featurize_short: ell must be >= 0");
    if (record.trajectories.empty()) throw Error("featurize_short: record has no trajectories");
    const std::size_t need = static_cast<std::size_t>(ell);
    FeatureVector fv;
    for (const auto& traj : record.trajectories) {
        if (traj.length() < need || traj.rewards.size() < need + 1)
            throw Error("featurize_short: ell=" + std::to_string(ell) +
                        " exceeds available trajectory length " + std::to_string(traj.length()) +
                        " (policy " + record.policy_id + ")");
        for (std::size_t t = 0; t <= need; ++t)
            fv.values.insert(fv.values.end(), traj.states[t].values.begin(),
                             traj.states[t].values.end());
        if (include_rewards)
            fv.values.insert(fv.values.end(), traj.rewards.begin(),
                             traj.rewards.begin() + static_cast<std::ptrdiff_t>(need + 1));
    }
    return fv;
}

PolicyRecord truncate(const PolicyRecord& record, int ell) {
    if (ell < 0) throw Error("truncate: ell must be >= 0");
    const std::size_t n = static_cast<std::size_t>(ell);
    PolicyRecord out;
    out.policy_id = record.policy_id;
    for (const auto& t : record.trajectories) {
        if (t.length() < n)
            throw Error("truncate: record " + record.policy_id + " has only " +
                        std::to_string(t.length()) + " steps, need " + std::to_string(ell));
        Trajectory c;
        c.states.assign(t.states.begin(), t.states.begin() + static_cast<std::ptrdiff_t>(n + 1));
        c.actions.assign(t.actions.begin(), t.actions.begin() + static_cast<std::ptrdiff_t>(n));
        c.rewards.assign(t.rewards.begin(), t.rewards.begin() + static_cast<std::ptrdiff_t>(n + 1));
        out.trajectories.push_back(std::move(c));
    }
    return out;
}

PolicyDataset truncate(const PolicyDataset& data, int ell) {
    PolicyDataset out;
    out.horizon = ell;
    out.env_id = data.env_id;
    out.records.reserve(data.records.size());
    for (const auto& r : data.records) out.records.push_back(truncate(r, ell));
    return out;
}

}  // namespace shortlong
