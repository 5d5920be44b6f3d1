#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "shortlong/harness.hpp"

namespace fs = std::filesystem;
using namespace shortlong;

namespace {

ExperimentConfig load_config(const std::string& path, const std::string& env) {
    ExperimentConfig c;
    if (!path.empty()) {
        Json j = read_json_file(path);
        if (!env.empty()) j["env_id"] = env;
        c = experiment_config_from_json(j);
    } else {
        c = default_config(env.empty() ? "hiv" : env);
    }
    return c;
}

struct DataFiles {
    std::string dir;
    std::string train;
    std::string test;
    std::string policies;

    void add(CLI::App* app) {
        app->add_option("--data", dir, "Directory written by generate-data");
        app->add_option("--train", train, "Training JSONL (overrides --data)");
        app->add_option("--test", test, "Test JSONL with full-horizon truth (overrides --data)");
        app->add_option("--policies", policies, "Policy set JSON (overrides --data)");
    }

    ExperimentData load(bool need_policies) const {
        auto pick = [&](const std::string& explicit_path, const char* name) {
            if (!explicit_path.empty()) return fs::path(explicit_path);
            if (dir.empty()) throw Error(std::string("missing --") + name + " (or --data)");
            return fs::path(dir) / (std::string(name) + (std::string(name) == "policies" ? ".json" : ".jsonl"));
        };
        ExperimentData d;
        d.train = read_jsonl(pick(train, "train"));
        d.test = read_jsonl(pick(test, "test"));
        if (need_policies) d.policies = policy_sets_from_json(read_json_file(pick(policies, "policies")));
        return d;
    }
};

void write_method_csv(const std::string& path, const std::vector<RunRow>& rows, bool with_method) {
    if (!with_method) {
        if (path.empty()) {
            std::cout << "policy_id,ell,prediction,truth\n";
            for (const auto& r : rows)
                std::cout << r.policy_id << ',' << r.ell << ',' << format_double(r.prediction) << ','
                          << format_double(r.truth) << '\n';
        } else {
            write_predictions_csv(path, rows);
        }
        return;
    }
    if (path.empty()) {
        std::cout << "method,env,ell,seed,policy_id,prediction,truth\n";
        for (const auto& r : rows)
            std::cout << r.method << ',' << r.env << ',' << r.ell << ',' << r.seed << ',' << r.policy_id << ','
                      << format_double(r.prediction) << ',' << format_double(r.truth) << '\n';
    } else {
        write_runs_csv(path, rows);
    }
}

std::vector<RunRow> rows_for(const std::string& method, const ExperimentConfig& c, const ExperimentData& d,
                             int ell, std::uint64_t seed, const std::vector<double>& preds) {
    const auto groups = group_by_policy(d.test);
    const auto truths = policy_values(d.test);
    std::vector<RunRow> rows;
    for (std::size_t p = 0; p < groups.size(); ++p)
        rows.push_back({method, c.env_id, ell, seed, groups[p].first, preds[p], truths[p]});
    return rows;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Short-horizon to long-horizon policy value estimation"};
    app.require_subcommand(1);

    // generate-data
    auto* gen = app.add_subcommand("generate-data", "Generate policy sets and rollout datasets");
    std::string gen_env, gen_config, gen_out = "data", gen_battery;
    std::uint64_t gen_seed = 0;
    gen->add_option("--env", gen_env, "hiv, kidney or battery");
    gen->add_option("--config", gen_config, "Experiment (or battery) config JSON");
    gen->add_option("--seed", gen_seed, "Root seed");
    gen->add_option("--out", gen_out, "Output directory");

    // run-slev
    auto* slev = app.add_subcommand("run-slev", "Fit SLEV and predict test-policy values");
    std::string slev_env, slev_grid, slev_config, slev_weighted = "off", slev_out;
    int slev_ell = 0, slev_k = 0;
    std::uint64_t slev_seed = 0;
    DataFiles slev_data;
    slev->add_option("--env", slev_env, "hiv or kidney");
    slev->add_option("--ell", slev_ell, "Observed prefix length in steps")->required();
    slev->add_option("--k", slev_k, "Cross-validation folds");
    slev->add_option("--grid", slev_grid, "JSON with a hyperparameter list (or an object with slev_grid)");
    slev->add_option("--config", slev_config, "Experiment config JSON");
    slev->add_option("--weighted", slev_weighted, "Density-ratio weighting")->check(CLI::IsMember({"on", "off"}));
    slev->add_option("--seed", slev_seed, "Root seed");
    slev->add_option("--out", slev_out, "Output CSV (stdout when omitted)");
    slev_data.add(slev);

    // run-sled
    auto* sled = app.add_subcommand("run-sled", "Fit SLED and predict values or battery lifetimes");
    std::string sled_env, sled_config, sled_curves, sled_train_curves, sled_out;
    std::vector<std::string> sled_families;
    int sled_ell = 0;
    std::uint64_t sled_seed = 0;
    DataFiles sled_data;
    sled->add_option("--env", sled_env, "hiv, kidney or battery");
    sled->add_option("--ell", sled_ell, "Prefix length (steps, or cycles for battery)")->required();
    sled->add_option("--adapter-family", sled_families, "identity, affine, shift (repeatable)");
    sled->add_option("--curves", sled_curves, "Battery curves to predict (CSV)");
    sled->add_option("--train-curves", sled_train_curves, "Battery curves with lifetimes for the base fit");
    sled->add_option("--config", sled_config, "Experiment config JSON");
    sled->add_option("--seed", sled_seed, "Root seed");
    sled->add_option("--out", sled_out, "Output CSV (stdout when omitted)");
    sled_data.add(sled);

    // run-baselines
    auto* base = app.add_subcommand("run-baselines", "Run baseline estimators");
    std::string base_env, base_config, base_out;
    std::vector<std::string> base_methods = {"fqe", "online", "avg", "last", "mean"};
    int base_ell = 0;
    std::uint64_t base_seed = 0;
    DataFiles base_data;
    base->add_option("--methods", base_methods, "Comma-separated subset of fqe,online,avg,last,mean")
        ->delimiter(',');
    base->add_option("--env", base_env, "hiv or kidney");
    base->add_option("--ell", base_ell, "Observed prefix length in steps")->required();
    base->add_option("--config", base_config, "Experiment config JSON");
    base->add_option("--seed", base_seed, "Root seed");
    base->add_option("--out", base_out, "Output CSV (stdout when omitted)");
    base_data.add(base);

    // safety-check
    auto* safety = app.add_subcommand("safety-check", "Unsafe-policy detection accuracy of a prediction CSV");
    std::string safety_preds, safety_train;
    double safety_threshold = std::numeric_limits<double>::quiet_NaN();
    double safety_percentile = 10.0;
    safety->add_option("--predictions", safety_preds, "CSV with prediction and truth columns")->required();
    auto* thr_opt = safety->add_option("--threshold", safety_threshold, "Absolute threshold");
    safety->add_option("--percentile", safety_percentile, "Percentile of training policy values")
        ->excludes(thr_opt);
    safety->add_option("--train", safety_train, "Training JSONL for percentile mode");

    // bound-check
    auto* bound = app.add_subcommand("bound-check", "Evaluate the risk bound, optionally verify coverage");
    BoundInputs bi;
    bool bound_verify = false;
    int bound_trials = 200;
    std::uint64_t bound_seed = 0;
    BoundExperiment be;
    bound->add_option("--M", bi.m, "Density-ratio upper bound");
    bound->add_option("--V", bi.v_max, "Value bound");
    bound->add_option("--n", bi.n, "Sample size");
    bound->add_option("--F", bi.f, "Hypothesis class size");
    bound->add_option("--delta", bi.delta, "Confidence parameter in (0, 0.25]");
    bound->add_option("--w-err", bi.w_err, "L1 error of the estimated ratio");
    bound->add_flag("--verify", bound_verify, "Run the Monte-Carlo coverage experiment");
    bound->add_option("--trials", bound_trials, "Coverage trials");
    bound->add_option("--seed", bound_seed, "Root seed");
    bound->add_option("--test-mean", be.test_mean, "Mean of the test covariate distribution");
    bound->add_option("--test-sd", be.test_sd, "Std of the test covariate distribution");

    // report
    auto* rep = app.add_subcommand("report", "Run a full experiment and write all result files");
    std::string rep_config, rep_env, rep_out, rep_battery;
    std::vector<std::uint64_t> rep_seeds;
    bool rep_no_policy = false;
    rep->add_option("--config", rep_config, "Experiment config JSON");
    rep->add_option("--env", rep_env, "hiv, kidney or battery");
    rep->add_option("--out", rep_out, "Output directory (default: config output_dir)");
    rep->add_option("--battery-config", rep_battery, "Battery experiment config JSON");
    rep->add_option("--seeds", rep_seeds, "Seeds (override config)")->delimiter(',');
    rep->add_flag("--battery-only", rep_no_policy, "Skip the policy-value experiment");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            fs::create_directories(gen_out);
            if (gen_env == "battery") {
                BatteryConfig bc = gen_config.empty() ? BatteryConfig{} : battery_config_from_json(read_json_file(gen_config));
                const auto split = battery_generate(bc, gen_seed);
                write_curves_csv(fs::path(gen_out) / "curves_train.csv", split.train);
                write_curves_csv(fs::path(gen_out) / "curves_test.csv", split.test);
                std::printf("wrote %zu train and %zu test curves to %s\n", split.train.size(), split.test.size(),
                            gen_out.c_str());
                return 0;
            }
            const ExperimentConfig c = load_config(gen_config, gen_env);
            const ExperimentData d = generate_experiment_data(c, gen_seed);
            write_jsonl(fs::path(gen_out) / "train.jsonl", d.train);
            write_jsonl(fs::path(gen_out) / "test.jsonl", d.test);
            write_json_file(fs::path(gen_out) / "policies.json", to_json(d.policies));
            std::printf("wrote %zu train and %zu test records to %s\n", d.train.records.size(),
                        d.test.records.size(), gen_out.c_str());
        } else if (*slev) {
            ExperimentConfig c = load_config(slev_config, slev_env);
            if (slev_k > 0) c.k = slev_k;
            c.weighted = slev_weighted == "on";
            if (!slev_grid.empty()) {
                const Json g = read_json_file(slev_grid);
                const Json& list = g.is_array() ? g : g.at("slev_grid");
                c.slev_grid.clear();
                for (const auto& h : list) c.slev_grid.push_back(mlp_hyper_from_json(h));
            }
            const ExperimentData d = slev_data.load(false);
            c.env_id = d.test.env_id;
            const auto preds = predict_method("slev", c, d, slev_ell, slev_seed);
            write_method_csv(slev_out, rows_for("slev", c, d, slev_ell, slev_seed, preds), false);
        } else if (*sled) {
            std::vector<AdapterFamily> fams;
            for (const auto& f : sled_families) fams.push_back(adapter_family_from_string(f));
            if (sled_env == "battery" || !sled_curves.empty()) {
                if (sled_curves.empty() || sled_train_curves.empty())
                    throw Error("battery mode needs --curves and --train-curves");
                const auto train = read_curves_csv(sled_train_curves);
                const auto test = read_curves_csv(sled_curves);
                const CurveModel model = battery_fit_base(train);
                std::vector<RunRow> rows;
                for (const auto& cv : test) {
                    const auto fit = battery_fit_lifetime(model, curve_prefix(cv, sled_ell));
                    const double truth = cv.lifetime ? static_cast<double>(*cv.lifetime)
                                                     : std::numeric_limits<double>::quiet_NaN();
                    rows.push_back({"sled", "battery", sled_ell, sled_seed, cv.id, fit.lfc, truth});
                }
                write_method_csv(sled_out, rows, false);
                return 0;
            }
            ExperimentConfig c = load_config(sled_config, sled_env);
            if (!fams.empty()) c.adapters = fams;
            const ExperimentData d = sled_data.load(false);
            c.env_id = d.test.env_id;
            const auto preds = predict_method("sled", c, d, sled_ell, sled_seed);
            write_method_csv(sled_out, rows_for("sled", c, d, sled_ell, sled_seed, preds), false);
        } else if (*base) {
            ExperimentConfig c = load_config(base_config, base_env);
            bool need_policies = false;
            for (const auto& m : base_methods) need_policies = need_policies || m == "fqe" || m == "online";
            const ExperimentData d = base_data.load(need_policies);
            c.env_id = d.test.env_id;
            std::vector<RunRow> rows;
            for (const auto& m : base_methods) {
                const auto preds = predict_method(m, c, d, base_ell, base_seed);
                const auto part = rows_for(m, c, d, base_ell, base_seed, preds);
                rows.insert(rows.end(), part.begin(), part.end());
            }
            write_method_csv(base_out, rows, true);
        } else if (*safety) {
            const CsvTable t = read_csv(fs::path(safety_preds));
            const int cp = t.column("prediction"), ct = t.column("truth");
            if (cp < 0 || ct < 0) throw Error("predictions CSV needs prediction and truth columns");
            std::vector<double> preds, truths;
            for (const auto& r : t.rows) {
                preds.push_back(std::stod(r[cp]));
                truths.push_back(std::stod(r[ct]));
            }
            double thr = safety_threshold;
            if (std::isnan(thr)) {
                if (safety_train.empty()) throw Error("percentile mode needs --train");
                const auto values = policy_values(read_jsonl(fs::path(safety_train)));
                thr = percentile(values, safety_percentile);
            }
            const double acc = safety_accuracy(safety_detect(preds, thr), safety_detect(truths, thr));
            std::printf("threshold,accuracy\n%s,%s\n", format_double(thr).c_str(), format_double(acc).c_str());
        } else if (*bound) {
            std::printf("bound=%s\n", format_double(risk_bound(bi)).c_str());
            if (bound_verify) {
                be.v_max = bi.v_max;
                be.n = bi.n;
                be.hypotheses = bi.f;
                be.delta = bi.delta;
                const auto r = verify_bound_empirically(be, bound_trials, bound_seed);
                std::printf("M=%s trial_bound=%s coverage=%s (%d/%d) median_gap=%s required>=%s\n",
                            format_double(r.m).c_str(), format_double(r.bound).c_str(),
                            format_double(r.coverage).c_str(), r.covered, r.trials,
                            format_double(r.median_gap).c_str(), format_double(1.0 - 4.0 * bi.delta).c_str());
                return r.coverage >= 1.0 - 4.0 * bi.delta ? 0 : 2;
            }
        } else if (*rep) {
            const bool battery_only = rep_no_policy || rep_env == "battery";
            ExperimentConfig c = load_config(rep_config, battery_only ? "" : rep_env);
            if (!rep_seeds.empty()) c.seeds = rep_seeds;
            const fs::path out = rep_out.empty() ? fs::path(c.output_dir) : fs::path(rep_out);
            ExperimentResult res;
            if (!battery_only) res = run_experiment(c);
            std::vector<BatteryRow> battery;
            if (battery_only || !rep_battery.empty()) {
                const BatteryConfig bc =
                    rep_battery.empty() ? BatteryConfig{} : battery_config_from_json(read_json_file(rep_battery));
                for (std::uint64_t s : c.seeds) {
                    const auto rows = run_battery(bc, battery_generate(bc, s), s);
                    battery.insert(battery.end(), rows.begin(), rows.end());
                }
            }
            report(out, c, res, battery);
            std::printf("wrote results to %s\n", out.string().c_str());
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
