#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "shortlong/regress.hpp"

using namespace shortlong;

namespace {

RegressionData linear_data(int n, std::uint64_t seed, double noise = 0.0) {
    Rng rng(seed);
    std::normal_distribution<double> z(0.0, 1.0);
    RegressionData d;
    d.x.resize(n, 3);
    d.y.resize(n, 2);
    d.weights = Eigen::VectorXd::Ones(n);
    Eigen::MatrixXd w(2, 3);
    w << 1.0, -2.0, 0.5, 0.3, 0.0, 1.5;
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < 3; ++j) d.x(i, j) = z(rng);
        d.y.row(i) = (w * d.x.row(i).transpose()).transpose();
        for (int j = 0; j < 2; ++j) d.y(i, j) += noise * z(rng);
    }
    return d;
}

MlpHyper plain(std::vector<int> sizes, int updates, double lr) {
    MlpHyper h;
    h.layer_sizes = std::move(sizes);
    h.max_updates = updates;
    h.learning_rate = lr;
    h.batch_size = 0;
    h.validation_fraction = 0.0;
    h.standardize = false;
    return h;
}

}  // namespace

TEST_CASE("mlp_fit drives the loss down on realizable linear data") {
    auto d = linear_data(200, 1);
    MlpHyper h = plain({3, 2}, 3000, 1e-2);
    FitReport rep;
    auto model = mlp_fit(d, h, 0, &rep);
    Mlp init({3, 2});
    Rng rng(0);
    init.init_random(rng);
    const double initial = init.loss_and_gradient(d.x.transpose(), d.y.transpose(), d.weights, 0.0, nullptr);
    CHECK(weighted_loss(model, d) < 1e-4 * initial);
    CHECK(std::isfinite(rep.validation_loss));

    MlpHyper deep = h;
    deep.layer_sizes = {3, 32, 2};
    deep.max_updates = 4000;
    deep.learning_rate = 3e-3;
    CHECK(weighted_loss(mlp_fit(d, deep, 0), d) < 1e-3 * initial);
}

TEST_CASE("duplicating a row equals doubling its weight") {
    auto d = linear_data(40, 2, 0.3);
    RegressionData dup = d;
    dup.x.conservativeResize(41, Eigen::NoChange);
    dup.y.conservativeResize(41, Eigen::NoChange);
    dup.weights.conservativeResize(41);
    dup.x.row(40) = d.x.row(7);
    dup.y.row(40) = d.y.row(7);
    dup.weights(40) = 1.0;
    RegressionData doubled = d;
    doubled.weights(7) = 2.0;

    MlpHyper h = plain({3, 8, 2}, 4000, 5e-3);
    auto a = mlp_fit(dup, h, 3);
    auto b = mlp_fit(doubled, h, 3);
    auto probe = linear_data(100, 99);
    CHECK(std::abs(weighted_loss(a, probe) - weighted_loss(b, probe)) <= 1e-3);
}

TEST_CASE("zero weights leave parameters to weight decay alone") {
    auto d = linear_data(50, 4);
    d.weights.setZero();
    MlpHyper h = plain({3, 4, 2}, 200, 1e-2);
    Mlp init({3, 4, 2});
    Rng rng(5);
    init.init_random(rng);
    CHECK(mlp_fit(d, h, 5).net().flat_parameters() == init.flat_parameters());

    h.weight_decay = 1e-1;
    CHECK(mlp_fit(d, h, 5).net().flat_parameters().norm() < init.flat_parameters().norm());
}

TEST_CASE("forward pass matches hand computation") {
    Mlp zero({2, 3, 1});
    zero.biases.back()(0) = 0.75;
    Eigen::MatrixXd x(2, 2);
    x << 1.0, -4.0, 2.0, 3.0;
    auto out = zero.forward(x);
    CHECK(out(0, 0) == 0.75);
    CHECK(out(0, 1) == 0.75);

    Mlp net({2, 2, 1});
    net.weights[0] << 1.0, -1.0, 0.5, 2.0;
    net.biases[0] << 0.1, -3.0;
    net.weights[1] << 2.0, -0.5;
    net.biases[1] << 0.25;
    // x = (1, 2): hidden = relu(1 - 2 + 0.1, 0.5 + 4 - 3) = (0, 1.5); out = -0.75 + 0.25.
    // x = (-4, 3): hidden = relu(-7 + 0.1, -2 + 6 - 3) = (0, 1); out = -0.5 + 0.25.
    out = net.forward(x);
    CHECK(std::abs(out(0, 0) - (-0.5)) <= 1e-12);
    CHECK(std::abs(out(0, 1) - (-0.25)) <= 1e-12);

    RegressionModel m(net, Standardizer::identity(2), Standardizer::identity(1));
    FeatureVector fv{{1.0, 2.0}};
    CHECK(mlp_predict(m, fv) == mlp_predict(m, fv));
    CHECK_THROWS_AS(m.predict(std::vector<double>{1.0}), Error);
}

TEST_CASE("analytic gradients match central differences") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(seed);
        Mlp net({4, 6, 5, 2});
        net.init_random(rng);
        std::normal_distribution<double> z(0.0, 1.0);
        // Nonzero biases keep every pre-activation off the ReLU kink.
        for (auto& b : net.biases)
            for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = 0.3 * z(rng);
        Eigen::MatrixXd x(4, 9), y(2, 9);
        Eigen::VectorXd w(9);
        for (int i = 0; i < 9; ++i) {
            for (int j = 0; j < 4; ++j) x(j, i) = z(rng);
            for (int j = 0; j < 2; ++j) y(j, i) = z(rng);
            w(i) = 0.5 + std::abs(z(rng));
        }
        Eigen::VectorXd grad;
        net.loss_and_gradient(x, y, w, 0.01, &grad);
        Eigen::VectorXd theta = net.flat_parameters();
        Eigen::VectorXd fd(theta.size());
        Mlp probe = net;
        const double h = 1e-6;
        for (Eigen::Index k = 0; k < theta.size(); ++k) {
            Eigen::VectorXd p = theta;
            p(k) += h;
            probe.set_flat_parameters(p);
            const double up = probe.loss_and_gradient(x, y, w, 0.01, nullptr);
            p(k) -= 2 * h;
            probe.set_flat_parameters(p);
            const double down = probe.loss_and_gradient(x, y, w, 0.01, nullptr);
            fd(k) = (up - down) / (2 * h);
        }
        CHECK((grad - fd).norm() <= 1e-4 * std::max(1.0, fd.norm()));
    }
}

TEST_CASE("weighted loss is linear in the weights") {
    auto d = linear_data(30, 6, 0.5);
    Rng rng(1);
    Mlp net({3, 5, 2});
    net.init_random(rng);
    RegressionModel m(net, Standardizer::identity(3), Standardizer::identity(2));
    Eigen::VectorXd w1 = Eigen::VectorXd::LinSpaced(30, 0.0, 2.0);
    Eigen::VectorXd w2 = Eigen::VectorXd::LinSpaced(30, 1.0, 0.1);
    RegressionData a = d, b = d, ab = d;
    a.weights = w1;
    b.weights = w2;
    ab.weights = w1 + w2;
    CHECK(weighted_loss(m, ab) == doctest::Approx(weighted_loss(m, a) + weighted_loss(m, b)).epsilon(1e-12));
}

TEST_CASE("mlp_fit is deterministic and rejects bad input") {
    auto d = linear_data(60, 7, 0.1);
    MlpHyper h;
    h.layer_sizes = {0, 8, 0};
    h.max_updates = 300;
    auto a = mlp_fit(d, h, 11);
    auto b = mlp_fit(d, h, 11);
    CHECK(a.net().flat_parameters() == b.net().flat_parameters());

    RegressionData bad = d;
    bad.weights(0) = -1.0;
    CHECK_THROWS_AS(mlp_fit(bad, h, 0), Error);
    bad = d;
    bad.y(0, 0) = std::nan("");
    CHECK_THROWS_AS(mlp_fit(bad, h, 0), Error);
    MlpHyper wrong = h;
    wrong.layer_sizes = {5, 8, 2};
    CHECK_THROWS_AS(mlp_fit(d, wrong, 0), Error);
}

TEST_CASE("regression models survive JSON") {
    auto d = linear_data(60, 8, 0.1);
    MlpHyper h;
    h.layer_sizes = {0, 8, 0};
    h.max_updates = 200;
    auto m = mlp_fit(d, h, 1);
    auto back = regression_model_from_json(Json::parse(to_json(m).dump()));
    CHECK(back.predict_rows(d.x) == m.predict_rows(d.x));
    CHECK(mlp_hyper_from_json(to_json(h)) == h);
}

TEST_CASE("kfold_split partitions the items") {
    auto singles = kfold_split(10, 10, 0);
    REQUIRE(singles.size() == 10);
    for (const auto& f : singles) CHECK(f.size() == 1);

    for (std::size_t n : {7u, 23u, 100u})
        for (std::size_t k : {2u, 5u, 7u}) {
            auto folds = kfold_split(n, k, 42);
            std::set<std::size_t> seen;
            std::size_t lo = n, hi = 0;
            for (const auto& f : folds) {
                lo = std::min(lo, f.size());
                hi = std::max(hi, f.size());
                for (auto i : f) CHECK(seen.insert(i).second);
            }
            CHECK(seen.size() == n);
            CHECK(*seen.rbegin() == n - 1);
            CHECK(hi - lo <= 1);
            auto train = kfold_train_indices(folds, 0, n);
            CHECK(train.size() + folds[0].size() == n);
        }
    CHECK(kfold_split(30, 4, 5) == kfold_split(30, 4, 5));
    CHECK_THROWS_AS(kfold_split(3, 4, 0), Error);
    CHECK_THROWS_AS(kfold_split(3, 1, 0), Error);
}

TEST_CASE("nlls_fit recovers exact curves") {
    std::vector<CurvePoint> line, parab;
    for (int t = 0; t < 20; ++t) {
        line.push_back({double(t), 2.0 * t + 1.0});
        parab.push_back({double(t), 0.05 * t * t - 0.7 * t + 3.0});
    }
    auto lin = nlls_fit(CurveFamily::linear, line, {0.0, 0.0}, Bounds::unbounded(2));
    CHECK(std::abs(lin.params[0] - 2.0) <= 1e-8);
    CHECK(std::abs(lin.params[1] - 1.0) <= 1e-8);
    auto quad = nlls_fit(CurveFamily::quadratic, parab, {0.0, 0.0, 0.0}, Bounds::unbounded(3));
    CHECK(std::abs(quad.params[0] - 0.05) <= 1e-6);
    CHECK(std::abs(quad.params[1] + 0.7) <= 1e-6);
    CHECK(std::abs(quad.params[2] - 3.0) <= 1e-6);

    auto curve = battery_synthesize(0.01, -1.386, 500, 0.0, 500, 0);
    std::vector<CurvePoint> pts;
    for (int c = 1; c <= 500; ++c) pts.push_back({500.0 - c, curve.at_cycle(c)});
    auto ne = nlls_fit(CurveFamily::negexp, pts, {0.02, 0.0}, Bounds::unbounded(2));
    CHECK(std::abs(ne.params[0] - 0.01) <= 1e-5);
    CHECK(std::abs(ne.params[1] + 1.386) <= 1e-5);
}

TEST_CASE("nlls_fit never ends worse than its starting point") {
    Rng rng(3);
    std::normal_distribution<double> z(0.0, 0.05);
    std::vector<CurvePoint> pts;
    for (int t = 0; t < 30; ++t) pts.push_back({double(t), 1.0 / (1.0 + std::exp(-0.2 * t + 2.0)) + z(rng)});
    for (std::vector<double> init : {std::vector<double>{0.2, 2.0}, {5.0, -5.0}, {-1.0, 0.0}}) {
        double start = 0.0;
        for (const auto& p : pts) {
            const double r = curve_eval(CurveFamily::negexp, init, p.t) - p.value;
            start += r * r;
        }
        auto fit = nlls_fit(CurveFamily::negexp, pts, init, Bounds::unbounded(2));
        CHECK(fit.residual <= start);
    }
    Bounds box{{0.0, -1.0}, {0.1, 1.0}};
    auto clipped = nlls_fit(CurveFamily::negexp, pts, {0.05, 0.0}, box);
    CHECK(clipped.params[0] <= 0.1);
    CHECK(clipped.params[1] >= -1.0);
}

TEST_CASE("logistic regression separates shifted classes") {
    Rng rng(0);
    std::normal_distribution<double> z(0.0, 1.0);
    Eigen::MatrixXd x(400, 1);
    Eigen::VectorXd y(400);
    for (int i = 0; i < 400; ++i) {
        y(i) = i % 2;
        x(i, 0) = z(rng) + (i % 2 ? 2.0 : -2.0);
    }
    auto m = logistic_fit(x, y, 1.0);
    CHECK(m.probability(std::vector<double>{3.0}) > 0.95);
    CHECK(m.probability(std::vector<double>{-3.0}) < 0.05);
    CHECK(m.probability(std::vector<double>{0.0}) == doctest::Approx(0.5).epsilon(0.1));
    Eigen::VectorXd ones = Eigen::VectorXd::Ones(400);
    CHECK_THROWS_AS(logistic_fit(x, ones, 1.0), Error);
}
