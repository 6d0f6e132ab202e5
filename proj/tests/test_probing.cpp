#include <doctest.h>

#include "vconf/error.hpp"
#include "vconf/metrics.hpp"
#include "vconf/probing.hpp"
#include "vconf/random.hpp"

#include <array>
#include <cmath>

using namespace vconf;

namespace {

matrix random_matrix(std::size_t r, std::size_t c, seeded_rng & rng) {
    matrix m(r, c);
    for (auto & v : m.data()) v = rng.normal();
    return m;
}

// plain Gaussian elimination with partial pivoting
real_vector solve_gauss(std::vector<real_vector> a, real_vector b) {
    const std::size_t n = b.size();
    for (std::size_t c = 0; c < n; ++c) {
        std::size_t p = c;
        for (std::size_t r = c + 1; r < n; ++r)
            if (std::abs(a[r][c]) > std::abs(a[p][c])) p = r;
        std::swap(a[c], a[p]);
        std::swap(b[c], b[p]);
        for (std::size_t r = c + 1; r < n; ++r) {
            const double f = a[r][c] / a[c][c];
            for (std::size_t k = c; k < n; ++k) a[r][k] -= f * a[c][k];
            b[r] -= f * b[c];
        }
    }
    real_vector x(n);
    for (std::size_t i = n; i-- > 0;) {
        double s = b[i];
        for (std::size_t k = i + 1; k < n; ++k) s -= a[i][k] * x[k];
        x[i] = s / a[i][i];
    }
    return x;
}

// intercept handled as an unpenalized extra column
real_vector ridge_oracle(const matrix & x, const real_vector & y, double lambda) {
    const std::size_t p = x.cols() + 1;
    std::vector<real_vector> a(p, real_vector(p, 0.0));
    real_vector b(p, 0.0);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        real_vector row{1.0};
        for (std::size_t c = 0; c < x.cols(); ++c) row.push_back(x(r, c));
        for (std::size_t i = 0; i < p; ++i) {
            for (std::size_t j = 0; j < p; ++j) a[i][j] += row[i] * row[j];
            b[i] += row[i] * y[r];
        }
    }
    for (std::size_t i = 1; i < p; ++i) a[i][i] += lambda;
    return solve_gauss(a, b);
}

double penalized_loglik(const matrix & x, const real_vector & y, const std::array<double, 3> & beta, double l2) {
    double ll = 0;
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const double z = beta[0] + beta[1] * x(r, 0) + beta[2] * x(r, 1);
        ll += y[r] * z - (z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)));
    }
    return ll - 0.5 * l2 * (beta[1] * beta[1] + beta[2] * beta[2]);
}

// zooming grid search over (b, w1, w2); the objective is concave so shrinking around the best point converges
std::array<double, 3> logistic_grid(const matrix & x, const real_vector & y, double l2) {
    std::array<double, 3> best{0, 0, 0};
    double half = 8.0;
    const int steps = 10;
    while (half > 1e-7) {
        std::array<double, 3> centre = best;
        double f_best = penalized_loglik(x, y, best, l2);
        for (int i = -steps; i <= steps; ++i)
            for (int j = -steps; j <= steps; ++j)
                for (int k = -steps; k <= steps; ++k) {
                    const std::array<double, 3> b{centre[0] + half * i / steps, centre[1] + half * j / steps,
                                                  centre[2] + half * k / steps};
                    const double f = penalized_loglik(x, y, b, l2);
                    if (f > f_best) {
                        f_best = f;
                        best = b;
                    }
                }
        half *= 0.3;
    }
    return best;
}

} // namespace

TEST_CASE("zscore") {
    seeded_rng rng(1);
    matrix x = random_matrix(5, 3, rng);
    for (std::size_t r = 0; r < 5; ++r) x(r, 1) = 2.5;
    const auto z = zscore(x);
    CHECK(z.stats.constant[1]);
    CHECK_FALSE(z.stats.constant[0]);
    for (std::size_t c : {0, 2}) {
        double m = 0;
        for (std::size_t r = 0; r < 5; ++r) m += x(r, c);
        m /= 5;
        double v = 0;
        for (std::size_t r = 0; r < 5; ++r) v += (x(r, c) - m) * (x(r, c) - m);
        v /= 5;
        CHECK(std::abs(z.stats.mean[c] - m) < 1e-12);
        CHECK(std::abs(z.stats.sd[c] - std::sqrt(v)) < 1e-12);
        double zm = 0, zv = 0;
        for (std::size_t r = 0; r < 5; ++r) zm += z.z(r, c);
        for (std::size_t r = 0; r < 5; ++r) zv += z.z(r, c) * z.z(r, c);
        CHECK(std::abs(zm / 5) < 1e-10);
        CHECK(std::abs(zv / 5 - 1) < 1e-10);
    }
    for (std::size_t r = 0; r < 5; ++r) CHECK(z.z(r, 1) == 0.0);

    const auto again = zscore(z.z);
    for (std::size_t r = 0; r < 5; ++r)
        for (std::size_t c : {0, 2}) CHECK(std::abs(again.z(r, c) - z.z(r, c)) < 1e-10);
}

TEST_CASE("ridge recovers exact linear data") {
    seeded_rng rng(2);
    const matrix x = random_matrix(20, 3, rng);
    const real_vector w{1.5, -2.0, 0.25};
    real_vector y;
    for (std::size_t r = 0; r < 20; ++r) y.push_back(0.7 + kernels::dot(x.row(r), w));
    const auto fit = ridge_fit({x, y, ""}, 0.0);
    for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(fit.weights[i] - w[i]) < 1e-8);
    CHECK(std::abs(fit.intercept - 0.7) < 1e-8);

    const auto shrunk = ridge_fit({x, y, ""}, 1e12);
    CHECK(kernels::norm(shrunk.weights) < 1e-6);
    double mean = 0;
    for (double v : y) mean += v;
    CHECK(std::abs(shrunk.intercept - mean / 20) < 1e-6);
}

TEST_CASE("ridge matches the elimination oracle and is stationary") {
    seeded_rng rng(3);
    const matrix x = random_matrix(8, 3, rng);
    real_vector y;
    for (std::size_t r = 0; r < 8; ++r) y.push_back(rng.normal());
    const auto fit = ridge_fit({x, y, ""}, 1.0);
    const auto oracle = ridge_oracle(x, y, 1.0);
    CHECK(std::abs(fit.intercept - oracle[0]) < 1e-10);
    for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(fit.weights[i] - oracle[i + 1]) < 1e-10);

    for (double lambda : {0.0, 0.01, 1.0, 100.0}) {
        const auto f = ridge_fit({x, y, ""}, lambda);
        double ym = 0;
        for (double v : y) ym += v;
        ym /= 8;
        real_vector xm(3, 0.0);
        for (std::size_t r = 0; r < 8; ++r)
            for (std::size_t c = 0; c < 3; ++c) xm[c] += x(r, c) / 8;
        for (std::size_t i = 0; i < 3; ++i) {
            double lhs = lambda * f.weights[i];
            double rhs = 0;
            for (std::size_t r = 0; r < 8; ++r) {
                double xw = 0;
                for (std::size_t c = 0; c < 3; ++c) xw += (x(r, c) - xm[c]) * f.weights[c];
                lhs += (x(r, i) - xm[i]) * xw;
                rhs += (x(r, i) - xm[i]) * (y[r] - ym);
            }
            CHECK(std::abs(lhs - rhs) < 1e-8);
        }
    }
}

TEST_CASE("ridge singular at lambda zero") {
    matrix x(4, 2);
    for (std::size_t r = 0; r < 4; ++r) {
        x(r, 0) = double(r);
        x(r, 1) = 2.0 * r;
    }
    try {
        ridge_fit({x, {1, 2, 3, 4}, ""}, 0.0);
        FAIL("expected singular");
    } catch (const error & e) {
        CHECK(e.kind() == error_kind::singular);
    }
    CHECK_NOTHROW(ridge_fit({x, {1, 2, 3, 4}, ""}, 0.5));
}

TEST_CASE("training r2 does not increase with lambda") {
    seeded_rng rng(4);
    const matrix x = random_matrix(30, 4, rng);
    real_vector y;
    for (std::size_t r = 0; r < 30; ++r) y.push_back(x(r, 0) - x(r, 2) + rng.normal());
    double prev = 2.0;
    for (double lambda : {0.0, 0.1, 1.0, 10.0, 100.0, 1e4}) {
        const auto f = ridge_fit({x, y, ""}, lambda);
        const double r2 = r2_score(y, decision_scores(f, x));
        CHECK(r2 <= prev + 1e-12);
        prev = r2;
    }
}

TEST_CASE("logistic symmetry") {
    seeded_rng rng(5);
    matrix x(20, 2);
    real_vector y;
    for (std::size_t i = 0; i < 10; ++i) {
        const double a = rng.normal(), b = rng.normal();
        x(2 * i, 0) = a;
        x(2 * i, 1) = b;
        x(2 * i + 1, 0) = -a;
        x(2 * i + 1, 1) = -b;
        y.push_back(1);
        y.push_back(0);
    }
    const logistic_options opt{1.0, 100, 1e-10};
    const auto fit = logistic_fit({x, y, ""}, opt);
    CHECK(std::abs(fit.intercept) < 1e-10);
    CHECK(fit.gradient_norm < opt.tol * 20);

    real_vector flipped;
    for (double v : y) flipped.push_back(1 - v);
    const auto neg = logistic_fit({x, flipped, ""}, opt);
    for (std::size_t i = 0; i < 2; ++i) CHECK(std::abs(fit.weights[i] + neg.weights[i]) < 1e-9);
}

TEST_CASE("logistic matches the grid oracle") {
    seeded_rng rng(6);
    matrix x(10, 2);
    real_vector y;
    for (std::size_t r = 0; r < 10; ++r) {
        x(r, 0) = rng.normal();
        x(r, 1) = rng.normal();
        y.push_back(x(r, 0) + 0.5 * x(r, 1) + rng.normal() > 0 ? 1 : 0);
    }
    y[0] = 1;
    y[1] = 0;
    const auto fit = logistic_fit({x, y, ""}, {1.0, 100, 1e-10});
    const auto best = logistic_grid(x, y, 1.0);
    const auto scores = decision_scores(fit, x);
    for (std::size_t r = 0; r < 10; ++r) {
        const double oracle = best[0] + best[1] * x(r, 0) + best[2] * x(r, 1);
        CHECK(std::abs(scores[r] - oracle) < 1e-4);
    }
}

TEST_CASE("logistic errors") {
    matrix x(4, 1);
    for (std::size_t r = 0; r < 4; ++r) x(r, 0) = double(r);
    try {
        logistic_fit({x, {1, 1, 1, 1}, ""}, {});
        FAIL("expected degenerate labels");
    } catch (const error & e) {
        CHECK(e.kind() == error_kind::degenerate_labels);
    }
    // separable with no penalty never reaches a zero gradient
    try {
        logistic_fit({x, {0, 0, 1, 1}, ""}, {0.0, 5, 1e-12});
        FAIL("expected convergence error");
    } catch (const error & e) {
        CHECK(e.kind() == error_kind::convergence);
        CHECK(std::string(e.what()).find("gradient norm") != std::string::npos);
    }
}

TEST_CASE("logistic auroc is unchanged by z-scoring at lambda zero") {
    seeded_rng rng(7);
    matrix x(40, 3);
    real_vector y;
    for (std::size_t r = 0; r < 40; ++r) {
        x(r, 0) = rng.normal() * 5 + 3;
        x(r, 1) = rng.normal() * 0.2;
        x(r, 2) = rng.normal();
        y.push_back(x(r, 0) / 5 + x(r, 1) * 5 + 2 * rng.normal() > 0.6 ? 1 : 0);
    }
    std::vector<bool> labels;
    for (double v : y) labels.push_back(v == 1);
    const logistic_options opt{0.0, 100, 1e-9};
    const double raw = auroc(decision_scores(logistic_fit({x, y, ""}, opt), x), labels);
    const auto z = zscore(x);
    const double std_ = auroc(decision_scores(logistic_fit({z.z, y, ""}, opt), z.z), labels);
    CHECK(std::abs(raw - std_) < 1e-9);
}

TEST_CASE("kfold_cv") {
    seeded_rng rng(8);
    const matrix x = random_matrix(30, 2, rng);
    real_vector y;
    for (std::size_t r = 0; r < 30; ++r) y.push_back(2 * x(r, 0) - x(r, 1) + 1);

    cv_options o;
    o.lambda = 0.0;
    o.seed = 42;
    const auto lin = kfold_cv({x, y, ""}, o);
    REQUIRE(lin.cv_scores.size() == 5);
    for (double s : lin.cv_scores) CHECK(std::abs(s - 1.0) < 1e-8);

    // same seed, same bits
    const auto again = kfold_cv({x, y, ""}, o);
    CHECK(again.cv_scores == lin.cv_scores);
    CHECK(again.weights == lin.weights);

    matrix x0(30, 1);
    real_vector labels;
    for (std::size_t r = 0; r < 30; ++r) {
        x0(r, 0) = x(r, 0);
        labels.push_back(x(r, 0) > 0 ? 1 : 0);
    }
    cv_options lo;
    lo.fitter = probe_kind::logistic;
    lo.metric = probe_metric::auroc;
    lo.seed = 9;
    const auto sep = kfold_cv({x0, labels, ""}, lo);
    for (double s : sep.cv_scores) CHECK(s == 1.0);
    double mean = 0;
    for (double s : lin.cv_scores) mean += s;
    CHECK(lin.mean_score == doctest::Approx(mean / 5).epsilon(1e-15));

    // stratified folds keep both classes in every fold
    const auto folds = fold_assignment({x0, labels, ""}, lo);
    for (std::size_t f = 0; f < 5; ++f) {
        int pos = 0, neg = 0;
        for (std::size_t i = 0; i < folds.size(); ++i)
            if (folds[i] == f) (labels[i] == 1 ? pos : neg)++;
        CHECK(pos > 0);
        CHECK(neg > 0);
    }
}

TEST_CASE("kfold_cv on a duplicated dataset") {
    seeded_rng rng(9);
    const matrix base = random_matrix(12, 2, rng);
    real_vector yb;
    for (std::size_t r = 0; r < 12; ++r) yb.push_back(base(r, 0) + rng.normal());
    matrix x(24, 2);
    real_vector y;
    for (std::size_t copy = 0; copy < 2; ++copy)
        for (std::size_t r = 0; r < 12; ++r) {
            x(copy * 12 + r, 0) = base(r, 0);
            x(copy * 12 + r, 1) = base(r, 1);
            y.push_back(yb[r]);
        }
    cv_options o;
    o.k = 2;
    o.shuffle = false;
    const auto res = kfold_cv({x, y, ""}, o);
    CHECK(res.cv_scores[0] == res.cv_scores[1]);
}

TEST_CASE("kfold_cv rejects a one-class auroc fold") {
    matrix x(6, 1);
    for (std::size_t r = 0; r < 6; ++r) x(r, 0) = double(r);
    cv_options o;
    o.k = 3;
    o.metric = probe_metric::auroc;
    o.shuffle = false;
    try {
        kfold_cv({x, {0, 0, 1, 1, 1, 1}, ""}, o);
        FAIL("expected stratification error");
    } catch (const error & e) {
        CHECK(e.kind() == error_kind::stratification);
    }
}

TEST_CASE("mean_answer_logprob") {
    const real_vector lp{-0.5, -1.0, -3.0, -2.0};
    CHECK(mean_answer_logprob(lp, {1, 3}) == -2.0);
    CHECK(mean_answer_logprob(lp, {3, 4}) == -2.0);
    CHECK(mean_answer_logprob(real_vector(5, -0.7), {0, 5}) == doctest::Approx(-0.7));
    CHECK_THROWS_AS(mean_answer_logprob(lp, {2, 2}), error);
    CHECK_THROWS_AS(mean_answer_logprob(lp, {2, 9}), error);
}

TEST_CASE("variance partition") {
    seeded_rng rng(10);
    const std::size_t n = 600;
    matrix lp(n, 1), act(n, 1), resid(n, 1);
    real_vector y(n);
    for (std::size_t i = 0; i < n; ++i) {
        lp(i, 0) = rng.normal();
        const double e = rng.normal();
        y[i] = 0.5 * lp(i, 0) + e;
        act(i, 0) = lp(i, 0);
        resid(i, 0) = e;
    }
    const dataset base{lp, y, "logprob"};
    const auto dup = variance_partition(base, {act, y, "copy"}, y, 1.0, 5, 3);
    CHECK(std::abs(dup.unique_r2) < 0.02);
    CHECK(dup.unique_r2 == doctest::Approx(dup.r2_combined - dup.r2_baseline));

    const auto comp = variance_partition(base, {resid, y, "resid"}, y, 1e-6, 5, 3);
    CHECK(comp.r2_combined > 0.999);
    CHECK(std::abs(comp.unique_r2 - (1 - comp.r2_baseline)) < 1e-3);

    CHECK_THROWS_AS(variance_partition(base, {random_matrix(5, 1, rng), real_vector(5), ""}, y, 1.0, 5, 3), error);
}
