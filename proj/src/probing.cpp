#include "vconf/probing.hpp"

#include "vconf/error.hpp"
#include "vconf/metrics.hpp"
#include "vconf/random.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace vconf {

namespace {

Eigen::MatrixXd to_eigen(const matrix & m) {
    Eigen::MatrixXd out(m.rows(), m.cols());
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < m.cols(); ++c) out(r, c) = m(r, c);
    return out;
}

Eigen::VectorXd to_eigen(std::span<const double> v) {
    Eigen::VectorXd out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out(i) = v[i];
    return out;
}

real_vector from_eigen(const Eigen::VectorXd & v) { return real_vector(v.data(), v.data() + v.size()); }

matrix select_rows(const matrix & x, const std::vector<std::size_t> & rows) {
    matrix out(rows.size(), x.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto src = x.row(rows[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
}

real_vector select(const real_vector & v, const std::vector<std::size_t> & idx) {
    real_vector out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(v[i]);
    return out;
}

bool is_label(double v) { return v == 0.0 || v == 1.0; }

void require_both_classes(const real_vector & y, const char * what) {
    bool pos = false;
    bool neg = false;
    for (double v : y) {
        if (!is_label(v)) throw error(error_kind::validation, std::string(what) + ": labels must be 0 or 1");
        (v == 1.0 ? pos : neg) = true;
    }
    if (!pos || !neg) throw error(error_kind::degenerate_labels, std::string(what) + ": only one class present");
}

double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

// log(1 + exp(z)) without overflow
double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

} // namespace

void dataset::validate() const {
    if (x.rows() < 2) throw error(error_kind::validation, "dataset needs at least two trials");
    if (y.size() != x.rows()) throw error(error_kind::alignment, "target length does not match trial count");
    for (double v : x.data())
        if (!std::isfinite(v)) throw error(error_kind::validation, "dataset contains non-finite features");
    for (double v : y)
        if (!std::isfinite(v)) throw error(error_kind::validation, "dataset contains non-finite targets");
}

matrix standardization::apply(const matrix & x) const {
    if (x.cols() != mean.size()) throw error(error_kind::shape, "standardization width mismatch");
    matrix out(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) = constant[c] ? 0.0 : (x(r, c) - mean[c]) / sd[c];
    return out;
}

standardization fit_standardization(const matrix & x) {
    standardization s;
    const std::size_t n = x.rows();
    s.mean.assign(x.cols(), 0.0);
    s.sd.assign(x.cols(), 0.0);
    s.constant.assign(x.cols(), false);
    if (n == 0) return s;
    for (std::size_t c = 0; c < x.cols(); ++c) {
        double sum = 0.0;
        for (std::size_t r = 0; r < n; ++r) sum += x(r, c);
        const double mean = sum / static_cast<double>(n);
        double ss = 0.0;
        for (std::size_t r = 0; r < n; ++r) ss += (x(r, c) - mean) * (x(r, c) - mean);
        const double sd = std::sqrt(ss / static_cast<double>(n));
        s.mean[c] = mean;
        s.sd[c] = sd;
        s.constant[c] = sd <= 1e-12 * (1.0 + std::abs(mean));
    }
    return s;
}

zscore_result zscore(const matrix & x) {
    zscore_result out;
    out.stats = fit_standardization(x);
    out.z = out.stats.apply(x);
    return out;
}

probe_result ridge_fit(const dataset & data, double lambda) {
    data.validate();
    if (lambda < 0) throw error(error_kind::validation, "lambda must be non-negative");
    const Eigen::MatrixXd x = to_eigen(data.x);
    const Eigen::VectorXd y = to_eigen(data.y);
    const Eigen::RowVectorXd x_mean = x.colwise().mean();
    const double y_mean = y.mean();
    const Eigen::MatrixXd xc = x.rowwise() - x_mean;
    const Eigen::VectorXd yc = y.array() - y_mean;

    Eigen::MatrixXd gram = xc.transpose() * xc;
    gram.diagonal().array() += lambda;
    const Eigen::VectorXd rhs = xc.transpose() * yc;

    Eigen::VectorXd w;
    if (lambda == 0.0) {
        Eigen::FullPivLU<Eigen::MatrixXd> lu(gram);
        lu.setThreshold(1e-12);
        if (lu.rank() < gram.rows())
            throw error(error_kind::singular, "normal equations are singular at lambda = 0; use lambda > 0");
        w = lu.solve(rhs);
    } else {
        Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
        if (ldlt.info() != Eigen::Success) throw error(error_kind::singular, "ridge system could not be factored");
        w = ldlt.solve(rhs);
    }

    probe_result out;
    out.weights = from_eigen(w);
    out.intercept = y_mean - x_mean.dot(w);
    out.lambda = lambda;
    return out;
}

probe_result logistic_fit(const dataset & data, const logistic_options & options) {
    data.validate();
    require_both_classes(data.y, "logistic fit");
    if (options.l2 < 0) throw error(error_kind::validation, "l2 must be non-negative");

    const std::size_t n = data.x.rows();
    const std::size_t p = data.x.cols();
    Eigen::MatrixXd xa(n, p + 1);
    xa.col(0).setOnes();
    xa.rightCols(p) = to_eigen(data.x);
    const Eigen::VectorXd y = to_eigen(data.y);
    Eigen::VectorXd penalty = Eigen::VectorXd::Constant(p + 1, options.l2);
    penalty(0) = 0.0;

    auto objective = [&](const Eigen::VectorXd & beta) {
        const Eigen::VectorXd z = xa * beta;
        double ll = 0.0;
        for (std::size_t i = 0; i < n; ++i) ll += y(i) * z(i) - softplus(z(i));
        return ll - 0.5 * (penalty.array() * beta.array().square()).sum();
    };
    auto gradient = [&](const Eigen::VectorXd & beta, Eigen::VectorXd & prob) {
        const Eigen::VectorXd z = xa * beta;
        prob.resize(n);
        for (std::size_t i = 0; i < n; ++i) prob(i) = sigmoid(z(i));
        return Eigen::VectorXd(xa.transpose() * (y - prob) - (penalty.array() * beta.array()).matrix());
    };

    Eigen::VectorXd beta = Eigen::VectorXd::Zero(p + 1);
    Eigen::VectorXd prob;
    Eigen::VectorXd g = gradient(beta, prob);
    double f = objective(beta);
    // gradient is a sum over rows
    const double tol = options.tol * static_cast<double>(std::max<std::size_t>(n, 1));
    std::size_t iter = 0;
    while (g.lpNorm<Eigen::Infinity>() >= tol) {
        if (iter >= options.max_iter) {
            throw error(error_kind::convergence, "IRLS did not converge in " + std::to_string(options.max_iter) +
                                                     " iterations; gradient norm " +
                                                     format_real(g.lpNorm<Eigen::Infinity>()));
        }
        ++iter;
        const Eigen::VectorXd wts = (prob.array() * (1.0 - prob.array())).matrix();
        Eigen::MatrixXd hess = xa.transpose() * wts.asDiagonal() * xa;
        hess.diagonal() += penalty;
        hess.diagonal().array() += 1e-12; // keeps the factorization defined when weights vanish
        Eigen::LDLT<Eigen::MatrixXd> ldlt(hess);
        const Eigen::VectorXd step = ldlt.solve(g);

        double t = 1.0;
        Eigen::VectorXd next = beta + step;
        double f_next = objective(next);
        while (f_next < f && t > 1e-10) {
            t *= 0.5;
            next = beta + t * step;
            f_next = objective(next);
        }
        if (f_next < f) break;
        beta = next;
        f = f_next;
        g = gradient(beta, prob);
    }

    const double gnorm = g.lpNorm<Eigen::Infinity>();
    if (gnorm >= tol) {
        throw error(error_kind::convergence, "IRLS stalled with gradient norm " + format_real(gnorm));
    }
    probe_result out;
    out.intercept = beta(0);
    out.weights = from_eigen(beta.tail(p));
    out.lambda = options.l2;
    out.iterations = iter;
    out.gradient_norm = gnorm;
    return out;
}

real_vector decision_scores(const probe_result & probe, const matrix & x) {
    if (x.cols() != probe.weights.size()) throw error(error_kind::shape, "probe width mismatch");
    real_vector out(x.rows());
    for (std::size_t r = 0; r < x.rows(); ++r) out[r] = probe.intercept + kernels::dot(x.row(r), probe.weights);
    return out;
}

const char * to_string(probe_kind k) { return k == probe_kind::ridge ? "ridge" : "logistic"; }
const char * to_string(probe_metric m) { return m == probe_metric::r2 ? "r2" : "auroc"; }

double r2_score(std::span<const double> y, std::span<const double> predicted) {
    check_equal_lengths(y.size(), predicted.size());
    double mean = 0.0;
    for (double v : y) mean += v;
    mean /= static_cast<double>(y.size());
    double sse = 0.0;
    double sst = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        sse += (y[i] - predicted[i]) * (y[i] - predicted[i]);
        sst += (y[i] - mean) * (y[i] - mean);
    }
    if (sst == 0.0) throw error(error_kind::undefined_denominator, "R^2 of a constant target");
    return 1.0 - sse / sst;
}

std::vector<std::size_t> fold_assignment(const dataset & data, const cv_options & o) {
    const std::size_t n = data.n_trials();
    if (o.k < 2) throw error(error_kind::validation, "k must be at least 2");
    if (n < o.k) throw error(error_kind::validation, "fewer trials than folds");
    std::vector<std::size_t> fold(n, 0);
    seeded_rng rng(o.seed);

    if (o.fitter == probe_kind::logistic) {
        std::vector<std::size_t> pos;
        std::vector<std::size_t> neg;
        for (std::size_t i = 0; i < n; ++i) (data.y[i] == 1.0 ? pos : neg).push_back(i);
        if (o.shuffle) {
            rng.shuffle(pos);
            rng.shuffle(neg);
        }
        // deal each class round-robin; negatives continue where positives stopped
        std::size_t next = 0;
        for (std::size_t i : pos) fold[i] = next++ % o.k;
        for (std::size_t i : neg) fold[i] = next++ % o.k;
        return fold;
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    if (o.shuffle) rng.shuffle(order);
    for (std::size_t rank = 0; rank < n; ++rank) fold[order[rank]] = rank * o.k / n;
    return fold;
}

namespace {

probe_result fit_standardized(const matrix & z, const real_vector & y, const cv_options & o) {
    dataset d{z, y, ""};
    if (o.fitter == probe_kind::ridge) return ridge_fit(d, o.lambda);
    return logistic_fit(d, {o.lambda, o.max_iter, o.tol});
}

} // namespace

probe_result kfold_cv(const dataset & data, const cv_options & o) {
    data.validate();
    if (o.fitter == probe_kind::logistic || o.metric == probe_metric::auroc) require_both_classes(data.y, "kfold_cv");
    const auto fold = fold_assignment(data, o);

    probe_result out;
    out.cv_scores.resize(o.k);
    for (std::size_t f = 0; f < o.k; ++f) {
        std::vector<std::size_t> train;
        std::vector<std::size_t> test;
        for (std::size_t i = 0; i < fold.size(); ++i) (fold[i] == f ? test : train).push_back(i);
        const matrix x_train = select_rows(data.x, train);
        const matrix x_test = select_rows(data.x, test);
        const real_vector y_train = select(data.y, train);
        const real_vector y_test = select(data.y, test);

        if (o.metric == probe_metric::auroc) {
            const bool has_pos = std::find(y_test.begin(), y_test.end(), 1.0) != y_test.end();
            const bool has_neg = std::find(y_test.begin(), y_test.end(), 0.0) != y_test.end();
            if (!has_pos || !has_neg)
                throw error(error_kind::stratification, "fold " + std::to_string(f) + " holds a single class");
        }

        const standardization stats = fit_standardization(x_train);
        const probe_result fit = fit_standardized(stats.apply(x_train), y_train, o);
        const real_vector scores = decision_scores(fit, stats.apply(x_test));
        if (o.metric == probe_metric::r2) {
            out.cv_scores[f] = r2_score(y_test, scores);
        } else {
            std::vector<bool> labels;
            for (double v : y_test) labels.push_back(v == 1.0);
            out.cv_scores[f] = auroc(scores, labels);
        }
    }
    out.mean_score = std::accumulate(out.cv_scores.begin(), out.cv_scores.end(), 0.0) / static_cast<double>(o.k);

    const auto full = zscore(data.x);
    const probe_result fit = fit_standardized(full.z, data.y, o);
    out.weights = fit.weights;
    out.intercept = fit.intercept;
    out.iterations = fit.iterations;
    out.gradient_norm = fit.gradient_norm;
    out.lambda = o.lambda;
    return out;
}

double mean_answer_logprob(std::span<const double> logprobs, index_span answer_span) {
    if (answer_span.empty()) throw error(error_kind::validation, "empty answer span");
    if (answer_span.end > logprobs.size()) throw error(error_kind::validation, "answer span exceeds the sequence");
    double sum = 0.0;
    for (std::size_t i = answer_span.begin; i < answer_span.end; ++i) sum += logprobs[i];
    return sum / static_cast<double>(answer_span.size());
}

variance_partition_result variance_partition(const dataset & baseline, const dataset & activations,
                                             std::span<const double> y, double lambda, std::size_t k,
                                             std::uint64_t seed) {
    const std::size_t n = baseline.x.rows();
    if (activations.x.rows() != n || y.size() != n)
        throw error(error_kind::alignment, "baseline, activations, and target disagree on trial count");

    cv_options o;
    o.k = k;
    o.fitter = probe_kind::ridge;
    o.metric = probe_metric::r2;
    o.lambda = lambda;
    o.seed = seed;

    const real_vector target(y.begin(), y.end());
    const dataset base{baseline.x, target, baseline.feature_meta};
    matrix combined(n, baseline.x.cols() + activations.x.cols());
    for (std::size_t r = 0; r < n; ++r) {
        auto dst = combined.row(r);
        const auto a = baseline.x.row(r);
        const auto b = activations.x.row(r);
        std::copy(a.begin(), a.end(), dst.begin());
        std::copy(b.begin(), b.end(), dst.begin() + static_cast<std::ptrdiff_t>(a.size()));
    }
    const dataset both{combined, target, "combined"};

    variance_partition_result out;
    out.r2_baseline = kfold_cv(base, o).mean_score;
    out.r2_combined = kfold_cv(both, o).mean_score;
    out.unique_r2 = out.r2_combined - out.r2_baseline;
    return out;
}

void write_probe_sweep_csv(std::ostream & out, const std::vector<probe_sweep_row> & rows, std::size_t k) {
    out << "layer,role,target,metric,mean_score";
    for (std::size_t f = 0; f < k; ++f) out << ",fold_" << f;
    out << ",lambda,n_trials\n";
    for (const auto & r : rows) {
        out << r.layer << ',' << r.position << ',' << r.target << ',' << to_string(r.metric) << ','
            << format_real(r.result.mean_score);
        for (std::size_t f = 0; f < k; ++f)
            out << ',' << (f < r.result.cv_scores.size() ? format_real(r.result.cv_scores[f]) : "");
        out << ',' << format_real(r.result.lambda) << ',' << r.n_trials << '\n';
    }
}

} // namespace vconf
