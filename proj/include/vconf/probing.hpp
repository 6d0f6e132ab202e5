#pragma once

#include "vconf/kernels.hpp"
#include "vconf/trial.hpp"

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

namespace vconf {

struct dataset {
    matrix x;                  // trials x features
    real_vector y;             // regression target, or 0/1 labels
    std::string feature_meta;  // e.g. "layer=4,role=PANL" or "logprob"

    std::size_t n_trials() const noexcept { return x.rows(); }
    // Throws on non-finite entries, fewer than two trials, or a y/x length mismatch.
    void validate() const;
};

struct standardization {
    real_vector mean;
    real_vector sd;
    std::vector<bool> constant; // constant columns map to 0

    matrix apply(const matrix & x) const;
};

// Population (ddof = 0) statistics; a column is constant when sd <= 1e-12 * (1 + |mean|).
standardization fit_standardization(const matrix & x);

struct zscore_result {
    matrix z;
    standardization stats;
};
zscore_result zscore(const matrix & x);

struct probe_result {
    real_vector weights;
    double intercept = 0.0;
    real_vector cv_scores;
    double mean_score = 0.0;
    double lambda = 0.0;
    std::size_t iterations = 0;
    double gradient_norm = 0.0; // logistic: infinity norm at convergence
};

// Minimizes |y - Xw - b|^2 + lambda |w|^2 with an unpenalized intercept.
probe_result ridge_fit(const dataset & data, double lambda);

struct logistic_options {
    double l2 = 1.0;
    std::size_t max_iter = 100;
    double tol = 1e-8;
};

// Maximizes sum log-likelihood - l2/2 |w|^2 by IRLS; intercept unpenalized. Stops once |grad|_inf < tol * n.
probe_result logistic_fit(const dataset & data, const logistic_options & options);

real_vector decision_scores(const probe_result & probe, const matrix & x);

enum class probe_kind { ridge, logistic };
enum class probe_metric { r2, auroc };

const char * to_string(probe_kind k);
const char * to_string(probe_metric m);

struct cv_options {
    std::size_t k = 5;
    probe_kind fitter = probe_kind::ridge;
    probe_metric metric = probe_metric::r2;
    double lambda = 1.0;
    std::uint64_t seed = 0;
    bool shuffle = true;
    std::size_t max_iter = 100;
    double tol = 1e-8;
};

// Fold index per trial; stratified by label for logistic fits.
std::vector<std::size_t> fold_assignment(const dataset & data, const cv_options & options);

// Held-out metric per fold (standardization refit on each training split), then a full-data fit.
probe_result kfold_cv(const dataset & data, const cv_options & options);

double r2_score(std::span<const double> y, std::span<const double> predicted);

double mean_answer_logprob(std::span<const double> logprobs, index_span answer_span);

struct variance_partition_result {
    double r2_baseline = 0.0;
    double r2_combined = 0.0;
    double unique_r2 = 0.0;
};

variance_partition_result variance_partition(const dataset & baseline, const dataset & activations,
                                             std::span<const double> y, double lambda, std::size_t k,
                                             std::uint64_t seed);

// One row of the layer x role probe sweep.
struct probe_sweep_row {
    std::size_t layer = 0;
    std::string position;
    std::string target;
    probe_metric metric = probe_metric::r2;
    probe_result result;
    std::size_t n_trials = 0;
};

void write_probe_sweep_csv(std::ostream & out, const std::vector<probe_sweep_row> & rows, std::size_t k);

} // namespace vconf
