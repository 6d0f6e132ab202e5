#pragma once

#include "vconf/interventions.hpp"
#include "vconf/model.hpp"
#include "vconf/templates.hpp"
#include "vconf/trial.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

namespace vconf {

// Residual layout of the planted model. Dimensions from `noise_begin` on carry seeded noise only.
namespace planted_dims {
inline constexpr std::size_t bias = 0;
inline constexpr std::size_t conf = 1;      // confidence axis
inline constexpr std::size_t conf_comp = 2; // sqrt(R^2 - c^2): keeps final-word norms level-independent
inline constexpr std::size_t recog = 3;
inline constexpr std::size_t newline = 4;
inline constexpr std::size_t colon = 5;
inline constexpr std::size_t bos = 6;
inline constexpr std::size_t cached_conf = 7;
inline constexpr std::size_t cached_comp = 8;
inline constexpr std::size_t cached_flag = 9;
inline constexpr std::size_t retr_conf = 10;
inline constexpr std::size_t retr_flag = 11;
inline constexpr std::size_t digit = 12;
inline constexpr std::size_t identity = 13; // 10 dims, one per final answer word
inline constexpr std::size_t noise_begin = 23;
} // namespace planted_dims

struct planted_spec {
    std::size_t n_layers = 8;
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t d_head = 16;
    std::size_t d_mlp = 64;
    std::size_t rotary_dims = 8;
    std::size_t cache_layer = 3;
    std::size_t retrieve_layer = 6;
    real_vector confidence_axis;          // empty = unit vector on planted_dims::conf
    std::array<double, 10> level_encoding{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    double pair_radius = 10.0;
    double weight_noise = 0.02;           // std of non-circuit weights
    double embedding_noise = 0.3;         // std of per-token noise-subspace embeddings
    std::size_t n_question_words = 16;
    std::size_t n_filler_words = 8;

    real_vector axis() const;
    // Ordering, width, axis and encoding checks; throws validation.
    void validate() const;

    nlohmann::json to_json() const;
    static planted_spec from_json(const nlohmann::json & j);
};

// Vocabulary shared by the planted model and every shipped template.
tokenizer planted_vocab(const planted_spec & spec);

struct margin_audit {
    double clean_margin = 0.0;    // smallest top-1 minus top-2 logit gap of the noise-free model
    double max_noise_delta = 0.0; // largest |noisy - noise-free| logit at the readout position
    double weight_noise = 0.0;    // noise scale that passed
    bool passed() const { return 10.0 * max_noise_delta < clean_margin; }
};

struct planted_model {
    planted_spec spec;
    std::uint64_t seed = 0;
    model_bundle model;
    model_bundle noise_free;
    std::array<double, 10> centers{}; // decoded ratio retrieved-confidence / retrieved-flag per level
    margin_audit audit;
    // Retrieved flag and bias at the readout position; with the centres they fix the digit decision rule.
    double readout_flag = 0.0;
    double readout_bias = 0.0;

    // Digit the readout emits for a retrieved confidence / flag ratio.
    int decode_ratio(double ratio) const;

    nlohmann::json sidecar() const;
};

// Builds the circuit, calibrates the readout on the noise-free copy, adds noise and audits the margin,
// halving the noise until 10 x the worst logit perturbation stays below the clean margin.
planted_model build_planted(const planted_spec & spec, std::uint64_t seed);

inline model_bundle build_planted_model(const planted_spec & spec, std::uint64_t seed) {
    return build_planted(spec, seed).model;
}

// Writes the weight directory plus planted.json.
void save_planted(const planted_model & planted, const std::filesystem::path & dir);

struct planted_trial_options {
    std::vector<int> levels{1, 2, 3, 4, 5, 6, 7, 8, 9};
    double correctness_noise = 0.05; // half-width of the uniform jitter on P(correct)
    double miscalibration = 0.0;     // constant offset on P(correct)
};

// Probability that a trial at `level` is labelled correct, averaged over the jitter.
double planted_correct_probability(int level, const planted_trial_options & options);

std::vector<trial> gen_planted_trials(const planted_spec & spec, std::size_t n, std::uint64_t seed,
                                      const planted_trial_options & options = {},
                                      const prompt_template & tpl = prompt_template::builtin("minimal0_9"));

// Expected ECE over n generated trials, with the decoded confidence level / 9 as the score.
double expected_planted_ece(std::size_t n, const planted_trial_options & options);
// AUROC of the planted level against correctness under the generator.
double analytic_planted_auroc(const planted_trial_options & options);

// Extra measurements some oracle cases need.
struct oracle_hints {
    std::optional<double> direction_cosine; // steering direction . site confidence axis / |direction|
    std::optional<double> site_flag;        // raw flag value paired with the site's confidence value
};

struct oracle_outcome {
    bool unchanged = false;
    int level = 0;
};

// Closed-form expectation for a planted trial. Steering and swaps compare against the clean run;
// patches compare against the corrupted run, so the outcome is the restored level or 0.
oracle_outcome oracle_expected(const planted_model & planted, const trial & t, const intervention_spec & spec,
                               const oracle_hints & hints = {});

} // namespace vconf
