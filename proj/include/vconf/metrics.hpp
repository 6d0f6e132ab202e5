#pragma once

#include "vconf/kernels.hpp"
#include "vconf/model.hpp"

#include <json.hpp>

#include <filesystem>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace vconf {

enum class lexicon_kind { categorical, numeric0_100, numeric0_9 };

const char * to_string(lexicon_kind k);
lexicon_kind parse_lexicon_kind(std::string_view s);

struct confidence_class {
    std::string label;
    std::string first_token; // token text; resolved to an id against a vocabulary
    token_id first_token_id = 0;
    double lo = 0.0;
    double hi = 0.0;
};

// Ordered classes, lowest confidence first.
class confidence_lexicon {
public:
    confidence_lexicon(lexicon_kind kind, std::vector<confidence_class> classes);

    lexicon_kind kind() const noexcept { return kind_; }
    std::size_t size() const noexcept { return classes_.size(); }
    const confidence_class & at(std::size_t k) const;
    const std::vector<confidence_class> & classes() const noexcept { return classes_; }

    // Class whose first token is `id`, if any.
    std::optional<std::size_t> class_of_token(token_id id) const;
    std::vector<token_id> first_token_ids() const;

    // Resolves first-token ids against a vocabulary; ids must be pairwise distinct.
    confidence_lexicon resolved(const tokenizer & tok) const;

    static confidence_lexicon from_json(const nlohmann::json & j);
    static confidence_lexicon load(const std::filesystem::path & path);
    nlohmann::json to_json() const;

    // Digits "0".."9" as ten classes of the given kind.
    static confidence_lexicon digits(lexicon_kind kind);

private:
    lexicon_kind kind_;
    std::vector<confidence_class> classes_;
};

// Categorical: class range midpoint. numeric0_9: value / 9. numeric0_100: value / 100.
double class_to_confidence(const confidence_lexicon & lexicon, int value);

struct logit_row {
    real_vector logits; // one per class first token
    std::size_t target_class = 0;
};

// z_target - mean of the other K-1 class logits.
double logit_difference(const logit_row & row);

// Logits of each class's first token, pulled from a vocabulary-sized logit vector.
logit_row class_logits(const confidence_lexicon & lexicon, std::span<const double> vocab_logits,
                       std::size_t target_class);

void check_equal_lengths(std::size_t a, std::size_t b);

// Fraction of indices where the two sequences differ.
template <typename T>
double first_token_change_rate(const std::vector<T> & baseline, const std::vector<T> & intervened) {
    check_equal_lengths(baseline.size(), intervened.size());
    std::size_t changed = 0;
    for (std::size_t i = 0; i < baseline.size(); ++i)
        if (!(baseline[i] == intervened[i])) ++changed;
    return static_cast<double>(changed) / static_cast<double>(baseline.size());
}

double recovery(double clean, double corrupt, double patched);
double recovery_token(double rate_corrupt, double rate_patched);

double ece(std::span<const double> confidences, const std::vector<bool> & correct, std::size_t n_bins = 10);
double auroc(std::span<const double> scores, const std::vector<bool> & labels);

struct digit_outcome {
    bool first_digit_changed = false;
    bool unparseable = false;
    double digit_logit_difference = 0.0;
    std::optional<double> confidence_change; // in [0, 1] units
};

// Digits are decoded strings (e.g. "95"); confidence is the parsed integer / scale.
digit_outcome digit_metrics(const std::string & baseline_digits, const std::string & intervened_digits,
                            const logit_row & digit_logits, double scale = 100.0);

// ---------------------------------------------------------------------------

struct trial_metrics {
    std::string trial_id;
    double logit_diff_change = 0.0;
    std::optional<double> confidence_change; // empty when the intervened output is unparseable
    bool token_changed = false;
    double clean_confidence = 0.0;
    std::optional<double> intervened_confidence;
};

struct mean_se {
    double mean = 0.0;
    double se = 0.0;
    std::size_t n = 0;
};

// Sample-sd / sqrt(N); zero when N < 2.
mean_se summarize(std::span<const double> values);

struct metrics_report {
    std::string experiment;
    std::string condition;
    std::size_t layer = 0;
    std::string position;
    std::vector<trial_metrics> trials;
    std::size_t aborted = 0;
    std::map<std::string, double> extras; // cell-level values such as recovery percentages

    double change_rate() const;
    mean_se logit_diff_change() const;
    mean_se confidence_change() const;
    std::size_t unparseable() const;
    bool valid() const; // at most 1% aborted
};

// Column order for per-trial CSV rows.
const std::vector<std::string> & trial_csv_columns();
void write_trial_csv_header(std::ostream & out);
void write_trial_csv_rows(std::ostream & out, const metrics_report & report);
nlohmann::json aggregate_json(const metrics_report & report);
// Inverse of the header + rows writers; rows group into reports by (experiment, condition, layer, position).
std::vector<metrics_report> read_trial_csv(std::istream & in);

// Shortest round-trippable decimal representation.
std::string format_real(double v);

} // namespace vconf
