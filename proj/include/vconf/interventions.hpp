#pragma once

#include "vconf/engine.hpp"
#include "vconf/trial.hpp"

#include <json.hpp>

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace vconf {

// A trial's positions paired with a trace captured on its prompt.
struct trace_view {
    const position_map & positions;
    const activation_trace & trace;
};

// ---------------------------------------------------------------------------
// steering

struct steering_vector {
    std::size_t layer = 0;
    role position_role = role::panl;
    real_vector direction;
    double base_fraction = 0.03;
    double alpha = 0.0;
    std::size_t n_high = 0;
    std::size_t n_low = 0;

    // v_low = -v_high
    steering_vector negated() const;
};

// direction = mean(high) - mean(low) at (layer, role).
steering_vector build_steering_vector(std::span<const trace_view> high, std::span<const trace_view> low,
                                      std::size_t layer, role r);

// Adds alpha * base_fraction * |r| * direction / |direction| at (layer, role position).
// Without base_residual_norm, |r| is the norm of the residual arriving at the hook.
hook_set apply_steering(const steering_vector & spec, const position_map & positions,
                        std::optional<double> base_residual_norm = std::nullopt);

// ---------------------------------------------------------------------------
// calibration means, corruption, patching, noising

struct calibration_means {
    std::map<std::pair<std::size_t, role>, real_vector> residual; // (layer, role)
    std::vector<real_vector> answer_embeddings;                  // indexed by answer-relative position
    std::set<std::string> source_trial_ids;
    std::size_t n_high = 0;
    std::size_t n_low = 0;

    const real_vector & at(std::size_t layer, role r) const;
    // Throws validation when the calibration ids intersect `test_ids`.
    void check_disjoint(const std::set<std::string> & test_ids) const;
};

// `is_high` classifies each trial for the composition record; pass nullptr to skip.
calibration_means compute_calibration_means(std::span<const trial> trials, std::span<const activation_trace> traces,
                                            const std::vector<std::size_t> & layers, const std::vector<role> & roles,
                                            bool answer_positions, const std::vector<bool> * is_high = nullptr);

hook_set corrupt_answer_embeddings(const trial & t, const calibration_means & means);

// Corruption plus an overwrite of (layer, position) with the clean activation; the overwrite runs last.
hook_set patch_position(const hook_set & corrupt_hooks, const activation_trace & clean_trace, std::size_t layer,
                        std::size_t position, hook_point point = hook_point::post_mlp);

hook_set mean_ablate(const calibration_means & means, std::size_t layer, role r, const position_map & positions,
                     hook_point point = hook_point::post_mlp);

// ---------------------------------------------------------------------------
// swaps

enum class swap_condition { high_to_high, high_to_low, low_to_high, low_to_low };

const char * to_string(swap_condition c);
swap_condition parse_swap_condition(std::string_view s);
// Donor confidence is high for H->*; recipient confidence is high for *->H.
bool donor_is_high(swap_condition c);
bool recipient_is_high(swap_condition c);

struct swap_plan {
    std::string recipient_id;
    std::string donor_id;
    swap_condition condition = swap_condition::high_to_high;
    std::size_t layer = 0;
    role position_role = role::panl;
    bool q_bin_match = false;
    bool a_bin_match = false;
};

struct donor_request {
    std::size_t n_q_bins = 4;
    std::size_t n_a_bins = 4;
    std::uint64_t seed = 0;
    swap_condition condition = swap_condition::high_to_high;
    std::size_t layer = 0;
    role position_role = role::panl;
};

// Pairs each recipient with a pool trial from the same (question-length, answer-length) quantile bin,
// falling back to the nearest non-empty bin.
std::vector<swap_plan> match_donors(std::span<const trial> recipients, std::span<const trial> pool,
                                    const donor_request & request);

// Quantile bin of `value` against cut points derived from `values`.
std::size_t quantile_bin(const std::vector<std::size_t> & values, std::size_t n_bins, std::size_t value);

hook_set swap_activation(const swap_plan & plan, const activation_trace & donor_trace,
                         const position_map & donor_positions, const position_map & recipient_positions,
                         hook_point point = hook_point::post_mlp);

// ---------------------------------------------------------------------------
// attention knockout

// A role, or a span: "Q" (question tokens), "A" (answer tokens), "ALL" (every later position).
struct position_ref {
    enum class kind { single, question, answer, all } what = kind::single;
    role position_role = role::cc;

    static position_ref parse(std::string_view s);
    std::string str() const;
    bool operator==(const position_ref &) const = default;
};

struct edge {
    position_ref target;
    position_ref source;
    bool operator==(const edge &) const = default;
};

struct layer_window {
    std::size_t begin = 0;
    std::size_t end = 0;
};

// Half-open, centered, clipped to [0, n_layers).
layer_window centered_window(std::size_t center_layer, std::size_t window, std::size_t n_layers);

std::set<std::pair<std::size_t, std::size_t>> expand_edges(const std::vector<edge> & edges, const trial & t);

// Blocks every expanded (target, source) pair across the window, minus the pairs of `preserved`.
hook_set block_edges(const std::vector<edge> & edges, const trial & t, std::size_t center_layer, std::size_t window,
                     std::size_t n_layers, const std::vector<edge> & preserved = {});

// ---------------------------------------------------------------------------
// declarative description of one intervention

enum class intervention_kind { steer, patch, noise, swap, block };

const char * to_string(intervention_kind k);
intervention_kind parse_intervention_kind(std::string_view s);

struct intervention_spec {
    intervention_kind kind = intervention_kind::steer;
    std::size_t layer = 0;
    role position_role = role::panl;
    // steer
    double alpha = 0.0;
    double base_fraction = 0.03;
    std::optional<int> steer_sign;            // +1 high, -1 low
    std::optional<double> residual_norm;      // recorded |r| at the hook
    // noise / patch calibration composition
    std::optional<double> calibration_mean_level;
    // swap
    std::optional<std::string> donor_id;
    std::optional<int> donor_level;
    std::optional<swap_condition> condition;
    // block
    std::size_t center_layer = 0;
    std::size_t window = 1;
    std::vector<edge> edges;
    std::vector<edge> preserved;
    std::uint64_t seed = 0;

    bool operator==(const intervention_spec &) const = default;
};

nlohmann::json to_json(const intervention_spec & spec);
intervention_spec intervention_from_json(const nlohmann::json & j);

} // namespace vconf
