#pragma once

#include "vconf/engine.hpp"
#include "vconf/interventions.hpp"
#include "vconf/metrics.hpp"
#include "vconf/probing.hpp"
#include "vconf/templates.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace vconf {

enum class experiment_kind { calibrate, steer, patch, noise, swap, block, probe };

const char * to_string(experiment_kind k);
experiment_kind parse_experiment_kind(std::string_view s);

struct block_group {
    std::string name;
    std::vector<edge> edges;
    std::vector<edge> preserved;
};

struct experiment_config {
    experiment_kind kind = experiment_kind::steer;
    std::string template_id = "minimal0_9";
    std::vector<std::size_t> layers; // empty = every layer
    std::vector<role> roles{role::panl, role::cc, role::panl_plus1};
    std::uint64_t seed = 0;
    std::optional<std::size_t> max_trials; // cap on test trials, taken in id order
    hook_point point = hook_point::post_mlp;

    // contrast / calibration partition
    std::set<int> high_classes{7, 8, 9};
    std::set<int> low_classes{1, 2, 3};
    std::size_t n_high = 50;
    std::size_t n_low = 50;
    bool replacement = false;

    // steer
    std::vector<double> alphas{2.0, 5.0};
    double base_fraction = 0.03;
    std::vector<std::string> directions{"high", "low"};

    // patch: restrict test trials to the high classes
    bool high_only = true;

    // swap
    std::vector<swap_condition> conditions{swap_condition::high_to_high, swap_condition::high_to_low,
                                           swap_condition::low_to_high, swap_condition::low_to_low};
    std::size_t q_bins = 4;
    std::size_t a_bins = 4;
    bool pool_is_recipients = false;

    // block
    std::size_t window = 3;
    std::vector<block_group> blocks; // empty = the default pathway groups

    // probe
    std::size_t k = 5;
    double lambda = 1.0;
    std::vector<std::string> targets{"high_confidence", "correct"};
    int high_threshold = 5;

    static experiment_config from_json(const nlohmann::json & j);
    static experiment_config load(const std::filesystem::path & path);
    nlohmann::json to_json() const;

    // Layers filled in and checked against the model; unknown template is a config error.
    void resolve(const model_config & model);
};

std::vector<block_group> default_block_groups();

// Clean or intervened output of one trial, read through a lexicon.
struct readout {
    std::vector<token_id> tokens;
    std::string text;
    std::optional<std::size_t> cls;   // class index (numeric: first digit)
    std::optional<double> confidence; // in [0, 1]
    real_vector vocab_logits;         // first generated step
};

readout read_output(const model_bundle & model, const confidence_lexicon & lexicon, std::span<const token_id> prompt,
                    std::size_t max_new, const hook_set & hooks = {});

struct calibration_row {
    std::string trial_id;
    std::optional<std::size_t> cls;
    std::optional<double> confidence;
    bool correct = false;
};

struct calibration_report {
    std::size_t n = 0;
    std::size_t unparseable = 0;
    double ece = 0.0;
    double auroc = 0.0;
    double accuracy = 0.0;
    double mean_confidence = 0.0;
    std::vector<std::size_t> histogram; // per lexicon class
    std::vector<calibration_row> rows;

    nlohmann::json to_json() const;
};

calibration_report calibrate(std::span<const trial> trials, const model_bundle & model, const prompt_template & tpl,
                             std::size_t workers = 1);

struct experiment_result {
    std::string experiment;
    std::vector<metrics_report> reports;
    std::vector<probe_sweep_row> probes;
    std::size_t k = 0;
    std::optional<calibration_report> calibration;
    std::vector<std::string> log; // aborted (trial, layer, role) entries

    bool valid() const;
};

experiment_result run_experiment(const experiment_config & config, const model_bundle & model,
                                 std::span<const trial> trials, std::size_t workers = 1);

// trials.csv, aggregate.json, plot_data.csv, plus probe_sweep.csv / calibration.json when present, and log.txt.
void export_results(const experiment_result & result, const std::filesystem::path & out_dir);

// Plot data (x = layer, series = condition and position) regenerated from a trials.csv.
void write_plot_data(std::ostream & out, const std::vector<metrics_report> & reports);

// Runs f(0..n-1) on `workers` threads; results must be written to per-index slots.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)> & f);

} // namespace vconf
