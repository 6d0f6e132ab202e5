#include "vconf/error.hpp"
#include "vconf/harness.hpp"
#include "vconf/model.hpp"
#include "vconf/toycircuit.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

using namespace vconf;

namespace {

struct common_opts {
    std::string model;
    std::string trials;
    std::string config;
    std::string out = "out";
    std::optional<std::uint64_t> seed;
    std::size_t workers = 1;
};

void add_common(CLI::App * sub, common_opts & o) {
    sub->add_option("--model", o.model, "model weight directory")->required();
    sub->add_option("--trials", o.trials, "trial file (JSONL)")->required();
    sub->add_option("--config", o.config, "experiment config (JSON)");
    sub->add_option("--out", o.out, "output directory");
    sub->add_option("--seed", o.seed, "overrides the config seed");
    sub->add_option("--workers", o.workers, "worker threads")->check(CLI::PositiveNumber);
}

int run(experiment_kind kind, const common_opts & o) {
    experiment_config cfg = o.config.empty() ? experiment_config{} : experiment_config::load(o.config);
    cfg.kind = kind;
    if (o.seed) cfg.seed = *o.seed;
    const auto model = load_model(o.model);
    const auto tpl = prompt_template::builtin(cfg.template_id);
    const auto trials = load_trials(o.trials, model.vocab(), tpl);
    const auto result = run_experiment(cfg, model, trials, o.workers);
    export_results(result, o.out);

    if (result.calibration) {
        const auto & c = *result.calibration;
        std::cout << "n=" << c.n << " unparseable=" << c.unparseable << " ece=" << format_real(c.ece)
                  << " auroc=" << format_real(c.auroc) << " accuracy=" << format_real(c.accuracy) << '\n';
    }
    std::size_t aborted = 0;
    for (const auto & r : result.reports) aborted += r.aborted;
    std::cout << result.experiment << ": " << result.reports.size() << " cells, " << result.probes.size()
              << " probe rows, " << aborted << " aborted trials -> " << o.out << '\n';
    return 0;
}

} // namespace

int main(int argc, char ** argv) {
    CLI::App app{"vconf: confidence-circuit experiments"};
    app.require_subcommand(1);

    common_opts opts;
    const std::pair<const char *, experiment_kind> families[] = {
        {"calibrate", experiment_kind::calibrate}, {"steer", experiment_kind::steer},
        {"patch", experiment_kind::patch},         {"noise", experiment_kind::noise},
        {"swap", experiment_kind::swap},           {"block-attn", experiment_kind::block},
        {"probe", experiment_kind::probe}};
    std::vector<std::pair<CLI::App *, experiment_kind>> subs;
    for (const auto & [name, kind] : families) {
        auto * sub = app.add_subcommand(name, std::string("run the ") + name + " experiment");
        add_common(sub, opts);
        subs.emplace_back(sub, kind);
    }

    std::string toy_out = "planted";
    std::uint64_t toy_seed = 7;
    std::string toy_spec;
    auto * gen_toy = app.add_subcommand("gen-toy", "write the planted-circuit model");
    gen_toy->add_option("--out", toy_out, "weight directory");
    gen_toy->add_option("--seed", toy_seed);
    gen_toy->add_option("--config", toy_spec, "planted spec overrides (JSON)");

    std::string syn_model, syn_out = "trials.jsonl", syn_template = "minimal0_9";
    std::uint64_t syn_seed = 0;
    std::size_t syn_n = 500;
    planted_trial_options syn_opts;
    auto * gen_syn = app.add_subcommand("gen-synthetic", "write labelled trials for the planted model");
    gen_syn->add_option("--model", syn_model, "planted model directory (reads planted.json)");
    gen_syn->add_option("--out", syn_out, "output JSONL file");
    gen_syn->add_option("--seed", syn_seed);
    gen_syn->add_option("-n,--count", syn_n, "number of trials");
    gen_syn->add_option("--template", syn_template);
    gen_syn->add_option("--miscalibration", syn_opts.miscalibration);
    gen_syn->add_option("--correctness-noise", syn_opts.correctness_noise);

    std::string plot_in, plot_out = "plot_data.csv";
    auto * plots = app.add_subcommand("export-plots", "rebuild plot data from a trials.csv");
    plots->add_option("--trials", plot_in, "trials.csv from an experiment run")->required();
    plots->add_option("--out", plot_out, "output CSV");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError & e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        for (const auto & [sub, kind] : subs)
            if (sub->parsed()) return run(kind, opts);

        if (gen_toy->parsed()) {
            planted_spec spec;
            if (!toy_spec.empty()) {
                std::ifstream in(toy_spec);
                if (!in) throw error(error_kind::config, "cannot open " + toy_spec);
                spec = planted_spec::from_json(nlohmann::json::parse(in));
            }
            const auto planted = build_planted(spec, toy_seed);
            save_planted(planted, toy_out);
            std::cout << "planted model -> " << toy_out << " (margin " << format_real(planted.audit.clean_margin)
                      << ", max noise delta " << format_real(planted.audit.max_noise_delta) << ")\n";
            return 0;
        }
        if (gen_syn->parsed()) {
            planted_spec spec;
            if (!syn_model.empty()) {
                const auto side = std::filesystem::path(syn_model) / "planted.json";
                std::ifstream in(side);
                if (!in) throw error(error_kind::io, "cannot open " + side.string());
                spec = planted_spec::from_json(nlohmann::json::parse(in).at("spec"));
            }
            const auto trials =
                gen_planted_trials(spec, syn_n, syn_seed, syn_opts, prompt_template::builtin(syn_template));
            std::ofstream out(syn_out);
            if (!out) throw error(error_kind::io, "cannot write " + syn_out);
            write_trials(out, trials);
            std::cout << trials.size() << " trials -> " << syn_out << '\n';
            return 0;
        }
        if (plots->parsed()) {
            std::ifstream in(plot_in);
            if (!in) throw error(error_kind::io, "cannot open " + plot_in);
            const auto reports = read_trial_csv(in);
            std::ofstream out(plot_out);
            if (!out) throw error(error_kind::io, "cannot write " + plot_out);
            write_plot_data(out, reports);
            return 0;
        }
    } catch (const error & e) {
        std::cerr << e.what() << '\n';
        return exit_code_for(e.kind());
    } catch (const nlohmann::json::exception & e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
