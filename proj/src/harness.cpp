#include "vconf/harness.hpp"

#include "vconf/error.hpp"
#include "vconf/random.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <thread>

namespace vconf {

using nlohmann::json;

const char * to_string(experiment_kind k) {
    switch (k) {
    case experiment_kind::calibrate: return "calibrate";
    case experiment_kind::steer:     return "steer";
    case experiment_kind::patch:     return "patch";
    case experiment_kind::noise:     return "noise";
    case experiment_kind::swap:      return "swap";
    case experiment_kind::block:     return "block-attn";
    case experiment_kind::probe:     return "probe";
    }
    return "?";
}

experiment_kind parse_experiment_kind(std::string_view s) {
    if (s == "calibrate") return experiment_kind::calibrate;
    if (s == "steer") return experiment_kind::steer;
    if (s == "patch") return experiment_kind::patch;
    if (s == "noise") return experiment_kind::noise;
    if (s == "swap") return experiment_kind::swap;
    if (s == "block" || s == "block-attn") return experiment_kind::block;
    if (s == "probe") return experiment_kind::probe;
    throw error(error_kind::config, "unknown experiment \"" + std::string(s) + "\"");
}

namespace {

json edges_json(const std::vector<edge> & edges) {
    json out = json::array();
    for (const auto & e : edges) out.push_back({{"target", e.target.str()}, {"source", e.source.str()}});
    return out;
}

std::vector<edge> edges_from(const json & j) {
    std::vector<edge> out;
    for (const auto & e : j)
        out.push_back({position_ref::parse(e.at("target").get<std::string>()),
                       position_ref::parse(e.at("source").get<std::string>())});
    return out;
}

const char * point_name(hook_point p) { return p == hook_point::post_mlp ? "post_mlp" : "post_attention"; }

hook_point parse_point(const std::string & s) {
    if (s == "post_mlp") return hook_point::post_mlp;
    if (s == "post_attention") return hook_point::post_attention;
    throw error(error_kind::config, "unknown hook point \"" + s + "\"");
}

} // namespace

std::vector<block_group> default_block_groups() {
    auto e = [](const char * t, const char * s) { return edge{position_ref::parse(t), position_ref::parse(s)}; };
    return {{"CC->Q+A", {e("CC", "Q"), e("CC", "A")}, {}},
            {"CC->PANL", {e("CC", "PANL")}, {}},
            {"PANL->LAST_A", {e("PANL", "LAST_A")}, {}},
            {"CC->PANL_PLUS1", {e("CC", "PANL_PLUS1")}, {}}};
}

experiment_config experiment_config::from_json(const json & j) {
    experiment_config c;
    try {
        if (j.contains("experiment")) c.kind = parse_experiment_kind(j.at("experiment").get<std::string>());
        c.template_id = j.value("template", c.template_id);
        c.layers = j.value("layers", c.layers);
        if (j.contains("roles")) {
            c.roles.clear();
            for (const auto & r : j.at("roles")) c.roles.push_back(parse_role(r.get<std::string>()));
        }
        c.seed = j.value("seed", c.seed);
        if (j.contains("max_trials")) c.max_trials = j.at("max_trials").get<std::size_t>();
        if (j.contains("hook_point")) c.point = parse_point(j.at("hook_point").get<std::string>());
        c.high_classes = j.value("high_classes", c.high_classes);
        c.low_classes = j.value("low_classes", c.low_classes);
        c.n_high = j.value("n_high", c.n_high);
        c.n_low = j.value("n_low", c.n_low);
        c.replacement = j.value("replacement", c.replacement);
        c.alphas = j.value("alphas", c.alphas);
        c.base_fraction = j.value("base_fraction", c.base_fraction);
        c.directions = j.value("directions", c.directions);
        c.high_only = j.value("high_only", c.high_only);
        if (j.contains("conditions")) {
            c.conditions.clear();
            for (const auto & s : j.at("conditions")) c.conditions.push_back(parse_swap_condition(s.get<std::string>()));
        }
        c.q_bins = j.value("q_bins", c.q_bins);
        c.a_bins = j.value("a_bins", c.a_bins);
        c.pool_is_recipients = j.value("pool_is_recipients", c.pool_is_recipients);
        c.window = j.value("window", c.window);
        for (const auto & b : j.value("blocks", json::array())) {
            block_group g;
            g.name = b.at("name").get<std::string>();
            g.edges = edges_from(b.at("edges"));
            if (b.contains("preserved")) g.preserved = edges_from(b.at("preserved"));
            c.blocks.push_back(std::move(g));
        }
        c.k = j.value("k", c.k);
        c.lambda = j.value("lambda", c.lambda);
        c.targets = j.value("targets", c.targets);
        c.high_threshold = j.value("high_threshold", c.high_threshold);
    } catch (const json::exception & e) {
        throw error(error_kind::config, std::string("experiment config: ") + e.what());
    }
    for (const auto & d : c.directions)
        if (d != "high" && d != "low") throw error(error_kind::config, "steering direction must be high or low");
    for (const auto & t : c.targets)
        if (t != "high_confidence" && t != "correct" && t != "confidence")
            throw error(error_kind::config, "unknown probe target \"" + t + "\"");
    return c;
}

experiment_config experiment_config::load(const std::filesystem::path & path) {
    std::ifstream in(path);
    if (!in) throw error(error_kind::config, "cannot open config " + path.string());
    try {
        return from_json(json::parse(in));
    } catch (const json::parse_error & e) {
        throw error(error_kind::config, path.string() + ": " + e.what());
    }
}

json experiment_config::to_json() const {
    json roles_j = json::array();
    for (role r : roles) roles_j.push_back(vconf::to_string(r));
    json conds = json::array();
    for (auto c : conditions) conds.push_back(vconf::to_string(c));
    json blocks_j = json::array();
    for (const auto & b : blocks)
        blocks_j.push_back({{"name", b.name}, {"edges", edges_json(b.edges)}, {"preserved", edges_json(b.preserved)}});
    json j = {{"experiment", vconf::to_string(kind)},
              {"template", template_id},
              {"layers", layers},
              {"roles", roles_j},
              {"seed", seed},
              {"hook_point", point_name(point)},
              {"high_classes", high_classes},
              {"low_classes", low_classes},
              {"n_high", n_high},
              {"n_low", n_low},
              {"replacement", replacement},
              {"alphas", alphas},
              {"base_fraction", base_fraction},
              {"directions", directions},
              {"high_only", high_only},
              {"conditions", conds},
              {"q_bins", q_bins},
              {"a_bins", a_bins},
              {"pool_is_recipients", pool_is_recipients},
              {"window", window},
              {"blocks", blocks_j},
              {"k", k},
              {"lambda", lambda},
              {"targets", targets},
              {"high_threshold", high_threshold}};
    if (max_trials) j["max_trials"] = *max_trials;
    return j;
}

void experiment_config::resolve(const model_config & model) {
    if (layers.empty()) {
        layers.resize(model.n_layers);
        std::iota(layers.begin(), layers.end(), std::size_t{0});
    }
    for (std::size_t l : layers)
        if (l >= model.n_layers)
            throw error(error_kind::config, "layer " + std::to_string(l) + " exceeds model depth " +
                                                std::to_string(model.n_layers));
    (void)prompt_template::builtin(template_id);
    for (int c : high_classes)
        if (low_classes.count(c)) throw error(error_kind::config, "class " + std::to_string(c) + " is both high and low");
    if (k < 2) throw error(error_kind::config, "k must be at least 2");
}

// ---------------------------------------------------------------------------

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)> & f) {
    workers = std::max<std::size_t>(1, std::min(workers, n));
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) f(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    f(i);
                } catch (...) {
                    std::lock_guard lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                }
            }
        });
    }
    for (auto & t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
}

readout read_output(const model_bundle & model, const confidence_lexicon & lexicon, std::span<const token_id> prompt,
                    std::size_t max_new, const hook_set & hooks) {
    const auto r = greedy_decode_with_logits(model, prompt, max_new, hooks);
    readout out;
    out.tokens = r.tokens;
    out.text = model.vocab().decode(r.tokens);
    out.vocab_logits = r.step_logits.at(0);

    switch (lexicon.kind()) {
    case lexicon_kind::categorical:
        out.cls = lexicon.class_of_token(r.tokens.at(0));
        if (out.cls) out.confidence = class_to_confidence(lexicon, static_cast<int>(*out.cls));
        break;
    case lexicon_kind::numeric0_9: {
        const std::string & t = model.vocab().token_text(r.tokens.at(0));
        if (t.size() == 1 && t[0] >= '0' && t[0] <= '9') {
            out.cls = static_cast<std::size_t>(t[0] - '0');
            out.confidence = class_to_confidence(lexicon, t[0] - '0');
        }
        break;
    }
    case lexicon_kind::numeric0_100: {
        std::size_t i = out.text.find_first_not_of(' ');
        int value = 0;
        std::size_t digits = 0;
        while (i != std::string::npos && i < out.text.size() && digits < 3 && out.text[i] >= '0' && out.text[i] <= '9') {
            value = value * 10 + (out.text[i] - '0');
            ++digits;
            ++i;
        }
        if (digits > 0 && value <= 100) {
            out.cls = static_cast<std::size_t>(out.text[out.text.find_first_not_of(' ')] - '0');
            out.confidence = class_to_confidence(lexicon, value);
        }
        break;
    }
    }
    return out;
}

json calibration_report::to_json() const {
    return {{"n", n},
            {"unparseable", unparseable},
            {"ece", ece},
            {"auroc", auroc},
            {"accuracy", accuracy},
            {"mean_confidence", mean_confidence},
            {"histogram", histogram}};
}

namespace {

struct context {
    const experiment_config & cfg;
    const model_bundle & model;
    prompt_template tpl;
    confidence_lexicon lexicon;
    std::size_t workers;
};

context make_context(const experiment_config & cfg, const model_bundle & model, std::size_t workers) {
    auto tpl = prompt_template::builtin(cfg.template_id);
    auto lex = tpl.lexicon().resolved(model.vocab());
    return {cfg, model, std::move(tpl), std::move(lex), workers};
}

std::vector<readout> clean_outputs(const context & ctx, std::span<const trial> trials) {
    std::vector<readout> out(trials.size());
    parallel_for(trials.size(), ctx.workers, [&](std::size_t i) {
        out[i] = read_output(ctx.model, ctx.lexicon, trials[i].token_ids, ctx.tpl.max_new_tokens);
    });
    return out;
}

std::vector<activation_trace> capture_traces(const context & ctx, std::span<const trial> trials,
                                             const std::vector<std::size_t> & layers, bool embeddings) {
    capture_filter cap;
    cap.layers = std::set<std::size_t>(layers.begin(), layers.end());
    cap.point = ctx.cfg.point;
    cap.embeddings = embeddings;
    std::vector<activation_trace> out(trials.size());
    parallel_for(trials.size(), ctx.workers, [&](std::size_t i) { out[i] = forward(ctx.model, trials[i].token_ids, {}, cap); });
    return out;
}

std::vector<trial> sorted_by_id(std::vector<trial> v) {
    std::sort(v.begin(), v.end(), [](const trial & a, const trial & b) { return a.id < b.id; });
    return v;
}

// Test trials: not excluded, passing `keep`, id order, capped.
std::vector<trial> select_tests(std::span<const trial> trials, const std::set<std::string> & exclude,
                                const std::function<bool(const trial &)> & keep, const experiment_config & cfg) {
    std::vector<trial> out;
    for (const auto & t : trials)
        if (!exclude.count(t.id) && (!keep || keep(t))) out.push_back(t);
    out = sorted_by_id(std::move(out));
    if (cfg.max_trials && out.size() > *cfg.max_trials) out.resize(*cfg.max_trials);
    return out;
}

bool in_classes(const trial & t, const std::set<int> & classes) {
    const auto c = trial_class(t);
    return c && classes.count(*c);
}

trial_metrics compare(const trial & t, const readout & clean, const readout & inter, const confidence_lexicon & lex) {
    if (!clean.cls || !clean.confidence)
        throw error(error_kind::parse, "clean output \"" + clean.text + "\" is not a confidence report");
    const double ld_clean = logit_difference(class_logits(lex, clean.vocab_logits, *clean.cls));
    const double ld_inter = logit_difference(class_logits(lex, inter.vocab_logits, *clean.cls));
    trial_metrics m;
    m.trial_id = t.id;
    m.logit_diff_change = ld_inter - ld_clean;
    m.token_changed = inter.tokens.at(0) != clean.tokens.at(0);
    m.clean_confidence = *clean.confidence;
    m.intervened_confidence = inter.confidence;
    if (inter.confidence) m.confidence_change = *inter.confidence - *clean.confidence;
    return m;
}

struct cell_job {
    std::string condition;
    std::size_t layer = 0;
    std::string position;
    std::vector<std::size_t> members; // indices into the test list
    std::function<hook_set(std::size_t)> hooks;
};

void run_cells(const context & ctx, const std::string & experiment, const std::vector<trial> & tests,
               const std::vector<readout> & clean, std::vector<cell_job> & cells, experiment_result & result) {
    std::vector<std::size_t> offsets{0};
    for (const auto & c : cells) offsets.push_back(offsets.back() + c.members.size());
    struct slot {
        std::optional<trial_metrics> m;
        std::string failure;
    };
    std::vector<slot> slots(offsets.back());

    parallel_for(slots.size(), ctx.workers, [&](std::size_t flat) {
        const std::size_t c = static_cast<std::size_t>(std::upper_bound(offsets.begin(), offsets.end(), flat) - offsets.begin()) - 1;
        const std::size_t i = cells[c].members[flat - offsets[c]];
        try {
            const hook_set hooks = cells[c].hooks(i);
            const readout inter = read_output(ctx.model, ctx.lexicon, tests[i].token_ids, ctx.tpl.max_new_tokens, hooks);
            slots[flat].m = compare(tests[i], clean[i], inter, ctx.lexicon);
        } catch (const error & e) {
            slots[flat].failure = e.what();
        }
    });

    for (std::size_t c = 0; c < cells.size(); ++c) {
        metrics_report r;
        r.experiment = experiment;
        r.condition = cells[c].condition;
        r.layer = cells[c].layer;
        r.position = cells[c].position;
        for (std::size_t j = offsets[c]; j < offsets[c + 1]; ++j) {
            if (slots[j].m) {
                r.trials.push_back(*slots[j].m);
            } else {
                ++r.aborted;
                const auto & t = tests[cells[c].members[j - offsets[c]]];
                result.log.push_back(experiment + " trial=" + t.id + " layer=" + std::to_string(r.layer) +
                                     " role=" + r.position + " condition=" + r.condition + ": " + slots[j].failure);
            }
        }
        std::sort(r.trials.begin(), r.trials.end(),
                  [](const trial_metrics & a, const trial_metrics & b) { return a.trial_id < b.trial_id; });
        result.reports.push_back(std::move(r));
    }
}

std::vector<std::size_t> all_indices(std::size_t n) {
    std::vector<std::size_t> v(n);
    std::iota(v.begin(), v.end(), std::size_t{0});
    return v;
}

std::set<std::string> ids_of(const trial_partition & p) {
    std::set<std::string> ids;
    for (const auto & t : p.high) ids.insert(t.id);
    for (const auto & t : p.low) ids.insert(t.id);
    return ids;
}

std::vector<trial> joined(const trial_partition & p) {
    std::vector<trial> v = p.high;
    v.insert(v.end(), p.low.begin(), p.low.end());
    return v;
}

// ---------------------------------------------------------------------------

void run_steer(const context & ctx, std::span<const trial> trials, experiment_result & result) {
    const auto & cfg = ctx.cfg;
    const auto part = partition_trials(trials, cfg.high_classes, cfg.low_classes, cfg.n_high, cfg.n_low, cfg.seed,
                                       cfg.replacement);
    const auto high_traces = capture_traces(ctx, part.high, cfg.layers, false);
    const auto low_traces = capture_traces(ctx, part.low, cfg.layers, false);
    std::vector<trace_view> hv, lv;
    for (std::size_t i = 0; i < part.high.size(); ++i) hv.push_back({part.high[i].positions, high_traces[i]});
    for (std::size_t i = 0; i < part.low.size(); ++i) lv.push_back({part.low[i].positions, low_traces[i]});

    const auto tests = select_tests(trials, ids_of(part), nullptr, cfg);
    const auto clean = clean_outputs(ctx, tests);

    std::vector<cell_job> cells;
    for (std::size_t layer : cfg.layers) {
        for (role r : cfg.roles) {
            std::optional<steering_vector> sv;
            std::optional<error> why;
            try {
                sv = build_steering_vector(hv, lv, layer, r);
            } catch (const error & e) {
                why = e;
            }
            for (const auto & dir : cfg.directions) {
                for (double alpha : cfg.alphas) {
                    cell_job job;
                    job.condition = dir + ":" + format_real(alpha);
                    job.layer = layer;
                    job.position = to_string(r);
                    job.members = all_indices(tests.size());
                    job.hooks = [&, sv, why, dir, alpha](std::size_t i) {
                        if (!sv) throw *why;
                        steering_vector v = dir == "high" ? *sv : sv->negated();
                        v.alpha = alpha;
                        v.base_fraction = cfg.base_fraction;
                        auto hooks = apply_steering(v, tests[i].positions);
                        for (auto & e : hooks.residual_edits) e.point = cfg.point;
                        return hooks;
                    };
                    cells.push_back(std::move(job));
                }
            }
        }
    }
    run_cells(ctx, "steer", tests, clean, cells, result);
}

void run_patch(const context & ctx, std::span<const trial> trials, experiment_result & result) {
    const auto & cfg = ctx.cfg;
    const auto part = partition_trials(trials, cfg.high_classes, cfg.low_classes, cfg.n_high, cfg.n_low, cfg.seed,
                                       cfg.replacement);
    const auto cal = joined(part);
    const auto cal_traces = capture_traces(ctx, cal, {}, true);
    std::vector<bool> is_high(cal.size(), false);
    for (std::size_t i = 0; i < part.high.size(); ++i) is_high[i] = true;
    const auto means = compute_calibration_means(cal, cal_traces, {}, {}, true, &is_high);

    const auto tests = select_tests(
        trials, ids_of(part), [&](const trial & t) { return !cfg.high_only || in_classes(t, cfg.high_classes); }, cfg);
    std::set<std::string> test_ids;
    for (const auto & t : tests) test_ids.insert(t.id);
    means.check_disjoint(test_ids);

    const auto clean = clean_outputs(ctx, tests);
    const auto clean_traces = capture_traces(ctx, tests, cfg.layers, false);

    std::vector<cell_job> cells;
    cell_job corrupt;
    corrupt.condition = "corrupt";
    corrupt.position = "ANSWER";
    corrupt.members = all_indices(tests.size());
    corrupt.hooks = [&](std::size_t i) { return corrupt_answer_embeddings(tests[i], means); };
    cells.push_back(std::move(corrupt));
    for (std::size_t layer : cfg.layers) {
        for (role r : cfg.roles) {
            cell_job job;
            job.condition = "restore";
            job.layer = layer;
            job.position = to_string(r);
            job.members = all_indices(tests.size());
            job.hooks = [&, layer, r](std::size_t i) {
                return patch_position(corrupt_answer_embeddings(tests[i], means), clean_traces[i], layer,
                                      tests[i].positions.at(r), cfg.point);
            };
            cells.push_back(std::move(job));
        }
    }
    const std::size_t first = result.reports.size();
    run_cells(ctx, "patch", tests, clean, cells, result);

    const metrics_report & base = result.reports[first];
    for (std::size_t c = first + 1; c < result.reports.size(); ++c) {
        auto & r = result.reports[c];
        try {
            r.extras["recovery_logit"] =
                recovery(0.0, base.logit_diff_change().mean, r.logit_diff_change().mean);
        } catch (const error & e) {
            result.log.push_back("patch layer=" + std::to_string(r.layer) + " role=" + r.position + ": " + e.what());
        }
        try {
            r.extras["recovery_token"] = recovery_token(base.change_rate(), r.change_rate());
        } catch (const error & e) {
            result.log.push_back("patch layer=" + std::to_string(r.layer) + " role=" + r.position + ": " + e.what());
        }
    }
}

void run_noise(const context & ctx, std::span<const trial> trials, experiment_result & result) {
    const auto & cfg = ctx.cfg;
    const auto part = partition_trials(trials, cfg.high_classes, cfg.low_classes, cfg.n_high, cfg.n_low, cfg.seed,
                                       cfg.replacement);
    const auto cal = joined(part);
    const auto cal_traces = capture_traces(ctx, cal, cfg.layers, false);
    const auto means = compute_calibration_means(cal, cal_traces, cfg.layers, cfg.roles, false);
    double mean_level = 0.0;
    for (const auto & t : cal) mean_level += trial_class(t).value_or(0);
    mean_level /= static_cast<double>(cal.size());

    const auto tests = select_tests(trials, ids_of(part), nullptr, cfg);
    std::set<std::string> test_ids;
    for (const auto & t : tests) test_ids.insert(t.id);
    means.check_disjoint(test_ids);
    const auto clean = clean_outputs(ctx, tests);

    std::vector<cell_job> cells;
    for (std::size_t layer : cfg.layers) {
        for (role r : cfg.roles) {
            cell_job job;
            job.condition = "mean_ablate";
            job.layer = layer;
            job.position = to_string(r);
            job.members = all_indices(tests.size());
            job.hooks = [&, layer, r](std::size_t i) {
                return mean_ablate(means, layer, r, tests[i].positions, cfg.point);
            };
            cells.push_back(std::move(job));
        }
    }
    const std::size_t first = result.reports.size();
    run_cells(ctx, "noise", tests, clean, cells, result);
    for (std::size_t c = first; c < result.reports.size(); ++c)
        result.reports[c].extras["calibration_mean_level"] = mean_level;
}

void run_swap(const context & ctx, std::span<const trial> trials, experiment_result & result) {
    const auto & cfg = ctx.cfg;
    auto labelled = [&](const trial & t) { return in_classes(t, cfg.high_classes) || in_classes(t, cfg.low_classes); };
    const auto tests = select_tests(trials, {}, labelled, cfg);
    std::vector<trial> pool;
    if (cfg.pool_is_recipients) {
        pool = tests;
    } else {
        for (const auto & t : trials)
            if (labelled(t)) pool.push_back(t);
        pool = sorted_by_id(std::move(pool));
    }
    const auto clean = clean_outputs(ctx, tests);
    const auto pool_traces = capture_traces(ctx, pool, cfg.layers, false);
    std::map<std::string, std::size_t> pool_index;
    for (std::size_t i = 0; i < pool.size(); ++i) pool_index[pool[i].id] = i;

    std::vector<cell_job> cells;
    for (auto cond : cfg.conditions) {
        std::vector<std::size_t> members;
        std::vector<trial> recipients;
        for (std::size_t i = 0; i < tests.size(); ++i) {
            if (in_classes(tests[i], recipient_is_high(cond) ? cfg.high_classes : cfg.low_classes)) {
                members.push_back(i);
                recipients.push_back(tests[i]);
            }
        }
        std::vector<trial> donors;
        for (const auto & t : pool)
            if (in_classes(t, donor_is_high(cond) ? cfg.high_classes : cfg.low_classes)) donors.push_back(t);
        if (recipients.empty() || donors.empty()) {
            result.log.push_back(std::string("swap condition ") + to_string(cond) + ": no recipients or donors");
            continue;
        }
        donor_request req;
        req.n_q_bins = cfg.q_bins;
        req.n_a_bins = cfg.a_bins;
        req.seed = cfg.seed;
        req.condition = cond;
        const auto plans = match_donors(recipients, donors, req);
        std::map<std::size_t, swap_plan> plan_of;
        for (std::size_t j = 0; j < plans.size(); ++j) plan_of[members[j]] = plans[j];
        std::size_t self_pairs = 0;
        for (const auto & p : plans) self_pairs += p.donor_id == p.recipient_id ? 1 : 0;

        for (std::size_t layer : cfg.layers) {
            for (role r : cfg.roles) {
                cell_job job;
                job.condition = to_string(cond);
                job.layer = layer;
                job.position = to_string(r);
                job.members = members;
                job.hooks = [&, plan_of, layer, r](std::size_t i) {
                    swap_plan p = plan_of.at(i);
                    p.layer = layer;
                    p.position_role = r;
                    const std::size_t d = pool_index.at(p.donor_id);
                    return swap_activation(p, pool_traces[d], pool[d].positions, tests[i].positions, cfg.point);
                };
                cells.push_back(std::move(job));
            }
        }
        result.log.push_back(std::string("swap condition ") + to_string(cond) + ": " + std::to_string(plans.size()) +
                             " pairs, " + std::to_string(self_pairs) + " self-matched");
    }
    const std::size_t first = result.reports.size();
    run_cells(ctx, "swap", tests, clean, cells, result);
    for (std::size_t c = first; c < result.reports.size(); ++c) {
        auto & r = result.reports[c];
        double sum = 0.0;
        std::size_t n = 0;
        for (const auto & t : r.trials) {
            if (!t.confidence_change) continue;
            sum += std::abs(*t.confidence_change);
            ++n;
        }
        if (n > 0) r.extras["abs_confidence_change"] = sum / static_cast<double>(n);
    }
}

void run_block(const context & ctx, std::span<const trial> trials, experiment_result & result) {
    const auto & cfg = ctx.cfg;
    const auto tests = select_tests(trials, {}, nullptr, cfg);
    const auto clean = clean_outputs(ctx, tests);
    const auto groups = cfg.blocks.empty() ? default_block_groups() : cfg.blocks;
    const std::size_t n_layers = ctx.model.config().n_layers;

    std::vector<cell_job> cells;
    for (std::size_t center : cfg.layers) {
        for (const auto & g : groups) {
            cell_job job;
            job.condition = "window=" + std::to_string(cfg.window);
            job.layer = center;
            job.position = g.name;
            job.members = all_indices(tests.size());
            job.hooks = [&, g, center](std::size_t i) {
                return block_edges(g.edges, tests[i], center, cfg.window, n_layers, g.preserved);
            };
            cells.push_back(std::move(job));
        }
    }
    run_cells(ctx, "block-attn", tests, clean, cells, result);
}

void run_probe(const context & ctx, std::span<const trial> trials, experiment_result & result) {
    const auto & cfg = ctx.cfg;
    const auto tests = select_tests(trials, {}, nullptr, cfg);
    const auto clean = clean_outputs(ctx, tests);
    const auto traces = capture_traces(ctx, tests, cfg.layers, false);

    struct cell {
        std::size_t layer;
        role r;
        std::string target;
    };
    std::vector<cell> cells;
    for (std::size_t layer : cfg.layers)
        for (role r : cfg.roles)
            for (const auto & t : cfg.targets) cells.push_back({layer, r, t});

    std::vector<std::optional<probe_sweep_row>> rows(cells.size());
    std::vector<std::string> failures(cells.size());
    parallel_for(cells.size(), ctx.workers, [&](std::size_t c) {
        const auto & cl = cells[c];
        std::vector<std::size_t> use;
        real_vector y;
        for (std::size_t i = 0; i < tests.size(); ++i) {
            if (cl.target == "correct") {
                y.push_back(tests[i].correct ? 1.0 : 0.0);
            } else if (!clean[i].cls || !clean[i].confidence) {
                continue;
            } else if (cl.target == "high_confidence") {
                y.push_back(static_cast<int>(*clean[i].cls) >= cfg.high_threshold ? 1.0 : 0.0);
            } else {
                y.push_back(*clean[i].confidence);
            }
            use.push_back(i);
        }
        try {
            if (use.empty()) throw error(error_kind::insufficient_trials, "no usable trials");
            const std::size_t width = traces[use[0]].residual_at(cl.layer, tests[use[0]].positions.at(cl.r)).size();
            matrix x(use.size(), width);
            for (std::size_t row = 0; row < use.size(); ++row) {
                const auto & v = traces[use[row]].residual_at(cl.layer, tests[use[row]].positions.at(cl.r));
                std::copy(v.begin(), v.end(), x.row(row).begin());
            }
            cv_options o;
            o.k = cfg.k;
            o.lambda = cfg.lambda;
            o.seed = cfg.seed;
            const bool binary = cl.target != "confidence";
            o.fitter = binary ? probe_kind::logistic : probe_kind::ridge;
            o.metric = binary ? probe_metric::auroc : probe_metric::r2;
            dataset data{std::move(x), std::move(y),
                         "layer=" + std::to_string(cl.layer) + ",role=" + to_string(cl.r)};
            probe_sweep_row row;
            row.layer = cl.layer;
            row.position = to_string(cl.r);
            row.target = cl.target;
            row.metric = o.metric;
            row.n_trials = use.size();
            row.result = kfold_cv(data, o);
            rows[c] = std::move(row);
        } catch (const error & e) {
            failures[c] = e.what();
        }
    });
    for (std::size_t c = 0; c < cells.size(); ++c) {
        if (rows[c]) {
            result.probes.push_back(std::move(*rows[c]));
        } else {
            result.log.push_back("probe layer=" + std::to_string(cells[c].layer) + " role=" + to_string(cells[c].r) +
                                 " target=" + cells[c].target + ": " + failures[c]);
        }
    }
    result.k = cfg.k;
}

} // namespace

calibration_report calibrate(std::span<const trial> trials, const model_bundle & model, const prompt_template & tpl,
                             std::size_t workers) {
    const auto lex = tpl.lexicon().resolved(model.vocab());
    std::vector<trial> sorted(trials.begin(), trials.end());
    sorted = sorted_by_id(std::move(sorted));
    std::vector<readout> outs(sorted.size());
    parallel_for(sorted.size(), workers, [&](std::size_t i) {
        outs[i] = read_output(model, lex, sorted[i].token_ids, tpl.max_new_tokens);
    });

    calibration_report rep;
    rep.n = sorted.size();
    rep.histogram.assign(lex.size(), 0);
    real_vector conf;
    std::vector<bool> correct;
    std::size_t n_correct = 0;
    for (std::size_t i = 0; i < sorted.size(); ++i) {
        rep.rows.push_back({sorted[i].id, outs[i].cls, outs[i].confidence, sorted[i].correct});
        n_correct += sorted[i].correct ? 1 : 0;
        if (!outs[i].confidence) {
            ++rep.unparseable;
            continue;
        }
        if (outs[i].cls && *outs[i].cls < rep.histogram.size()) ++rep.histogram[*outs[i].cls];
        conf.push_back(*outs[i].confidence);
        correct.push_back(sorted[i].correct);
    }
    if (conf.empty()) throw error(error_kind::insufficient_trials, "no parseable confidence reports");
    rep.accuracy = static_cast<double>(n_correct) / static_cast<double>(rep.n);
    rep.mean_confidence = std::accumulate(conf.begin(), conf.end(), 0.0) / static_cast<double>(conf.size());
    rep.ece = ece(conf, correct);
    rep.auroc = auroc(conf, correct);
    return rep;
}

bool experiment_result::valid() const {
    return std::all_of(reports.begin(), reports.end(), [](const metrics_report & r) { return r.valid(); });
}

experiment_result run_experiment(const experiment_config & config, const model_bundle & model,
                                 std::span<const trial> trials, std::size_t workers) {
    experiment_config cfg = config;
    cfg.resolve(model.config());
    const context ctx = make_context(cfg, model, workers);
    experiment_result result;
    result.experiment = to_string(cfg.kind);
    switch (cfg.kind) {
    case experiment_kind::calibrate: result.calibration = calibrate(trials, model, ctx.tpl, workers); break;
    case experiment_kind::steer:     run_steer(ctx, trials, result); break;
    case experiment_kind::patch:     run_patch(ctx, trials, result); break;
    case experiment_kind::noise:     run_noise(ctx, trials, result); break;
    case experiment_kind::swap:      run_swap(ctx, trials, result); break;
    case experiment_kind::block:     run_block(ctx, trials, result); break;
    case experiment_kind::probe:     run_probe(ctx, trials, result); break;
    }
    std::stable_sort(result.reports.begin(), result.reports.end(), [](const metrics_report & a, const metrics_report & b) {
        return std::tie(a.experiment, a.layer, a.position, a.condition) <
               std::tie(b.experiment, b.layer, b.position, b.condition);
    });
    std::stable_sort(result.probes.begin(), result.probes.end(), [](const probe_sweep_row & a, const probe_sweep_row & b) {
        return std::tie(a.layer, a.position, a.target) < std::tie(b.layer, b.position, b.target);
    });
    return result;
}

void write_plot_data(std::ostream & out, const std::vector<metrics_report> & reports) {
    out << "experiment,series,position,layer,metric,value\n";
    for (const auto & r : reports) {
        const auto ld = r.logit_diff_change();
        const auto cc = r.confidence_change();
        std::vector<std::pair<std::string, double>> values = {{"change_rate", r.change_rate()},
                                                              {"logit_diff_change_mean", ld.mean},
                                                              {"logit_diff_change_se", ld.se},
                                                              {"confidence_change_mean", cc.mean},
                                                              {"confidence_change_se", cc.se}};
        for (const auto & [k, v] : r.extras) values.emplace_back(k, v);
        for (const auto & [k, v] : values)
            out << r.experiment << ',' << r.condition << ',' << r.position << ',' << r.layer << ',' << k << ','
                << format_real(v) << '\n';
    }
}

namespace {

std::ofstream open_out(const std::filesystem::path & path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw error(error_kind::io, "cannot write " + path.string());
    return out;
}

} // namespace

void export_results(const experiment_result & result, const std::filesystem::path & out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw error(error_kind::io, "cannot create " + out_dir.string() + ": " + ec.message());

    {
        auto out = open_out(out_dir / "trials.csv");
        write_trial_csv_header(out);
        for (const auto & r : result.reports) write_trial_csv_rows(out, r);
    }
    {
        json agg = json::array();
        for (const auto & r : result.reports) agg.push_back(aggregate_json(r));
        auto out = open_out(out_dir / "aggregate.json");
        out << agg.dump(2) << '\n';
    }
    {
        auto out = open_out(out_dir / "plot_data.csv");
        write_plot_data(out, result.reports);
    }
    if (!result.probes.empty()) {
        auto out = open_out(out_dir / "probe_sweep.csv");
        write_probe_sweep_csv(out, result.probes, result.k);
    }
    if (result.calibration) {
        auto out = open_out(out_dir / "calibration.json");
        out << result.calibration->to_json().dump(2) << '\n';
        auto rows = open_out(out_dir / "calibration.csv");
        rows << "trial_id,class,confidence,correct\n";
        for (const auto & r : result.calibration->rows)
            rows << r.trial_id << ',' << (r.cls ? std::to_string(*r.cls) : "") << ','
                 << (r.confidence ? format_real(*r.confidence) : "") << ',' << (r.correct ? 1 : 0) << '\n';
    }
    auto log = open_out(out_dir / "log.txt");
    for (const auto & line : result.log) log << line << '\n';
}

} // namespace vconf
