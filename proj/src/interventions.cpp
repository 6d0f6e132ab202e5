#include "vconf/interventions.hpp"

#include "vconf/error.hpp"
#include "vconf/random.hpp"

#include <algorithm>
#include <cmath>

namespace vconf {

using nlohmann::json;

// ---------------------------------------------------------------------------
// steering

steering_vector steering_vector::negated() const {
    steering_vector out = *this;
    for (double & x : out.direction) x = -x;
    std::swap(out.n_high, out.n_low);
    return out;
}

namespace {

real_vector mean_at(std::span<const trace_view> views, std::size_t layer, role r) {
    real_vector sum;
    for (const auto & v : views) {
        const real_vector & x = v.trace.residual_at(layer, v.positions.at(r));
        if (sum.empty()) sum.assign(x.size(), 0.0);
        if (x.size() != sum.size()) throw error(error_kind::shape, "traces disagree on d_model");
        for (std::size_t i = 0; i < x.size(); ++i) sum[i] += x[i];
    }
    for (double & s : sum) s /= static_cast<double>(views.size());
    return sum;
}

} // namespace

steering_vector build_steering_vector(std::span<const trace_view> high, std::span<const trace_view> low,
                                      std::size_t layer, role r) {
    if (high.empty() || low.empty()) throw error(error_kind::validation, "steering needs non-empty high and low sets");
    const real_vector mh = mean_at(high, layer, r);
    const real_vector ml = mean_at(low, layer, r);
    if (mh.size() != ml.size()) throw error(error_kind::shape, "high and low traces disagree on d_model");
    steering_vector out;
    out.layer = layer;
    out.position_role = r;
    out.direction.resize(mh.size());
    for (std::size_t i = 0; i < mh.size(); ++i) out.direction[i] = mh[i] - ml[i];
    out.n_high = high.size();
    out.n_low = low.size();
    return out;
}

hook_set apply_steering(const steering_vector & spec, const position_map & positions,
                        std::optional<double> base_residual_norm) {
    if (!(spec.base_fraction > 0.0 && spec.base_fraction <= 1.0))
        throw error(error_kind::validation, "base_fraction must lie in (0, 1]");
    hook_set hooks;
    if (spec.alpha == 0.0) return hooks;
    const double dir_norm = kernels::norm(spec.direction);
    if (dir_norm == 0.0) throw error(error_kind::degenerate_direction, "zero steering direction with nonzero alpha");

    residual_edit e;
    e.layer = spec.layer;
    e.position = positions.at(spec.position_role);
    e.edit = [direction = spec.direction, dir_norm, alpha = spec.alpha, fraction = spec.base_fraction,
              base_residual_norm](const real_vector & r) {
        const double r_norm = base_residual_norm ? *base_residual_norm : kernels::norm(r);
        const double k = alpha * fraction * r_norm / dir_norm;
        real_vector out = r;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += k * direction[i];
        return out;
    };
    hooks.residual_edits.push_back(std::move(e));
    return hooks;
}

// ---------------------------------------------------------------------------
// calibration means

const real_vector & calibration_means::at(std::size_t layer, role r) const {
    auto it = residual.find({layer, r});
    if (it == residual.end()) {
        throw error(error_kind::coverage, std::string("no calibration mean for layer ") + std::to_string(layer) +
                                              ", role " + to_string(r));
    }
    return it->second;
}

void calibration_means::check_disjoint(const std::set<std::string> & test_ids) const {
    for (const auto & id : test_ids) {
        if (source_trial_ids.count(id))
            throw error(error_kind::validation, "calibration set shares trial \"" + id + "\" with the test set");
    }
}

calibration_means compute_calibration_means(std::span<const trial> trials, std::span<const activation_trace> traces,
                                            const std::vector<std::size_t> & layers, const std::vector<role> & roles,
                                            bool answer_positions, const std::vector<bool> * is_high) {
    if (trials.empty()) throw error(error_kind::validation, "calibration set is empty");
    if (trials.size() != traces.size()) throw error(error_kind::alignment, "trials and traces differ in count");

    calibration_means out;
    for (std::size_t layer : layers) {
        for (role r : roles) {
            real_vector sum;
            for (std::size_t i = 0; i < trials.size(); ++i) {
                const real_vector & x = traces[i].residual_at(layer, trials[i].positions.at(r));
                if (sum.empty()) sum.assign(x.size(), 0.0);
                for (std::size_t d = 0; d < x.size(); ++d) sum[d] += x[d];
            }
            for (double & s : sum) s /= static_cast<double>(trials.size());
            out.residual[{layer, r}] = std::move(sum);
        }
    }

    if (answer_positions) {
        std::vector<real_vector> sums;
        std::vector<std::size_t> counts;
        for (std::size_t i = 0; i < trials.size(); ++i) {
            const auto & span = trials[i].answer_span;
            for (std::size_t j = 0; j < span.size(); ++j) {
                auto it = traces[i].embeddings.find(span.begin + j);
                if (it == traces[i].embeddings.end()) {
                    throw error(error_kind::missing_capture, "trial \"" + trials[i].id +
                                                                 "\" has no captured embedding at answer position " +
                                                                 std::to_string(j));
                }
                if (sums.size() <= j) {
                    sums.emplace_back(it->second.size(), 0.0);
                    counts.push_back(0);
                }
                for (std::size_t d = 0; d < it->second.size(); ++d) sums[j][d] += it->second[d];
                ++counts[j];
            }
        }
        for (std::size_t j = 0; j < sums.size(); ++j)
            for (double & s : sums[j]) s /= static_cast<double>(counts[j]);
        out.answer_embeddings = std::move(sums);
    }

    for (std::size_t i = 0; i < trials.size(); ++i) {
        out.source_trial_ids.insert(trials[i].id);
        if (is_high) ((*is_high)[i] ? out.n_high : out.n_low) += 1;
    }
    return out;
}

hook_set corrupt_answer_embeddings(const trial & t, const calibration_means & means) {
    if (t.answer_span.empty()) throw error(error_kind::validation, "trial \"" + t.id + "\" has an empty answer span");
    hook_set hooks;
    for (std::size_t j = 0; j < t.answer_span.size(); ++j) {
        if (j >= means.answer_embeddings.size()) {
            throw error(error_kind::coverage, "no calibration mean for answer position " + std::to_string(j) +
                                                  " of trial \"" + t.id + "\"");
        }
        hooks.embedding_edits.push_back({t.answer_span.begin + j, means.answer_embeddings[j]});
    }
    return hooks;
}

namespace {

residual_edit overwrite(std::size_t layer, std::size_t position, real_vector value, hook_point point) {
    residual_edit e;
    e.layer = layer;
    e.position = position;
    e.point = point;
    e.edit = [value = std::move(value)](const real_vector &) { return value; };
    return e;
}

} // namespace

hook_set patch_position(const hook_set & corrupt_hooks, const activation_trace & clean_trace, std::size_t layer,
                        std::size_t position, hook_point point) {
    if (clean_trace.point != point)
        throw error(error_kind::missing_capture, "clean trace was captured at a different hook point");
    hook_set hooks = corrupt_hooks;
    hooks.residual_edits.push_back(overwrite(layer, position, clean_trace.residual_at(layer, position), point));
    return hooks;
}

hook_set mean_ablate(const calibration_means & means, std::size_t layer, role r, const position_map & positions,
                     hook_point point) {
    hook_set hooks;
    hooks.residual_edits.push_back(overwrite(layer, positions.at(r), means.at(layer, r), point));
    return hooks;
}

// ---------------------------------------------------------------------------
// swaps

const char * to_string(swap_condition c) {
    switch (c) {
    case swap_condition::high_to_high: return "H->H";
    case swap_condition::high_to_low:  return "H->L";
    case swap_condition::low_to_high:  return "L->H";
    case swap_condition::low_to_low:   return "L->L";
    }
    return "?";
}

swap_condition parse_swap_condition(std::string_view s) {
    if (s == "H->H") return swap_condition::high_to_high;
    if (s == "H->L") return swap_condition::high_to_low;
    if (s == "L->H") return swap_condition::low_to_high;
    if (s == "L->L") return swap_condition::low_to_low;
    throw error(error_kind::config, "unknown swap condition \"" + std::string(s) + "\"");
}

bool donor_is_high(swap_condition c) {
    return c == swap_condition::high_to_high || c == swap_condition::high_to_low;
}

bool recipient_is_high(swap_condition c) {
    return c == swap_condition::high_to_high || c == swap_condition::low_to_high;
}

std::size_t quantile_bin(const std::vector<std::size_t> & values, std::size_t n_bins, std::size_t value) {
    if (n_bins == 0) throw error(error_kind::validation, "bin count must be at least 1");
    if (values.empty()) return 0;
    std::vector<std::size_t> sorted = values;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    std::size_t bin = 0;
    for (std::size_t i = 1; i < n_bins; ++i) {
        // empirical quantile i/n_bins (inverse-CDF definition)
        const std::size_t rank = (i * n + n_bins - 1) / n_bins; // ceil(i*n/n_bins)
        const std::size_t cut = sorted[std::max<std::size_t>(rank, 1) - 1];
        if (cut < value) ++bin;
    }
    return bin;
}

std::vector<swap_plan> match_donors(std::span<const trial> recipients, std::span<const trial> pool,
                                    const donor_request & request) {
    if (pool.empty()) throw error(error_kind::validation, "donor pool is empty");
    if (request.n_q_bins == 0 || request.n_a_bins == 0) throw error(error_kind::validation, "bin counts must be >= 1");

    std::vector<std::size_t> q_lengths;
    std::vector<std::size_t> a_lengths;
    for (const auto * set : {&recipients, &pool}) {
        for (const auto & t : *set) {
            q_lengths.push_back(t.question_span.size());
            a_lengths.push_back(t.answer_span.size());
        }
    }
    auto q_bin = [&](const trial & t) { return quantile_bin(q_lengths, request.n_q_bins, t.question_span.size()); };
    auto a_bin = [&](const trial & t) { return quantile_bin(a_lengths, request.n_a_bins, t.answer_span.size()); };

    // cell -> pool indices, ascending
    std::map<std::pair<std::size_t, std::size_t>, std::vector<std::size_t>> cells;
    for (std::size_t i = 0; i < pool.size(); ++i) cells[{q_bin(pool[i]), a_bin(pool[i])}].push_back(i);

    const bool with_replacement = pool.size() < recipients.size();
    seeded_rng rng(request.seed);
    std::vector<swap_plan> plans;
    plans.reserve(recipients.size());
    for (const auto & r : recipients) {
        const std::size_t rq = q_bin(r);
        const std::size_t ra = a_bin(r);
        // nearest non-empty cell by L1 bin distance; ties to the smaller (q, a) bin
        const std::vector<std::size_t> * best = nullptr;
        std::pair<std::size_t, std::size_t> best_cell{};
        std::size_t best_dist = 0;
        for (auto & [cell, members] : cells) {
            if (members.empty()) continue;
            const std::size_t dist = (cell.first > rq ? cell.first - rq : rq - cell.first) +
                                     (cell.second > ra ? cell.second - ra : ra - cell.second);
            if (!best || dist < best_dist) {
                best = &members;
                best_cell = cell;
                best_dist = dist;
            }
        }
        auto & members = cells[best_cell];
        const auto k = static_cast<std::size_t>(rng.below(members.size()));
        const std::size_t donor = members[k];
        if (!with_replacement) members.erase(members.begin() + static_cast<std::ptrdiff_t>(k));

        swap_plan plan;
        plan.recipient_id = r.id;
        plan.donor_id = pool[donor].id;
        plan.condition = request.condition;
        plan.layer = request.layer;
        plan.position_role = request.position_role;
        plan.q_bin_match = best_cell.first == rq;
        plan.a_bin_match = best_cell.second == ra;
        plans.push_back(std::move(plan));
    }
    return plans;
}

hook_set swap_activation(const swap_plan & plan, const activation_trace & donor_trace,
                         const position_map & donor_positions, const position_map & recipient_positions,
                         hook_point point) {
    if (donor_trace.point != point)
        throw error(error_kind::missing_capture, "donor trace was captured at a different hook point");
    const real_vector & donor = donor_trace.residual_at(plan.layer, donor_positions.at(plan.position_role));
    hook_set hooks;
    hooks.residual_edits.push_back(overwrite(plan.layer, recipient_positions.at(plan.position_role), donor, point));
    return hooks;
}

// ---------------------------------------------------------------------------
// attention knockout

position_ref position_ref::parse(std::string_view s) {
    position_ref p;
    if (s == "Q") p.what = kind::question;
    else if (s == "A") p.what = kind::answer;
    else if (s == "ALL") p.what = kind::all;
    else p.position_role = parse_role(s);
    return p;
}

std::string position_ref::str() const {
    switch (what) {
    case kind::question: return "Q";
    case kind::answer:   return "A";
    case kind::all:      return "ALL";
    case kind::single:   return to_string(position_role);
    }
    return "?";
}

layer_window centered_window(std::size_t center_layer, std::size_t window, std::size_t n_layers) {
    if (window < 1) throw error(error_kind::validation, "attention window must be at least 1 layer");
    const long long begin = static_cast<long long>(center_layer) - static_cast<long long>(window / 2);
    const long long end = begin + static_cast<long long>(window);
    const long long lo = std::max<long long>(begin, 0);
    const long long hi = std::min<long long>(end, static_cast<long long>(n_layers));
    if (lo >= hi) {
        throw error(error_kind::validation, "window of " + std::to_string(window) + " layers centered at " +
                                                std::to_string(center_layer) + " covers no valid layer");
    }
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

namespace {

std::vector<std::size_t> resolve(const position_ref & ref, const trial & t) {
    std::vector<std::size_t> out;
    switch (ref.what) {
    case position_ref::kind::single:
        out.push_back(t.positions.at(ref.position_role));
        break;
    case position_ref::kind::question:
        for (std::size_t i = t.question_span.begin; i < t.question_span.end; ++i) out.push_back(i);
        break;
    case position_ref::kind::answer:
        for (std::size_t i = t.answer_span.begin; i < t.answer_span.end; ++i) out.push_back(i);
        break;
    case position_ref::kind::all:
        for (std::size_t i = 0; i < t.token_ids.size(); ++i) out.push_back(i);
        break;
    }
    return out;
}

} // namespace

std::set<std::pair<std::size_t, std::size_t>> expand_edges(const std::vector<edge> & edges, const trial & t) {
    std::set<std::pair<std::size_t, std::size_t>> pairs;
    for (const auto & e : edges) {
        const auto targets = resolve(e.target, t);
        const auto sources = resolve(e.source, t);
        const bool all_targets = e.target.what == position_ref::kind::all;
        const bool all_sources = e.source.what == position_ref::kind::all;
        for (std::size_t target : targets) {
            for (std::size_t source : sources) {
                // ALL means every other position on the reachable side of the edge
                if (all_targets && target <= source) continue;
                if (all_sources && source >= target) continue;
                pairs.insert({target, source});
            }
        }
    }
    return pairs;
}

hook_set block_edges(const std::vector<edge> & edges, const trial & t, std::size_t center_layer, std::size_t window,
                     std::size_t n_layers, const std::vector<edge> & preserved) {
    const layer_window w = centered_window(center_layer, window, n_layers);
    auto pairs = expand_edges(edges, t);
    for (const auto & p : expand_edges(preserved, t)) pairs.erase(p);
    if (pairs.empty()) throw error(error_kind::validation, "attention edges expand to no position pairs");
    hook_set hooks;
    for (const auto & [target, source] : pairs) hooks.attention_blocks.insert({target, source, w.begin, w.end});
    return hooks;
}

// ---------------------------------------------------------------------------
// serialization

const char * to_string(intervention_kind k) {
    switch (k) {
    case intervention_kind::steer: return "steer";
    case intervention_kind::patch: return "patch";
    case intervention_kind::noise: return "noise";
    case intervention_kind::swap:  return "swap";
    case intervention_kind::block: return "block";
    }
    return "?";
}

intervention_kind parse_intervention_kind(std::string_view s) {
    if (s == "steer") return intervention_kind::steer;
    if (s == "patch") return intervention_kind::patch;
    if (s == "noise") return intervention_kind::noise;
    if (s == "swap") return intervention_kind::swap;
    if (s == "block") return intervention_kind::block;
    throw error(error_kind::config, "unknown intervention kind \"" + std::string(s) + "\"");
}

namespace {

json edges_to_json(const std::vector<edge> & edges) {
    json out = json::array();
    for (const auto & e : edges) out.push_back({{"target", e.target.str()}, {"source", e.source.str()}});
    return out;
}

std::vector<edge> edges_from_json(const json & j) {
    std::vector<edge> out;
    for (const auto & e : j) {
        out.push_back({position_ref::parse(e.at("target").get<std::string>()),
                       position_ref::parse(e.at("source").get<std::string>())});
    }
    return out;
}

} // namespace

json to_json(const intervention_spec & s) {
    json j{{"kind", to_string(s.kind)}, {"layer", s.layer}, {"role", to_string(s.position_role)}, {"seed", s.seed}};
    switch (s.kind) {
    case intervention_kind::steer:
        j["alpha"] = s.alpha;
        j["base_fraction"] = s.base_fraction;
        if (s.steer_sign) j["sign"] = *s.steer_sign;
        if (s.residual_norm) j["residual_norm"] = *s.residual_norm;
        break;
    case intervention_kind::patch:
    case intervention_kind::noise:
        if (s.calibration_mean_level) j["calibration_mean_level"] = *s.calibration_mean_level;
        break;
    case intervention_kind::swap:
        if (s.donor_id) j["donor_id"] = *s.donor_id;
        if (s.donor_level) j["donor_level"] = *s.donor_level;
        if (s.condition) j["condition"] = to_string(*s.condition);
        break;
    case intervention_kind::block:
        j["center_layer"] = s.center_layer;
        j["window"] = s.window;
        j["edges"] = edges_to_json(s.edges);
        if (!s.preserved.empty()) j["preserved"] = edges_to_json(s.preserved);
        break;
    }
    return j;
}

intervention_spec intervention_from_json(const json & j) {
    try {
        intervention_spec s;
        s.kind = parse_intervention_kind(j.at("kind").get<std::string>());
        s.layer = j.value("layer", std::size_t{0});
        s.position_role = parse_role(j.value("role", std::string("PANL")));
        s.seed = j.value("seed", std::uint64_t{0});
        s.alpha = j.value("alpha", 0.0);
        s.base_fraction = j.value("base_fraction", 0.03);
        if (j.contains("sign")) s.steer_sign = j.at("sign").get<int>();
        if (j.contains("residual_norm")) s.residual_norm = j.at("residual_norm").get<double>();
        if (j.contains("calibration_mean_level")) s.calibration_mean_level = j.at("calibration_mean_level").get<double>();
        if (j.contains("donor_id")) s.donor_id = j.at("donor_id").get<std::string>();
        if (j.contains("donor_level")) s.donor_level = j.at("donor_level").get<int>();
        if (j.contains("condition")) s.condition = parse_swap_condition(j.at("condition").get<std::string>());
        s.center_layer = j.value("center_layer", std::size_t{0});
        s.window = j.value("window", std::size_t{1});
        if (j.contains("edges")) s.edges = edges_from_json(j.at("edges"));
        if (j.contains("preserved")) s.preserved = edges_from_json(j.at("preserved"));
        return s;
    } catch (const json::exception & e) {
        throw error(error_kind::config, std::string("intervention spec: ") + e.what());
    }
}

} // namespace vconf
