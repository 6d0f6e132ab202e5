#include "vconf/toycircuit.hpp"

#include "vconf/engine.hpp"
#include "vconf/error.hpp"
#include "vconf/random.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

namespace vconf {

using nlohmann::json;
namespace pd = planted_dims;

namespace {

constexpr double bias_value = 9.0;
constexpr double sink_gain = 40.0;
constexpr double query_gain = 100.0;
constexpr double key_gain = 1000.0;
constexpr double recog_gain = 4.0;
constexpr double recog_threshold = 0.75; // fraction of a full identity needed to fire
constexpr double readout_gain = 100.0;
constexpr double readout_floor = 19.0;   // keeps digits above every other token
constexpr double readout_tilt = 2.0;     // favours low digits when nothing was retrieved
constexpr double second_digit_gain = 8.0;

const std::vector<std::string> & template_words() {
    static const std::vector<std::string> words = {
        "Give", "your", "confidence", "from", "to", "after", "Confidence", "Pick", "one", "No", "chance",
        "Really", "unlikely", "Chances", "are", "slight", "Unlikely", "Less", "than", "even", "Better",
        "Likely", "Very", "good", "Highly", "likely", "Almost", "certain"};
    return words;
}

std::string q_word(std::size_t i) { return "q" + std::to_string(i); }
std::string filler_word(std::size_t i) { return "a" + std::to_string(i); }
std::string final_word(int level) { return "f" + std::to_string(level); }

std::optional<int> final_word_level(const std::string & text) {
    const std::string s = !text.empty() && text[0] == ' ' ? text.substr(1) : text;
    if (s.size() == 2 && s[0] == 'f' && s[1] >= '0' && s[1] <= '9') return s[1] - '0';
    return std::nullopt;
}

model_config planted_config(const planted_spec & s, std::size_t vocab_size) {
    model_config c;
    c.n_layers = s.n_layers;
    c.d_model = s.d_model;
    c.n_heads = s.n_heads;
    c.d_head = s.d_head;
    c.d_mlp = s.d_mlp;
    c.vocab_size = vocab_size;
    c.norm_eps = 1e-6;
    c.rope_theta = 10000.0;
    c.rotary_dims = s.rotary_dims;
    c.activation = activation_kind::relu;
    return c;
}

// Noise is always drawn, then scaled, so halving the scale keeps the same pattern.
struct noise_source {
    seeded_rng rng;
    double scale;
    double operator()() { return scale * rng.normal(); }
};

bool is_noise_dim(std::size_t d) { return d >= pd::noise_begin; }
bool reads_noise(std::size_t d) { return d == pd::bias || d >= pd::noise_begin; }

model_bundle assemble(const planted_spec & s, const tokenizer & tok, const std::array<double, 10> & centers,
                      double weight_noise, double embedding_noise, std::uint64_t seed) {
    const auto cfg = planted_config(s, tok.size());
    const std::size_t d = s.d_model;
    const std::size_t inner = s.n_heads * s.d_head;
    const std::size_t v = tok.size();

    noise_source wn{seeded_rng(seeded_rng::derive(seed, 1)), weight_noise};
    noise_source en{seeded_rng(seeded_rng::derive(seed, 2)), embedding_noise};

    matrix embed(v, d);
    real_vector final_noise(d, 0.0);
    for (std::size_t k = pd::noise_begin; k < d; ++k) final_noise[k] = en();
    for (token_id id = 0; id < v; ++id) {
        auto row = embed.row(id);
        const std::string & text = tok.token_text(id);
        row[pd::bias] = bias_value;
        if (text == "<bos>") row[pd::bos] = 1.0;
        if (text == "\n") row[pd::newline] = 1.0;
        if (text == ":") row[pd::colon] = 1.0;
        if (text.size() == 1 && text[0] >= '0' && text[0] <= '9') row[pd::digit] = 1.0;
        if (const auto level = final_word_level(text)) {
            const double c = s.level_encoding[static_cast<std::size_t>(*level)];
            row[pd::conf] = c;
            row[pd::conf_comp] = std::sqrt(s.pair_radius * s.pair_radius - c * c);
            row[pd::identity + static_cast<std::size_t>(*level)] = 1.0;
            for (std::size_t k = pd::noise_begin; k < d; ++k) row[k] = final_noise[k];
        } else {
            for (std::size_t k = pd::noise_begin; k < d; ++k) row[k] = en();
        }
    }

    // full-strength final word: bias, the (conf, comp) pair and one identity unit
    const double final_rms = std::sqrt((bias_value * bias_value + s.pair_radius * s.pair_radius + 1.0) /
                                       static_cast<double>(d));

    std::vector<layer_weights> layers(s.n_layers);
    for (std::size_t l = 0; l < s.n_layers; ++l) {
        auto & w = layers[l];
        w.attn_norm.assign(d, 1.0);
        w.mlp_norm.assign(d, 1.0);
        w.wq = matrix(d, inner);
        w.wk = matrix(d, inner);
        w.wv = matrix(d, inner);
        w.wo = matrix(inner, d);
        w.w_up = matrix(d, s.d_mlp);
        w.w_down = matrix(s.d_mlp, d);

        const bool circuit_layer = l == s.cache_layer || l == s.retrieve_layer;
        for (std::size_t h = 0; h < s.n_heads; ++h) {
            const bool circuit = circuit_layer && h == 0;
            for (std::size_t j = 0; j < s.d_head; ++j) {
                const std::size_t col = h * s.d_head + j;
                for (std::size_t r = 0; r < d; ++r) {
                    const double q = wn(), k = wn(), val = wn(), o = wn();
                    if (circuit) continue;
                    if (reads_noise(r)) {
                        w.wq(r, col) = q;
                        w.wk(r, col) = k;
                    }
                    if (is_noise_dim(r)) w.wv(r, col) = val;
                    if (is_noise_dim(r)) w.wo(col, r) = o;
                }
            }
        }
        if (circuit_layer) {
            const std::size_t sink = s.rotary_dims;
            const std::size_t target = s.rotary_dims + 1;
            w.wq(pd::bias, sink) = sink_gain;
            w.wk(pd::bos, sink) = sink_gain;
            if (l == s.cache_layer) {
                w.wq(pd::newline, target) = query_gain;
                w.wk(pd::recog, target) = key_gain;
                w.wv(pd::conf, 0) = 1.0;
                w.wv(pd::conf_comp, 1) = 1.0;
                w.wv(pd::recog, 2) = 1.0;
                w.wo(0, pd::cached_conf) = 1.0;
                w.wo(1, pd::cached_comp) = 1.0;
                w.wo(2, pd::cached_flag) = 1.0;
            } else {
                w.wq(pd::colon, target) = query_gain;
                w.wk(pd::cached_flag, target) = key_gain;
                w.wv(pd::cached_conf, 0) = 1.0;
                w.wv(pd::cached_flag, 1) = 1.0;
                w.wo(0, pd::retr_conf) = 1.0;
                w.wo(1, pd::retr_flag) = 1.0;
            }
        }

        for (std::size_t n = 0; n < s.d_mlp; ++n) {
            const bool recognizer = l == 0 && n < 10;
            for (std::size_t r = 0; r < d; ++r) {
                const double up = wn(), down = wn();
                if (recognizer) continue;
                if (reads_noise(r)) w.w_up(r, n) = up;
                if (is_noise_dim(r)) w.w_down(n, r) = down;
            }
            if (recognizer) {
                // fires only when the identity exceeds recog_threshold of a full token, judged against the bias
                w.w_up(pd::identity + n, n) = recog_gain;
                w.w_up(pd::bias, n) = -recog_gain * recog_threshold / bias_value;
                w.w_down(n, pd::recog) = final_rms / (recog_gain * (1.0 - recog_threshold));
            }
        }
    }

    matrix unembed(d, v);
    for (token_id id = 0; id < v; ++id)
        for (std::size_t r = pd::noise_begin; r < d; ++r) unembed(r, id) = wn();
    // readout: 2 t_k RC - t_k^2 RF peaks at the level whose centre matches RC / RF, tilted toward low digits
    for (int k = 0; k < 10; ++k) {
        const token_id id = tok.id_of(std::to_string(k));
        const double t = centers[static_cast<std::size_t>(k)];
        unembed(pd::retr_conf, id) = readout_gain * 2.0 * t;
        unembed(pd::retr_flag, id) = -readout_gain * t * t;
        unembed(pd::bias, id) = readout_floor - readout_tilt * k;
    }
    unembed(pd::digit, tok.id_of("0")) = second_digit_gain;

    return round_to_f32(model_bundle(cfg, std::move(embed), std::move(layers), real_vector(d, 1.0),
                                     std::move(unembed), tok));
}

std::vector<token_id> reference_prompt(const tokenizer & tok, const prompt_template & tpl, const std::string & answer) {
    return render_prompt(tpl, tok, "q0 q1", answer).token_ids;
}

double top_gap(const real_vector & logits) {
    double a = neg_inf, b = neg_inf;
    for (double x : logits) {
        if (x > a) {
            b = a;
            a = x;
        } else if (x > b) {
            b = x;
        }
    }
    return a - b;
}

} // namespace

real_vector planted_spec::axis() const {
    if (!confidence_axis.empty()) return confidence_axis;
    real_vector a(d_model, 0.0);
    a[pd::conf] = 1.0;
    return a;
}

void planted_spec::validate() const {
    auto fail = [](const std::string & m) { throw error(error_kind::validation, "planted spec: " + m); };
    if (!(cache_layer < retrieve_layer && retrieve_layer < n_layers)) fail("need cache_layer < retrieve_layer < n_layers");
    if (cache_layer < 1) fail("cache_layer must be at least 1; layer 0 computes recognition");
    if (d_model <= pd::noise_begin) fail("d_model must exceed " + std::to_string(pd::noise_begin));
    if (n_heads < 1 || d_head < rotary_dims + 2 || d_head < 3) fail("d_head must leave two position-free dims");
    if (rotary_dims % 2 != 0) fail("rotary_dims must be even");
    if (d_mlp < 10) fail("d_mlp must be at least 10");
    if (n_question_words < 2 || n_filler_words < 1) fail("vocabulary too small");
    const real_vector a = axis();
    if (a.size() != d_model) fail("confidence_axis has the wrong width");
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] != (i == pd::conf ? 1.0 : 0.0)) fail("confidence_axis must be the unit vector on the confidence dim");
    const bool all_zero = std::all_of(level_encoding.begin(), level_encoding.end(), [](double c) { return c == 0.0; });
    for (std::size_t k = 0; k < 10; ++k) {
        if (!(std::abs(level_encoding[k]) < pair_radius)) fail("level_encoding must stay inside pair_radius");
        if (!all_zero && k > 0 && !(level_encoding[k] > level_encoding[k - 1]))
            fail("level_encoding must be strictly increasing");
    }
    if (weight_noise < 0 || embedding_noise < 0) fail("noise scales must be non-negative");
}

json planted_spec::to_json() const {
    return {{"n_layers", n_layers},
            {"d_model", d_model},
            {"n_heads", n_heads},
            {"d_head", d_head},
            {"d_mlp", d_mlp},
            {"rotary_dims", rotary_dims},
            {"cache_layer", cache_layer},
            {"retrieve_layer", retrieve_layer},
            {"confidence_axis", axis()},
            {"level_encoding", level_encoding},
            {"pair_radius", pair_radius},
            {"weight_noise", weight_noise},
            {"embedding_noise", embedding_noise},
            {"n_question_words", n_question_words},
            {"n_filler_words", n_filler_words}};
}

planted_spec planted_spec::from_json(const json & j) {
    planted_spec s;
    try {
        s.n_layers = j.value("n_layers", s.n_layers);
        s.d_model = j.value("d_model", s.d_model);
        s.n_heads = j.value("n_heads", s.n_heads);
        s.d_head = j.value("d_head", s.d_head);
        s.d_mlp = j.value("d_mlp", s.d_mlp);
        s.rotary_dims = j.value("rotary_dims", s.rotary_dims);
        s.cache_layer = j.value("cache_layer", s.cache_layer);
        s.retrieve_layer = j.value("retrieve_layer", s.retrieve_layer);
        if (j.contains("confidence_axis")) s.confidence_axis = j.at("confidence_axis").get<real_vector>();
        if (j.contains("level_encoding")) s.level_encoding = j.at("level_encoding").get<std::array<double, 10>>();
        s.pair_radius = j.value("pair_radius", s.pair_radius);
        s.weight_noise = j.value("weight_noise", s.weight_noise);
        s.embedding_noise = j.value("embedding_noise", s.embedding_noise);
        s.n_question_words = j.value("n_question_words", s.n_question_words);
        s.n_filler_words = j.value("n_filler_words", s.n_filler_words);
    } catch (const json::exception & e) {
        throw error(error_kind::config, std::string("planted spec: ") + e.what());
    }
    return s;
}

tokenizer planted_vocab(const planted_spec & spec) {
    std::vector<std::string> texts = {"<bos>", "\n", ":"};
    for (int k = 0; k < 10; ++k) texts.push_back(std::to_string(k));
    for (const char * t : {"Q:", "A:", "Conf", ",", ".", "?", " "}) texts.push_back(t);
    std::vector<std::string> words = template_words();
    for (std::size_t i = 0; i < spec.n_question_words; ++i) words.push_back(q_word(i));
    for (std::size_t i = 0; i < spec.n_filler_words; ++i) words.push_back(filler_word(i));
    for (int k = 0; k < 10; ++k) words.push_back(final_word(k));
    for (const auto & w : words) {
        texts.push_back(w);
        texts.push_back(" " + w);
    }
    std::map<std::string, token_id> vocab;
    for (const auto & t : texts) {
        if (vocab.count(t)) continue;
        const auto id = static_cast<token_id>(vocab.size());
        vocab.emplace(t, id);
    }
    return tokenizer(std::move(vocab));
}

int planted_model::decode_ratio(double ratio) const {
    // same scores as the unembedding rows of the digits, up to the shared norm factor
    int best = 0;
    double best_score = neg_inf;
    for (int k = 0; k < 10; ++k) {
        const double t = centers[static_cast<std::size_t>(k)];
        const double score = readout_gain * readout_flag * (2.0 * t * ratio - t * t) - readout_tilt * k * readout_bias;
        if (score > best_score) {
            best_score = score;
            best = k;
        }
    }
    return best;
}

json planted_model::sidecar() const {
    return {{"spec", spec.to_json()},
            {"seed", seed},
            {"centers", centers},
            {"readout_flag", readout_flag},
            {"readout_bias", readout_bias},
            {"audit",
             {{"clean_margin", audit.clean_margin},
              {"max_noise_delta", audit.max_noise_delta},
              {"weight_noise", audit.weight_noise},
              {"passed", audit.passed()}}},
            {"template", "minimal0_9"}};
}

planted_model build_planted(const planted_spec & spec, std::uint64_t seed) {
    spec.validate();
    const tokenizer tok = planted_vocab(spec);
    const auto tpl = prompt_template::builtin("minimal0_9");
    const std::size_t last_layer = spec.n_layers - 1;

    // readout centres from the circuit alone
    std::array<double, 10> centers{};
    double readout_flag = 0.0, readout_bias = 0.0;
    const model_bundle probe_model = assemble(spec, tok, centers, 0.0, 0.0, seed);
    for (int k = 0; k < 10; ++k) {
        const auto prompt = reference_prompt(tok, tpl, "a0 " + final_word(k));
        capture_filter cap;
        cap.layers = std::set<std::size_t>{last_layer};
        cap.positions = std::set<std::size_t>{prompt.size() - 1};
        const auto trace = forward(probe_model, prompt, {}, cap);
        const auto & x = trace.residual_at(last_layer, prompt.size() - 1);
        if (x[pd::retr_flag] <= 0.0) throw error(error_kind::validation, "planted circuit failed to retrieve");
        centers[static_cast<std::size_t>(k)] = x[pd::retr_conf] / x[pd::retr_flag];
        readout_flag = x[pd::retr_flag];
        readout_bias = x[pd::bias];
    }

    std::vector<std::vector<token_id>> audit_prompts;
    for (int k = 0; k < 10; ++k) {
        audit_prompts.push_back(reference_prompt(tok, tpl, final_word(k)));
        audit_prompts.push_back(render_prompt(tpl, tok, "q3 q2 q1", "a1 a2 " + final_word(k)).token_ids);
    }
    audit_prompts.push_back(reference_prompt(tok, tpl, "a0"));
    audit_prompts.push_back(reference_prompt(tok, tpl, "a1 a0"));

    planted_model out{spec, seed, assemble(spec, tok, centers, 0.0, 0.0, seed),
                      assemble(spec, tok, centers, 0.0, 0.0, seed), centers, {}, readout_flag, readout_bias};
    double wscale = spec.weight_noise;
    double escale = spec.embedding_noise;
    for (int attempt = 0; attempt < 30; ++attempt) {
        model_bundle noisy = assemble(spec, tok, centers, wscale, escale, seed);
        margin_audit audit;
        audit.clean_margin = std::numeric_limits<double>::infinity();
        audit.weight_noise = wscale;
        for (const auto & p : audit_prompts) {
            const auto clean = forward(out.noise_free, p).last_logits();
            const auto dirty = forward(noisy, p).last_logits();
            audit.clean_margin = std::min(audit.clean_margin, top_gap(clean));
            for (std::size_t i = 0; i < clean.size(); ++i)
                audit.max_noise_delta = std::max(audit.max_noise_delta, std::abs(dirty[i] - clean[i]));
        }
        if (audit.passed()) {
            out.model = std::move(noisy);
            out.audit = audit;
            out.spec.weight_noise = wscale;
            out.spec.embedding_noise = escale;
            return out;
        }
        wscale *= 0.5;
        escale *= 0.5;
    }
    throw error(error_kind::validation, "planted model: noise never fell below a tenth of the clean margin");
}

void save_planted(const planted_model & planted, const std::filesystem::path & dir) {
    save_model(planted.model, dir);
    std::ofstream out(dir / "planted.json");
    if (!out) throw error(error_kind::io, "cannot write " + (dir / "planted.json").string());
    out << planted.sidecar().dump(2) << '\n';
}

double planted_correct_probability(int level, const planted_trial_options & o) {
    const double mu = level / 9.0 + o.miscalibration;
    const double a = o.correctness_noise;
    if (a <= 0.0) return std::clamp(mu, 0.0, 1.0);
    // antiderivative of clamp(x, 0, 1)
    auto f = [](double x) { return x <= 0.0 ? 0.0 : x <= 1.0 ? 0.5 * x * x : 0.5 + (x - 1.0); };
    return (f(mu + a) - f(mu - a)) / (2.0 * a);
}

std::vector<trial> gen_planted_trials(const planted_spec & spec, std::size_t n, std::uint64_t seed,
                                      const planted_trial_options & options, const prompt_template & tpl) {
    if (n == 0) throw error(error_kind::validation, "gen_planted_trials needs n >= 1");
    if (options.levels.empty()) throw error(error_kind::validation, "no levels to draw from");
    for (int l : options.levels)
        if (l < 0 || l > 9) throw error(error_kind::validation, "levels must lie in 0..9");
    const tokenizer tok = planted_vocab(spec);
    seeded_rng rng(seed);
    std::set<std::string> questions;
    std::vector<trial> out;
    for (std::size_t i = 0; i < n; ++i) {
        trial t;
        const int level = options.levels[rng.below(options.levels.size())];
        do {
            const std::size_t words = 2 + rng.below(3);
            t.question.clear();
            for (std::size_t w = 0; w < words; ++w)
                t.question += (w ? " " : "") + q_word(rng.below(spec.n_question_words));
        } while (!questions.insert(t.question).second);
        const std::size_t fillers = rng.below(3);
        for (std::size_t w = 0; w < fillers; ++w) t.answer += filler_word(rng.below(spec.n_filler_words)) + " ";
        t.answer += final_word(level);
        const double jitter = (2.0 * rng.uniform() - 1.0) * options.correctness_noise;
        const double p = std::clamp(level / 9.0 + options.miscalibration + jitter, 0.0, 1.0);
        t.correct = rng.uniform() < p;
        char id[32];
        std::snprintf(id, sizeof id, "p%05zu", i);
        t.id = id;
        t.planted_level = level;
        render_trial(t, tpl, tok);
        out.push_back(std::move(t));
    }
    return out;
}

namespace {

double log_binom_pmf(std::size_t k, std::size_t n, double p) {
    if (p <= 0.0) return k == 0 ? 0.0 : neg_inf;
    if (p >= 1.0) return k == n ? 0.0 : neg_inf;
    const double kk = static_cast<double>(k), nn = static_cast<double>(n);
    return std::lgamma(nn + 1) - std::lgamma(kk + 1) - std::lgamma(nn - kk + 1) + kk * std::log(p) +
           (nn - kk) * std::log1p(-p);
}

std::map<int, double> level_weights(const planted_trial_options & o) {
    std::map<int, double> w;
    for (int l : o.levels) w[l] += 1.0 / static_cast<double>(o.levels.size());
    return w;
}

} // namespace

double expected_planted_ece(std::size_t n, const planted_trial_options & o) {
    const auto weights = level_weights(o);
    std::set<std::size_t> bins;
    for (const auto & [level, _] : weights) {
        const double c = level / 9.0;
        const std::size_t b = std::min<std::size_t>(static_cast<std::size_t>(std::floor(c * 10.0)), 9);
        if (!bins.insert(b).second) throw error(error_kind::oracle_gap, "two planted levels share an ECE bin");
    }
    // levels occupy distinct bins, so the expectation splits into a sum over levels
    double total = 0.0;
    for (const auto & [level, pi] : weights) {
        const double c = level / 9.0;
        const double p = planted_correct_probability(level, o);
        for (std::size_t m = 1; m <= n; ++m) {
            const double pm = std::exp(log_binom_pmf(m, n, pi));
            if (pm < 1e-300) continue;
            double inner = 0.0;
            for (std::size_t k = 0; k <= m; ++k) {
                const double pk = std::exp(log_binom_pmf(k, m, p));
                inner += pk * std::abs(static_cast<double>(k) - static_cast<double>(m) * c);
            }
            total += pm * inner / static_cast<double>(n);
        }
    }
    return total;
}

double analytic_planted_auroc(const planted_trial_options & o) {
    const auto weights = level_weights(o);
    double pos = 0.0, neg = 0.0, wins = 0.0;
    for (const auto & [a, pa] : weights) {
        const double wp = pa * planted_correct_probability(a, o);
        for (const auto & [b, pb] : weights) {
            const double wn = pb * (1.0 - planted_correct_probability(b, o));
            if (a > b) wins += wp * wn;
            if (a == b) wins += 0.5 * wp * wn;
        }
        pos += wp;
        neg += pa * (1.0 - planted_correct_probability(a, o));
    }
    if (pos == 0.0 || neg == 0.0) throw error(error_kind::degenerate_labels, "generator yields a single class");
    return wins / (pos * neg);
}

oracle_outcome oracle_expected(const planted_model & planted, const trial & t, const intervention_spec & spec,
                               const oracle_hints & hints) {
    if (!t.planted_level) throw error(error_kind::oracle_gap, "trial " + t.id + " has no planted level");
    const int level = *t.planted_level;
    const auto & s = planted.spec;
    const auto & pm = t.positions;

    enum class site { none, last_a, panl, cc };
    auto site_of = [&](std::size_t layer, std::size_t pos) {
        if (pos == pm.last_a && layer < s.cache_layer) return site::last_a;
        if (pos == pm.panl && layer >= s.cache_layer && layer < s.retrieve_layer) return site::panl;
        if (pos == pm.cc && layer >= s.retrieve_layer) return site::cc;
        return site::none;
    };
    const oracle_outcome unchanged{true, level};

    switch (spec.kind) {
    case intervention_kind::steer: {
        if (spec.alpha == 0.0) return unchanged;
        if (site_of(spec.layer, pm.at(spec.position_role)) == site::none) return unchanged;
        if (!hints.direction_cosine || !hints.site_flag || !spec.residual_norm)
            throw error(error_kind::oracle_gap, "steering oracle needs the direction cosine, site flag and residual norm");
        const double shift = spec.alpha * spec.base_fraction * *spec.residual_norm * *hints.direction_cosine;
        const double ratio = planted.centers[static_cast<std::size_t>(level)] + shift / *hints.site_flag;
        const int out = planted.decode_ratio(ratio);
        return {out == level, out};
    }
    case intervention_kind::patch: {
        const bool restored = site_of(spec.layer, pm.at(spec.position_role)) != site::none;
        return {false, restored ? level : 0};
    }
    case intervention_kind::noise: {
        if (site_of(spec.layer, pm.at(spec.position_role)) == site::none) return unchanged;
        if (!spec.calibration_mean_level) throw error(error_kind::oracle_gap, "noising oracle needs the calibration mean level");
        const double m = std::clamp(*spec.calibration_mean_level, 0.0, 9.0);
        const auto lo = static_cast<std::size_t>(std::floor(m));
        const std::size_t hi = std::min<std::size_t>(lo + 1, 9);
        const double ratio = planted.centers[lo] + (m - static_cast<double>(lo)) * (planted.centers[hi] - planted.centers[lo]);
        const int out = planted.decode_ratio(ratio);
        return {out == level, out};
    }
    case intervention_kind::swap: {
        if (site_of(spec.layer, pm.at(spec.position_role)) == site::none) return unchanged;
        if (!spec.donor_level) throw error(error_kind::oracle_gap, "swap oracle needs the donor level");
        return {*spec.donor_level == level, *spec.donor_level};
    }
    case intervention_kind::block: {
        const auto window = centered_window(spec.center_layer, spec.window, s.n_layers);
        auto pairs = expand_edges(spec.edges, t);
        for (const auto & p : expand_edges(spec.preserved, t)) pairs.erase(p);
        const bool cuts_cache = window.begin <= s.cache_layer && s.cache_layer < window.end &&
                                pairs.count({pm.panl, pm.last_a});
        const bool cuts_retrieve = window.begin <= s.retrieve_layer && s.retrieve_layer < window.end &&
                                   pairs.count({pm.cc, pm.panl});
        if (cuts_cache || cuts_retrieve) return {level == 0, 0};
        return unchanged;
    }
    }
    throw error(error_kind::oracle_gap, "unhandled intervention kind");
}

} // namespace vconf
