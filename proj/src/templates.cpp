#include "vconf/templates.hpp"

#include "vconf/error.hpp"
#include "vconf/random.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#ifndef VCONF_DATA_DIR
#define VCONF_DATA_DIR "data"
#endif

namespace vconf {

using nlohmann::json;

namespace {

constexpr std::string_view q_marker = "{question}";
constexpr std::string_view a_marker = "{answer}";

std::size_t find_once(const std::string & text, std::string_view what, const std::string & id) {
    const auto pos = text.find(what);
    if (pos == std::string::npos || text.find(what, pos + 1) != std::string::npos)
        throw error(error_kind::template_error,
                    "template " + id + ": " + std::string(what) + " must appear exactly once");
    return pos;
}

role_anchor anchor_from_json(const json & j) {
    role_anchor a;
    a.anchor = j.at("anchor").get<std::string>();
    a.offset = j.value("offset", 0);
    return a;
}

[[noreturn]] void template_fail(const prompt_template & tpl, const std::string & what) {
    throw error(error_kind::template_error, "template " + tpl.id + ": " + what);
}

// Index of the token starting exactly at byte `pos`.
std::size_t token_at(const std::vector<tokenizer::piece> & pieces, std::size_t pos, const prompt_template & tpl,
                     const std::string & what) {
    for (std::size_t i = 0; i < pieces.size(); ++i)
        if (pieces[i].begin == pos) return i;
    template_fail(tpl, what + " does not start on a token boundary");
}

// Token range covering bytes [b, e); both ends must be token boundaries.
index_span token_range(const std::vector<tokenizer::piece> & pieces, std::size_t b, std::size_t e,
                       const prompt_template & tpl, const std::string & what) {
    index_span span{pieces.size(), pieces.size()};
    bool begin_found = false;
    for (std::size_t i = 0; i < pieces.size(); ++i) {
        const auto & p = pieces[i];
        if ((p.begin < b && p.end > b) || (p.begin < e && p.end > e))
            template_fail(tpl, what + " merges with neighbouring template text");
        if (!begin_found && p.begin >= b) {
            span.begin = i;
            begin_found = true;
        }
        if (p.begin >= e) {
            span.end = i;
            return span;
        }
    }
    return span;
}

} // namespace

prompt_template prompt_template::from_json(const json & j, const std::filesystem::path & base_dir) {
    prompt_template t;
    try {
        t.id = j.at("id").get<std::string>();
        t.kind = parse_lexicon_kind(j.at("kind").get<std::string>());
        t.text = j.at("text").get<std::string>();
        t.max_new_tokens = j.value("max_new_tokens", std::size_t{1});
        if (j.contains("fcc")) t.fcc = anchor_from_json(j.at("fcc"));
        for (const auto & a : j.value("class_anchors", json::array())) t.class_anchors.push_back(anchor_from_json(a));
        if (j.contains("lexicon")) {
            const auto & lx = j.at("lexicon");
            t.lexicon_override = lx.is_string() ? confidence_lexicon::load(base_dir / lx.get<std::string>())
                                                : confidence_lexicon::from_json(lx);
        }
    } catch (const json::exception & e) {
        throw error(error_kind::config, std::string("template: ") + e.what());
    }
    const auto q = find_once(t.text, q_marker, t.id);
    const auto a = find_once(t.text, a_marker, t.id);
    if (a < q) throw error(error_kind::template_error, "template " + t.id + ": {question} must precede {answer}");
    if (t.max_new_tokens == 0) throw error(error_kind::config, "template " + t.id + ": max_new_tokens must be positive");
    if (t.kind == lexicon_kind::categorical && !t.lexicon_override)
        throw error(error_kind::config, "template " + t.id + ": categorical templates need a lexicon");
    return t;
}

prompt_template prompt_template::load(const std::filesystem::path & path) {
    std::ifstream in(path);
    if (!in) throw error(error_kind::io, "cannot open template " + path.string());
    try {
        return from_json(json::parse(in), path.parent_path());
    } catch (const json::parse_error & e) {
        throw error(error_kind::config, path.string() + ": " + e.what());
    }
}

prompt_template prompt_template::builtin(const std::string & id_or_path) {
    const std::filesystem::path direct(id_or_path);
    if (std::filesystem::is_regular_file(direct)) return load(direct);
    const auto path = std::filesystem::path(VCONF_DATA_DIR) / "templates" / (id_or_path + ".json");
    if (!std::filesystem::is_regular_file(path))
        throw error(error_kind::config, "unknown template \"" + id_or_path + "\"");
    return load(path);
}

confidence_lexicon prompt_template::lexicon() const {
    if (lexicon_override) return *lexicon_override;
    return confidence_lexicon::digits(kind);
}

rendered_prompt render_prompt(const prompt_template & tpl, const tokenizer & tok, const std::string & question,
                              const std::string & answer) {
    const std::size_t q_pos = find_once(tpl.text, q_marker, tpl.id);
    const std::size_t a_pos = find_once(tpl.text, a_marker, tpl.id);

    rendered_prompt out;
    out.text = tpl.text.substr(0, q_pos) + question +
               tpl.text.substr(q_pos + q_marker.size(), a_pos - q_pos - q_marker.size()) + answer +
               tpl.text.substr(a_pos + a_marker.size());
    const std::size_t q_begin = q_pos;
    const std::size_t q_end = q_begin + question.size();
    const std::size_t a_begin = a_pos - q_marker.size() + question.size();
    const std::size_t a_end = a_begin + answer.size();

    // template byte offset -> rendered byte offset
    auto map_offset = [&](std::size_t p, std::size_t len) {
        const bool in_q = p < q_pos + q_marker.size() && p + len > q_pos;
        const bool in_a = p < a_pos + a_marker.size() && p + len > a_pos;
        if (in_q || in_a) template_fail(tpl, "anchor overlaps a placeholder");
        std::size_t r = p;
        if (p >= q_pos + q_marker.size()) r = r - q_marker.size() + question.size();
        if (p >= a_pos + a_marker.size()) r = r - a_marker.size() + answer.size();
        return r;
    };

    const auto pieces = tok.encode_with_offsets(out.text);
    for (const auto & p : pieces) out.token_ids.push_back(p.id);
    const std::size_t n = pieces.size();

    out.question_span = token_range(pieces, q_begin, q_end, tpl, "question");
    out.answer_span = token_range(pieces, a_begin, a_end, tpl, "answer");
    if (out.answer_span.empty()) template_fail(tpl, "answer renders to no tokens");

    auto & pm = out.positions;
    pm.first_a = out.answer_span.begin;
    pm.last_a = out.answer_span.end - 1;
    pm.panl = out.answer_span.end;
    if (pm.panl >= n || tok.token_text(out.token_ids[pm.panl]) != "\n")
        template_fail(tpl, "role PANL: the token after the answer is not a standalone newline");
    pm.panl_plus1 = pm.panl + 1;
    pm.cc = n - 1;
    if (pm.panl_plus1 > pm.cc) template_fail(tpl, "role PANL_PLUS1 falls past the end of the prompt");
    if (tok.token_text(out.token_ids[pm.cc]).find(':') == std::string::npos)
        template_fail(tpl, "role CC: the final token is not a colon");

    auto resolve = [&](const role_anchor & a, const std::string & name) {
        const auto p = tpl.text.find(a.anchor);
        if (a.anchor.empty() || p == std::string::npos)
            template_fail(tpl, "role " + name + ": anchor \"" + a.anchor + "\" not found");
        const std::size_t idx = token_at(pieces, map_offset(p, a.anchor.size()), tpl, "role " + name + " anchor");
        const long long r = static_cast<long long>(idx) + a.offset;
        if (r < 0 || r >= static_cast<long long>(n)) template_fail(tpl, "role " + name + ": offset leaves the prompt");
        return static_cast<std::size_t>(r);
    };
    if (tpl.fcc) pm.fcc = resolve(*tpl.fcc, "FCC");
    for (std::size_t k = 0; k < tpl.class_anchors.size(); ++k)
        pm.class_tokens.push_back(resolve(tpl.class_anchors[k], "class " + std::to_string(k)));
    return out;
}

void render_trial(trial & t, const prompt_template & tpl, const tokenizer & tok) {
    auto r = render_prompt(tpl, tok, t.question, t.answer);
    t.token_ids = std::move(r.token_ids);
    t.question_span = r.question_span;
    t.answer_span = r.answer_span;
    t.positions = std::move(r.positions);
}

std::vector<trial> parse_trials(std::istream & in, const tokenizer & tok, const prompt_template & tpl,
                                const std::string & source) {
    std::vector<trial> out;
    std::set<std::string> questions;
    std::set<std::string> ids;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = source + ":" + std::to_string(line_no);
        trial t;
        try {
            const json j = json::parse(line);
            t.question = j.at("question").get<std::string>();
            t.answer = j.at("answer").get<std::string>();
            t.correct = j.at("correct").get<bool>();
            t.id = j.contains("id") ? j.at("id").get<std::string>() : "line" + std::to_string(line_no);
            if (j.contains("baseline_class")) t.baseline_class = j.at("baseline_class").get<int>();
            if (j.contains("baseline_confidence")) t.baseline_confidence = j.at("baseline_confidence").get<double>();
            if (j.contains("planted_level")) t.planted_level = j.at("planted_level").get<int>();
        } catch (const json::exception & e) {
            throw error(error_kind::parse, where + ": " + e.what());
        }
        if (!questions.insert(t.question).second) continue;
        if (!ids.insert(t.id).second) throw error(error_kind::parse, where + ": duplicate id \"" + t.id + "\"");
        try {
            render_trial(t, tpl, tok);
        } catch (const error & e) {
            throw error(e.kind(), where + ": " + e.what());
        }
        out.push_back(std::move(t));
    }
    return out;
}

std::vector<trial> load_trials(const std::filesystem::path & path, const tokenizer & tok,
                               const prompt_template & tpl) {
    std::ifstream in(path);
    if (!in) throw error(error_kind::io, "cannot open trials " + path.string());
    return parse_trials(in, tok, tpl, path.string());
}

void write_trials(std::ostream & out, const std::vector<trial> & trials) {
    for (const auto & t : trials) {
        json j = {{"id", t.id}, {"question", t.question}, {"answer", t.answer}, {"correct", t.correct}};
        if (t.baseline_class) j["baseline_class"] = *t.baseline_class;
        if (t.baseline_confidence) j["baseline_confidence"] = *t.baseline_confidence;
        if (t.planted_level) j["planted_level"] = *t.planted_level;
        out << j.dump() << '\n';
    }
}

std::optional<int> trial_class(const trial & t) {
    if (t.baseline_class) return t.baseline_class;
    return t.planted_level;
}

trial_partition partition_trials(std::span<const trial> trials, const std::set<int> & high_classes,
                                 const std::set<int> & low_classes, std::size_t n_high, std::size_t n_low,
                                 std::uint64_t seed, bool replacement) {
    for (int c : high_classes)
        if (low_classes.count(c)) throw error(error_kind::config, "class " + std::to_string(c) + " is both high and low");

    std::vector<std::size_t> hi;
    std::vector<std::size_t> lo;
    for (std::size_t i = 0; i < trials.size(); ++i) {
        const auto c = trial_class(trials[i]);
        if (!c) continue;
        if (high_classes.count(*c)) hi.push_back(i);
        else if (low_classes.count(*c)) lo.push_back(i);
    }

    seeded_rng rng(seed);
    auto draw = [&](std::vector<std::size_t> pool, std::size_t n, const char * side) {
        std::vector<trial> out;
        if (n == 0) return out;
        if (pool.size() < n && (!replacement || pool.empty()))
            throw error(error_kind::insufficient_trials, std::string(side) + " side: requested " + std::to_string(n) +
                                                             ", available " + std::to_string(pool.size()));
        if (pool.size() >= n) {
            rng.shuffle(pool);
            pool.resize(n);
            std::sort(pool.begin(), pool.end());
            for (std::size_t i : pool) out.push_back(trials[i]);
        } else {
            for (std::size_t i : pool) out.push_back(trials[i]);
            while (out.size() < n) out.push_back(trials[pool[rng.below(pool.size())]]);
        }
        return out;
    };
    trial_partition p;
    p.high = draw(hi, n_high, "high");
    p.low = draw(lo, n_low, "low");
    return p;
}

} // namespace vconf
