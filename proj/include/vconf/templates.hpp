#pragma once

#include "vconf/metrics.hpp"
#include "vconf/model.hpp"
#include "vconf/trial.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace vconf {

// A role located by a literal substring of the template text plus a token offset from it.
struct role_anchor {
    std::string anchor;
    int offset = 0;
};

// Prompt template. `text` holds {question} and {answer} exactly once each, question first.
// PANL, PANL+1, CC, FIRST_A and LAST_A follow from the answer placeholder and the end of the text;
// the newline after {answer} must tokenize on its own.
struct prompt_template {
    std::string id;
    lexicon_kind kind = lexicon_kind::numeric0_9;
    std::string text;
    std::size_t max_new_tokens = 1;
    std::optional<role_anchor> fcc;
    std::vector<role_anchor> class_anchors;
    std::optional<confidence_lexicon> lexicon_override; // categorical templates carry their classes

    static prompt_template from_json(const nlohmann::json & j, const std::filesystem::path & base_dir = {});
    static prompt_template load(const std::filesystem::path & path);
    // Looks up data/templates/<id>.json; an existing file path is also accepted.
    static prompt_template builtin(const std::string & id_or_path);

    confidence_lexicon lexicon() const;
};

struct rendered_prompt {
    std::string text;
    std::vector<token_id> token_ids;
    index_span question_span;
    index_span answer_span;
    position_map positions;
};

rendered_prompt render_prompt(const prompt_template & tpl, const tokenizer & tok, const std::string & question,
                              const std::string & answer);

// Renders a trial's prompt in place.
void render_trial(trial & t, const prompt_template & tpl, const tokenizer & tok);

// Line-delimited JSON: question, answer, correct, and optional id, baseline_class, baseline_confidence,
// planted_level. Blank lines are skipped; later duplicates of a question are dropped.
std::vector<trial> load_trials(const std::filesystem::path & path, const tokenizer & tok,
                               const prompt_template & tpl);
std::vector<trial> parse_trials(std::istream & in, const tokenizer & tok, const prompt_template & tpl,
                                const std::string & source = "<stream>");
void write_trials(std::ostream & out, const std::vector<trial> & trials);

// Class used for partitioning: baseline_class, else planted_level.
std::optional<int> trial_class(const trial & t);

struct trial_partition {
    std::vector<trial> high;
    std::vector<trial> low;
};

// Seeded draw without replacement; with `replacement`, a short side is filled by sampling with replacement.
trial_partition partition_trials(std::span<const trial> trials, const std::set<int> & high_classes,
                                 const std::set<int> & low_classes, std::size_t n_high, std::size_t n_low,
                                 std::uint64_t seed, bool replacement = false);

} // namespace vconf
