#pragma once

#include "vconf/model.hpp"

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace vconf {

// Named prompt positions.
enum class role { panl, panl_plus1, cc, fcc, last_a, first_a };

const char * to_string(role r);
role parse_role(std::string_view name);

// Half-open token index range.
struct index_span {
    std::size_t begin = 0;
    std::size_t end = 0;

    std::size_t size() const noexcept { return end - begin; }
    bool empty() const noexcept { return end <= begin; }
    bool contains(std::size_t i) const noexcept { return i >= begin && i < end; }
    bool operator==(const index_span &) const = default;
};

struct position_map {
    std::size_t panl = 0;
    std::size_t panl_plus1 = 0;
    std::size_t cc = 0;
    std::optional<std::size_t> fcc;
    std::size_t last_a = 0;
    std::size_t first_a = 0;
    std::vector<std::size_t> class_tokens; // first token of each class in the instruction block

    std::size_t at(role r) const;
    bool operator==(const position_map &) const = default;
};

struct trial {
    std::string id;
    std::string question;
    std::string answer;
    bool correct = false;
    // Class index (categorical) or numeric value, when known.
    std::optional<int> baseline_class;
    std::optional<double> baseline_confidence;
    std::vector<token_id> token_ids;
    index_span question_span;
    index_span answer_span;
    position_map positions;
    // Set for trials generated against the planted model.
    std::optional<int> planted_level;
};

} // namespace vconf
