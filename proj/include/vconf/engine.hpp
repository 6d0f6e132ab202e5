#pragma once

#include "vconf/kernels.hpp"
#include "vconf/model.hpp"

#include <functional>
#include <map>
#include <optional>
#include <set>
#include <utility>
#include <vector>

namespace vconf {

// Where a residual edit lands inside a layer.
enum class hook_point { post_attention, post_mlp };

using residual_fn = std::function<real_vector(const real_vector &)>;

struct residual_edit {
    std::size_t layer = 0;
    std::size_t position = 0;
    residual_fn edit;
    hook_point point = hook_point::post_mlp;
};

struct embedding_edit {
    std::size_t position = 0;
    real_vector replacement;
};

// Blocks target->source attention in layers [layer_begin, layer_end), all heads.
struct attention_block {
    std::size_t target = 0;
    std::size_t source = 0;
    std::size_t layer_begin = 0;
    std::size_t layer_end = 0;

    auto operator<=>(const attention_block &) const = default;
};

struct hook_set {
    std::vector<residual_edit> residual_edits;
    std::vector<embedding_edit> embedding_edits;
    std::set<attention_block> attention_blocks;

    bool empty() const noexcept {
        return residual_edits.empty() && embedding_edits.empty() && attention_blocks.empty();
    }

    // Concatenation; edits of `other` run after ours at the same (layer, position).
    hook_set & append(const hook_set & other);
};

struct capture_filter {
    std::optional<std::set<std::size_t>> layers;    // nullopt = every layer
    std::optional<std::set<std::size_t>> positions; // nullopt = every position
    hook_point point = hook_point::post_mlp;
    bool attention = false;
    bool embeddings = false;
    bool all_logits = false; // otherwise only the last position

    static capture_filter everything();
    static capture_filter none();
};

struct activation_trace {
    std::size_t seq_len = 0;
    hook_point point = hook_point::post_mlp;
    std::map<std::pair<std::size_t, std::size_t>, real_vector> residual; // (layer, position)
    std::map<std::size_t, real_vector> embeddings;                       // layer-0 input
    std::map<std::pair<std::size_t, std::size_t>, matrix> attention;     // (layer, head), rows = targets
    std::map<std::size_t, real_vector> logits;                           // position -> vocab logits

    const real_vector & residual_at(std::size_t layer, std::size_t position) const;
    const real_vector & logits_at(std::size_t position) const;
    const real_vector & last_logits() const;

    bool operator==(const activation_trace &) const = default;
};

activation_trace forward(const model_bundle & model, std::span<const token_id> tokens, const hook_set & hooks = {},
                         const capture_filter & capture = capture_filter::none());

// Greedy decoding; hooks touch prompt positions only and persist through the key/value cache.
std::vector<token_id> greedy_decode(const model_bundle & model, std::span<const token_id> prompt, std::size_t max_new,
                                    const hook_set & hooks = {});

// Decode that also returns the logits each generated token was chosen from.
struct decode_result {
    std::vector<token_id> tokens;
    std::vector<real_vector> step_logits;
};
decode_result greedy_decode_with_logits(const model_bundle & model, std::span<const token_id> prompt,
                                        std::size_t max_new, const hook_set & hooks = {});

const matrix & attention_weights(const activation_trace & trace, std::size_t layer, std::size_t head);

// Length n-1: entry i-1 is log p(token i | tokens < i).
real_vector token_logprobs(const model_bundle & model, std::span<const token_id> tokens);

} // namespace vconf
