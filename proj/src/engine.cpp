#include "vconf/engine.hpp"

#include "vconf/error.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace vconf {

hook_set & hook_set::append(const hook_set & other) {
    residual_edits.insert(residual_edits.end(), other.residual_edits.begin(), other.residual_edits.end());
    embedding_edits.insert(embedding_edits.end(), other.embedding_edits.begin(), other.embedding_edits.end());
    attention_blocks.insert(other.attention_blocks.begin(), other.attention_blocks.end());
    return *this;
}

capture_filter capture_filter::everything() {
    capture_filter f;
    f.attention = true;
    f.embeddings = true;
    f.all_logits = true;
    return f;
}

capture_filter capture_filter::none() {
    capture_filter f;
    f.layers = std::set<std::size_t>{};
    f.positions = std::set<std::size_t>{};
    return f;
}

const real_vector & activation_trace::residual_at(std::size_t layer, std::size_t position) const {
    auto it = residual.find({layer, position});
    if (it == residual.end()) {
        throw error(error_kind::missing_capture, "residual at layer " + std::to_string(layer) + ", position " +
                                                     std::to_string(position) + " was not captured");
    }
    return it->second;
}

const real_vector & activation_trace::logits_at(std::size_t position) const {
    auto it = logits.find(position);
    if (it == logits.end())
        throw error(error_kind::missing_capture, "logits at position " + std::to_string(position) + " were not captured");
    return it->second;
}

const real_vector & activation_trace::last_logits() const { return logits_at(seq_len - 1); }

const matrix & attention_weights(const activation_trace & trace, std::size_t layer, std::size_t head) {
    auto it = trace.attention.find({layer, head});
    if (it == trace.attention.end()) {
        throw error(error_kind::missing_capture, "attention for layer " + std::to_string(layer) + ", head " +
                                                     std::to_string(head) + " was not captured");
    }
    return it->second;
}

namespace {

double activate(activation_kind kind, double x) {
    switch (kind) {
    case activation_kind::relu: return x > 0.0 ? x : 0.0;
    case activation_kind::silu: return x / (1.0 + std::exp(-x));
    case activation_kind::gelu: {
        // tanh approximation
        constexpr double c = 0.7978845608028654; // sqrt(2/pi)
        return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
    }
    }
    return x;
}

void apply_rope(std::span<double> head_vec, std::size_t position, std::size_t rotary_dims, double theta) {
    for (std::size_t i = 0; i + 1 < rotary_dims; i += 2) {
        const double freq = std::pow(theta, -static_cast<double>(i) / static_cast<double>(rotary_dims));
        const double angle = static_cast<double>(position) * freq;
        const double c = std::cos(angle);
        const double s = std::sin(angle);
        const double a = head_vec[i];
        const double b = head_vec[i + 1];
        head_vec[i] = a * c - b * s;
        head_vec[i + 1] = a * s + b * c;
    }
}

// Post-RoPE keys and values for every processed position, per layer.
struct kv_cache {
    std::vector<std::vector<real_vector>> keys;
    std::vector<std::vector<real_vector>> values;
};

void validate_hooks(const model_config & cfg, const hook_set & hooks, std::size_t editable_len) {
    for (const auto & e : hooks.residual_edits) {
        if (e.layer >= cfg.n_layers)
            throw error(error_kind::validation, "residual edit layer " + std::to_string(e.layer) + " out of range");
        if (e.position >= editable_len) {
            throw error(error_kind::validation, "residual edit position " + std::to_string(e.position) +
                                                    " outside the prompt of length " + std::to_string(editable_len));
        }
        if (!e.edit) throw error(error_kind::validation, "residual edit without a function");
    }
    for (const auto & e : hooks.embedding_edits) {
        if (e.position >= editable_len) {
            throw error(error_kind::validation, "embedding edit position " + std::to_string(e.position) +
                                                    " outside the prompt of length " + std::to_string(editable_len));
        }
        if (e.replacement.size() != cfg.d_model) throw error(error_kind::shape, "embedding edit has wrong length");
    }
    for (const auto & b : hooks.attention_blocks) {
        if (b.target >= editable_len || b.source >= editable_len)
            throw error(error_kind::validation, "attention block position outside the prompt");
        if (b.layer_begin >= b.layer_end || b.layer_end > cfg.n_layers)
            throw error(error_kind::validation, "attention block layer range is empty or out of range");
    }
}

void validate_tokens(const model_config & cfg, std::span<const token_id> tokens) {
    if (tokens.empty()) throw error(error_kind::validation, "empty token sequence");
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] >= cfg.vocab_size) {
            throw error(error_kind::validation, "token id " + std::to_string(tokens[i]) + " at position " +
                                                    std::to_string(i) + " exceeds vocabulary");
        }
    }
}

bool wants(const std::optional<std::set<std::size_t>> & filter, std::size_t v) {
    return !filter || filter->count(v) > 0;
}

void apply_edits(const hook_set & hooks, std::size_t layer, std::size_t position, hook_point point,
                 real_vector & x) {
    for (const auto & e : hooks.residual_edits) {
        if (e.layer != layer || e.position != position || e.point != point) continue;
        real_vector edited = e.edit(x);
        if (edited.size() != x.size()) throw error(error_kind::shape, "residual edit changed vector length");
        x = std::move(edited);
    }
}

// Runs positions [start, start + tokens.size()) given a cache holding all earlier positions.
// Hooks and blocks are interpreted in absolute positions.
void run_positions(const model_bundle & model, kv_cache & cache, std::span<const token_id> tokens, std::size_t start,
                   const hook_set & hooks, const capture_filter & capture, activation_trace * trace,
                   std::vector<real_vector> * logits_out) {
    const auto & cfg = model.config();
    const std::size_t m = tokens.size();
    const std::size_t inner = cfg.n_heads * cfg.d_head;
    const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_head));

    std::vector<real_vector> x(m);
    for (std::size_t i = 0; i < m; ++i) {
        const auto row = model.embedding().row(tokens[i]);
        x[i].assign(row.begin(), row.end());
    }
    for (const auto & e : hooks.embedding_edits) {
        if (e.position >= start && e.position < start + m) x[e.position - start] = e.replacement;
    }
    if (trace && capture.embeddings) {
        for (std::size_t i = 0; i < m; ++i)
            if (wants(capture.positions, start + i)) trace->embeddings[start + i] = x[i];
    }

    if (cache.keys.empty()) {
        cache.keys.resize(cfg.n_layers);
        cache.values.resize(cfg.n_layers);
    }

    for (std::size_t layer = 0; layer < cfg.n_layers; ++layer) {
        const auto & w = model.layer(layer);

        std::vector<real_vector> queries(m);
        for (std::size_t i = 0; i < m; ++i) {
            const std::size_t pos = start + i;
            const real_vector h = kernels::rms_norm(x[i], w.attn_norm, cfg.norm_eps);
            queries[i] = kernels::vecmat(h, w.wq);
            real_vector k = kernels::vecmat(h, w.wk);
            for (std::size_t head = 0; head < cfg.n_heads; ++head) {
                apply_rope(std::span<double>(queries[i]).subspan(head * cfg.d_head, cfg.d_head), pos, cfg.rotary_dims,
                           cfg.rope_theta);
                apply_rope(std::span<double>(k).subspan(head * cfg.d_head, cfg.d_head), pos, cfg.rotary_dims,
                           cfg.rope_theta);
            }
            cache.keys[layer].push_back(std::move(k));
            cache.values[layer].push_back(kernels::vecmat(h, w.wv));
        }

        const bool capture_attn = trace && capture.attention && wants(capture.layers, layer);
        const std::size_t total = start + m;
        if (capture_attn) {
            for (std::size_t head = 0; head < cfg.n_heads; ++head) {
                auto & mat = trace->attention[{layer, head}];
                if (mat.rows() != total) mat = matrix(total, total);
            }
        }

        for (std::size_t i = 0; i < m; ++i) {
            const std::size_t t = start + i;
            real_vector mixed(inner, 0.0);
            real_vector scores(t + 1);
            for (std::size_t head = 0; head < cfg.n_heads; ++head) {
                const std::size_t off = head * cfg.d_head;
                const std::span<const double> q(queries[i].data() + off, cfg.d_head);
                for (std::size_t s = 0; s <= t; ++s) {
                    const std::span<const double> k(cache.keys[layer][s].data() + off, cfg.d_head);
                    scores[s] = kernels::dot(q, k) * scale;
                }
                for (const auto & b : hooks.attention_blocks) {
                    if (b.target == t && b.source <= t && layer >= b.layer_begin && layer < b.layer_end)
                        scores[b.source] = neg_inf;
                }
                real_vector weights;
                try {
                    weights = kernels::softmax(scores);
                } catch (const error & e) {
                    if (e.kind() != error_kind::degenerate_row) throw;
                    throw error(error_kind::degenerate_row, "every attention source of position " + std::to_string(t) +
                                                                " is blocked at layer " + std::to_string(layer));
                }
                for (std::size_t s = 0; s <= t; ++s) {
                    const double a = weights[s];
                    if (a == 0.0) continue;
                    const auto & v = cache.values[layer][s];
                    for (std::size_t d = 0; d < cfg.d_head; ++d) mixed[off + d] += a * v[off + d];
                }
                if (capture_attn) {
                    auto & mat = trace->attention[{layer, head}];
                    for (std::size_t s = 0; s <= t; ++s) mat(t, s) = weights[s];
                }
            }
            const real_vector attn_out = kernels::vecmat(mixed, w.wo);
            for (std::size_t d = 0; d < cfg.d_model; ++d) x[i][d] += attn_out[d];
        }

        for (std::size_t i = 0; i < m; ++i) {
            const std::size_t pos = start + i;
            apply_edits(hooks, layer, pos, hook_point::post_attention, x[i]);
            if (trace && capture.point == hook_point::post_attention && wants(capture.layers, layer) &&
                wants(capture.positions, pos))
                trace->residual[{layer, pos}] = x[i];

            const real_vector h = kernels::rms_norm(x[i], w.mlp_norm, cfg.norm_eps);
            real_vector hidden = kernels::vecmat(h, w.w_up);
            for (double & v : hidden) v = activate(cfg.activation, v);
            const real_vector mlp_out = kernels::vecmat(hidden, w.w_down);
            for (std::size_t d = 0; d < cfg.d_model; ++d) x[i][d] += mlp_out[d];

            apply_edits(hooks, layer, pos, hook_point::post_mlp, x[i]);
            if (trace && capture.point == hook_point::post_mlp && wants(capture.layers, layer) &&
                wants(capture.positions, pos))
                trace->residual[{layer, pos}] = x[i];
        }
    }

    const std::size_t last = start + m - 1;
    for (std::size_t i = 0; i < m; ++i) {
        const std::size_t pos = start + i;
        const bool keep_trace = trace && (capture.all_logits || pos == last);
        const bool keep_out = logits_out && pos == last;
        if (!keep_trace && !keep_out) continue;
        const real_vector h = kernels::rms_norm(x[i], model.final_norm(), cfg.norm_eps);
        real_vector logits = kernels::vecmat(h, model.unembedding());
        if (keep_out) logits_out->push_back(logits);
        if (keep_trace) trace->logits[pos] = std::move(logits);
    }
}

} // namespace

activation_trace forward(const model_bundle & model, std::span<const token_id> tokens, const hook_set & hooks,
                         const capture_filter & capture) {
    validate_tokens(model.config(), tokens);
    validate_hooks(model.config(), hooks, tokens.size());
    activation_trace trace;
    trace.seq_len = tokens.size();
    trace.point = capture.point;
    kv_cache cache;
    run_positions(model, cache, tokens, 0, hooks, capture, &trace, nullptr);
    return trace;
}

decode_result greedy_decode_with_logits(const model_bundle & model, std::span<const token_id> prompt,
                                        std::size_t max_new, const hook_set & hooks) {
    if (max_new < 1) throw error(error_kind::validation, "max_new must be at least 1");
    validate_tokens(model.config(), prompt);
    validate_hooks(model.config(), hooks, prompt.size());

    decode_result result;
    kv_cache cache;
    run_positions(model, cache, prompt, 0, hooks, capture_filter::none(), nullptr, &result.step_logits);
    std::size_t next_pos = prompt.size();
    for (std::size_t step = 0; step < max_new; ++step) {
        const token_id next = static_cast<token_id>(kernels::argmax(result.step_logits.back()));
        result.tokens.push_back(next);
        if (step + 1 == max_new) break;
        const token_id one[1] = {next};
        run_positions(model, cache, one, next_pos, hooks, capture_filter::none(), nullptr, &result.step_logits);
        ++next_pos;
    }
    return result;
}

std::vector<token_id> greedy_decode(const model_bundle & model, std::span<const token_id> prompt, std::size_t max_new,
                                    const hook_set & hooks) {
    return greedy_decode_with_logits(model, prompt, max_new, hooks).tokens;
}

real_vector token_logprobs(const model_bundle & model, std::span<const token_id> tokens) {
    if (tokens.size() < 2) throw error(error_kind::validation, "token_logprobs needs at least two tokens");
    capture_filter capture = capture_filter::none();
    capture.all_logits = true;
    const activation_trace trace = forward(model, tokens, {}, capture);
    real_vector out(tokens.size() - 1);
    for (std::size_t i = 1; i < tokens.size(); ++i) {
        const real_vector lp = kernels::log_softmax(trace.logits_at(i - 1));
        out[i - 1] = lp[tokens[i]];
    }
    return out;
}

} // namespace vconf
