#pragma once

#include "vconf/kernels.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace vconf {

using token_id = std::uint32_t;

enum class activation_kind { gelu, relu, silu };

struct model_config {
    std::size_t n_layers = 0;
    std::size_t d_model = 0;
    std::size_t n_heads = 0;
    std::size_t d_head = 0;
    std::size_t d_mlp = 0;
    std::size_t vocab_size = 0;
    double norm_eps = 1e-6;
    double rope_theta = 10000.0;
    // Leading dims of each head that receive rotary encoding; the rest are position-free.
    std::size_t rotary_dims = 0;
    activation_kind activation = activation_kind::gelu;
};

// Greedy longest-match tokenizer over a fixed vocabulary.
class tokenizer {
public:
    tokenizer() = default;
    explicit tokenizer(std::map<std::string, token_id> vocab);

    struct piece {
        token_id id;
        std::size_t begin; // byte offset in the source text
        std::size_t end;
    };

    std::vector<piece> encode_with_offsets(std::string_view text) const;
    std::vector<token_id> encode(std::string_view text) const;
    std::string decode(std::span<const token_id> ids) const;
    const std::string & token_text(token_id id) const;
    token_id id_of(std::string_view token) const;
    bool contains(std::string_view token) const;

    std::size_t size() const noexcept { return id_to_text_.size(); }
    const std::map<std::string, token_id> & vocab() const noexcept { return vocab_; }

private:
    std::map<std::string, token_id> vocab_;
    std::vector<std::string> id_to_text_;
    std::size_t max_len_ = 0;
};

struct layer_weights {
    real_vector attn_norm;   // d_model
    matrix wq;               // d_model x (n_heads*d_head)
    matrix wk;
    matrix wv;
    matrix wo;               // (n_heads*d_head) x d_model
    real_vector mlp_norm;    // d_model
    matrix w_up;             // d_model x d_mlp
    matrix w_down;           // d_mlp x d_model
};

// Immutable once constructed; share by const reference across workers.
class model_bundle {
public:
    model_bundle(model_config config, matrix embedding, std::vector<layer_weights> layers, real_vector final_norm,
                 matrix unembedding, tokenizer tok);

    const model_config & config() const noexcept { return config_; }
    const matrix & embedding() const noexcept { return embedding_; }
    const layer_weights & layer(std::size_t i) const { return layers_.at(i); }
    const real_vector & final_norm() const noexcept { return final_norm_; }
    const matrix & unembedding() const noexcept { return unembedding_; }
    const tokenizer & vocab() const noexcept { return tokenizer_; }

private:
    model_config config_;
    matrix embedding_;
    std::vector<layer_weights> layers_;
    real_vector final_norm_;
    matrix unembedding_;
    tokenizer tokenizer_;
};

// Weight directory: config.json, manifest.json, weights.bin (f32 little-endian), vocab.json.
model_bundle load_model(const std::filesystem::path & dir);
void save_model(const model_bundle & model, const std::filesystem::path & dir);

// Rounds every weight through float so an in-memory bundle matches its saved form bitwise.
model_bundle round_to_f32(const model_bundle & model);

const char * to_string(activation_kind kind);
activation_kind parse_activation(std::string_view name);

} // namespace vconf
