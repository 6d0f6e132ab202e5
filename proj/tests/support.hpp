#pragma once

#include "vconf/model.hpp"
#include "vconf/random.hpp"

#include <cmath>
#include <map>
#include <string>

namespace testing_support {

inline vconf::matrix gaussian(std::size_t r, std::size_t c, double scale, vconf::seeded_rng & rng) {
    vconf::matrix m(r, c);
    for (auto & v : m.data()) v = scale * rng.normal();
    return m;
}

inline vconf::real_vector gains(std::size_t n, vconf::seeded_rng & rng) {
    vconf::real_vector v(n);
    for (auto & x : v) x = 0.8 + 0.4 * rng.uniform();
    return v;
}

// Small random decoder; tokens are "t0".."t{V-1}".
inline vconf::model_bundle random_model(std::uint64_t seed, std::size_t n_layers = 4, std::size_t vocab = 32,
                                        std::size_t d_model = 16, std::size_t n_heads = 2, std::size_t d_head = 8,
                                        std::size_t rotary_dims = 4) {
    using namespace vconf;
    seeded_rng rng(seed);
    model_config cfg;
    cfg.n_layers = n_layers;
    cfg.d_model = d_model;
    cfg.n_heads = n_heads;
    cfg.d_head = d_head;
    cfg.d_mlp = 2 * d_model;
    cfg.vocab_size = vocab;
    cfg.rotary_dims = rotary_dims;
    const double s = 1.0 / std::sqrt(static_cast<double>(d_model));
    std::vector<layer_weights> layers;
    for (std::size_t l = 0; l < n_layers; ++l) {
        layer_weights w;
        w.attn_norm = gains(d_model, rng);
        w.wq = gaussian(d_model, n_heads * d_head, 2 * s, rng);
        w.wk = gaussian(d_model, n_heads * d_head, 2 * s, rng);
        w.wv = gaussian(d_model, n_heads * d_head, s, rng);
        w.wo = gaussian(n_heads * d_head, d_model, s, rng);
        w.mlp_norm = gains(d_model, rng);
        w.w_up = gaussian(d_model, cfg.d_mlp, s, rng);
        w.w_down = gaussian(cfg.d_mlp, d_model, s, rng);
        layers.push_back(std::move(w));
    }
    std::map<std::string, token_id> v;
    for (std::size_t i = 0; i < vocab; ++i) v["t" + std::to_string(i)] = static_cast<token_id>(i);
    auto emb = gaussian(vocab, d_model, 1.0, rng);
    auto unemb = gaussian(d_model, vocab, 1.0, rng);
    return model_bundle(cfg, std::move(emb), std::move(layers), gains(d_model, rng), std::move(unemb), tokenizer(v));
}

inline std::vector<vconf::token_id> random_tokens(std::size_t n, std::size_t vocab, vconf::seeded_rng & rng) {
    std::vector<vconf::token_id> t(n);
    for (auto & x : t) x = static_cast<vconf::token_id>(rng.below(vocab));
    return t;
}

} // namespace testing_support
