#include "vconf/model.hpp"

#include "vconf/error.hpp"

#include <json.hpp>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace vconf {

using nlohmann::json;

// ---------------------------------------------------------------------------
// tokenizer

tokenizer::tokenizer(std::map<std::string, token_id> vocab) : vocab_(std::move(vocab)) {
    id_to_text_.resize(vocab_.size());
    std::vector<bool> seen(vocab_.size(), false);
    for (const auto & [text, id] : vocab_) {
        if (text.empty()) throw error(error_kind::validation, "empty vocabulary entry");
        if (id >= vocab_.size() || seen[id]) {
            throw error(error_kind::validation, "vocabulary ids must be a permutation of 0..n-1 (bad id " +
                                                    std::to_string(id) + ")");
        }
        seen[id] = true;
        id_to_text_[id] = text;
        max_len_ = std::max(max_len_, text.size());
    }
}

std::vector<tokenizer::piece> tokenizer::encode_with_offsets(std::string_view text) const {
    std::vector<piece> out;
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t len = std::min(max_len_, text.size() - pos);
        bool found = false;
        for (; len > 0; --len) {
            auto it = vocab_.find(std::string(text.substr(pos, len)));
            if (it != vocab_.end()) {
                out.push_back({it->second, pos, pos + len});
                pos += len;
                found = true;
                break;
            }
        }
        if (!found) {
            // extend the offending span until some vocabulary entry matches again
            std::size_t end = pos + 1;
            while (end < text.size()) {
                bool matches = false;
                for (std::size_t l = std::min(max_len_, text.size() - end); l > 0 && !matches; --l)
                    matches = vocab_.count(std::string(text.substr(end, l))) > 0;
                if (matches) break;
                ++end;
            }
            throw error(error_kind::tokenization,
                        "no vocabulary entry matches \"" + std::string(text.substr(pos, end - pos)) + "\" at byte " +
                            std::to_string(pos));
        }
    }
    return out;
}

std::vector<token_id> tokenizer::encode(std::string_view text) const {
    std::vector<token_id> ids;
    for (const auto & p : encode_with_offsets(text)) ids.push_back(p.id);
    return ids;
}

std::string tokenizer::decode(std::span<const token_id> ids) const {
    std::string out;
    for (token_id id : ids) out += token_text(id);
    return out;
}

const std::string & tokenizer::token_text(token_id id) const {
    if (id >= id_to_text_.size()) throw error(error_kind::validation, "token id " + std::to_string(id) + " out of range");
    return id_to_text_[id];
}

token_id tokenizer::id_of(std::string_view token) const {
    auto it = vocab_.find(std::string(token));
    if (it == vocab_.end()) throw error(error_kind::tokenization, "token \"" + std::string(token) + "\" not in vocabulary");
    return it->second;
}

bool tokenizer::contains(std::string_view token) const { return vocab_.count(std::string(token)) > 0; }

// ---------------------------------------------------------------------------
// model_bundle

namespace {

void expect_shape(const matrix & m, std::size_t rows, std::size_t cols, const std::string & name) {
    if (m.rows() != rows || m.cols() != cols) {
        throw error(error_kind::shape, name + " has shape (" + std::to_string(m.rows()) + ", " +
                                           std::to_string(m.cols()) + "), expected (" + std::to_string(rows) + ", " +
                                           std::to_string(cols) + ")");
    }
}

void expect_len(const real_vector & v, std::size_t n, const std::string & name) {
    if (v.size() != n) {
        throw error(error_kind::shape,
                    name + " has length " + std::to_string(v.size()) + ", expected " + std::to_string(n));
    }
}

} // namespace

model_bundle::model_bundle(model_config config, matrix embedding, std::vector<layer_weights> layers,
                           real_vector final_norm, matrix unembedding, tokenizer tok)
    : config_(config), embedding_(std::move(embedding)), layers_(std::move(layers)),
      final_norm_(std::move(final_norm)), unembedding_(std::move(unembedding)), tokenizer_(std::move(tok)) {
    const auto & c = config_;
    if (c.n_layers == 0 || c.d_model == 0 || c.n_heads == 0 || c.d_head == 0 || c.d_mlp == 0 || c.vocab_size == 0)
        throw error(error_kind::validation, "model dimensions must be positive");
    if (c.rotary_dims > c.d_head || c.rotary_dims % 2 != 0)
        throw error(error_kind::validation, "rotary_dims must be even and <= d_head");
    if (layers_.size() != c.n_layers) throw error(error_kind::shape, "layer count does not match n_layers");
    if (tokenizer_.size() != c.vocab_size) throw error(error_kind::shape, "vocabulary size does not match config");
    const std::size_t inner = c.n_heads * c.d_head;
    expect_shape(embedding_, c.vocab_size, c.d_model, "embed");
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const auto & l = layers_[i];
        const std::string p = "layers." + std::to_string(i) + ".";
        expect_len(l.attn_norm, c.d_model, p + "attn_norm");
        expect_shape(l.wq, c.d_model, inner, p + "wq");
        expect_shape(l.wk, c.d_model, inner, p + "wk");
        expect_shape(l.wv, c.d_model, inner, p + "wv");
        expect_shape(l.wo, inner, c.d_model, p + "wo");
        expect_len(l.mlp_norm, c.d_model, p + "mlp_norm");
        expect_shape(l.w_up, c.d_model, c.d_mlp, p + "w_up");
        expect_shape(l.w_down, c.d_mlp, c.d_model, p + "w_down");
    }
    expect_len(final_norm_, c.d_model, "final_norm");
    expect_shape(unembedding_, c.d_model, c.vocab_size, "unembed");
}

const char * to_string(activation_kind kind) {
    switch (kind) {
    case activation_kind::gelu: return "gelu";
    case activation_kind::relu: return "relu";
    case activation_kind::silu: return "silu";
    }
    return "gelu";
}

activation_kind parse_activation(std::string_view name) {
    if (name == "gelu") return activation_kind::gelu;
    if (name == "relu") return activation_kind::relu;
    if (name == "silu") return activation_kind::silu;
    throw error(error_kind::config, "unknown activation \"" + std::string(name) + "\"");
}

// ---------------------------------------------------------------------------
// weight directory I/O

namespace {

json read_json(const std::filesystem::path & path) {
    std::ifstream in(path);
    if (!in) throw error(error_kind::io, "cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception & e) {
        throw error(error_kind::parse, path.string() + ": " + e.what());
    }
}

void write_text(const std::filesystem::path & path, const std::string & text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw error(error_kind::io, "cannot write " + path.string());
    out << text;
    if (!out) throw error(error_kind::io, "write failed for " + path.string());
}

struct tensor_entry {
    std::string name;
    std::vector<std::size_t> shape;
};

std::vector<tensor_entry> tensor_layout(const model_config & c) {
    const std::size_t inner = c.n_heads * c.d_head;
    std::vector<tensor_entry> out;
    out.push_back({"embed", {c.vocab_size, c.d_model}});
    for (std::size_t i = 0; i < c.n_layers; ++i) {
        const std::string p = "layers." + std::to_string(i) + ".";
        out.push_back({p + "attn_norm", {c.d_model}});
        out.push_back({p + "wq", {c.d_model, inner}});
        out.push_back({p + "wk", {c.d_model, inner}});
        out.push_back({p + "wv", {c.d_model, inner}});
        out.push_back({p + "wo", {inner, c.d_model}});
        out.push_back({p + "mlp_norm", {c.d_model}});
        out.push_back({p + "w_up", {c.d_model, c.d_mlp}});
        out.push_back({p + "w_down", {c.d_mlp, c.d_model}});
    }
    out.push_back({"final_norm", {c.d_model}});
    out.push_back({"unembed", {c.d_model, c.vocab_size}});
    return out;
}

float load_f32_le(const unsigned char * p) {
    std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
    return std::bit_cast<float>(bits);
}

void store_f32_le(std::string & out, float f) {
    const auto bits = std::bit_cast<std::uint32_t>(f);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

json config_to_json(const model_config & c) {
    return json{{"n_layers", c.n_layers},     {"d_model", c.d_model},       {"n_heads", c.n_heads},
                {"d_head", c.d_head},         {"d_mlp", c.d_mlp},           {"vocab_size", c.vocab_size},
                {"norm_eps", c.norm_eps},     {"rope_theta", c.rope_theta}, {"rotary_dims", c.rotary_dims},
                {"activation", to_string(c.activation)}};
}

model_config config_from_json(const json & j) {
    model_config c;
    try {
        c.n_layers = j.at("n_layers").get<std::size_t>();
        c.d_model = j.at("d_model").get<std::size_t>();
        c.n_heads = j.at("n_heads").get<std::size_t>();
        c.d_head = j.at("d_head").get<std::size_t>();
        c.d_mlp = j.at("d_mlp").get<std::size_t>();
        c.vocab_size = j.at("vocab_size").get<std::size_t>();
        c.norm_eps = j.value("norm_eps", 1e-6);
        c.rope_theta = j.value("rope_theta", 10000.0);
        c.rotary_dims = j.value("rotary_dims", c.d_head);
        c.activation = parse_activation(j.value("activation", std::string("gelu")));
    } catch (const json::exception & e) {
        throw error(error_kind::parse, std::string("config.json: ") + e.what());
    }
    return c;
}

} // namespace

model_bundle load_model(const std::filesystem::path & dir) {
    const model_config cfg = config_from_json(read_json(dir / "config.json"));
    const json manifest = read_json(dir / "manifest.json");
    const json vocab_json = read_json(dir / "vocab.json");

    std::map<std::string, token_id> vocab;
    for (const auto & [text, id] : vocab_json.items()) vocab[text] = id.get<token_id>();

    std::ifstream in(dir / "weights.bin", std::ios::binary);
    if (!in) throw error(error_kind::io, "cannot open " + (dir / "weights.bin").string());
    std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    std::map<std::string, std::vector<double>> tensors;
    for (const auto & entry : tensor_layout(cfg)) {
        if (!manifest.contains(entry.name)) throw error(error_kind::validation, "manifest is missing tensor " + entry.name);
        const json & m = manifest.at(entry.name);
        const auto shape = m.at("shape").get<std::vector<std::size_t>>();
        if (shape != entry.shape) throw error(error_kind::shape, "tensor " + entry.name + " has unexpected shape");
        if (m.value("dtype", std::string("f32")) != "f32")
            throw error(error_kind::validation, "tensor " + entry.name + " has unsupported dtype");
        std::size_t count = 1;
        for (auto s : shape) count *= s;
        const auto offset = m.at("offset").get<std::size_t>();
        if (offset + 4 * count > blob.size())
            throw error(error_kind::shape, "tensor " + entry.name + " extends past end of weights.bin");
        std::vector<double> values(count);
        const auto * base = reinterpret_cast<const unsigned char *>(blob.data()) + offset;
        for (std::size_t i = 0; i < count; ++i) values[i] = load_f32_le(base + 4 * i);
        tensors.emplace(entry.name, std::move(values));
    }

    auto take_matrix = [&](const std::string & name, std::size_t r, std::size_t c) {
        return matrix(r, c, std::move(tensors.at(name)));
    };
    const std::size_t inner = cfg.n_heads * cfg.d_head;
    std::vector<layer_weights> layers(cfg.n_layers);
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
        const std::string p = "layers." + std::to_string(i) + ".";
        auto & l = layers[i];
        l.attn_norm = std::move(tensors.at(p + "attn_norm"));
        l.wq = take_matrix(p + "wq", cfg.d_model, inner);
        l.wk = take_matrix(p + "wk", cfg.d_model, inner);
        l.wv = take_matrix(p + "wv", cfg.d_model, inner);
        l.wo = take_matrix(p + "wo", inner, cfg.d_model);
        l.mlp_norm = std::move(tensors.at(p + "mlp_norm"));
        l.w_up = take_matrix(p + "w_up", cfg.d_model, cfg.d_mlp);
        l.w_down = take_matrix(p + "w_down", cfg.d_mlp, cfg.d_model);
    }
    return model_bundle(cfg, take_matrix("embed", cfg.vocab_size, cfg.d_model), std::move(layers),
                        std::move(tensors.at("final_norm")), take_matrix("unembed", cfg.d_model, cfg.vocab_size),
                        tokenizer(std::move(vocab)));
}

void save_model(const model_bundle & model, const std::filesystem::path & dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw error(error_kind::io, "cannot create " + dir.string() + ": " + ec.message());

    const auto & cfg = model.config();
    std::map<std::string, const std::vector<double> *> sources;
    sources["embed"] = &model.embedding().data();
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
        const std::string p = "layers." + std::to_string(i) + ".";
        const auto & l = model.layer(i);
        sources[p + "attn_norm"] = &l.attn_norm;
        sources[p + "wq"] = &l.wq.data();
        sources[p + "wk"] = &l.wk.data();
        sources[p + "wv"] = &l.wv.data();
        sources[p + "wo"] = &l.wo.data();
        sources[p + "mlp_norm"] = &l.mlp_norm;
        sources[p + "w_up"] = &l.w_up.data();
        sources[p + "w_down"] = &l.w_down.data();
    }
    sources["final_norm"] = &model.final_norm();
    sources["unembed"] = &model.unembedding().data();

    std::string blob;
    json manifest = json::object();
    for (const auto & entry : tensor_layout(cfg)) {
        manifest[entry.name] = {{"offset", blob.size()}, {"shape", entry.shape}, {"dtype", "f32"}};
        for (double v : *sources.at(entry.name)) store_f32_le(blob, static_cast<float>(v));
    }

    json vocab = json::object();
    for (const auto & [text, id] : model.vocab().vocab()) vocab[text] = id;

    write_text(dir / "config.json", config_to_json(cfg).dump(2) + "\n");
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
    write_text(dir / "vocab.json", vocab.dump(2) + "\n");
    write_text(dir / "weights.bin", blob);
}

model_bundle round_to_f32(const model_bundle & model) {
    auto round_vec = [](std::vector<double> v) {
        for (double & x : v) x = static_cast<double>(static_cast<float>(x));
        return v;
    };
    auto round_mat = [&](const matrix & m) { return matrix(m.rows(), m.cols(), round_vec(m.data())); };
    std::vector<layer_weights> layers;
    for (std::size_t i = 0; i < model.config().n_layers; ++i) {
        const auto & l = model.layer(i);
        layers.push_back({round_vec(l.attn_norm), round_mat(l.wq), round_mat(l.wk), round_mat(l.wv), round_mat(l.wo),
                          round_vec(l.mlp_norm), round_mat(l.w_up), round_mat(l.w_down)});
    }
    return model_bundle(model.config(), round_mat(model.embedding()), std::move(layers), round_vec(model.final_norm()),
                        round_mat(model.unembedding()), model.vocab());
}

} // namespace vconf
