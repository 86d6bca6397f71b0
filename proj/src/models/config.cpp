#include "odeformer/models/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "odeformer/csvio.hpp"

namespace odeformer::models {

namespace {

std::string fold(std::string v) {
    std::transform(v.begin(), v.end(), v.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return v;
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

} // namespace

Granularity parse_granularity(const std::string& s) {
    const std::string v = fold(s);
    if (v == "sublayerwise") return Granularity::SublayerWise;
    if (v == "sanonly") return Granularity::SanOnly;
    if (v == "ffnonly") return Granularity::FfnOnly;
    if (v == "fused") return Granularity::Fused;
    throw config_error("unknown granularity '" + s + "'");
}

const char* granularity_name(Granularity g) {
    switch (g) {
        case Granularity::SublayerWise: return "SublayerWise";
        case Granularity::SanOnly: return "SanOnly";
        case Granularity::FfnOnly: return "FfnOnly";
        case Granularity::Fused: return "Fused";
    }
    return "?";
}

PositionKind parse_position(const std::string& s) {
    const std::string v = fold(s);
    if (v == "sinusoidal") return PositionKind::Sinusoidal;
    if (v == "learnedabsolute") return PositionKind::LearnedAbsolute;
    throw config_error("unknown position encoding '" + s + "'");
}

const char* position_name(PositionKind p) {
    return p == PositionKind::Sinusoidal ? "Sinusoidal" : "LearnedAbsolute";
}

void ModelConfig::validate() const {
    if (vocab_size < 1) throw config_error("model config: vocab_size must be positive");
    if (d_model < 1 || d_model % heads != 0) {
        throw config_error("model config: d_model must be a positive multiple of heads");
    }
    if (ffn_dim < d_model) throw config_error("model config: ffn_dim must be >= d_model");
    if (enc_depth < 1) throw config_error("model config: enc_depth must be >= 1");
    if (dec_depth < 0) throw config_error("model config: dec_depth must be >= 0");
    if (dropout < 0.0 || dropout >= 1.0) throw config_error("model config: dropout out of range");
    if (max_len < 1) throw config_error("model config: max_len must be positive");
}

std::string ModelConfig::serialize() const {
    std::ostringstream os;
    os << "vocab_size=" << vocab_size << '\n'
       << "d_model=" << d_model << '\n'
       << "heads=" << heads << '\n'
       << "ffn_dim=" << ffn_dim << '\n'
       << "enc_depth=" << enc_depth << '\n'
       << "dec_depth=" << dec_depth << '\n'
       << "variant=" << blocks::block_tag_name(variant) << '\n'
       << "granularity=" << granularity_name(granularity) << '\n'
       << "dropout=" << format_number(dropout) << '\n'
       << "ln_eps=" << format_number(ln_eps) << '\n'
       << "max_len=" << max_len << '\n'
       << "tie_embeddings=" << (tie_embeddings ? 1 : 0) << '\n'
       << "position=" << position_name(position) << '\n';
    return os.str();
}

std::map<std::string, std::string> parse_kv(std::istream& is) {
    std::map<std::string, std::string> out;
    std::string line;
    while (std::getline(is, line)) {
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const size_t eq = t.find('=');
        if (eq == std::string::npos) {
            throw config_error("config line without '=': " + line);
        }
        out[trim(t.substr(0, eq))] = trim(t.substr(eq + 1));
    }
    return out;
}

std::map<std::string, std::string> parse_kv_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw io_error("cannot open config file " + path);
    return parse_kv(f);
}

ModelConfig ModelConfig::deserialize(std::istream& is) {
    const auto kv = parse_kv(is);
    ModelConfig cfg;
    auto geti = [&](const char* key, int64_t dflt) {
        auto it = kv.find(key);
        return it == kv.end() ? dflt : std::stoll(it->second);
    };
    auto getd = [&](const char* key, double dflt) {
        auto it = kv.find(key);
        return it == kv.end() ? dflt : std::stod(it->second);
    };
    cfg.vocab_size = geti("vocab_size", cfg.vocab_size);
    cfg.d_model = geti("d_model", cfg.d_model);
    cfg.heads = geti("heads", cfg.heads);
    cfg.ffn_dim = geti("ffn_dim", cfg.ffn_dim);
    cfg.enc_depth = static_cast<int>(geti("enc_depth", cfg.enc_depth));
    cfg.dec_depth = static_cast<int>(geti("dec_depth", cfg.dec_depth));
    cfg.dropout = getd("dropout", cfg.dropout);
    cfg.ln_eps = getd("ln_eps", cfg.ln_eps);
    cfg.max_len = geti("max_len", cfg.max_len);
    cfg.tie_embeddings = geti("tie_embeddings", cfg.tie_embeddings ? 1 : 0) != 0;
    if (auto it = kv.find("variant"); it != kv.end()) {
        cfg.variant = blocks::parse_block_tag(it->second);
    }
    if (auto it = kv.find("granularity"); it != kv.end()) {
        cfg.granularity = parse_granularity(it->second);
    }
    if (auto it = kv.find("position"); it != kv.end()) {
        cfg.position = parse_position(it->second);
    }
    cfg.validate();
    return cfg;
}

} // namespace odeformer::models
