#pragma once

#include <iosfwd>
#include <map>
#include <string>

#include "odeformer/blocks/block.hpp"

namespace odeformer::models {

// Which sublayers form ODE blocks. Fused treats the whole SAN+FFN layer
// increment as one stage function; the *Only modes leave the other sublayer
// as a plain residual.
enum class Granularity { SublayerWise, SanOnly, FfnOnly, Fused };

enum class PositionKind { Sinusoidal, LearnedAbsolute };

Granularity parse_granularity(const std::string& s);
const char* granularity_name(Granularity g);
PositionKind parse_position(const std::string& s);
const char* position_name(PositionKind p);

struct ModelConfig {
    int64_t vocab_size = 0;
    int64_t d_model = 64;
    int64_t heads = 2;
    int64_t ffn_dim = 128;
    int enc_depth = 2;
    int dec_depth = 0;  // 0 selects the causal LM path
    blocks::BlockTag variant = blocks::BlockTag::Euler;
    Granularity granularity = Granularity::Fused;
    double dropout = 0.0;
    double ln_eps = 1e-6;
    int64_t max_len = 512;
    bool tie_embeddings = true;
    PositionKind position = PositionKind::Sinusoidal;

    void validate() const;
    bool is_lm() const { return dec_depth == 0; }

    // Flat key=value text, one entry per line.
    std::string serialize() const;
    static ModelConfig deserialize(std::istream& is);
};

// Generic key=value file support ('#' starts a comment line).
std::map<std::string, std::string> parse_kv(std::istream& is);
std::map<std::string, std::string> parse_kv_file(const std::string& path);

} // namespace odeformer::models
