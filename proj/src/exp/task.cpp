#include "odeformer/exp/task.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

namespace odeformer::exp {

TaskKind parse_task_kind(const std::string& s) {
    std::string v = s;
    std::transform(v.begin(), v.end(), v.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (v == "copy") return TaskKind::Copy;
    if (v == "reverse") return TaskKind::Reverse;
    if (v == "charlm") return TaskKind::CharLM;
    throw config_error("unknown task kind '" + s + "'");
}

SeqBatch SyntheticTask::sample_batch(Rng& rng, int64_t sequences) const {
    std::vector<std::vector<int32_t>> payloads(static_cast<size_t>(sequences));
    int64_t longest = 0;
    for (auto& p : payloads) {
        const int64_t len =
            spec_.min_len + static_cast<int64_t>(rng.below(
                                static_cast<uint64_t>(spec_.max_len - spec_.min_len + 1)));
        p.resize(static_cast<size_t>(len));
        for (int32_t& tok : p) tok = 3 + static_cast<int32_t>(rng.below(
                                        static_cast<uint64_t>(spec_.vocab_size)));
        longest = std::max(longest, len);
    }

    SeqBatch batch;
    batch.source.rows = sequences;
    batch.source.cols = longest;
    batch.source.ids.assign(static_cast<size_t>(sequences * longest), kPad);
    batch.target_in.rows = sequences;
    batch.target_in.cols = longest + 1;
    batch.target_in.ids.assign(static_cast<size_t>(sequences * (longest + 1)), kPad);
    batch.target_out = batch.target_in;
    batch.src_valid.assign(batch.source.ids.size(), 0);
    batch.tgt_valid.assign(batch.target_out.ids.size(), 0);

    for (int64_t b = 0; b < sequences; ++b) {
        const auto& p = payloads[static_cast<size_t>(b)];
        std::vector<int32_t> target = p;
        if (spec_.kind == TaskKind::Reverse) std::reverse(target.begin(), target.end());

        for (size_t i = 0; i < p.size(); ++i) {
            batch.source.ids[static_cast<size_t>(b * longest) + i] = p[i];
            batch.src_valid[static_cast<size_t>(b * longest) + i] = 1;
        }
        const int64_t tcols = longest + 1;
        batch.target_in.ids[static_cast<size_t>(b * tcols)] = kBos;
        for (size_t i = 0; i < target.size(); ++i) {
            batch.target_in.ids[static_cast<size_t>(b * tcols) + i + 1] = target[i];
            batch.target_out.ids[static_cast<size_t>(b * tcols) + i] = target[i];
            batch.tgt_valid[static_cast<size_t>(b * tcols) + i] = 1;
        }
        batch.target_out.ids[static_cast<size_t>(b * tcols) + target.size()] = kEos;
        batch.tgt_valid[static_cast<size_t>(b * tcols) + target.size()] = 1;
    }
    return batch;
}

std::vector<SeqBatch> SyntheticTask::eval_batches(int64_t sequences, int64_t batches) const {
    Rng rng(spec_.seed ^ 0x5eedc0de5eedc0deULL);
    std::vector<SeqBatch> out;
    out.reserve(static_cast<size_t>(batches));
    for (int64_t i = 0; i < batches; ++i) out.push_back(sample_batch(rng, sequences));
    return out;
}

CharCorpus CharCorpus::load(const std::string& path, double train_frac, double val_frac) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open corpus file " + path);
    std::ostringstream buf;
    buf << f.rdbuf();
    return from_text(buf.str(), train_frac, val_frac);
}

CharCorpus CharCorpus::from_text(const std::string& text, double train_frac, double val_frac) {
    if (text.size() < 64) throw config_error("corpus too small to split");
    if (train_frac <= 0.0 || val_frac <= 0.0 || train_frac + val_frac >= 1.0) {
        throw config_error("corpus splits must be positive with train+val < 1");
    }

    CharCorpus c;
    std::set<char> chars(text.begin(), text.end());
    c.alphabet_.assign(chars.begin(), chars.end());

    std::vector<int32_t> lut(256, -1);
    for (size_t i = 0; i < c.alphabet_.size(); ++i) {
        lut[static_cast<unsigned char>(c.alphabet_[i])] = static_cast<int32_t>(i);
    }
    c.data_.resize(text.size());
    for (size_t i = 0; i < text.size(); ++i) {
        c.data_[i] = lut[static_cast<unsigned char>(text[i])];
    }
    c.train_end_ = static_cast<int64_t>(static_cast<double>(text.size()) * train_frac);
    c.val_end_ =
        static_cast<int64_t>(static_cast<double>(text.size()) * (train_frac + val_frac));
    return c;
}

TokenBatch CharCorpus::sample_windows(Rng& rng, int64_t batch, int64_t seq_len) const {
    const int64_t window = seq_len + 1;
    if (train_end_ <= window) throw config_error("train split shorter than one window");
    TokenBatch out;
    out.rows = batch;
    out.cols = window;
    out.ids.resize(static_cast<size_t>(batch * window));
    for (int64_t b = 0; b < batch; ++b) {
        const int64_t start =
            static_cast<int64_t>(rng.below(static_cast<uint64_t>(train_end_ - window)));
        for (int64_t i = 0; i < window; ++i) {
            out.ids[static_cast<size_t>(b * window + i)] =
                data_[static_cast<size_t>(start + i)];
        }
    }
    return out;
}

std::vector<TokenBatch> CharCorpus::eval_windows(int64_t batch, int64_t seq_len,
                                                 bool test_split) const {
    const int64_t window = seq_len + 1;
    const int64_t begin = test_split ? val_end_ : train_end_;
    const int64_t end = test_split ? static_cast<int64_t>(data_.size()) : val_end_;

    std::vector<TokenBatch> out;
    std::vector<int64_t> starts;
    for (int64_t s = begin; s + window <= end; s += window) starts.push_back(s);
    if (starts.empty()) throw config_error("evaluation split shorter than one window");

    for (size_t i = 0; i < starts.size(); i += static_cast<size_t>(batch)) {
        const int64_t rows =
            std::min<int64_t>(batch, static_cast<int64_t>(starts.size() - i));
        TokenBatch tb;
        tb.rows = rows;
        tb.cols = window;
        tb.ids.resize(static_cast<size_t>(rows * window));
        for (int64_t b = 0; b < rows; ++b) {
            const int64_t start = starts[i + static_cast<size_t>(b)];
            for (int64_t j = 0; j < window; ++j) {
                tb.ids[static_cast<size_t>(b * window + j)] =
                    data_[static_cast<size_t>(start + j)];
            }
        }
        out.push_back(std::move(tb));
    }
    return out;
}

} // namespace odeformer::exp
