#pragma once

#include <string>
#include <vector>

#include "odeformer/models/transformer.hpp"
#include "odeformer/rng.hpp"

namespace odeformer::exp {

using models::SeqBatch;
using tensor::TokenBatch;

enum class TaskKind { Copy, Reverse, CharLM };

TaskKind parse_task_kind(const std::string& s);

struct TaskSpec {
    TaskKind kind = TaskKind::Copy;
    int64_t vocab_size = 32;  // payload tokens (Copy/Reverse)
    int64_t min_len = 5;
    int64_t max_len = 20;
    std::string corpus_path;  // CharLM
    int64_t seq_len = 32;     // CharLM window length
    double train_frac = 0.90;
    double val_frac = 0.05;
    uint64_t seed = 1;
};

// Synthetic sequence pairs with reserved ids PAD=0, BOS=1, EOS=2 and payload
// tokens 3 .. 3+vocab_size-1. Validation batches come from an independent
// seeded stream, keeping the splits disjoint by construction.
class SyntheticTask {
public:
    static constexpr int32_t kPad = 0;
    static constexpr int32_t kBos = 1;
    static constexpr int32_t kEos = 2;

    explicit SyntheticTask(TaskSpec spec) : spec_(std::move(spec)) {
        if (spec_.kind == TaskKind::CharLM) {
            throw config_error("SyntheticTask: CharLM uses CharCorpus");
        }
        if (spec_.min_len < 1 || spec_.max_len < spec_.min_len) {
            throw config_error("SyntheticTask: bad length range");
        }
    }

    const TaskSpec& spec() const { return spec_; }
    int64_t model_vocab() const { return 3 + spec_.vocab_size; }

    SeqBatch sample_batch(Rng& rng, int64_t sequences) const;

    // Fixed evaluation set derived from an offset stream of the task seed.
    std::vector<SeqBatch> eval_batches(int64_t sequences, int64_t batches) const;

private:
    TaskSpec spec_;
};

// Character-level corpus with contiguous train/validation/test splits.
class CharCorpus {
public:
    static CharCorpus load(const std::string& path, double train_frac, double val_frac);
    static CharCorpus from_text(const std::string& text, double train_frac, double val_frac);

    int64_t vocab() const { return static_cast<int64_t>(alphabet_.size()); }
    int64_t size() const { return static_cast<int64_t>(data_.size()); }
    int64_t train_size() const { return train_end_; }

    // Random train windows of seq_len+1 tokens (inputs plus next-token target).
    TokenBatch sample_windows(Rng& rng, int64_t batch, int64_t seq_len) const;

    // Deterministic non-overlapping windows covering the chosen split.
    std::vector<TokenBatch> eval_windows(int64_t batch, int64_t seq_len, bool test_split) const;

    const std::string& alphabet() const { return alphabet_; }

private:
    std::vector<int32_t> data_;
    std::string alphabet_;
    int64_t train_end_ = 0;
    int64_t val_end_ = 0;
};

} // namespace odeformer::exp
