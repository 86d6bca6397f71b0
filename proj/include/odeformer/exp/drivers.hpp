#pragma once

#include <map>
#include <string>
#include <vector>

#include "odeformer/blocks/block.hpp"
#include "odeformer/exp/study.hpp"
#include "odeformer/exp/task.hpp"
#include "odeformer/models/config.hpp"
#include "odeformer/train/train.hpp"

namespace odeformer::exp {

using blocks::BlockTag;

// ------------------------------------------------------------- cell budgets

// Character-LM training cell: model dims plus optimizer budget.
struct LmBudget {
    int64_t d_model = 48;
    int64_t heads = 2;
    int64_t ffn_dim = 128;
    int64_t seq_len = 24;
    int64_t batch = 12;
    int64_t steps = 1200;
    int64_t warmup = 100;
    int64_t log_interval = 50;
    int64_t eval_interval = 0;  // 0 = evaluate only after the last step
    double peak_lr = 2e-3;
    double dropout = 0.0;
    double label_smoothing = 0.0;
    models::Granularity granularity = models::Granularity::Fused;
    std::string precision = "f32";  // f32 | f64
};

// Copy/Reverse sequence-to-sequence training cell.
struct CopyBudget {
    int64_t vocab = 32;
    int64_t min_len = 5;
    int64_t max_len = 20;
    int64_t d_model = 32;
    int64_t heads = 2;
    int64_t ffn_dim = 64;
    int dec_depth = 1;
    int64_t batch = 16;
    int64_t max_steps = 5000;
    int64_t eval_interval = 25;
    int64_t eval_sequences = 64;
    int64_t warmup = 50;
    int64_t log_interval = 10;
    double peak_lr = 3e-3;
    double label_smoothing = 0.0;
    double target_accuracy = 0.99;
    std::string precision = "f32";
};

struct LmCellOutcome {
    double val_ppl = 0.0;
    double first_loss = 0.0;
    double final_loss = 0.0;
    int64_t params = 0;
    double secs = 0.0;
    std::vector<train::MetricsRow> metrics;
};

struct CopyCellOutcome {
    int64_t steps_to_target = -1;  // -1 when the accuracy target was not reached
    double final_accuracy = 0.0;
    double untrained_accuracy = 0.0;
    double loss_at_50 = 0.0;
    double loss_at_500 = 0.0;
    double first_loss = 0.0;
    double final_loss = 0.0;
    bool finite = true;
    int64_t params = 0;
    double secs = 0.0;
};

LmCellOutcome run_lm_cell(const CharCorpus& corpus, BlockTag variant, int depth, uint64_t seed,
                          const LmBudget& budget);
CopyCellOutcome run_copy_cell(TaskKind task, BlockTag variant, int enc_depth, uint64_t seed,
                              const CopyBudget& budget);

// ------------------------------------------------------------------ studies

struct OrderStudyOptions {
    std::vector<int> step_counts{16, 32, 64, 128};
};
StudyReport cmd_order_study(const OrderStudyOptions& opt = {});

struct GradcheckOptions {
    double eps = 1e-5;
    double tolerance = 1e-6;
    double equivalence_tolerance = 1e-10;
    uint64_t seed = 17;
};
StudyReport cmd_gradcheck_suite(const GradcheckOptions& opt = {});

struct CopyStudyOptions {
    BlockTag variant = BlockTag::RK2;
    int depth = 2;
    TaskKind task = TaskKind::Copy;
    std::vector<uint64_t> seeds{1, 2, 3};
    CopyBudget budget;
    int threads = 0;  // 0 = hardware default
};
StudyReport cmd_copy_task(const CopyStudyOptions& opt);

struct LmStudyOptions {
    std::vector<int> depths{1, 2};
    std::vector<BlockTag> variants{BlockTag::Euler, BlockTag::RK2, BlockTag::RK4,
                                   BlockTag::RK2LearnableScalar};
    std::vector<uint64_t> seeds{1, 2, 3};
    std::string corpus_path = "data/corpus.txt";
    LmBudget budget;
    int threads = 0;
};
StudyReport cmd_lm_truncation(const LmStudyOptions& opt);

struct SchemaComparisonOptions {
    int depth = 2;
    std::vector<uint64_t> seeds{1, 2, 3};
    std::string corpus_path = "data/corpus.txt";
    LmBudget lm_budget;
    CopyBudget copy_budget;
    bool run_copy = true;
    int threads = 0;
};
StudyReport cmd_schema_comparison(const SchemaComparisonOptions& opt);

struct ScalingComparisonOptions {
    int depth = 1;
    std::vector<uint64_t> seeds{1, 2, 3};
    std::string corpus_path = "data/corpus.txt";
    LmBudget budget;
    int threads = 0;
};
StudyReport cmd_scaling_comparison(const ScalingComparisonOptions& opt);

struct DepthSweepOptions {
    std::vector<BlockTag> variants{BlockTag::RK2GammaOne};
    std::vector<int> depths{2, 4, 6, 8};
    std::vector<uint64_t> seeds{1, 2, 3};
    CopyBudget budget;
    int threads = 0;
};
StudyReport cmd_depth_sweep(const DepthSweepOptions& opt);

struct GradientNormOptions {
    std::vector<BlockTag> variants{BlockTag::RK2, BlockTag::RK2GammaOne};
    int depth = 12;
    std::vector<uint64_t> seeds{1, 2, 3};
    std::string corpus_path = "data/corpus.txt";
    LmBudget budget = [] {
        LmBudget b;
        b.d_model = 32;
        b.ffn_dim = 64;
        b.seq_len = 16;
        b.batch = 8;
        b.steps = 2000;
        b.log_interval = 100;
        b.peak_lr = 1e-3;
        return b;
    }();
    bool probe_check = true;  // verify the step-0 linear-probe ratio analytically
    int threads = 0;
};
StudyReport cmd_gradient_norm_study(const GradientNormOptions& opt);

// ------------------------------------------------------- config-file plumbing

using KvMap = std::map<std::string, std::string>;

void apply_kv(LmBudget& b, const KvMap& kv);
void apply_kv(CopyBudget& b, const KvMap& kv);
void apply_kv(OrderStudyOptions& o, const KvMap& kv);
void apply_kv(GradcheckOptions& o, const KvMap& kv);
void apply_kv(CopyStudyOptions& o, const KvMap& kv);
void apply_kv(LmStudyOptions& o, const KvMap& kv);
void apply_kv(SchemaComparisonOptions& o, const KvMap& kv);
void apply_kv(ScalingComparisonOptions& o, const KvMap& kv);
void apply_kv(DepthSweepOptions& o, const KvMap& kv);
void apply_kv(GradientNormOptions& o, const KvMap& kv);

std::vector<uint64_t> parse_seed_list(const std::string& csv);

} // namespace odeformer::exp
