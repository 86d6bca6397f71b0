#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "odeformer/exp/drivers.hpp"
#include "odeformer/exp/study.hpp"
#include "odeformer/exp/task.hpp"

using namespace odeformer;
using namespace odeformer::exp;

namespace {

// Small deterministic corpus with enough structure to learn.
std::string tiny_corpus_text() {
    Rng rng(12345);
    const char* words[] = {"alpha", "bravo", "delta", "echo", "fox",  "golf",
                           "hotel", "india", "kilo",  "lima", "mike", "nova"};
    std::string text;
    while (text.size() < 30000) {
        const int n = 4 + static_cast<int>(rng.below(5));
        for (int i = 0; i < n; ++i) {
            text += words[rng.below(12)];
            text += (i + 1 == n) ? '.' : ' ';
        }
        text += '\n';
    }
    return text;
}

std::string write_tiny_corpus() {
    namespace fs = std::filesystem;
    const std::string path = (fs::temp_directory_path() / "odeformer_tiny_corpus.txt").string();
    std::ofstream f(path, std::ios::binary);
    f << tiny_corpus_text();
    return path;
}

LmBudget tiny_lm_budget() {
    LmBudget b;
    b.d_model = 16;
    b.heads = 2;
    b.ffn_dim = 32;
    b.seq_len = 16;
    b.batch = 4;
    b.steps = 30;
    b.warmup = 10;
    b.log_interval = 10;
    return b;
}

CopyBudget tiny_copy_budget() {
    CopyBudget b;
    b.vocab = 8;
    b.min_len = 3;
    b.max_len = 6;
    b.d_model = 16;
    b.heads = 2;
    b.ffn_dim = 32;
    b.batch = 8;
    b.max_steps = 60;
    b.eval_interval = 20;
    b.eval_sequences = 32;
    b.warmup = 10;
    return b;
}

} // namespace

TEST_CASE("median helper") {
    CHECK(median({3.0, 1.0, 2.0}) == 2.0);
    CHECK(median({4.0, 1.0, 2.0, 3.0}) == 2.5);
    CHECK_THROWS_AS(median({}), config_error);
}

TEST_CASE("study report aggregates, csv and properties") {
    StudyReport r;
    r.name = "demo";
    r.add("cfg", "metric", 1, 3.0);
    r.add("cfg", "metric", 2, 1.0);
    r.add("cfg", "metric", 3, 2.0);
    CHECK(r.add_median("cfg", "metric") == 2.0);
    CHECK(r.median_of("cfg", "metric") == 2.0);
    CHECK(r.value_of("cfg", "metric", "2") == 1.0);

    r.property("passes", true, "ok");
    r.property("fails", false, "boom");
    CHECK_FALSE(r.all_pass());
    CHECK(r.summary().find("PASS demo: passes (ok)") != std::string::npos);
    CHECK(r.summary().find("FAIL demo: fails (boom)") != std::string::npos);

    const std::string csv = r.csv();
    CHECK(csv.rfind("study,config,metric,seed,value\n", 0) == 0);
    CHECK(csv.find("demo,cfg,metric,median,2\n") != std::string::npos);
}

TEST_CASE("order study passes its tolerance properties and is reproducible") {
    StudyReport a = cmd_order_study();
    CHECK(a.all_pass());
    CHECK(a.properties.size() == 6);
    CHECK(a.attachments.count("order_solver_rows.csv") == 1);
    CHECK(a.attachments.at("order_solver_rows.csv")
              .rfind("scheme,n_steps,error,estimated_order\n", 0) == 0);

    StudyReport b = cmd_order_study();
    CHECK(a.csv() == b.csv());
    CHECK(a.attachments.at("order_solver_rows.csv") == b.attachments.at("order_solver_rows.csv"));
}

TEST_CASE("gradcheck suite clears every primitive and variant") {
    StudyReport r = cmd_gradcheck_suite();
    CHECK(r.all_pass());
    // one error row per variant
    int variant_rows = 0;
    for (const StudyRow& row : r.rows) {
        if (row.config == "variant") ++variant_rows;
    }
    CHECK(variant_rows == 12);
}

TEST_CASE("synthetic task batches are well formed") {
    TaskSpec ts;
    ts.kind = TaskKind::Reverse;
    ts.vocab_size = 8;
    ts.min_len = 3;
    ts.max_len = 6;
    ts.seed = 5;
    SyntheticTask task(ts);
    Rng rng(7);
    SeqBatch b = task.sample_batch(rng, 4);

    CHECK(b.source.rows == 4);
    CHECK(b.target_in.cols == b.source.cols + 1);
    for (int64_t r = 0; r < 4; ++r) {
        CHECK(b.target_in.at(r, 0) == SyntheticTask::kBos);
        // reverse task: first target token equals last source token
        int64_t len = 0;
        for (int64_t i = 0; i < b.source.cols; ++i) {
            if (b.src_valid[static_cast<size_t>(r * b.source.cols + i)]) ++len;
        }
        CHECK(b.target_out.at(r, 0) == b.source.at(r, len - 1));
        CHECK(b.target_out.at(r, len) == SyntheticTask::kEos);
    }

    // evaluation batches are reproducible
    auto e1 = task.eval_batches(4, 2);
    auto e2 = task.eval_batches(4, 2);
    REQUIRE(e1.size() == 2);
    CHECK(e1[0].source.ids == e2[0].source.ids);
    CHECK(e1[1].target_out.ids == e2[1].target_out.ids);
}

TEST_CASE("char corpus splits and windows") {
    CharCorpus corpus = CharCorpus::from_text(tiny_corpus_text(), 0.9, 0.05);
    CHECK(corpus.vocab() > 5);
    CHECK(corpus.vocab() < 40);

    Rng rng(3);
    auto tb = corpus.sample_windows(rng, 4, 16);
    CHECK(tb.rows == 4);
    CHECK(tb.cols == 17);
    for (int32_t id : tb.ids) {
        CHECK(id >= 0);
        CHECK(id < corpus.vocab());
    }

    auto val = corpus.eval_windows(8, 16, false);
    auto test = corpus.eval_windows(8, 16, true);
    CHECK(!val.empty());
    CHECK(!test.empty());
    // deterministic
    auto val2 = corpus.eval_windows(8, 16, false);
    CHECK(val[0].ids == val2[0].ids);
}

TEST_CASE("lm cell trains and evaluates") {
    CharCorpus corpus = CharCorpus::from_text(tiny_corpus_text(), 0.9, 0.05);
    LmBudget b = tiny_lm_budget();
    LmCellOutcome out = run_lm_cell(corpus, blocks::BlockTag::RK2, 1, 1, b);
    CHECK(out.params > 0);
    CHECK(std::isfinite(out.val_ppl));
    CHECK(out.val_ppl > 1.0);
    CHECK(out.final_loss < out.first_loss); // thirty steps already help
    CHECK(!out.metrics.empty());

    // identical seed reruns are bit-identical; f64 keeps this exact
    b.precision = "f64";
    LmCellOutcome r1 = run_lm_cell(corpus, blocks::BlockTag::RK2, 1, 1, b);
    LmCellOutcome r2 = run_lm_cell(corpus, blocks::BlockTag::RK2, 1, 1, b);
    CHECK(r1.val_ppl == r2.val_ppl);
    CHECK(r1.final_loss == r2.final_loss);
}

TEST_CASE("copy cell runs and reports sane fields") {
    CopyBudget b = tiny_copy_budget();
    CopyCellOutcome out = run_copy_cell(TaskKind::Copy, blocks::BlockTag::Euler, 1, 1, b);
    CHECK(out.finite);
    CHECK(out.params > 0);
    CHECK(out.untrained_accuracy < 0.3);
    CHECK(out.final_accuracy >= 0.0);
    CHECK(out.final_accuracy <= 1.0);
    CHECK(out.loss_at_50 > 0.0);
}

TEST_CASE("copy study report structure on a tiny budget") {
    CopyStudyOptions opt;
    opt.variant = blocks::BlockTag::Euler;
    opt.depth = 1;
    opt.seeds = {1, 2, 3};
    opt.budget = tiny_copy_budget();
    StudyReport r = cmd_copy_task(opt);

    CHECK(r.name == "copy_task");
    CHECK(r.median_of("Euler_d1", "steps_to_target") > 0.0);
    CHECK(r.median_of("Euler_d1", "untrained_accuracy") < 0.15);
    CHECK(r.properties.size() == 3);
    // determinism of the full report
    StudyReport again = cmd_copy_task(opt);
    CHECK(r.csv() == again.csv());
}

TEST_CASE("lm study produces ordering rows and reference provenance") {
    const std::string corpus_path = write_tiny_corpus();
    LmStudyOptions opt;
    opt.corpus_path = corpus_path;
    opt.depths = {1};
    opt.variants = {blocks::BlockTag::Euler, blocks::BlockTag::RK2};
    opt.seeds = {1};
    opt.budget = tiny_lm_budget();
    StudyReport r = cmd_lm_truncation(opt);

    CHECK(r.value_of("Euler_d1", "val_ppl", "median") > 1.0);
    CHECK(r.value_of("RK2_d1", "val_ppl", "median") > 1.0);
    // published reference magnitudes are carried as provenance rows
    CHECK(r.value_of("external_reference_ptb", "Euler_d1", "-") == 142.33);
    CHECK(r.value_of("external_reference_ptb", "RK4_d2", "-") == 119.46);
    // per-cell time budget property is present
    CHECK(r.properties.size() >= 1);
}

TEST_CASE("study csv files land in the output directory") {
    namespace fs = std::filesystem;
    const std::string dir = (fs::temp_directory_path() / "odeformer_study_out").string();
    fs::remove_all(dir);

    StudyReport r = cmd_order_study();
    r.write(dir);
    CHECK(fs::exists(fs::path(dir) / "order_study.csv"));
    CHECK(fs::exists(fs::path(dir) / "order_solver_rows.csv"));
    fs::remove_all(dir);
}

TEST_CASE("config key=value overrides study options") {
    KvMap kv;
    kv["steps"] = "77";
    kv["d_model"] = "24";
    kv["seeds"] = "4,5";
    kv["variants"] = "euler,rk4";
    kv["depths"] = "1,2";
    kv["precision"] = "f64";

    LmStudyOptions opt;
    apply_kv(opt, kv);
    CHECK(opt.budget.steps == 77);
    CHECK(opt.budget.d_model == 24);
    CHECK(opt.budget.precision == "f64");
    CHECK(opt.seeds == std::vector<uint64_t>{4, 5});
    CHECK(opt.variants ==
          std::vector<blocks::BlockTag>{blocks::BlockTag::Euler, blocks::BlockTag::RK4});
    CHECK(opt.depths == std::vector<int>{1, 2});

    CHECK_THROWS_AS(parse_seed_list(""), config_error);
}

TEST_CASE("gradient norm probe rows match the closed form") {
    GradientNormOptions opt;
    opt.variants = {};  // skip training cells, keep the probe check
    opt.seeds = {};
    opt.depth = 12;
    opt.corpus_path = write_tiny_corpus();
    StudyReport r = cmd_gradient_norm_study(opt);
    for (const PropertyResult& p : r.properties) {
        CHECK(p.pass);
    }
    CHECK(r.value_of("RK2", "probe_ratio", "-") ==
          doctest::Approx(std::pow(1.105, 11)).epsilon(1e-9));
}
