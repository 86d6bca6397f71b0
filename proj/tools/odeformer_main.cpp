// Experiment driver CLI: every subcommand runs one study, writes its CSV
// report (plus attachments) when --out is given, prints one PASS/FAIL line
// per declared property, and exits nonzero if any property failed.

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "odeformer/exp/drivers.hpp"
#include "odeformer/models/config.hpp"

using namespace odeformer;
using exp::KvMap;
using exp::StudyReport;

namespace {

struct CommonArgs {
    std::string config_path;
    std::string seeds;
    std::string out_dir;
    int threads = 0;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "key=value study configuration file");
    cmd->add_option("--seeds", args.seeds, "comma-separated seed list, e.g. 1,2,3");
    cmd->add_option("--out", args.out_dir, "directory for CSV reports");
    cmd->add_option("--threads", args.threads, "parallel cells (0 = hardware default)");
}

KvMap load_kv(const CommonArgs& args) {
    KvMap kv;
    if (!args.config_path.empty()) kv = models::parse_kv_file(args.config_path);
    if (!args.seeds.empty()) kv["seeds"] = args.seeds;
    if (args.threads > 0) kv["threads"] = std::to_string(args.threads);
    return kv;
}

int finish(const StudyReport& report, const CommonArgs& args) {
    if (!args.out_dir.empty()) report.write(args.out_dir);
    std::cout << report.summary();
    if (report.properties.empty()) std::cout << "PASS " << report.name << ": completed\n";
    return report.all_pass() ? 0 : 1;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"ODE-block Transformer laboratory"};
    app.require_subcommand(1);

    CommonArgs order_args, gradcheck_args, copy_args, lm_args, schema_args, scaling_args,
        depth_args, gradnorm_args;

    CLI::App* order = app.add_subcommand("order", "solver order-of-convergence study");
    add_common(order, order_args);

    CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite");
    add_common(gradcheck, gradcheck_args);

    CLI::App* copy = app.add_subcommand("copy", "copy-task convergence study");
    add_common(copy, copy_args);
    std::string copy_variant = "RK2";
    int copy_depth = 2;
    copy->add_option("--variant", copy_variant, "block variant tag");
    copy->add_option("--depth", copy_depth, "encoder depth");

    CLI::App* lm = app.add_subcommand("lm", "language-model perplexity comparison");
    add_common(lm, lm_args);

    CLI::App* schema = app.add_subcommand("schema", "design-schema comparison");
    add_common(schema, schema_args);

    CLI::App* scaling = app.add_subcommand("scaling", "stage-scaling function comparison");
    add_common(scaling, scaling_args);

    CLI::App* depth_sweep = app.add_subcommand("depth-sweep", "copy accuracy across depths");
    add_common(depth_sweep, depth_args);

    CLI::App* gradnorm = app.add_subcommand("gradnorm", "per-block gradient norm curves");
    add_common(gradnorm, gradnorm_args);

    CLI11_PARSE(app, argc, argv);

    try {
        if (order->parsed()) {
            exp::OrderStudyOptions opt;
            exp::apply_kv(opt, load_kv(order_args));
            return finish(exp::cmd_order_study(opt), order_args);
        }
        if (gradcheck->parsed()) {
            exp::GradcheckOptions opt;
            exp::apply_kv(opt, load_kv(gradcheck_args));
            return finish(exp::cmd_gradcheck_suite(opt), gradcheck_args);
        }
        if (copy->parsed()) {
            exp::CopyStudyOptions opt;
            KvMap kv = load_kv(copy_args);
            if (!kv.count("variant")) kv["variant"] = copy_variant;
            if (!kv.count("depth")) kv["depth"] = std::to_string(copy_depth);
            exp::apply_kv(opt, kv);
            return finish(exp::cmd_copy_task(opt), copy_args);
        }
        if (lm->parsed()) {
            exp::LmStudyOptions opt;
            exp::apply_kv(opt, load_kv(lm_args));
            return finish(exp::cmd_lm_truncation(opt), lm_args);
        }
        if (schema->parsed()) {
            exp::SchemaComparisonOptions opt;
            exp::apply_kv(opt, load_kv(schema_args));
            return finish(exp::cmd_schema_comparison(opt), schema_args);
        }
        if (scaling->parsed()) {
            exp::ScalingComparisonOptions opt;
            exp::apply_kv(opt, load_kv(scaling_args));
            return finish(exp::cmd_scaling_comparison(opt), scaling_args);
        }
        if (depth_sweep->parsed()) {
            exp::DepthSweepOptions opt;
            exp::apply_kv(opt, load_kv(depth_args));
            return finish(exp::cmd_depth_sweep(opt), depth_args);
        }
        if (gradnorm->parsed()) {
            exp::GradientNormOptions opt;
            exp::apply_kv(opt, load_kv(gradnorm_args));
            return finish(exp::cmd_gradient_norm_study(opt), gradnorm_args);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 2;
}
