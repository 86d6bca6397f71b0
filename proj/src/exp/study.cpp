#include "odeformer/exp/study.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "odeformer/csvio.hpp"
#include "odeformer/errors.hpp"

namespace odeformer::exp {

double median(std::vector<double> values) {
    if (values.empty()) throw config_error("median of empty set");
    std::sort(values.begin(), values.end());
    const size_t n = values.size();
    if (n % 2 == 1) return values[n / 2];
    return 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

void StudyReport::add(const std::string& config, const std::string& metric, uint64_t seed,
                      double value) {
    rows.push_back({config, metric, std::to_string(seed), value});
}

void StudyReport::add_value(const std::string& config, const std::string& metric, double value) {
    rows.push_back({config, metric, "-", value});
}

double StudyReport::add_median(const std::string& config, const std::string& metric) {
    std::vector<double> vals;
    for (const StudyRow& r : rows) {
        if (r.config == config && r.metric == metric && r.seed != "median" && r.seed != "-") {
            vals.push_back(r.value);
        }
    }
    const double m = median(std::move(vals));
    rows.push_back({config, metric, "median", m});
    return m;
}

double StudyReport::value_of(const std::string& config, const std::string& metric,
                             const std::string& seed) const {
    for (const StudyRow& r : rows) {
        if (r.config == config && r.metric == metric && r.seed == seed) return r.value;
    }
    throw config_error("study '" + name + "': no row (" + config + ", " + metric + ", " + seed +
                       ")");
}

double StudyReport::median_of(const std::string& config, const std::string& metric) const {
    return value_of(config, metric, "median");
}

void StudyReport::property(const std::string& pname, bool pass, const std::string& details) {
    properties.push_back({pname, pass, details});
}

bool StudyReport::all_pass() const {
    for (const PropertyResult& p : properties) {
        if (!p.pass) return false;
    }
    return true;
}

std::string StudyReport::csv() const {
    std::string out = "study,config,metric,seed,value\n";
    for (const StudyRow& r : rows) {
        out += csv_escape(name);
        out += ',';
        out += csv_escape(r.config);
        out += ',';
        out += csv_escape(r.metric);
        out += ',';
        out += r.seed;
        out += ',';
        out += format_number(r.value);
        out += '\n';
    }
    return out;
}

std::string StudyReport::summary() const {
    std::string out;
    for (const PropertyResult& p : properties) {
        out += p.pass ? "PASS" : "FAIL";
        out += ' ';
        out += name;
        out += ": ";
        out += p.name;
        if (!p.details.empty()) {
            out += " (";
            out += p.details;
            out += ')';
        }
        out += '\n';
    }
    return out;
}

void StudyReport::write(const std::string& out_dir) const {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    {
        std::ofstream f(fs::path(out_dir) / (name + ".csv"), std::ios::binary);
        if (!f) throw io_error("cannot write study csv into " + out_dir);
        f << csv();
    }
    for (const auto& [fname, content] : attachments) {
        std::ofstream f(fs::path(out_dir) / fname, std::ios::binary);
        if (!f) throw io_error("cannot write attachment " + fname);
        f << content;
    }
}

} // namespace odeformer::exp
