#pragma once

#include <map>
#include <string>
#include <vector>

namespace odeformer::exp {

// One measured value. seed is the literal seed, or "median" for aggregates.
struct StudyRow {
    std::string config;
    std::string metric;
    std::string seed;
    double value = 0.0;
};

struct PropertyResult {
    std::string name;
    bool pass = false;
    std::string details;
};

// Study output: raw rows, seed-median aggregates, declared-property verdicts,
// and optional extra CSV attachments. The CSV is a pure function of the rows,
// so identical (config, seeds) reruns serialize identically.
struct StudyReport {
    std::string name;
    std::vector<StudyRow> rows;
    std::vector<PropertyResult> properties;
    std::map<std::string, std::string> attachments;  // filename -> content

    void add(const std::string& config, const std::string& metric, uint64_t seed, double value);
    void add_value(const std::string& config, const std::string& metric, double value);

    // Median over all rows matching (config, metric) with a numeric seed;
    // records it as a "median" row and returns it.
    double add_median(const std::string& config, const std::string& metric);

    double value_of(const std::string& config, const std::string& metric,
                    const std::string& seed) const;
    double median_of(const std::string& config, const std::string& metric) const;

    void property(const std::string& name, bool pass, const std::string& details = "");

    bool all_pass() const;
    std::string csv() const;      // header: study,config,metric,seed,value
    std::string summary() const;  // one PASS/FAIL line per property

    // Writes <name>.csv plus attachments into the directory (created if needed).
    void write(const std::string& out_dir) const;
};

double median(std::vector<double> values);

} // namespace odeformer::exp
