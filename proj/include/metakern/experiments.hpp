#pragma once

// Experiment grids behind the command-line tool. Every grid point is an
// independent job; results are ordered by grid key, never by completion.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "metakern/meta_kernels.hpp"
#include "metakern/synthetic_tasks.hpp"

namespace metakern {

enum class OutputFormat { Csv, Json };

OutputFormat parse_format(const std::string& name);

struct SweepConfig {
    TaskDistributionConfig tasks;

    std::vector<int> depths{5, 10, 20, 40};
    double depth_lrtau = 0.0;
    std::vector<double> lrtau_values{0.0, 0.1, 0.2, 0.3, 0.4, 0.5};
    int lrtau_depth = 10;
    double inner_rate = 0.1;  // lambda; tau = lrtau / lambda
    double test_steps = 10.0;
    int num_test_tasks = 20;
    int num_seeds = 5;
    double jitter = 1e-10;

    std::vector<int> spectra_depths{32, 64, 128};
    int spectra_tasks = 2;
    int spectra_points = 10;

    std::vector<int> inverse_gap_depths{16, 32, 64, 128};

    std::vector<int> fw_widths{64, 256, 1024};
    int fw_depth = 3;
    int fw_tasks = 4;
    int fw_points = 5;
    int fw_support = 5;
    int fw_query = 5;
    int fw_test_tasks = 3;
    int fw_seeds = 3;
    int fw_outer_steps = 400;
    double fw_inner_rate = 0.02;
    int fw_inner_steps = 5;
    int fw_test_steps = 20;
    double fw_label_scale = 0.1;

    int gen_test_tasks = 20;

    std::string out = ".";
    int jobs = 1;
    std::optional<OutputFormat> format;

    /// Flat `key = value` text; `#` starts a comment; lists are comma separated.
    static SweepConfig parse(const std::string& text);
    static SweepConfig load(const std::string& path);

    void validate() const;
    /// Every key except out, jobs and format, one `key=value` line each, sorted.
    std::string canonical() const;
    std::string hash() const;

    std::uint64_t run_seed(int run) const;
    TaskDistributionConfig run_tasks(int run) const;
};

struct GapRow {
    int run = 0;
    std::uint64_t seed = 0;
    int task = 0;
    int depth = 0;
    double lrtau = 0.0;
    GapResult gap;
};

struct GapSummary {
    int depth = 0;
    double lrtau = 0.0;
    double mean_l2 = 0.0;
    double mean_rms = 0.0;
    double jitter = 0.0;
    double ci95 = 0.0;  // Student-t half width over per-seed means
    int count = 0;
};

struct SweepResult {
    std::vector<GapRow> detail;
    std::vector<GapSummary> summary;
};

SweepResult depth_sweep(const SweepConfig& cfg);
SweepResult lrtau_sweep(const SweepConfig& cfg);

/// Recomputes summaries from detail rows grouped by (depth, lrtau).
std::vector<GapSummary> summarize(const std::vector<GapRow>& detail);

std::vector<SpectraReport> spectra_scan(const SweepConfig& cfg);

struct InverseGapResult {
    std::vector<int> depths;
    std::vector<InverseGap> gaps;
    std::optional<double> slope;  // unset when any gap is zero
};

InverseGapResult inverse_gap_scan(const SweepConfig& cfg);
std::optional<double> loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

struct FiniteWidthRow {
    int run = 0;
    std::uint64_t seed = 0;
    int width = 0;
    double kernel_error = 0.0;
    double mtl_discrepancy = 0.0;
    double anil_discrepancy = 0.0;
};

struct FiniteWidthSummary {
    int width = 0;
    double kernel_error = 0.0;
    double mtl_discrepancy = 0.0;
    double anil_discrepancy = 0.0;
    int count = 0;
};

struct FiniteWidthResult {
    std::vector<FiniteWidthRow> detail;
    std::vector<FiniteWidthSummary> summary;
};

FiniteWidthResult finite_width_scan(const SweepConfig& cfg);

struct CommandOutput {
    std::string filename;
    std::string content;
};

inline const std::vector<std::string>& command_names() {
    static const std::vector<std::string> names{"sweep-depth", "sweep-lrtau", "spectra",
                                                "inverse-gap", "finite-width", "gen-tasks"};
    return names;
}

/// Runs one command and renders its report; throws if the audit pass fails.
CommandOutput run_command(const std::string& command, const SweepConfig& cfg);

/// Runs `count` jobs on up to `jobs` threads; job i must write only its own slot.
void run_jobs(std::size_t count, int jobs, const std::function<void(std::size_t)>& job);

}  // namespace metakern
