#include "metakern/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <thread>
#include <tuple>

#include <boost/math/distributions/students_t.hpp>
#include "json.hpp"

#include "metakern/finite_width.hpp"
#include "metakern/random.hpp"
#include "metakern/report_io.hpp"

namespace metakern {

namespace {

// ---------------------------------------------------------------- config keys

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <class T, class Parse>
T parse_number(const std::string& key, const std::string& value, Parse parse) {
    try {
        std::size_t used = 0;
        T v = parse(value, &used);
        if (used != value.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::logic_error&) {
        throw Error("config: invalid value '" + value + "' for key " + key);
    }
}

int parse_int(const std::string& key, const std::string& v) {
    return parse_number<int>(key, v, [](const std::string& s, std::size_t* n) { return std::stoi(s, n); });
}
double parse_real(const std::string& key, const std::string& v) {
    return parse_number<double>(key, v, [](const std::string& s, std::size_t* n) { return std::stod(s, n); });
}
std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    if (!v.empty() && v.front() == '-') throw Error("config: invalid value '" + v + "' for key " + key);
    return parse_number<std::uint64_t>(key, v,
                                       [](const std::string& s, std::size_t* n) { return std::stoull(s, n); });
}

template <class T, class Parse>
std::vector<T> parse_list(const std::string& key, const std::string& v, Parse parse) {
    std::vector<T> out;
    for (const auto& item : split_csv_line(v)) out.push_back(parse(key, trim(item)));
    return out;
}

std::string join_ints(const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}
std::string join_reals(const std::vector<double>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + format_double(v[i]);
    return s;
}

struct KeySpec {
    std::function<void(SweepConfig&, const std::string&, const std::string&)> set;
    std::function<std::string(const SweepConfig&)> get;  // empty for non-canonical keys
};

#define MK_INT(field)                                                                                         \
    KeySpec {                                                                                                 \
        [](SweepConfig& c, const std::string& k, const std::string& v) { c.field = parse_int(k, v); },        \
            [](const SweepConfig& c) { return std::to_string(c.field); }                                      \
    }
#define MK_REAL(field)                                                                                        \
    KeySpec {                                                                                                 \
        [](SweepConfig& c, const std::string& k, const std::string& v) { c.field = parse_real(k, v); },       \
            [](const SweepConfig& c) { return format_double(c.field); }                                       \
    }
#define MK_INTS(field)                                                                                        \
    KeySpec {                                                                                                 \
        [](SweepConfig& c, const std::string& k, const std::string& v) {                                     \
            c.field = parse_list<int>(k, v, parse_int);                                                       \
        },                                                                                                    \
            [](const SweepConfig& c) { return join_ints(c.field); }                                           \
    }
#define MK_REALS(field)                                                                                       \
    KeySpec {                                                                                                 \
        [](SweepConfig& c, const std::string& k, const std::string& v) {                                     \
            c.field = parse_list<double>(k, v, parse_real);                                                   \
        },                                                                                                    \
            [](const SweepConfig& c) { return join_reals(c.field); }                                          \
    }

const std::map<std::string, KeySpec>& key_table() {
    static const std::map<std::string, KeySpec> table{
        {"input_dim", MK_INT(tasks.input_dim)},
        {"num_train_tasks", MK_INT(tasks.num_train_tasks)},
        {"points_per_task", MK_INT(tasks.points_per_task)},
        {"support_size", MK_INT(tasks.support_size)},
        {"query_size", MK_INT(tasks.query_size)},
        {"nu_low", MK_REAL(tasks.nu_range.first)},
        {"nu_high", MK_REAL(tasks.nu_range.second)},
        {"seed",
         {[](SweepConfig& c, const std::string& k, const std::string& v) { c.tasks.seed = parse_u64(k, v); },
          [](const SweepConfig& c) { return std::to_string(c.tasks.seed); }}},
        {"depths", MK_INTS(depths)},
        {"depth_lrtau", MK_REAL(depth_lrtau)},
        {"lrtau_values", MK_REALS(lrtau_values)},
        {"lrtau_depth", MK_INT(lrtau_depth)},
        {"inner_rate", MK_REAL(inner_rate)},
        {"test_steps", MK_REAL(test_steps)},
        {"num_test_tasks", MK_INT(num_test_tasks)},
        {"num_seeds", MK_INT(num_seeds)},
        {"jitter", MK_REAL(jitter)},
        {"spectra_depths", MK_INTS(spectra_depths)},
        {"spectra_tasks", MK_INT(spectra_tasks)},
        {"spectra_points", MK_INT(spectra_points)},
        {"inverse_gap_depths", MK_INTS(inverse_gap_depths)},
        {"fw_widths", MK_INTS(fw_widths)},
        {"fw_depth", MK_INT(fw_depth)},
        {"fw_tasks", MK_INT(fw_tasks)},
        {"fw_points", MK_INT(fw_points)},
        {"fw_support", MK_INT(fw_support)},
        {"fw_query", MK_INT(fw_query)},
        {"fw_test_tasks", MK_INT(fw_test_tasks)},
        {"fw_seeds", MK_INT(fw_seeds)},
        {"fw_outer_steps", MK_INT(fw_outer_steps)},
        {"fw_inner_rate", MK_REAL(fw_inner_rate)},
        {"fw_inner_steps", MK_INT(fw_inner_steps)},
        {"fw_test_steps", MK_INT(fw_test_steps)},
        {"fw_label_scale", MK_REAL(fw_label_scale)},
        {"gen_test_tasks", MK_INT(gen_test_tasks)},
        {"out", {[](SweepConfig& c, const std::string&, const std::string& v) { c.out = v; }, {}}},
        {"jobs", {[](SweepConfig& c, const std::string& k, const std::string& v) { c.jobs = parse_int(k, v); }, {}}},
        {"format",
         {[](SweepConfig& c, const std::string&, const std::string& v) { c.format = parse_format(v); }, {}}},
    };
    return table;
}

#undef MK_INT
#undef MK_REAL
#undef MK_INTS
#undef MK_REALS

// ---------------------------------------------------------------- tables

struct Cell {
    enum class Kind { Empty, Text, Integer, Real, Boolean } kind = Kind::Empty;
    std::string text;
    long long integer = 0;
    double real = 0.0;

    static Cell empty() { return {}; }
    static Cell str(std::string s) { return {Kind::Text, std::move(s), 0, 0.0}; }
    static Cell num(long long v) { return {Kind::Integer, {}, v, 0.0}; }
    static Cell u64(std::uint64_t v) { return str(std::to_string(v)); }
    static Cell real_value(double v) { return {Kind::Real, {}, 0, v}; }
    static Cell boolean(bool v) { return {Kind::Boolean, {}, v ? 1 : 0, 0.0}; }

    std::string csv() const {
        switch (kind) {
            case Kind::Empty: return "";
            case Kind::Text: return text;
            case Kind::Integer: return std::to_string(integer);
            case Kind::Real: return format_double(real);
            case Kind::Boolean: return integer ? "true" : "false";
        }
        return "";
    }

    nlohmann::json json() const {
        switch (kind) {
            case Kind::Empty: return nullptr;
            case Kind::Text: return text;
            case Kind::Integer: return integer;
            case Kind::Real: return std::isfinite(real) ? nlohmann::json(real) : nlohmann::json(nullptr);
            case Kind::Boolean: return integer != 0;
        }
        return nullptr;
    }
};

struct Table {
    std::string command;
    std::vector<std::pair<std::string, std::string>> meta;
    std::vector<std::string> columns;
    std::vector<std::vector<Cell>> rows;
};

std::string render_csv(const Table& t) {
    std::string out = std::string("# ") + kCsvSchema + " command=" + t.command;
    for (const auto& [k, v] : t.meta) out += " " + k + "=" + v;
    out += "\n" + csv_line(t.columns);
    for (const auto& row : t.rows) {
        std::vector<std::string> fields;
        fields.reserve(row.size());
        for (const auto& c : row) fields.push_back(c.csv());
        out += csv_line(fields);
    }
    return out;
}

std::string render_json(const Table& t) {
    nlohmann::ordered_json doc;
    doc["schema_version"] = kJsonSchema;
    doc["command"] = t.command;
    for (const auto& [k, v] : t.meta) doc[k] = v;
    doc["columns"] = t.columns;
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (const auto& row : t.rows) {
        nlohmann::ordered_json r;
        for (std::size_t i = 0; i < row.size(); ++i) r[t.columns[i]] = row[i].json();
        rows.push_back(std::move(r));
    }
    doc["rows"] = std::move(rows);
    return doc.dump(2) + "\n";
}

std::string render(const Table& t, OutputFormat f) { return f == OutputFormat::Csv ? render_csv(t) : render_json(t); }

using ParsedRow = std::map<std::string, std::string>;

// Reads rendered output back as text cells, numbers normalized through format_double.
std::vector<ParsedRow> parse_rendered(const std::string& content, OutputFormat f) {
    std::vector<ParsedRow> rows;
    if (f == OutputFormat::Csv) {
        std::istringstream in(content);
        std::string line;
        std::getline(in, line);
        std::getline(in, line);
        const auto columns = split_csv_line(line);
        while (std::getline(in, line)) {
            const auto fields = split_csv_line(line);
            if (fields.size() != columns.size()) throw Error("audit: malformed CSV row");
            ParsedRow r;
            for (std::size_t i = 0; i < fields.size(); ++i) r[columns[i]] = fields[i] == "nan" ? "" : fields[i];
            rows.push_back(std::move(r));
        }
        return rows;
    }
    const auto doc = nlohmann::json::parse(content);
    for (const auto& jr : doc.at("rows")) {
        ParsedRow r;
        for (const auto& [k, v] : jr.items()) {
            if (v.is_null()) r[k] = "";
            else if (v.is_string()) r[k] = v.get<std::string>();
            else if (v.is_number_float()) r[k] = format_double(v.get<double>());
            else if (v.is_boolean()) r[k] = v.get<bool>() ? "true" : "false";
            else r[k] = v.dump();
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

std::string audit_text(const Cell& c) {
    if (c.kind == Cell::Kind::Real && !std::isfinite(c.real)) return "";
    return c.csv();
}

double field_real(const ParsedRow& r, const std::string& k) { return std::stod(r.at(k)); }
int field_int(const ParsedRow& r, const std::string& k) { return std::stoi(r.at(k)); }

void audit_equal(const std::string& what, const std::string& emitted, const std::string& recomputed) {
    if (emitted != recomputed)
        throw Error("audit: " + what + " emitted as " + emitted + " but recomputed as " + recomputed);
}

// ---------------------------------------------------------------- statistics

double t_quantile_975(int dof) {
    boost::math::students_t dist(static_cast<double>(dof));
    return boost::math::quantile(boost::math::complement(dist, 0.025));
}

double ci95_half_width(const std::vector<double>& values) {
    const std::size_t n = values.size();
    if (n < 2) return std::nan("");
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / static_cast<double>(n - 1));
    return t_quantile_975(static_cast<int>(n - 1)) * sd / std::sqrt(static_cast<double>(n));
}

// ---------------------------------------------------------------- gap grids

struct GridPoint {
    int run;
    int depth;
    double lrtau;
};

SweepResult gap_grid(const SweepConfig& cfg, const std::vector<std::pair<int, double>>& points) {
    cfg.validate();
    std::vector<GridPoint> grid;
    for (const auto& [depth, lrtau] : points)
        for (int r = 0; r < cfg.num_seeds; ++r) grid.push_back({r, depth, lrtau});

    std::vector<std::vector<GapRow>> results(grid.size());
    run_jobs(grid.size(), cfg.jobs, [&](std::size_t i) {
        const GridPoint& g = grid[i];
        const TaskDistributionConfig tc = cfg.run_tasks(g.run);
        const TrainingSet train = sample_training_set(tc);
        NetworkSpec spec;
        spec.depth = g.depth;
        AdaptConfig adapt;
        adapt.inner_rate = cfg.inner_rate;
        adapt.train_steps = g.lrtau / cfg.inner_rate;
        adapt.test_steps = cfg.test_steps;
        PredictorOptions options;
        options.jitter.initial = cfg.jitter;
        const KernelPredictor predictor(train, spec, adapt, options);
        for (int j = 0; j < cfg.num_test_tasks; ++j) {
            const TestTask test = sample_test_task(tc, static_cast<std::uint64_t>(j));
            results[i].push_back({g.run, tc.seed, j, g.depth, g.lrtau, prediction_gap(predictor.predict(test))});
        }
    });

    SweepResult out;
    for (auto& rows : results)
        for (auto& r : rows) out.detail.push_back(std::move(r));
    std::stable_sort(out.detail.begin(), out.detail.end(), [](const GapRow& a, const GapRow& b) {
        return std::tie(a.depth, a.lrtau, a.run, a.task) < std::tie(b.depth, b.lrtau, b.run, b.task);
    });
    out.summary = summarize(out.detail);
    return out;
}

Table sweep_table(const SweepConfig& cfg, const std::string& command, const SweepResult& result) {
    Table t;
    t.command = command;
    t.meta = {{"config_hash", cfg.hash()},
              {"base_seed", std::to_string(cfg.tasks.seed)},
              {"lambda", format_double(cfg.inner_rate)},
              {"lrtau_split", "lambda_fixed_tau_equals_lrtau_over_lambda"}};
    t.columns = {"row_type", "config_hash", "base_seed", "run",     "seed",       "task",            "depth",
                 "lrtau",    "gap_l2",      "gap_rms",   "jitter_used", "ci95_half_width", "count"};
    const std::string hash = cfg.hash();
    for (const auto& r : result.detail) {
        t.rows.push_back({Cell::str("detail"), Cell::str(hash), Cell::u64(cfg.tasks.seed), Cell::num(r.run),
                          Cell::u64(r.seed), Cell::num(r.task), Cell::num(r.depth), Cell::real_value(r.lrtau),
                          Cell::real_value(r.gap.l2), Cell::real_value(r.gap.rms), Cell::real_value(r.gap.jitter),
                          Cell::empty(), Cell::empty()});
    }
    for (const auto& s : result.summary) {
        t.rows.push_back({Cell::str("summary"), Cell::str(hash), Cell::u64(cfg.tasks.seed), Cell::empty(),
                          Cell::empty(), Cell::empty(), Cell::num(s.depth), Cell::real_value(s.lrtau),
                          Cell::real_value(s.mean_l2), Cell::real_value(s.mean_rms), Cell::real_value(s.jitter),
                          Cell::real_value(s.ci95), Cell::num(s.count)});
    }
    return t;
}

void audit_sweep(const std::string& content, OutputFormat f) {
    std::vector<GapRow> detail;
    std::vector<ParsedRow> summary;
    for (const auto& r : parse_rendered(content, f)) {
        if (r.at("row_type") == "detail") {
            GapRow g;
            g.run = field_int(r, "run");
            g.task = field_int(r, "task");
            g.depth = field_int(r, "depth");
            g.lrtau = field_real(r, "lrtau");
            g.gap = {field_real(r, "gap_l2"), field_real(r, "gap_rms"), field_real(r, "jitter_used")};
            detail.push_back(g);
        } else {
            summary.push_back(r);
        }
    }
    const auto recomputed = summarize(detail);
    if (recomputed.size() != summary.size()) throw Error("audit: summary row count mismatch");
    for (std::size_t i = 0; i < summary.size(); ++i) {
        const auto& s = recomputed[i];
        const auto& e = summary[i];
        audit_equal("depth", e.at("depth"), std::to_string(s.depth));
        audit_equal("lrtau", e.at("lrtau"), format_double(s.lrtau));
        audit_equal("gap_l2", e.at("gap_l2"), format_double(s.mean_l2));
        audit_equal("gap_rms", e.at("gap_rms"), format_double(s.mean_rms));
        audit_equal("jitter_used", e.at("jitter_used"), format_double(s.jitter));
        audit_equal("ci95_half_width", e.at("ci95_half_width"), audit_text(Cell::real_value(s.ci95)));
        audit_equal("count", e.at("count"), std::to_string(s.count));
    }
}

// ---------------------------------------------------------------- other commands

Table spectra_table(const SweepConfig& cfg, const std::vector<SpectraReport>& reports) {
    Table t;
    t.command = "spectra";
    t.meta = {{"config_hash", cfg.hash()},
              {"base_seed", std::to_string(cfg.tasks.seed)},
              {"seed", std::to_string(cfg.run_seed(0))}};
    t.columns = {"depth",          "points",           "asymptotic",        "ntk_top",
                 "ntk_top_predicted", "ntk_top_rel_error", "ntk_bulk_mean",     "ntk_bulk_predicted",
                 "ntk_bulk_rel_error", "nngp_top",        "nngp_top_predicted", "nngp_top_rel_error",
                 "min_offdiag_nngp"};
    for (const auto& r : reports) {
        t.rows.push_back({Cell::num(r.depth), Cell::num(r.points), Cell::boolean(r.asymptotic),
                          Cell::real_value(r.ntk_top), Cell::real_value(r.ntk_top_predicted),
                          Cell::real_value(r.ntk_top_rel_error()), Cell::real_value(r.ntk_bulk_mean),
                          Cell::real_value(r.ntk_bulk_predicted), Cell::real_value(r.ntk_bulk_rel_error()),
                          Cell::real_value(r.nngp_top), Cell::real_value(r.nngp_top_predicted),
                          Cell::real_value(r.nngp_top_rel_error()), Cell::real_value(r.min_offdiag_nngp)});
    }
    return t;
}

Cell slope_cell(const std::optional<double>& slope) {
    return slope ? Cell::real_value(*slope) : Cell::str("undefined");
}

Table inverse_gap_table(const SweepConfig& cfg, const InverseGapResult& result) {
    Table t;
    t.command = "inverse-gap";
    t.meta = {{"config_hash", cfg.hash()}, {"base_seed", std::to_string(cfg.tasks.seed)}};
    t.columns = {"row_type", "config_hash", "base_seed", "seed", "depth", "gap", "jitter_used", "slope"};
    const std::string hash = cfg.hash();
    const std::uint64_t seed = cfg.run_seed(0);
    double jitter = 0.0;
    for (std::size_t i = 0; i < result.depths.size(); ++i) {
        t.rows.push_back({Cell::str("depth"), Cell::str(hash), Cell::u64(cfg.tasks.seed), Cell::u64(seed),
                          Cell::num(result.depths[i]), Cell::real_value(result.gaps[i].gap),
                          Cell::real_value(result.gaps[i].jitter), Cell::empty()});
        jitter = std::max(jitter, result.gaps[i].jitter);
    }
    t.rows.push_back({Cell::str("fit"), Cell::str(hash), Cell::u64(cfg.tasks.seed), Cell::u64(seed), Cell::empty(),
                      Cell::empty(), Cell::real_value(jitter), slope_cell(result.slope)});
    return t;
}

void audit_inverse_gap(const std::string& content, OutputFormat f) {
    std::vector<double> depths, gaps;
    std::string emitted;
    for (const auto& r : parse_rendered(content, f)) {
        if (r.at("row_type") == "depth") {
            depths.push_back(field_real(r, "depth"));
            gaps.push_back(field_real(r, "gap"));
        } else {
            emitted = r.at("slope");
        }
    }
    audit_equal("slope", emitted, slope_cell(loglog_slope(depths, gaps)).csv());
}

Table finite_width_table(const SweepConfig& cfg, const FiniteWidthResult& result) {
    Table t;
    t.command = "finite-width";
    t.meta = {{"config_hash", cfg.hash()}, {"base_seed", std::to_string(cfg.tasks.seed)},
              {"depth", std::to_string(cfg.fw_depth)}};
    t.columns = {"row_type",     "config_hash",     "base_seed",        "run",  "seed",
                 "width",        "kernel_error",    "mtl_discrepancy",  "anil_discrepancy", "count"};
    const std::string hash = cfg.hash();
    for (const auto& r : result.detail) {
        t.rows.push_back({Cell::str("detail"), Cell::str(hash), Cell::u64(cfg.tasks.seed), Cell::num(r.run),
                          Cell::u64(r.seed), Cell::num(r.width), Cell::real_value(r.kernel_error),
                          Cell::real_value(r.mtl_discrepancy), Cell::real_value(r.anil_discrepancy), Cell::empty()});
    }
    for (const auto& s : result.summary) {
        t.rows.push_back({Cell::str("summary"), Cell::str(hash), Cell::u64(cfg.tasks.seed), Cell::empty(),
                          Cell::empty(), Cell::num(s.width), Cell::real_value(s.kernel_error),
                          Cell::real_value(s.mtl_discrepancy), Cell::real_value(s.anil_discrepancy),
                          Cell::num(s.count)});
    }
    return t;
}

std::vector<FiniteWidthSummary> summarize_widths(const std::vector<FiniteWidthRow>& detail) {
    std::vector<FiniteWidthSummary> out;
    for (const auto& r : detail) {
        if (out.empty() || out.back().width != r.width) out.push_back({r.width, 0.0, 0.0, 0.0, 0});
        auto& s = out.back();
        s.kernel_error += r.kernel_error;
        s.mtl_discrepancy += r.mtl_discrepancy;
        s.anil_discrepancy += r.anil_discrepancy;
        ++s.count;
    }
    for (auto& s : out) {
        s.kernel_error /= s.count;
        s.mtl_discrepancy /= s.count;
        s.anil_discrepancy /= s.count;
    }
    return out;
}

void audit_finite_width(const std::string& content, OutputFormat f) {
    std::vector<FiniteWidthRow> detail;
    std::vector<ParsedRow> summary;
    for (const auto& r : parse_rendered(content, f)) {
        if (r.at("row_type") == "detail") {
            FiniteWidthRow d;
            d.width = field_int(r, "width");
            d.kernel_error = field_real(r, "kernel_error");
            d.mtl_discrepancy = field_real(r, "mtl_discrepancy");
            d.anil_discrepancy = field_real(r, "anil_discrepancy");
            detail.push_back(d);
        } else {
            summary.push_back(r);
        }
    }
    const auto recomputed = summarize_widths(detail);
    if (recomputed.size() != summary.size()) throw Error("audit: summary row count mismatch");
    for (std::size_t i = 0; i < summary.size(); ++i) {
        audit_equal("kernel_error", summary[i].at("kernel_error"), format_double(recomputed[i].kernel_error));
        audit_equal("mtl_discrepancy", summary[i].at("mtl_discrepancy"), format_double(recomputed[i].mtl_discrepancy));
        audit_equal("anil_discrepancy", summary[i].at("anil_discrepancy"),
                    format_double(recomputed[i].anil_discrepancy));
    }
}

std::string gen_tasks_content(const SweepConfig& cfg, OutputFormat f) {
    const TaskDistributionConfig tc = cfg.run_tasks(0);
    const TrainingSet train = sample_training_set(tc);
    std::vector<TestTask> tests;
    for (int j = 0; j < cfg.gen_test_tasks; ++j) tests.push_back(sample_test_task(tc, static_cast<std::uint64_t>(j)));
    if (f == OutputFormat::Csv) {
        std::ostringstream out;
        write_task_file(out, train, tests);
        return out.str();
    }
    Table t;
    t.command = "gen-tasks";
    t.meta = {{"config_hash", cfg.hash()},
              {"base_seed", std::to_string(cfg.tasks.seed)},
              {"seed", std::to_string(tc.seed)}};
    t.columns = {"task_id", "role"};
    for (int k = 0; k < tc.input_dim; ++k) t.columns.push_back("x" + std::to_string(k));
    t.columns.push_back("label");
    auto emit = [&](std::size_t id, const char* role, const Matrix& x, const Vector& y) {
        for (Index i = 0; i < x.rows(); ++i) {
            std::vector<Cell> row{Cell::num(static_cast<long long>(id)), Cell::str(role)};
            for (Index k = 0; k < x.cols(); ++k) row.push_back(Cell::real_value(x(i, k)));
            row.push_back(Cell::real_value(y(i)));
            t.rows.push_back(std::move(row));
        }
    };
    for (std::size_t i = 0; i < train.tasks().size(); ++i) emit(i, "train", train.tasks()[i].raw, train.tasks()[i].labels);
    for (std::size_t i = 0; i < tests.size(); ++i) {
        emit(i, "support", tests[i].support_raw, tests[i].support_y);
        emit(i, "query", tests[i].query_raw, tests[i].query_y);
    }
    return render_json(t);
}

const char* extension(OutputFormat f) { return f == OutputFormat::Csv ? ".csv" : ".json"; }

void require_positive(const std::vector<int>& v, const char* what) {
    if (v.empty()) throw Error(std::string("config: ") + what + " must not be empty");
    for (int x : v)
        if (x < 1) throw Error(std::string("config: ") + what + " entries must be positive");
}

}  // namespace

OutputFormat parse_format(const std::string& name) {
    if (name == "csv") return OutputFormat::Csv;
    if (name == "json") return OutputFormat::Json;
    throw Error("unknown output format '" + name + "' (expected csv or json)");
}

SweepConfig SweepConfig::parse(const std::string& text) {
    SweepConfig cfg;
    std::istringstream in(text);
    std::string line;
    std::set<std::string> seen;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw Error("config: expected key = value on line " + std::to_string(line_no));
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        const auto it = key_table().find(key);
        if (it == key_table().end())
            throw Error("config: unknown key '" + key + "' on line " + std::to_string(line_no));
        if (!seen.insert(key).second)
            throw Error("config: duplicate key '" + key + "' on line " + std::to_string(line_no));
        it->second.set(cfg, key, value);
    }
    cfg.validate();
    return cfg;
}

SweepConfig SweepConfig::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open config file " + path);
    std::ostringstream text;
    text << in.rdbuf();
    return parse(text.str());
}

void SweepConfig::validate() const {
    tasks.validate();
    require_positive(depths, "depths");
    require_positive(spectra_depths, "spectra_depths");
    require_positive(inverse_gap_depths, "inverse_gap_depths");
    require_positive(fw_widths, "fw_widths");
    if (lrtau_values.empty()) throw Error("config: lrtau_values must not be empty");
    for (double v : lrtau_values)
        if (!(v >= 0.0)) throw Error("config: lrtau_values must be nonnegative");
    if (!(depth_lrtau >= 0.0)) throw Error("config: depth_lrtau must be nonnegative");
    if (!(inner_rate > 0.0)) throw Error("config: inner_rate must be positive");
    if (!(test_steps >= 0.0)) throw Error("config: test_steps must be nonnegative");
    if (!(jitter > 0.0)) throw Error("config: jitter must be positive");
    if (lrtau_depth < 1 || num_test_tasks < 1 || num_seeds < 1 || spectra_tasks < 1 || spectra_points < 1)
        throw Error("config: depth, task and seed counts must be positive");
    if (fw_depth < 1 || fw_tasks < 1 || fw_points < 1 || fw_support < 1 || fw_query < 1 || fw_test_tasks < 1 ||
        fw_seeds < 1 || fw_outer_steps < 1 || fw_inner_steps < 0 || fw_test_steps < 0)
        throw Error("config: finite-width counts must be positive");
    if (!(fw_inner_rate > 0.0) || !(fw_label_scale > 0.0))
        throw Error("config: fw_inner_rate and fw_label_scale must be positive");
    if (gen_test_tasks < 0) throw Error("config: gen_test_tasks must be nonnegative");
    if (jobs < 1) throw Error("config: jobs must be >= 1");
}

std::string SweepConfig::canonical() const {
    std::string out;
    for (const auto& [key, spec] : key_table())
        if (spec.get) out += key + "=" + spec.get(*this) + "\n";
    return out;
}

std::string SweepConfig::hash() const { return fnv1a_hex(canonical()); }

std::uint64_t SweepConfig::run_seed(int run) const {
    return stream_seed(tasks.seed, StreamDomain::Run, static_cast<std::uint64_t>(run));
}

TaskDistributionConfig SweepConfig::run_tasks(int run) const {
    TaskDistributionConfig tc = tasks;
    tc.seed = run_seed(run);
    return tc;
}

std::vector<GapSummary> summarize(const std::vector<GapRow>& detail) {
    std::vector<GapSummary> out;
    std::size_t i = 0;
    while (i < detail.size()) {
        std::size_t j = i;
        while (j < detail.size() && detail[j].depth == detail[i].depth && detail[j].lrtau == detail[i].lrtau) ++j;
        GapSummary s;
        s.depth = detail[i].depth;
        s.lrtau = detail[i].lrtau;
        std::map<int, std::pair<double, int>> per_run;
        for (std::size_t k = i; k < j; ++k) {
            s.mean_l2 += detail[k].gap.l2;
            s.mean_rms += detail[k].gap.rms;
            s.jitter = std::max(s.jitter, detail[k].gap.jitter);
            auto& acc = per_run[detail[k].run];
            acc.first += detail[k].gap.l2;
            ++acc.second;
        }
        s.count = static_cast<int>(j - i);
        s.mean_l2 /= s.count;
        s.mean_rms /= s.count;
        std::vector<double> run_means;
        for (const auto& [run, acc] : per_run) run_means.push_back(acc.first / acc.second);
        s.ci95 = ci95_half_width(run_means);
        out.push_back(s);
        i = j;
    }
    return out;
}

SweepResult depth_sweep(const SweepConfig& cfg) {
    std::vector<std::pair<int, double>> points;
    for (int d : cfg.depths) points.emplace_back(d, cfg.depth_lrtau);
    return gap_grid(cfg, points);
}

SweepResult lrtau_sweep(const SweepConfig& cfg) {
    std::vector<std::pair<int, double>> points;
    for (double v : cfg.lrtau_values) points.emplace_back(cfg.lrtau_depth, v);
    return gap_grid(cfg, points);
}

std::vector<SpectraReport> spectra_scan(const SweepConfig& cfg) {
    cfg.validate();
    TaskDistributionConfig tc = cfg.run_tasks(0);
    tc.num_train_tasks = cfg.spectra_tasks;
    tc.points_per_task = cfg.spectra_points;
    const TrainingSet train = sample_training_set(tc);
    std::vector<SpectraReport> out(cfg.spectra_depths.size());
    run_jobs(out.size(), cfg.jobs, [&](std::size_t i) {
        NetworkSpec spec;
        spec.depth = cfg.spectra_depths[i];
        out[i] = spectra_report(compute_grampack(train.stacked_inputs(), train.blocks(), spec));
    });
    return out;
}

std::optional<double> loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) return std::nullopt;
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!(x[i] > 0.0) || !(y[i] > 0.0)) return std::nullopt;
        mx += std::log(x[i]);
        my += std::log(y[i]);
    }
    const double n = static_cast<double>(x.size());
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = std::log(x[i]) - mx;
        sxy += dx * (std::log(y[i]) - my);
        sxx += dx * dx;
    }
    if (sxx == 0.0) return std::nullopt;
    return sxy / sxx;
}

InverseGapResult inverse_gap_scan(const SweepConfig& cfg) {
    cfg.validate();
    if (cfg.inverse_gap_depths.size() < 4) throw Error("inverse-gap: need at least 4 depths");
    const TrainingSet train = sample_training_set(cfg.run_tasks(0));
    InverseGapResult out;
    out.depths = cfg.inverse_gap_depths;
    out.gaps.resize(out.depths.size());
    JitterPolicy jitter;
    jitter.initial = cfg.jitter;
    run_jobs(out.depths.size(), cfg.jobs, [&](std::size_t i) {
        NetworkSpec spec;
        spec.depth = out.depths[i];
        out.gaps[i] = kernel_inverse_gap(compute_grampack(train.stacked_inputs(), train.blocks(), spec), jitter);
    });
    std::vector<double> x, y;
    for (std::size_t i = 0; i < out.depths.size(); ++i) {
        x.push_back(out.depths[i]);
        y.push_back(out.gaps[i].gap);
    }
    out.slope = loglog_slope(x, y);
    return out;
}

FiniteWidthResult finite_width_scan(const SweepConfig& cfg) {
    cfg.validate();
    struct Job {
        int run;
        int width;
    };
    std::vector<Job> grid;
    for (int w : cfg.fw_widths)
        for (int r = 0; r < cfg.fw_seeds; ++r) grid.push_back({r, w});

    std::vector<FiniteWidthRow> rows(grid.size());
    run_jobs(grid.size(), cfg.jobs, [&](std::size_t i) {
        const Job& job = grid[i];
        TaskDistributionConfig tc = cfg.run_tasks(job.run);
        tc.num_train_tasks = cfg.fw_tasks;
        tc.points_per_task = cfg.fw_points;
        tc.support_size = cfg.fw_support;
        tc.query_size = cfg.fw_query;
        const TrainingSet train = sample_training_set(tc).scaled_labels(cfg.fw_label_scale);
        std::vector<TestTask> tests;
        for (int j = 0; j < cfg.fw_test_tasks; ++j)
            tests.push_back(sample_test_task(tc, static_cast<std::uint64_t>(j)).scaled_labels(cfg.fw_label_scale));

        NetworkSpec spec;
        spec.depth = cfg.fw_depth;
        const GramPack gram = compute_grampack(train.stacked_inputs(), train.blocks(), spec);
        const std::uint64_t net_seed = stream_seed(tc.seed, StreamDomain::NetworkInit, static_cast<std::uint64_t>(job.width));
        const MLPParams init = init_network(spec, train.dim(), job.width, train.num_tasks(), net_seed);

        FiniteWidthRow row;
        row.run = job.run;
        row.seed = tc.seed;
        row.width = job.width;
        const Matrix emp = empirical_ntk(init, train.stacked_inputs(), train.stacked_inputs());
        row.kernel_error = (emp - gram.ntk).norm() / gram.ntk.norm();

        FineTuneConfig ft;
        ft.rate = cfg.fw_inner_rate;
        ft.steps = cfg.fw_test_steps;
        ft.head_init = HeadInit::Shared;

        AdaptConfig adapt;
        adapt.inner_rate = cfg.fw_inner_rate;
        adapt.test_steps = cfg.fw_test_steps;
        adapt.schedule = Schedule::Discrete;

        // MTL: N heads, analytic step size from the limiting kernel.
        adapt.train_steps = 0.0;
        const double mtl_eta = 1.0 / sym_eig(mtl_train_kernel(gram)).eigenvalues.maxCoeff();
        adapt.outer_time = OuterTime{mtl_eta, static_cast<double>(cfg.fw_outer_steps)};
        TrainConfig tcfg;
        tcfg.outer_rate = mtl_eta;
        tcfg.outer_steps = cfg.fw_outer_steps;
        const MLPParams mtl_net = train_mtl(init, train, tcfg).params;
        const KernelPredictor mtl_kernel(train, spec, adapt);
        for (const auto& test : tests)
            row.mtl_discrepancy += (fine_tune_and_predict(mtl_net, test, ft, &init) - mtl_kernel.predict(test).mtl).norm();
        row.mtl_discrepancy /= static_cast<double>(tests.size());

        // ANIL: one shared head adapted for tau integer steps.
        adapt.train_steps = cfg.fw_inner_steps;
        const AnilTrainKernel anil_kernel = anil_train_kernel(gram, adapt);
        const double anil_eta = 1.0 / sym_eig(anil_kernel.kernel).eigenvalues.maxCoeff();
        adapt.outer_time = OuterTime{anil_eta, static_cast<double>(cfg.fw_outer_steps)};
        MLPParams anil_init = init;
        anil_init.heads = {init.init_head};
        tcfg.outer_rate = anil_eta;
        tcfg.inner_rate = cfg.fw_inner_rate;
        tcfg.inner_steps = cfg.fw_inner_steps;
        const MLPParams anil_net = train_anil(anil_init, train, tcfg).params;
        const KernelPredictor anil_predictor(train, spec, adapt);
        for (const auto& test : tests)
            row.anil_discrepancy +=
                (fine_tune_and_predict(anil_net, test, ft, &anil_init) - anil_predictor.predict(test).anil).norm();
        row.anil_discrepancy /= static_cast<double>(tests.size());
        rows[i] = row;
    });

    FiniteWidthResult out;
    out.detail = std::move(rows);
    std::stable_sort(out.detail.begin(), out.detail.end(), [](const FiniteWidthRow& a, const FiniteWidthRow& b) {
        return std::tie(a.width, a.run) < std::tie(b.width, b.run);
    });
    out.summary = summarize_widths(out.detail);
    return out;
}

CommandOutput run_command(const std::string& command, const SweepConfig& cfg) {
    cfg.validate();
    const OutputFormat f = cfg.format.value_or(command == "spectra" ? OutputFormat::Json : OutputFormat::Csv);
    CommandOutput out;
    if (command == "sweep-depth" || command == "sweep-lrtau") {
        const bool depth = command == "sweep-depth";
        const SweepResult result = depth ? depth_sweep(cfg) : lrtau_sweep(cfg);
        out.filename = std::string(depth ? "sweep_depth" : "sweep_lrtau") + extension(f);
        out.content = render(sweep_table(cfg, command, result), f);
        audit_sweep(out.content, f);
    } else if (command == "spectra") {
        out.filename = std::string("spectra") + extension(f);
        out.content = render(spectra_table(cfg, spectra_scan(cfg)), f);
    } else if (command == "inverse-gap") {
        out.filename = std::string("inverse_gap") + extension(f);
        out.content = render(inverse_gap_table(cfg, inverse_gap_scan(cfg)), f);
        audit_inverse_gap(out.content, f);
    } else if (command == "finite-width") {
        out.filename = std::string("finite_width") + extension(f);
        out.content = render(finite_width_table(cfg, finite_width_scan(cfg)), f);
        audit_finite_width(out.content, f);
    } else if (command == "gen-tasks") {
        out.filename = std::string("tasks") + extension(f);
        out.content = gen_tasks_content(cfg, f);
    } else {
        throw Error("unknown command '" + command + "'");
    }
    return out;
}

void run_jobs(std::size_t count, int jobs, const std::function<void(std::size_t)>& job) {
    const std::size_t threads = std::min<std::size_t>(count, static_cast<std::size_t>(std::max(jobs, 1)));
    if (threads <= 1) {
        for (std::size_t i = 0; i < count; ++i) job(i);
        return;
    }
    std::vector<std::exception_ptr> errors(count);
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (std::size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < count; i = next++) {
                try {
                    job(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace metakern
