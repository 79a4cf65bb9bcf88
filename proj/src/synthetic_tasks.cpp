#include "metakern/synthetic_tasks.hpp"

#include <istream>
#include <ostream>
#include <set>
#include <sstream>

#include <boost/random/normal_distribution.hpp>
#include <boost/random/uniform_real_distribution.hpp>

#include "metakern/random.hpp"
#include "metakern/report_io.hpp"

namespace metakern {

namespace {

struct TaskDraw {
    TaskParams params;
    std::mt19937_64 rng;
};

TaskDraw draw_params(const TaskDistributionConfig& config, StreamDomain domain, std::uint64_t index) {
    TaskDraw out{{}, make_stream(config.seed, domain, index)};
    boost::random::normal_distribution<double> normal(0.0, 1.0);
    boost::random::uniform_real_distribution<double> uniform(config.nu_range.first, config.nu_range.second);
    out.params.mu.resize(config.input_dim);
    for (int k = 0; k < config.input_dim; ++k) out.params.mu(k) = normal(out.rng);
    out.params.nu = uniform(out.rng);
    return out;
}

void draw_points(TaskDraw& draw, int count, Matrix& raw, Vector& labels) {
    boost::random::normal_distribution<double> normal(0.0, 1.0);
    const Index d = draw.params.mu.size();
    raw.resize(count, d);
    labels.resize(count);
    for (int i = 0; i < count; ++i) {
        for (Index k = 0; k < d; ++k) raw(i, k) = draw.params.mu(k) + draw.params.nu * normal(draw.rng);
        labels(i) = quadratic_label(raw.row(i).transpose(), draw.params);
    }
}

struct RowKey {
    std::vector<double> v;
    bool operator<(const RowKey& o) const { return v < o.v; }
};

void require_distinct(const Matrix& rows, const char* who) {
    std::set<RowKey> seen;
    for (Index i = 0; i < rows.rows(); ++i) {
        RowKey key{std::vector<double>(rows.cols())};
        for (Index k = 0; k < rows.cols(); ++k) key.v[static_cast<std::size_t>(k)] = rows(i, k);
        if (!seen.insert(std::move(key)).second) {
            std::ostringstream msg;
            msg << who << ": duplicate input row " << i;
            throw Error(msg.str());
        }
    }
}

}  // namespace

TrainingSet::TrainingSet(std::vector<TaskData> tasks) : tasks_(std::move(tasks)) {
    if (tasks_.empty()) throw Error("TrainingSet: no tasks");
    const Index n = tasks_.front().labels.size();
    const Index d = tasks_.front().inputs.dim();
    if (n == 0) throw Error("TrainingSet: tasks have no points");
    std::vector<const SampleMatrix*> parts;
    for (const auto& t : tasks_) {
        if (t.labels.size() != n || t.inputs.size() != n) throw Error("TrainingSet: tasks must share n");
        if (t.inputs.dim() != d) throw Error("TrainingSet: tasks must share d");
        if (!t.inputs.normalized()) throw Error("TrainingSet: task inputs must be normalized");
        parts.push_back(&t.inputs);
    }
    stacked_ = stack_samples(parts);
    require_distinct(stacked_.rows(), "TrainingSet");
    labels_.resize(static_cast<Index>(tasks_.size()) * n);
    for (std::size_t i = 0; i < tasks_.size(); ++i) labels_.segment(static_cast<Index>(i) * n, n) = tasks_[i].labels;
    blocks_ = uniform_blocks(num_tasks(), n);
}

TrainingSet TrainingSet::permuted(const std::vector<int>& order) const {
    if (order.size() != tasks_.size()) throw Error("TrainingSet::permuted: order has the wrong length");
    std::vector<TaskData> out;
    out.reserve(order.size());
    for (int k : order) out.push_back(tasks_.at(static_cast<std::size_t>(k)));
    return TrainingSet(std::move(out));
}

TrainingSet TrainingSet::scaled_labels(double factor) const {
    std::vector<TaskData> out = tasks_;
    for (auto& t : out) t.labels *= factor;
    return TrainingSet(std::move(out));
}

void TestTask::validate() const {
    if (support_x.size() == 0) throw Error("TestTask: empty support set");
    if (query_x.size() == 0) throw Error("TestTask: empty query set");
    if (support_x.dim() != query_x.dim()) throw Error("TestTask: support and query dimensions differ");
    if (support_y.size() != support_x.size() || query_y.size() != query_x.size())
        throw Error("TestTask: label count mismatch");
    if (!support_x.normalized() || !query_x.normalized()) throw Error("TestTask: inputs must be normalized");
}

TestTask TestTask::scaled_labels(double factor) const {
    TestTask out = *this;
    out.query_y *= factor;
    out.support_y *= factor;
    return out;
}

void TaskDistributionConfig::validate() const {
    if (input_dim < 1 || num_train_tasks < 1 || points_per_task < 1 || support_size < 1 || query_size < 1)
        throw Error("TaskDistributionConfig: all counts must be positive");
    if (!(nu_range.first < nu_range.second)) throw Error("TaskDistributionConfig: nu_range needs low < high");
}

TaskData make_task(Matrix raw, Vector labels, TaskParams params) {
    if (raw.rows() != labels.size()) throw Error("make_task: label count mismatch");
    TaskData t;
    t.inputs = normalize_inputs(raw);
    t.raw = std::move(raw);
    t.labels = std::move(labels);
    t.params = std::move(params);
    return t;
}

double quadratic_label(const Vector& x, const TaskParams& params) {
    return params.nu * (x - params.mu).squaredNorm();
}

TrainingSet sample_training_set(const TaskDistributionConfig& config) {
    config.validate();
    std::vector<TaskData> tasks;
    tasks.reserve(static_cast<std::size_t>(config.num_train_tasks));
    for (int i = 0; i < config.num_train_tasks; ++i) {
        TaskDraw draw = draw_params(config, StreamDomain::TrainTask, static_cast<std::uint64_t>(i));
        Matrix raw;
        Vector labels;
        draw_points(draw, config.points_per_task, raw, labels);
        tasks.push_back(make_task(std::move(raw), std::move(labels), draw.params));
    }
    return TrainingSet(std::move(tasks));
}

TestTask sample_test_task(const TaskDistributionConfig& config, std::uint64_t task_seed) {
    config.validate();
    TaskDraw draw = draw_params(config, StreamDomain::TestTask, task_seed);
    TestTask t;
    draw_points(draw, config.support_size, t.support_raw, t.support_y);
    draw_points(draw, config.query_size, t.query_raw, t.query_y);
    t.support_x = normalize_inputs(t.support_raw);
    t.query_x = normalize_inputs(t.query_raw);
    t.params = draw.params;
    return t;
}

void write_task_file(std::ostream& out, const TrainingSet& train, const std::vector<TestTask>& tests) {
    const Index d = train.dim();
    out << "# " << kTaskSchema << " d=" << d << "\n";
    std::vector<std::string> header{"task_id", "role"};
    for (Index k = 0; k < d; ++k) header.push_back("x" + std::to_string(k));
    header.push_back("label");
    out << csv_line(header);
    auto emit = [&](std::size_t id, const char* role, const Matrix& raw, const Vector& y) {
        if (raw.cols() != d) throw Error("write_task_file: dimension mismatch");
        for (Index i = 0; i < raw.rows(); ++i) {
            std::vector<std::string> row{std::to_string(id), role};
            for (Index k = 0; k < d; ++k) row.push_back(format_double(raw(i, k)));
            row.push_back(format_double(y(i)));
            out << csv_line(row);
        }
    };
    for (std::size_t i = 0; i < train.tasks().size(); ++i)
        emit(i, "train", train.tasks()[i].raw, train.tasks()[i].labels);
    for (std::size_t i = 0; i < tests.size(); ++i) {
        emit(i, "support", tests[i].support_raw, tests[i].support_y);
        emit(i, "query", tests[i].query_raw, tests[i].query_y);
    }
}

TaskFile read_task_file(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || line.rfind(std::string("# ") + kTaskSchema, 0) != 0)
        throw Error("read_task_file: missing or unsupported schema line");
    if (!std::getline(in, line)) throw Error("read_task_file: missing header row");
    const auto header = split_csv_line(line);
    if (header.size() < 4 || header[0] != "task_id" || header[1] != "role" || header.back() != "label")
        throw Error("read_task_file: malformed header row");
    const std::size_t d = header.size() - 3;

    struct Rows {
        std::vector<std::vector<double>> x;
        std::vector<double> y;
    };
    std::vector<Rows> train, support, query;
    auto slot = [](std::vector<Rows>& v, std::size_t id) -> Rows& {
        if (id >= v.size()) v.resize(id + 1);
        return v[id];
    };
    std::size_t line_no = 2;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto f = split_csv_line(line);
        if (f.size() != d + 3) throw Error("read_task_file: wrong field count on line " + std::to_string(line_no));
        try {
            const std::size_t id = std::stoul(f[0]);
            Rows* rows = nullptr;
            if (f[1] == "train") rows = &slot(train, id);
            else if (f[1] == "support") rows = &slot(support, id);
            else if (f[1] == "query") rows = &slot(query, id);
            else throw Error("read_task_file: unknown role '" + f[1] + "' on line " + std::to_string(line_no));
            std::vector<double> x(d);
            for (std::size_t k = 0; k < d; ++k) x[k] = std::stod(f[k + 2]);
            rows->x.push_back(std::move(x));
            rows->y.push_back(std::stod(f.back()));
        } catch (const std::logic_error&) {
            throw Error("read_task_file: unparsable number on line " + std::to_string(line_no));
        }
    }
    auto to_matrix = [d](const Rows& r, Matrix& x, Vector& y) {
        x.resize(static_cast<Index>(r.x.size()), static_cast<Index>(d));
        y.resize(static_cast<Index>(r.y.size()));
        for (std::size_t i = 0; i < r.x.size(); ++i) {
            for (std::size_t k = 0; k < d; ++k) x(static_cast<Index>(i), static_cast<Index>(k)) = r.x[i][k];
            y(static_cast<Index>(i)) = r.y[i];
        }
    };

    TaskFile file;
    std::vector<TaskData> tasks;
    for (const auto& r : train) {
        Matrix x;
        Vector y;
        to_matrix(r, x, y);
        tasks.push_back(make_task(std::move(x), std::move(y)));
    }
    if (!tasks.empty()) file.train = TrainingSet(std::move(tasks));
    if (support.size() != query.size()) throw Error("read_task_file: test tasks need both support and query rows");
    for (std::size_t i = 0; i < support.size(); ++i) {
        TestTask t;
        to_matrix(support[i], t.support_raw, t.support_y);
        to_matrix(query[i], t.query_raw, t.query_y);
        t.support_x = normalize_inputs(t.support_raw);
        t.query_x = normalize_inputs(t.query_raw);
        t.validate();
        file.tests.push_back(std::move(t));
    }
    return file;
}

}  // namespace metakern
