#pragma once

// Few-shot quadratic regression tasks: per task mu ~ N(0, I_d), nu ~ U(low, high),
// x ~ N(mu, nu^2 I) and y = nu * |x - mu|^2 computed on the raw draw.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "metakern/analytic_kernels.hpp"

namespace metakern {

struct TaskParams {
    Vector mu;
    double nu = 0.0;
};

struct TaskData {
    Matrix raw;            // n x d, as sampled
    SampleMatrix inputs;   // normalized rows
    Vector labels;
    TaskParams params;
};

/// N tasks sharing n and d, stacked task-major.
class TrainingSet {
public:
    TrainingSet() = default;
    explicit TrainingSet(std::vector<TaskData> tasks);

    const std::vector<TaskData>& tasks() const { return tasks_; }
    int num_tasks() const { return static_cast<int>(tasks_.size()); }
    Index points_per_task() const { return tasks_.empty() ? 0 : tasks_.front().labels.size(); }
    Index dim() const { return tasks_.empty() ? 0 : tasks_.front().inputs.dim(); }

    const SampleMatrix& stacked_inputs() const { return stacked_; }
    const Vector& stacked_labels() const { return labels_; }
    const BlockIndex& blocks() const { return blocks_; }

    /// Same tasks, reordered so that new task k is old task order[k].
    TrainingSet permuted(const std::vector<int>& order) const;

    /// Same inputs with every label multiplied by `factor`.
    TrainingSet scaled_labels(double factor) const;

private:
    std::vector<TaskData> tasks_;
    SampleMatrix stacked_;
    Vector labels_;
    BlockIndex blocks_;
};

struct TestTask {
    Matrix query_raw;
    Matrix support_raw;
    SampleMatrix query_x;
    SampleMatrix support_x;
    Vector query_y;
    Vector support_y;
    TaskParams params;

    void validate() const;
    TestTask scaled_labels(double factor) const;
};

struct TaskDistributionConfig {
    int input_dim = 10;
    int num_train_tasks = 20;
    int points_per_task = 10;
    int support_size = 5;
    int query_size = 10;
    std::pair<double, double> nu_range{1.3, 1.6};
    std::uint64_t seed = 0;

    void validate() const;
};

/// Assembles a task from raw draws; labels are taken as given.
TaskData make_task(Matrix raw, Vector labels, TaskParams params = {});

double quadratic_label(const Vector& x, const TaskParams& params);

TrainingSet sample_training_set(const TaskDistributionConfig& config);
TestTask sample_test_task(const TaskDistributionConfig& config, std::uint64_t task_seed);

struct TaskFile {
    TrainingSet train;
    std::vector<TestTask> tests;
};

/// Plain-text task table: a schema comment line, a header row
/// `task_id,role,x0,...,x{d-1},label`, and one row per point with role
/// train, support or query. Test task ids restart at 0.
void write_task_file(std::ostream& out, const TrainingSet& train, const std::vector<TestTask>& tests);
TaskFile read_task_file(std::istream& in);

}  // namespace metakern
