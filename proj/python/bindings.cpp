#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "metakern/analytic_kernels.hpp"
#include "metakern/experiments.hpp"
#include "metakern/matrix_ops.hpp"
#include "metakern/meta_kernels.hpp"
#include "metakern/synthetic_tasks.hpp"

namespace py = pybind11;
using namespace metakern;

namespace {

NetworkSpec spec_of(int depth) {
    NetworkSpec s;
    s.depth = depth;
    return s;
}

TrainingSet training_set(const std::string& config, int run) { return sample_training_set(SweepConfig::parse(config).run_tasks(run)); }

py::dict gram_dict(const GramPack& g) {
    py::dict d;
    d["nngp"] = g.nngp;
    d["ntk"] = g.ntk;
    d["depth"] = g.depth;
    return d;
}

}  // namespace

PYBIND11_MODULE(_metakern, m) {
    m.doc() = "Infinite-width MTL and ANIL kernels for ReLU networks.";
    py::register_exception<Error>(m, "MetakernError", PyExc_ValueError);

    m.def(
        "relu_dual",
        [](double qa, double qb, double c, double weight_variance, double bias_variance) {
            NetworkSpec s;
            s.weight_variance = weight_variance;
            s.bias_variance = bias_variance;
            const DualEntry e = relu_dual(qa, qb, c, s);
            return py::make_tuple(e.next, e.derivative);
        },
        py::arg("q_a"), py::arg("q_b"), py::arg("covariance"), py::arg("weight_variance") = 2.0,
        py::arg("bias_variance") = 0.0);

    m.def(
        "normalize_inputs", [](const Matrix& raw) -> Matrix { return normalize_inputs(raw).rows(); }, py::arg("raw"));

    m.def(
        "compute_grampack",
        [](const Matrix& raw, int depth, int num_tasks) {
            const SampleMatrix x = normalize_inputs(raw);
            BlockIndex blocks;
            if (num_tasks > 0) {
                if (x.size() % num_tasks != 0) throw Error("compute_grampack: rows do not split evenly into tasks");
                blocks = uniform_blocks(num_tasks, x.size() / num_tasks);
            }
            GramPack g = compute_grampack(x, blocks, spec_of(depth));
            py::dict d = gram_dict(g);
            if (num_tasks > 0) d["mtl"] = mtl_train_kernel(g);
            return d;
        },
        py::arg("raw"), py::arg("depth"), py::arg("num_tasks") = 0,
        "NNGP and NTK Gram matrices of the normalized rows; with num_tasks also the MTL kernel.");

    m.def(
        "phi_damping",
        [](const Matrix& s, double rate, double steps, bool discrete) {
            return phi_damping(s, rate, steps, discrete ? Schedule::Discrete : Schedule::Continuous);
        },
        py::arg("s"), py::arg("rate"), py::arg("steps"), py::arg("discrete") = false);

    m.def(
        "sample_training_set",
        [](const std::string& config, int run) {
            const TrainingSet t = training_set(config, run);
            py::dict d;
            Matrix raw(t.stacked_inputs().size(), t.dim());
            Index at = 0;
            for (const auto& task : t.tasks()) {
                raw.middleRows(at, task.raw.rows()) = task.raw;
                at += task.raw.rows();
            }
            d["raw"] = raw;
            d["inputs"] = t.stacked_inputs().rows();
            d["labels"] = t.stacked_labels();
            d["num_tasks"] = t.num_tasks();
            d["points_per_task"] = t.points_per_task();
            return d;
        },
        py::arg("config") = "", py::arg("run") = 0);

    m.def(
        "sample_test_task",
        [](const std::string& config, std::uint64_t task_seed, int run) {
            const TestTask t = sample_test_task(SweepConfig::parse(config).run_tasks(run), task_seed);
            py::dict d;
            d["support_raw"] = t.support_raw;
            d["support_y"] = t.support_y;
            d["query_raw"] = t.query_raw;
            d["query_y"] = t.query_y;
            return d;
        },
        py::arg("config") = "", py::arg("task_seed") = 0, py::arg("run") = 0);

    m.def(
        "prediction_gap",
        [](const std::string& config, int depth, double lrtau, int run, std::uint64_t task) {
            const SweepConfig cfg = SweepConfig::parse(config);
            const TaskDistributionConfig tc = cfg.run_tasks(run);
            AdaptConfig adapt;
            adapt.inner_rate = cfg.inner_rate;
            adapt.train_steps = lrtau / cfg.inner_rate;
            adapt.test_steps = cfg.test_steps;
            const GapResult g = prediction_gap(sample_training_set(tc), sample_test_task(tc, task), spec_of(depth), adapt);
            return py::make_tuple(g.l2, g.rms);
        },
        py::arg("config") = "", py::arg("depth") = 10, py::arg("lrtau") = 0.0, py::arg("run") = 0,
        py::arg("task") = 0, "(l2, rms) distance between the ANIL and MTL predictions on one test task.");

    m.def(
        "kernel_inverse_gap",
        [](const std::string& config, int depth, int run) {
            const TrainingSet t = training_set(config, run);
            return kernel_inverse_gap(compute_grampack(t.stacked_inputs(), t.blocks(), spec_of(depth))).gap;
        },
        py::arg("config") = "", py::arg("depth") = 16, py::arg("run") = 0);

    m.def(
        "run_command",
        [](const std::string& command, const std::string& config) {
            CommandOutput out;
            {
                py::gil_scoped_release release;
                out = run_command(command, SweepConfig::parse(config));
            }
            return py::make_tuple(out.filename, py::bytes(out.content));
        },
        py::arg("command"), py::arg("config") = "", "Runs a command and returns (filename, content bytes).");

    m.def("config_hash", [](const std::string& config) { return SweepConfig::parse(config).hash(); },
          py::arg("config") = "");
    m.def("command_names", [] { return command_names(); });
}
