#include "metakern/meta_kernels.hpp"

#include <algorithm>
#include <cmath>

namespace metakern {

namespace {

void require_blocks(const GramPack& gram, const char* who) {
    if (gram.blocks.empty()) throw Error(std::string(who) + ": gram has no task block index");
    Index covered = 0;
    for (const auto& b : gram.blocks) {
        if (b.begin != covered || b.count <= 0) throw Error(std::string(who) + ": malformed task block index");
        covered += b.count;
    }
    if (covered != gram.ntk.rows()) throw Error(std::string(who) + ": block index does not cover the gram");
}

void require_depth(const TestGram& tg, const GramPack& gram, const char* who) {
    if (tg.depth != gram.depth || tg.query_train.depth != gram.depth || tg.support_train.depth != gram.depth ||
        tg.query_support.depth != gram.depth)
        throw Error(std::string(who) + ": kernel blocks computed at different depths");
}

// Right-multiplies the column blocks of m by the damping blocks.
Matrix apply_column_damping(const Matrix& m, const BlockIndex& blocks, const std::vector<Matrix>& damping) {
    Matrix out(m.rows(), m.cols());
    for (std::size_t j = 0; j < blocks.size(); ++j)
        out.middleCols(blocks[j].begin, blocks[j].count) = m.middleCols(blocks[j].begin, blocks[j].count) * damping[j];
    return out;
}

Matrix support_operator(const TestGram& tg, const AdaptConfig& adapt) {
    return phi_damping(tg.support_nngp, adapt.inner_rate, adapt.test_steps, adapt.schedule);
}

struct Solved {
    Vector weights;
    double jitter = 0.0;
};

Solved solve_train(const Matrix& kernel, const Vector& rhs, const AdaptConfig& adapt, const JitterPolicy& jitter) {
    if (adapt.outer_time) {
        const Matrix phi = phi_damping(kernel, adapt.outer_time->rate, adapt.outer_time->time, adapt.schedule);
        return {phi * rhs, 0.0};
    }
    SolveResult r = psd_solve(kernel, rhs, jitter);
    return {r.solution.col(0), r.jitter};
}

}  // namespace

void AdaptConfig::validate() const {
    if (inner_rate < 0.0 || train_steps < 0.0 || test_steps < 0.0)
        throw Error("AdaptConfig: rates and step counts must be nonnegative");
    if (outer_time && (outer_time->rate < 0.0 || outer_time->time < 0.0))
        throw Error("AdaptConfig: outer rate and time must be nonnegative");
}

Matrix block_diagonal(const std::vector<Matrix>& blocks) {
    Index m = 0;
    for (const auto& b : blocks) m += b.rows();
    Matrix out = Matrix::Zero(m, m);
    Index at = 0;
    for (const auto& b : blocks) {
        out.block(at, at, b.rows(), b.cols()) = b;
        at += b.rows();
    }
    return out;
}

Matrix CompositeKernels::damping() const { return block_diagonal(damping_blocks); }

Matrix mtl_train_kernel(const GramPack& gram) {
    require_blocks(gram, "mtl_train_kernel");
    Matrix out = gram.ntk;
    for (const auto& bi : gram.blocks) {
        for (const auto& bj : gram.blocks) {
            if (bi.task == bj.task) continue;
            out.block(bi.begin, bj.begin, bi.count, bj.count) -= gram.nngp.block(bi.begin, bj.begin, bi.count, bj.count);
        }
    }
    return out;
}

AnilTrainKernel anil_train_kernel(const GramPack& gram, const AdaptConfig& adapt) {
    require_blocks(gram, "anil_train_kernel");
    adapt.validate();
    AnilTrainKernel out;
    for (const auto& b : gram.blocks)
        out.damping_blocks.push_back(damping_matrix(gram.nngp.block(b.begin, b.begin, b.count, b.count),
                                                    adapt.inner_rate, adapt.train_steps, adapt.schedule));
    if (adapt.train_exponent() == 0.0) {
        out.kernel = gram.ntk;
        return out;
    }
    out.kernel.resize(gram.ntk.rows(), gram.ntk.cols());
    const auto& blocks = gram.blocks;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        for (std::size_t j = i; j < blocks.size(); ++j) {
            const auto& bi = blocks[i];
            const auto& bj = blocks[j];
            Matrix piece = out.damping_blocks[i] * gram.ntk.block(bi.begin, bj.begin, bi.count, bj.count) *
                           out.damping_blocks[j];
            if (i == j) piece = 0.5 * (piece + piece.transpose()).eval();
            out.kernel.block(bi.begin, bj.begin, bi.count, bj.count) = piece;
            if (i != j) out.kernel.block(bj.begin, bi.begin, bj.count, bi.count) = piece.transpose();
        }
    }
    return out;
}

CompositeKernels composite_kernels(GramPack gram, const AdaptConfig& adapt) {
    CompositeKernels out;
    out.mtl_train = mtl_train_kernel(gram);
    AnilTrainKernel anil = anil_train_kernel(gram, adapt);
    out.anil_train = std::move(anil.kernel);
    out.damping_blocks = std::move(anil.damping_blocks);
    out.base = std::move(gram);
    return out;
}

TestGram test_gram(const TestTask& test, const SampleMatrix& train_inputs, const NetworkSpec& spec) {
    test.validate();
    TestGram tg;
    tg.query_train = cross_grampack(test.query_x, train_inputs, spec);
    tg.support_train = cross_grampack(test.support_x, train_inputs, spec);
    tg.query_support = cross_grampack(test.query_x, test.support_x, spec);
    tg.support_nngp = compute_grampack(test.support_x, {}, spec).nngp;
    tg.depth = spec.depth;
    return tg;
}

Matrix mtl_test_kernel(const TestGram& tg, const GramPack& gram, const AdaptConfig& adapt) {
    require_depth(tg, gram, "mtl_test_kernel");
    adapt.validate();
    Matrix direct = tg.query_train.ntk - tg.query_train.nngp;
    if (adapt.inner_rate * adapt.test_steps == 0.0) return direct;
    const Matrix support = tg.support_train.ntk - tg.support_train.nngp;
    return direct - tg.query_support.nngp * (support_operator(tg, adapt) * support);
}

Matrix anil_test_kernel(const TestGram& tg, const CompositeKernels& kernels, const AdaptConfig& adapt,
                        AnilTestForm form) {
    require_depth(tg, kernels.base, "anil_test_kernel");
    if (kernels.damping_blocks.size() != kernels.base.blocks.size())
        throw Error("anil_test_kernel: damping blocks do not match the task blocks");
    Matrix body;
    if (form == AnilTestForm::Appendix) {
        body = mtl_test_kernel(tg, kernels.base, adapt);
    } else {
        adapt.validate();
        body = tg.query_train.ntk;
        if (adapt.inner_rate * adapt.test_steps != 0.0)
            body -= tg.query_support.nngp * (support_operator(tg, adapt) * tg.support_train.ntk);
    }
    if (adapt.train_exponent() == 0.0) return body;
    return apply_column_damping(body, kernels.base.blocks, kernels.damping_blocks);
}

Vector g_function(const Matrix& k_query_support, const Matrix& k_support_support, const Vector& support_y,
                  double rate, double steps, Schedule schedule) {
    if (k_support_support.rows() == 0 || support_y.size() == 0) throw Error("g_function: empty support set");
    if (k_query_support.cols() != k_support_support.rows() || support_y.size() != k_support_support.rows())
        throw Error("g_function: shape mismatch");
    if (rate * steps == 0.0) return Vector::Zero(k_query_support.rows());
    return k_query_support * (phi_damping(k_support_support, rate, steps, schedule) * support_y);
}

Vector g_function(const TestTask& test, const TestGram& tg, const AdaptConfig& adapt) {
    return g_function(tg.query_support.nngp, tg.support_nngp, test.support_y, adapt.inner_rate, adapt.test_steps,
                      adapt.schedule);
}

Vector train_adaptation(const GramPack& gram, const Vector& labels, const AdaptConfig& adapt) {
    require_blocks(gram, "train_adaptation");
    if (labels.size() != gram.nngp.rows()) throw Error("train_adaptation: label count mismatch");
    Vector out = Vector::Zero(labels.size());
    if (adapt.train_exponent() == 0.0) return out;
    for (const auto& b : gram.blocks) {
        const Matrix kii = gram.nngp.block(b.begin, b.begin, b.count, b.count);
        out.segment(b.begin, b.count) =
            g_function(kii, kii, labels.segment(b.begin, b.count), adapt.inner_rate, adapt.train_steps, adapt.schedule);
    }
    return out;
}

KernelPredictor::KernelPredictor(const TrainingSet& train, const NetworkSpec& spec, const AdaptConfig& adapt,
                                 const PredictorOptions& options)
    : train_inputs_(train.stacked_inputs()), spec_(spec), adapt_(adapt), options_(options) {
    adapt_.validate();
    kernels_ = composite_kernels(compute_grampack(train.stacked_inputs(), train.blocks(), spec_), adapt_);
    const Vector& y = train.stacked_labels();

    const Matrix& mtl_kernel = options_.mtl_uses_plain_ntk ? kernels_.base.ntk : kernels_.mtl_train;
    Solved mtl = solve_train(mtl_kernel, y, adapt_, options_.jitter);
    const Vector anil_rhs = y - train_adaptation(kernels_.base, y, adapt_);
    Solved anil = solve_train(kernels_.anil_train, anil_rhs, adapt_, options_.jitter);
    mtl_weights_ = std::move(mtl.weights);
    anil_weights_ = std::move(anil.weights);
    jitter_ = std::max(mtl.jitter, anil.jitter);
}

Prediction KernelPredictor::predict(const TestTask& test) const {
    const TestGram tg = test_gram(test, train_inputs_, spec_);
    const Vector g = g_function(test, tg, adapt_);
    const Matrix mtl_test = mtl_test_kernel(tg, kernels_.base, adapt_);
    Matrix anil_test;
    if (options_.anil_form == AnilTestForm::Appendix) {
        anil_test = adapt_.train_exponent() == 0.0
                        ? mtl_test
                        : apply_column_damping(mtl_test, kernels_.base.blocks, kernels_.damping_blocks);
    } else {
        anil_test = anil_test_kernel(tg, kernels_, adapt_, AnilTestForm::MainText);
    }
    Prediction p;
    p.mtl = g + mtl_test * mtl_weights_;
    p.anil = g + anil_test * anil_weights_;
    p.jitter = jitter_;
    return p;
}

Vector predict_mtl(const TrainingSet& train, const TestTask& test, const NetworkSpec& spec, const AdaptConfig& adapt,
                   const PredictorOptions& options) {
    return KernelPredictor(train, spec, adapt, options).predict(test).mtl;
}

Vector predict_anil(const TrainingSet& train, const TestTask& test, const NetworkSpec& spec, const AdaptConfig& adapt,
                    const PredictorOptions& options) {
    return KernelPredictor(train, spec, adapt, options).predict(test).anil;
}

GapResult prediction_gap(const Prediction& p) {
    const Vector diff = p.anil - p.mtl;
    GapResult g;
    g.l2 = diff.norm();
    g.rms = diff.size() ? g.l2 / std::sqrt(static_cast<double>(diff.size())) : 0.0;
    g.jitter = p.jitter;
    return g;
}

GapResult prediction_gap(const TrainingSet& train, const TestTask& test, const NetworkSpec& spec,
                         const AdaptConfig& adapt, const PredictorOptions& options) {
    return prediction_gap(KernelPredictor(train, spec, adapt, options).predict(test));
}

InverseGap kernel_inverse_gap(const GramPack& gram, const JitterPolicy& jitter) {
    const Matrix mtl = mtl_train_kernel(gram);
    const Matrix eye = Matrix::Identity(gram.ntk.rows(), gram.ntk.cols());
    const SolveResult a = psd_solve(gram.ntk, eye, jitter);
    const SolveResult b = psd_solve(mtl, eye, jitter);
    Matrix diff = a.solution - b.solution;
    diff = 0.5 * (diff + diff.transpose()).eval();
    return {symmetric_operator_norm(diff), std::max(a.jitter, b.jitter)};
}

double SpectraReport::ntk_top_rel_error() const { return std::abs(ntk_top - ntk_top_predicted) / ntk_top_predicted; }
double SpectraReport::ntk_bulk_rel_error() const {
    return std::abs(ntk_bulk_mean - ntk_bulk_predicted) / ntk_bulk_predicted;
}
double SpectraReport::nngp_top_rel_error() const {
    return std::abs(nngp_top - nngp_top_predicted) / nngp_top_predicted;
}

SpectraReport spectra_report(const GramPack& gram) {
    constexpr double kAsymptoticCorrelation = 0.95;
    const Index m = gram.ntk.rows();
    if (m == 0) throw Error("spectra_report: empty gram");
    SpectraReport r;
    r.depth = gram.depth;
    r.points = m;
    const double l = static_cast<double>(gram.depth);
    const double md = static_cast<double>(m);
    const Vector ntk_eig = sym_eig(gram.ntk).eigenvalues;
    const Vector nngp_eig = sym_eig(gram.nngp).eigenvalues;
    r.ntk_top = ntk_eig(m - 1);
    r.ntk_bulk_mean = m > 1 ? (ntk_eig.sum() - r.ntk_top) / (md - 1.0) : 0.0;
    r.nngp_top = nngp_eig(m - 1);
    r.ntk_top_predicted = (md + 3.0) * l / 4.0;
    r.ntk_bulk_predicted = 3.0 * l / 4.0;
    r.nngp_top_predicted = md;
    r.min_offdiag_nngp = 1.0;
    for (Index i = 0; i < m; ++i)
        for (Index j = i + 1; j < m; ++j) r.min_offdiag_nngp = std::min(r.min_offdiag_nngp, gram.nngp(i, j));
    r.asymptotic = m > 1 && r.min_offdiag_nngp >= kAsymptoticCorrelation;
    return r;
}

}  // namespace metakern
