#include "metakern/analytic_kernels.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace metakern {

namespace {

constexpr double kNormTolerance = 1e-12;
constexpr double kCosTolerance = 1e-12;

// Plain ordered dot product.
double scaled_dot(const Matrix& a, Index i, const Matrix& b, Index j) {
    double sum = 0.0;
    for (Index k = 0; k < a.cols(); ++k) sum += a(i, k) * b(j, k);
    return sum / static_cast<double>(a.cols());
}

bool row_is_normalized(const Matrix& rows, Index i) {
    const double d = static_cast<double>(rows.cols());
    return std::abs(rows.row(i).squaredNorm() - d) <= kNormTolerance * d;
}

// Diagonal variance at layers 0..L-1 for each row.
Matrix diagonal_variances(const Matrix& rows, const NetworkSpec& spec) {
    Matrix q(rows.rows(), spec.depth);
    for (Index i = 0; i < rows.rows(); ++i) {
        double v = scaled_dot(rows, i, rows, i);
        for (int l = 0; l < spec.depth; ++l) {
            q(i, l) = v;
            v = relu_dual(v, v, v, spec).next;
        }
    }
    return q;
}

struct EntryPair {
    double nngp;
    double ntk;
};

EntryPair kernel_entry(double c0, const Matrix& qa, Index i, const Matrix& qb, Index j,
                       const NetworkSpec& spec) {
    double c = c0;
    double theta = 0.0;
    for (int l = 0; l < spec.depth; ++l) {
        const DualEntry step = relu_dual(qa(i, l), qb(j, l), c, spec);
        theta = (l == 0) ? step.next : step.next + step.derivative * theta;
        c = step.next;
    }
    return {c, theta};
}

void require_normalized(const SampleMatrix& s, const char* who) {
    if (!s.normalized()) throw Error(std::string(who) + ": inputs must be normalized (squared row norm d)");
}

}  // namespace

void NetworkSpec::validate() const {
    if (depth < 1) throw Error("NetworkSpec: depth must be >= 1");
    if (!(weight_variance > 0.0)) throw Error("NetworkSpec: weight_variance must be > 0");
    if (bias_variance < 0.0) throw Error("NetworkSpec: bias_variance must be >= 0");
    if (output_dim != 1) throw Error("NetworkSpec: only output_dim = 1 is supported");
}

SampleMatrix SampleMatrix::wrap(Matrix rows) {
    bool ok = rows.rows() > 0 && rows.cols() > 0;
    for (Index i = 0; ok && i < rows.rows(); ++i) ok = row_is_normalized(rows, i);
    return SampleMatrix(std::move(rows), ok);
}

SampleMatrix normalize_inputs(const Matrix& raw) {
    if (raw.cols() == 0) throw Error("normalize_inputs: zero input dimension");
    Matrix out = raw;
    const double d = static_cast<double>(raw.cols());
    for (Index i = 0; i < raw.rows(); ++i) {
        const double norm = raw.row(i).norm();
        if (!(norm > 0.0) || !std::isfinite(norm)) {
            std::ostringstream msg;
            msg << "normalize_inputs: zero-norm input row " << i;
            throw Error(msg.str());
        }
        if (!row_is_normalized(raw, i)) out.row(i) *= std::sqrt(d) / norm;
    }
    return SampleMatrix(std::move(out), true);
}

SampleMatrix stack_samples(const std::vector<const SampleMatrix*>& parts) {
    if (parts.empty()) throw Error("stack_samples: nothing to stack");
    Index rows = 0;
    const Index d = parts.front()->dim();
    for (const auto* p : parts) {
        if (p->dim() != d) throw Error("stack_samples: dimension mismatch");
        rows += p->size();
    }
    Matrix out(rows, d);
    Index at = 0;
    for (const auto* p : parts) {
        out.middleRows(at, p->size()) = p->rows();
        at += p->size();
    }
    return SampleMatrix::wrap(std::move(out));
}

BlockIndex uniform_blocks(int num_tasks, Index points_per_task) {
    BlockIndex blocks;
    blocks.reserve(static_cast<std::size_t>(num_tasks));
    for (int t = 0; t < num_tasks; ++t) blocks.push_back({t, t * points_per_task, points_per_task});
    return blocks;
}

DualEntry relu_dual(double var_a, double var_b, double covariance, const NetworkSpec& spec) {
    if (!(var_a > 0.0) || !(var_b > 0.0)) throw Error("relu_dual: nonpositive diagonal variance");
    const double scale = std::sqrt(var_a * var_b);
    double cos_theta = covariance / scale;
    if (!(std::abs(cos_theta) <= 1.0 + kCosTolerance)) {
        std::ostringstream msg;
        msg << "relu_dual: covariance outside the valid range (cos = " << cos_theta << ")";
        throw Error(msg.str());
    }
    cos_theta = std::clamp(cos_theta, -1.0, 1.0);
    const double theta = std::acos(cos_theta);
    constexpr double pi = std::numbers::pi;
    DualEntry out;
    out.next = spec.weight_variance * scale / (2.0 * pi) * (std::sin(theta) + (pi - theta) * cos_theta) +
               spec.bias_variance;
    out.derivative = spec.weight_variance * (pi - theta) / (2.0 * pi);
    return out;
}

GramPack compute_grampack(const SampleMatrix& samples, BlockIndex blocks, const NetworkSpec& spec) {
    spec.validate();
    require_normalized(samples, "compute_grampack");
    const Matrix& x = samples.rows();
    const Index m = x.rows();
    const Matrix q = diagonal_variances(x, spec);

    GramPack out;
    out.nngp.resize(m, m);
    out.ntk.resize(m, m);
    for (Index i = 0; i < m; ++i) {
        for (Index j = i; j < m; ++j) {
            const EntryPair e = kernel_entry(scaled_dot(x, i, x, j), q, i, q, j, spec);
            out.nngp(i, j) = out.nngp(j, i) = e.nngp;
            out.ntk(i, j) = out.ntk(j, i) = e.ntk;
        }
    }
    out.blocks = std::move(blocks);
    out.depth = spec.depth;
    return out;
}

CrossGram cross_grampack(const SampleMatrix& a, const SampleMatrix& b, const NetworkSpec& spec) {
    spec.validate();
    require_normalized(a, "cross_grampack");
    require_normalized(b, "cross_grampack");
    if (a.dim() != b.dim()) throw Error("cross_grampack: input dimension mismatch");
    const Matrix qa = diagonal_variances(a.rows(), spec);
    const Matrix qb = diagonal_variances(b.rows(), spec);

    CrossGram out;
    out.nngp.resize(a.size(), b.size());
    out.ntk.resize(a.size(), b.size());
    for (Index i = 0; i < a.size(); ++i) {
        for (Index j = 0; j < b.size(); ++j) {
            const EntryPair e = kernel_entry(scaled_dot(a.rows(), i, b.rows(), j), qa, i, qb, j, spec);
            out.nngp(i, j) = e.nngp;
            out.ntk(i, j) = e.ntk;
        }
    }
    out.depth = spec.depth;
    return out;
}

}  // namespace metakern
