#pragma once

// Infinite-width NNGP and NTK Gram matrices of fully-connected ReLU networks.
//
// Recursion (inputs normalized so that |x|^2 = d):
//   Sigma^0(x, x') = x.x' / d
//   Sigma^l, dSigma^l = relu_dual(Sigma^{l-1})         l = 1..L
//   Theta^1 = Sigma^1,  Theta^l = Sigma^l + dSigma^l * Theta^{l-1}
//   K = Sigma^L,  Theta = Theta^L
// With He initialization the diagonals are exactly 1 (K) and L (Theta).

#include <vector>

#include "metakern/types.hpp"

namespace metakern {

struct NetworkSpec {
    int depth = 1;
    double weight_variance = 2.0;
    double bias_variance = 0.0;
    int output_dim = 1;

    void validate() const;
};

/// Rows are input vectors. A normalized matrix has every row at squared norm d.
class SampleMatrix {
public:
    SampleMatrix() = default;

    /// Wraps rows as-is; `normalized()` reports whether they already satisfy the norm law.
    static SampleMatrix wrap(Matrix rows);

    const Matrix& rows() const { return rows_; }
    Index size() const { return rows_.rows(); }
    Index dim() const { return rows_.cols(); }
    bool normalized() const { return normalized_; }

private:
    SampleMatrix(Matrix rows, bool normalized) : rows_(std::move(rows)), normalized_(normalized) {}

    Matrix rows_;
    bool normalized_ = false;

    friend SampleMatrix normalize_inputs(const Matrix& raw);
};

/// Rescales each row to squared norm d. Throws on a zero-norm row.
SampleMatrix normalize_inputs(const Matrix& raw);

/// Stacks normalized sample matrices row-wise (task-major order).
SampleMatrix stack_samples(const std::vector<const SampleMatrix*>& parts);

struct TaskBlock {
    int task = 0;
    Index begin = 0;
    Index count = 0;
};
using BlockIndex = std::vector<TaskBlock>;

/// Contiguous equal-sized blocks: task t owns rows [t*n, (t+1)*n).
BlockIndex uniform_blocks(int num_tasks, Index points_per_task);

struct GramPack {
    Matrix nngp;
    Matrix ntk;
    BlockIndex blocks;
    int depth = 0;
};

struct CrossGram {
    Matrix nngp;
    Matrix ntk;
    int depth = 0;
};

struct DualEntry {
    double next = 0.0;
    double derivative = 0.0;
};

/// Arc-cosine step for ReLU: next-layer covariance and derivative covariance.
DualEntry relu_dual(double var_a, double var_b, double covariance, const NetworkSpec& spec);

/// Symmetric Gram pair over a stacked sample set.
GramPack compute_grampack(const SampleMatrix& samples, BlockIndex blocks, const NetworkSpec& spec);

/// Rectangular (K, Theta) blocks between two sample sets.
CrossGram cross_grampack(const SampleMatrix& a, const SampleMatrix& b, const NetworkSpec& spec);

}  // namespace metakern
