#pragma once

#include <random>

#include "metakern/analytic_kernels.hpp"
#include "metakern/synthetic_tasks.hpp"

namespace testing {

using metakern::Index;
using metakern::Matrix;
using metakern::Vector;

inline Matrix random_matrix(Index rows, Index cols, unsigned seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix m(rows, cols);
    for (Index i = 0; i < rows; ++i)
        for (Index j = 0; j < cols; ++j) m(i, j) = normal(rng);
    return m;
}

inline Matrix random_spd(Index m, unsigned seed, double ridge = 1.0) {
    const Matrix a = random_matrix(m, m, seed);
    return a * a.transpose() + ridge * Matrix::Identity(m, m);
}

inline double rel_frobenius(const Matrix& a, const Matrix& b) {
    const double scale = std::max(a.norm(), b.norm());
    return scale == 0.0 ? 0.0 : (a - b).norm() / scale;
}

inline metakern::TaskDistributionConfig small_tasks(int n_tasks, int points, std::uint64_t seed) {
    metakern::TaskDistributionConfig c;
    c.num_train_tasks = n_tasks;
    c.points_per_task = points;
    c.support_size = 3;
    c.query_size = 4;
    c.input_dim = 6;
    c.seed = seed;
    return c;
}

}  // namespace testing
