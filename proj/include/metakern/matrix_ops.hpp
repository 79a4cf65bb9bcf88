#pragma once

// Spectral functions of symmetric PSD matrices and a jittered PSD solver.

#include <functional>

#include "metakern/types.hpp"

namespace metakern {

/// How an inner/outer step count enters a spectral factor.
///   Continuous: gradient flow, factor e^{-rate*s*steps}
///   Discrete:   `steps` gradient-descent iterations, factor (1 - rate*s)^steps
enum class Schedule { Continuous, Discrete };

struct SpectralDecomposition {
    Vector eigenvalues;  // ascending
    Matrix basis;        // orthonormal columns

    Matrix reconstruct() const;
};

SpectralDecomposition sym_eig(const Matrix& s);

Matrix apply_spectral(const SpectralDecomposition& eig, const std::function<double(double)>& f);
Matrix apply_spectral(const Matrix& s, const std::function<double(double)>& f);

/// e^{-rate*S*steps} (or its discrete counterpart). Identity exactly when rate*steps == 0.
Matrix damping_matrix(const Matrix& s, double rate, double steps, Schedule schedule = Schedule::Continuous);

/// g(S) with g(s) = (1 - e^{-rate*s*steps}) / s and g(0) = rate*steps, i.e.
/// S^{-1}(I - e^{-rate*S*steps}) without ever inverting S.
Matrix phi_damping(const Matrix& s, double rate, double steps, Schedule schedule = Schedule::Continuous);

struct JitterPolicy {
    double initial = 1e-10;  // relative to trace(S)/m
    double growth = 10.0;
    int max_escalations = 4;
};

struct SolveResult {
    Matrix solution;
    double jitter = 0.0;  // relative jitter actually used
    int escalations = 0;
};

/// Solves S Z = B through a Cholesky factorization of S + jitter*(trace(S)/m)*I,
/// followed by residual refinement against S.
SolveResult psd_solve(const Matrix& s, const Matrix& b, const JitterPolicy& policy = {});

/// Largest absolute eigenvalue of a symmetric matrix (its operator norm).
double symmetric_operator_norm(const Matrix& s);

}  // namespace metakern
