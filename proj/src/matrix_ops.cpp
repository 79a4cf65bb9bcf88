#include "metakern/matrix_ops.hpp"

#include <cmath>
#include <iostream>
#include <sstream>

namespace metakern {

namespace {

constexpr double kSymmetryTolerance = 1e-9;
constexpr double kZeroEigenvalue = 1e-12;
constexpr int kRefinementSweeps = 3;

void require_finite(const Matrix& s, const char* who) {
    if (!s.allFinite()) throw Error(std::string(who) + ": non-finite matrix entries");
}

void validate_rate_steps(double rate, double steps, Schedule schedule, const char* who) {
    if (rate < 0.0 || steps < 0.0) throw Error(std::string(who) + ": rate and steps must be nonnegative");
    if (schedule == Schedule::Discrete && steps != std::floor(steps))
        throw Error(std::string(who) + ": discrete schedule needs an integer step count");
}

double zero_threshold(const Vector& eigenvalues) {
    return kZeroEigenvalue * eigenvalues.cwiseAbs().maxCoeff();
}

}  // namespace

Matrix SpectralDecomposition::reconstruct() const {
    return basis * eigenvalues.asDiagonal() * basis.transpose();
}

SpectralDecomposition sym_eig(const Matrix& s) {
    if (s.rows() != s.cols()) throw Error("sym_eig: matrix is not square");
    require_finite(s, "sym_eig");
    const double scale = std::max(s.cwiseAbs().maxCoeff(), 1e-300);
    if ((s - s.transpose()).cwiseAbs().maxCoeff() > kSymmetryTolerance * scale)
        throw Error("sym_eig: matrix is not symmetric");
    const Matrix sym = 0.5 * (s + s.transpose());
    Eigen::SelfAdjointEigenSolver<Matrix> solver(sym);
    if (solver.info() != Eigen::Success) throw Error("sym_eig: eigensolver did not converge");
    return {solver.eigenvalues(), solver.eigenvectors()};
}

Matrix apply_spectral(const SpectralDecomposition& eig, const std::function<double(double)>& f) {
    Vector mapped(eig.eigenvalues.size());
    for (Index i = 0; i < mapped.size(); ++i) {
        mapped(i) = f(eig.eigenvalues(i));
        if (!std::isfinite(mapped(i))) {
            std::ostringstream msg;
            msg << "apply_spectral: function is not finite at eigenvalue " << eig.eigenvalues(i);
            throw Error(msg.str());
        }
    }
    return eig.basis * mapped.asDiagonal() * eig.basis.transpose();
}

Matrix apply_spectral(const Matrix& s, const std::function<double(double)>& f) {
    return apply_spectral(sym_eig(s), f);
}

Matrix damping_matrix(const Matrix& s, double rate, double steps, Schedule schedule) {
    validate_rate_steps(rate, steps, schedule, "damping_matrix");
    if (rate * steps == 0.0) return Matrix::Identity(s.rows(), s.cols());
    if (schedule == Schedule::Continuous)
        return apply_spectral(s, [&](double v) { return std::exp(-rate * v * steps); });
    return apply_spectral(s, [&](double v) { return std::pow(1.0 - rate * v, steps); });
}

Matrix phi_damping(const Matrix& s, double rate, double steps, Schedule schedule) {
    validate_rate_steps(rate, steps, schedule, "phi_damping");
    if (rate * steps == 0.0) return Matrix::Zero(s.rows(), s.cols());
    const SpectralDecomposition eig = sym_eig(s);
    const double zero = zero_threshold(eig.eigenvalues);
    const double limit = rate * steps;
    if (schedule == Schedule::Continuous) {
        return apply_spectral(eig, [&](double v) {
            if (std::abs(v) <= zero) return limit;
            return -std::expm1(-rate * v * steps) / v;
        });
    }
    return apply_spectral(eig, [&](double v) {
        if (std::abs(v) <= zero) return limit;
        return (1.0 - std::pow(1.0 - rate * v, steps)) / v;
    });
}

SolveResult psd_solve(const Matrix& s, const Matrix& b, const JitterPolicy& policy) {
    if (s.rows() != s.cols() || s.rows() != b.rows()) throw Error("psd_solve: shape mismatch");
    require_finite(s, "psd_solve");
    require_finite(b, "psd_solve");
    const Index m = s.rows();
    const double trace = s.trace();
    const double scale = trace > 0.0 ? trace / static_cast<double>(m) : 1.0;

    double jitter = policy.initial;
    for (int attempt = 0; attempt <= policy.max_escalations; ++attempt) {
        Matrix shifted = s;
        shifted.diagonal().array() += jitter * scale;
        Eigen::LLT<Matrix> llt(shifted);
        if (llt.info() == Eigen::Success) {
            Matrix z = llt.solve(b);
            if (z.allFinite()) {
                Matrix residual = b - s * z;
                double residual_norm = residual.norm();
                for (int sweep = 0; sweep < kRefinementSweeps && residual_norm > 0.0; ++sweep) {
                    Matrix candidate = z + llt.solve(residual);
                    Matrix next_residual = b - s * candidate;
                    const double next_norm = next_residual.norm();
                    if (!(next_norm < 0.5 * residual_norm)) break;
                    z = std::move(candidate);
                    residual = std::move(next_residual);
                    residual_norm = next_norm;
                }
                return {std::move(z), jitter, attempt};
            }
        }
        if (attempt < policy.max_escalations) {
            std::clog << "[metakern] psd_solve: factorization failed at jitter " << jitter << ", escalating to "
                      << jitter * policy.growth << "\n";
            jitter *= policy.growth;
        }
    }
    std::ostringstream msg;
    msg << "psd_solve: factorization failed up to jitter " << jitter << " x trace/m";
    throw Error(msg.str());
}

double symmetric_operator_norm(const Matrix& s) {
    if (s.size() == 0) return 0.0;
    return sym_eig(s).eigenvalues.cwiseAbs().maxCoeff();
}

}  // namespace metakern
