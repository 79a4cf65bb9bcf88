#pragma once

// Composite MTL / ANIL kernels and the infinite-width test-time predictors.
//
//   Theta_MTL  = Theta - K + blockdiag(K_ii)
//   Theta_ANIL = D Theta D,            D = blockdiag(exp(-lambda K_ii tau))
//   T          = K(X',X')^{-1} (I - exp(-lambda K(X',X') tau_hat))
//   Theta'_MTL = (Theta - K)(X, XX) - K(X,X') T (Theta - K)(X', XX)
//   Theta'_ANIL = Theta'_MTL D
//   F_MTL  = G + Theta'_MTL  Theta_MTL^{-1}  YY
//   F_ANIL = G + Theta'_ANIL Theta_ANIL^{-1} (YY - G_tau(XX))
// with G = K(X,X') T Y'.

#include <optional>
#include <vector>

#include "metakern/analytic_kernels.hpp"
#include "metakern/matrix_ops.hpp"
#include "metakern/synthetic_tasks.hpp"

namespace metakern {

struct OuterTime {
    double rate = 1.0;  // eta
    double time = 0.0;  // t
};

struct AdaptConfig {
    double inner_rate = 0.1;   // lambda
    double train_steps = 0.0;  // tau
    double test_steps = 10.0;  // tau_hat
    std::optional<OuterTime> outer_time;  // unset: trained to convergence
    Schedule schedule = Schedule::Continuous;

    double train_exponent() const { return inner_rate * train_steps; }
    void validate() const;
};

enum class AnilTestForm {
    Appendix,  // Theta'_MTL D
    MainText,  // [Theta(X,XX) - K(X,X') T Theta(X',XX)] D (diagnostic)
};

struct PredictorOptions {
    AnilTestForm anil_form = AnilTestForm::Appendix;
    bool mtl_uses_plain_ntk = false;  // diagnostic: Theta in place of Theta_MTL
    JitterPolicy jitter;
};

struct CompositeKernels {
    Matrix mtl_train;
    Matrix anil_train;
    std::vector<Matrix> damping_blocks;
    GramPack base;

    Matrix damping() const;
};

struct AnilTrainKernel {
    Matrix kernel;
    std::vector<Matrix> damping_blocks;
};

Matrix block_diagonal(const std::vector<Matrix>& blocks);

Matrix mtl_train_kernel(const GramPack& gram);
AnilTrainKernel anil_train_kernel(const GramPack& gram, const AdaptConfig& adapt);
CompositeKernels composite_kernels(GramPack gram, const AdaptConfig& adapt);

/// Cross blocks between a test task and the training stack.
struct TestGram {
    CrossGram query_train;
    CrossGram support_train;
    CrossGram query_support;
    Matrix support_nngp;
    int depth = 0;
};

TestGram test_gram(const TestTask& test, const SampleMatrix& train_inputs, const NetworkSpec& spec);
inline TestGram test_gram(const TestTask& test, const TrainingSet& train, const NetworkSpec& spec) {
    return test_gram(test, train.stacked_inputs(), spec);
}

Matrix mtl_test_kernel(const TestGram& tg, const GramPack& gram, const AdaptConfig& adapt);
Matrix anil_test_kernel(const TestGram& tg, const CompositeKernels& kernels, const AdaptConfig& adapt,
                        AnilTestForm form = AnilTestForm::Appendix);

/// K(X,X') phi(K(X',X'), rate, steps) Y'.
Vector g_function(const Matrix& k_query_support, const Matrix& k_support_support, const Vector& support_y,
                  double rate, double steps, Schedule schedule = Schedule::Continuous);
Vector g_function(const TestTask& test, const TestGram& tg, const AdaptConfig& adapt);

/// Task-wise stack of G_tau(X_i, X_i, Y_i).
Vector train_adaptation(const GramPack& gram, const Vector& labels, const AdaptConfig& adapt);

struct Prediction {
    Vector mtl;
    Vector anil;
    double jitter = 0.0;  // largest relative jitter used by any solve
};

/// Precomputes the training-side solves for one training set and depth.
class KernelPredictor {
public:
    KernelPredictor(const TrainingSet& train, const NetworkSpec& spec, const AdaptConfig& adapt,
                    const PredictorOptions& options = {});

    Prediction predict(const TestTask& test) const;
    const CompositeKernels& kernels() const { return kernels_; }
    double jitter() const { return jitter_; }

private:
    SampleMatrix train_inputs_;
    NetworkSpec spec_;
    AdaptConfig adapt_;
    PredictorOptions options_;
    CompositeKernels kernels_;
    Vector mtl_weights_;
    Vector anil_weights_;
    double jitter_ = 0.0;
};

Vector predict_mtl(const TrainingSet& train, const TestTask& test, const NetworkSpec& spec, const AdaptConfig& adapt,
                   const PredictorOptions& options = {});
Vector predict_anil(const TrainingSet& train, const TestTask& test, const NetworkSpec& spec, const AdaptConfig& adapt,
                    const PredictorOptions& options = {});

struct GapResult {
    double l2 = 0.0;
    double rms = 0.0;
    double jitter = 0.0;
};

GapResult prediction_gap(const Prediction& p);
GapResult prediction_gap(const TrainingSet& train, const TestTask& test, const NetworkSpec& spec,
                         const AdaptConfig& adapt, const PredictorOptions& options = {});

struct InverseGap {
    double gap = 0.0;
    double jitter = 0.0;
};

/// Operator norm of Theta^{-1} - Theta_MTL^{-1}.
InverseGap kernel_inverse_gap(const GramPack& gram, const JitterPolicy& jitter = {});

struct SpectraReport {
    int depth = 0;
    Index points = 0;
    double ntk_top = 0.0;
    double ntk_top_predicted = 0.0;
    double ntk_bulk_mean = 0.0;
    double ntk_bulk_predicted = 0.0;
    double nngp_top = 0.0;
    double nngp_top_predicted = 0.0;
    double min_offdiag_nngp = 0.0;
    bool asymptotic = false;

    double ntk_top_rel_error() const;
    double ntk_bulk_rel_error() const;
    double nngp_top_rel_error() const;
};

SpectraReport spectra_report(const GramPack& gram);

}  // namespace metakern
