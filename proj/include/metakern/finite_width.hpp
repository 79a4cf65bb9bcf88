#pragma once

// Finite-width NTK-parameterized ReLU MLPs with one or more linear heads.
//
//   u_1     = X R / sqrt(d)                 R: d x h, fixed at init
//   u_{k+1} = s relu(u_k) W_k,  k = 1..L-1  W_k: h x h, trainable
//   phi(X)  = s relu(u_L),      f = phi(X) w
// with s = sqrt(sigma_w^2 / h) and all raw entries N(0, 1). The trainable
// parameters (W_1..W_{L-1}, w) form L layers, so the tangent kernel tends to
// the analytic Theta of depth L and the head-only kernel to K.

#include <cstdint>
#include <optional>
#include <vector>

#include "metakern/analytic_kernels.hpp"
#include "metakern/synthetic_tasks.hpp"

namespace metakern {

struct MLPParams {
    int depth = 1;
    double weight_variance = 2.0;
    Matrix readin;
    std::vector<Matrix> hidden;  // depth - 1 matrices
    Vector init_head;            // w_0, shared starting point of every head
    std::vector<Vector> heads;

    Index width() const { return readin.cols(); }
    Index input_dim() const { return readin.rows(); }
    double scale() const;
    void validate() const;
};

/// Per-parameter gradients, shaped like MLPParams::hidden and MLPParams::heads.
struct MLPGradient {
    std::vector<Matrix> hidden;
    std::vector<Vector> heads;
};

MLPParams init_network(const NetworkSpec& spec, Index input_dim, Index width, int head_count, std::uint64_t seed);

/// Last hidden features phi(X), n x h.
Matrix features(const MLPParams& params, const SampleMatrix& x);

Vector forward(const MLPParams& params, const SampleMatrix& x, int head);
Vector forward_with_head(const MLPParams& params, const SampleMatrix& x, const Vector& head);

enum class NtkScope { AllParams, HeadOnly };

/// Gradient inner products of f(., head) over the trainable parameters.
Matrix empirical_ntk(const MLPParams& params, const SampleMatrix& xa, const SampleMatrix& xb,
                     NtkScope scope = NtkScope::AllParams, int head = 0);

struct TrainConfig {
    double outer_rate = 0.0;  // eta; 0 picks default_outer_rate
    int outer_steps = 100;
    double inner_rate = 0.1;  // lambda
    int inner_steps = 0;      // tau
    bool anil_update_head = true;
    bool center_outputs = true;

    void validate() const;
};

struct LossAndGrad {
    double loss = 0.0;
    MLPGradient grad;
};

/// Per-row offsets subtracted from the network output (output centering).
/// An empty vector means no centering.
using Offsets = Vector;

/// 1/2 sum_i |phi(X_i) w_i - c_i - Y_i|^2 over the N task heads.
LossAndGrad mtl_loss_and_grad(const MLPParams& params, const TrainingSet& train, const Offsets& offsets = {});

/// 1/2 sum_i |phi(X_i) w_i^tau - c_i - Y_i|^2 where w_i^tau is the head after
/// tau inner gradient steps from the shared head heads[0]; the gradient is taken
/// through the unrolled inner loop.
LossAndGrad anil_loss_and_grad(const MLPParams& params, const TrainingSet& train, double inner_rate,
                               int inner_steps, const Offsets& offsets = {});

/// 1/2 |phi(X') w - c - Y'|^2 and its gradient in w.
struct HeadLossAndGrad {
    double loss = 0.0;
    Vector grad;
};
HeadLossAndGrad fine_tune_loss_and_grad(const Matrix& support_features, const Vector& head, const Vector& targets);

/// Stacked init outputs f_0(X_i, head_i) used as centering offsets.
Offsets init_offsets(const MLPParams& params, const TrainingSet& train);

double default_outer_rate(const MLPParams& params, const TrainingSet& train);

struct TrainResult {
    MLPParams params;
    std::vector<double> loss_trace;  // loss before each step, then the final loss
    double outer_rate = 0.0;
};

TrainResult train_mtl(MLPParams params, const TrainingSet& train, const TrainConfig& cfg);
TrainResult train_anil(MLPParams params, const TrainingSet& train, const TrainConfig& cfg);

enum class HeadInit { Shared, Zero, Random };

struct FineTuneConfig {
    double rate = 0.1;
    int steps = 10;
    HeadInit head_init = HeadInit::Shared;
    std::uint64_t seed = 0;  // used by HeadInit::Random
};

/// Fine-tunes a fresh head on the support set and predicts the query set.
/// With a reference network the outputs are centered by the reference
/// outputs under the same starting head.
Vector fine_tune_and_predict(const MLPParams& trained, const TestTask& test, const FineTuneConfig& cfg,
                             const MLPParams* reference = nullptr);

}  // namespace metakern
