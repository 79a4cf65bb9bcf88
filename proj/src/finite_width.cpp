#include "metakern/finite_width.hpp"

#include <cmath>
#include <sstream>

#include <boost/random/normal_distribution.hpp>

#include "metakern/matrix_ops.hpp"
#include "metakern/random.hpp"

namespace metakern {

namespace {

constexpr double kDivergenceLoss = 1e6;

struct ForwardCache {
    std::vector<Matrix> pre;
    std::vector<Matrix> act;
    Matrix phi;
};

Matrix relu_mask(const Matrix& u) { return (u.array() > 0.0).cast<double>().matrix(); }

void require_input(const MLPParams& params, const SampleMatrix& x, const char* who) {
    if (x.dim() != params.input_dim()) throw Error(std::string(who) + ": input dimension does not match the network");
    if (!x.normalized()) throw Error(std::string(who) + ": inputs must be normalized");
}

ForwardCache run_forward(const MLPParams& params, const SampleMatrix& x) {
    const double s = params.scale();
    ForwardCache c;
    c.pre.resize(static_cast<std::size_t>(params.depth));
    c.act.resize(static_cast<std::size_t>(params.depth));
    c.pre[0] = x.rows() * params.readin / std::sqrt(static_cast<double>(params.input_dim()));
    for (std::size_t k = 0; k < c.pre.size(); ++k) {
        c.act[k] = c.pre[k].cwiseMax(0.0);
        if (k + 1 < c.pre.size()) c.pre[k + 1] = s * (c.act[k] * params.hidden[k]);
    }
    c.phi = s * c.act.back();
    return c;
}

// Gradients of the hidden matrices given dLoss/dphi, written into preallocated storage.
void body_backward(const MLPParams& params, const ForwardCache& c, const Matrix& phi_bar, std::vector<Matrix>& grads) {
    const double s = params.scale();
    grads.resize(params.hidden.size());
    Matrix ubar = s * phi_bar.cwiseProduct(relu_mask(c.pre.back()));
    for (std::size_t k = params.hidden.size(); k-- > 0;) {
        grads[k].resize(params.hidden[k].rows(), params.hidden[k].cols());
        grads[k].noalias() = c.act[k].transpose() * ubar;
        grads[k] *= s;
        if (k > 0) ubar = (s * (ubar * params.hidden[k].transpose())).cwiseProduct(relu_mask(c.pre[k]));
    }
}

Vector sample_normal(Index size, std::mt19937_64& rng) {
    boost::random::normal_distribution<double> normal(0.0, 1.0);
    Vector v(size);
    for (Index i = 0; i < size; ++i) v(i) = normal(rng);
    return v;
}

Matrix sample_normal(Index rows, Index cols, std::mt19937_64& rng) {
    boost::random::normal_distribution<double> normal(0.0, 1.0);
    Matrix m(rows, cols);
    for (Index j = 0; j < cols; ++j)
        for (Index i = 0; i < rows; ++i) m(i, j) = normal(rng);
    return m;
}

Vector block_offsets(const Offsets& offsets, const TaskBlock& b) {
    if (offsets.size() == 0) return Vector::Zero(b.count);
    return offsets.segment(b.begin, b.count);
}

void require_offsets(const Offsets& offsets, const TrainingSet& train, const char* who) {
    if (offsets.size() != 0 && offsets.size() != train.stacked_labels().size())
        throw Error(std::string(who) + ": offsets do not match the training stack");
}

void check_loss(double loss, int step, const char* who) {
    if (!std::isfinite(loss) || loss > kDivergenceLoss) {
        std::ostringstream msg;
        msg << who << ": training diverged at step " << step << " (loss " << loss << ")";
        throw Error(msg.str());
    }
}

template <class LossFn>
TrainResult run_descent(MLPParams params, const TrainConfig& cfg, double eta, bool update_heads, LossFn loss_fn,
                        const char* who) {
    TrainResult out;
    out.outer_rate = eta;
    out.loss_trace.reserve(static_cast<std::size_t>(cfg.outer_steps) + 1);
    LossAndGrad lg;
    for (int step = 0; step < cfg.outer_steps; ++step) {
        loss_fn(params, lg);
        check_loss(lg.loss, step, who);
        out.loss_trace.push_back(lg.loss);
        for (std::size_t k = 0; k < params.hidden.size(); ++k) params.hidden[k] -= eta * lg.grad.hidden[k];
        if (update_heads)
            for (std::size_t k = 0; k < params.heads.size(); ++k) params.heads[k] -= eta * lg.grad.heads[k];
    }
    loss_fn(params, lg);
    const double final_loss = lg.loss;
    check_loss(final_loss, cfg.outer_steps, who);
    out.loss_trace.push_back(final_loss);
    out.params = std::move(params);
    return out;
}

}  // namespace

double MLPParams::scale() const { return std::sqrt(weight_variance / static_cast<double>(width())); }

void MLPParams::validate() const {
    if (depth < 1) throw Error("MLPParams: depth must be >= 1");
    if (readin.rows() < 1 || readin.cols() < 1) throw Error("MLPParams: empty read-in layer");
    if (hidden.size() != static_cast<std::size_t>(depth - 1)) throw Error("MLPParams: hidden layer count mismatch");
    for (const auto& w : hidden)
        if (w.rows() != width() || w.cols() != width()) throw Error("MLPParams: inconsistent layer shapes");
    if (init_head.size() != width()) throw Error("MLPParams: init head has the wrong width");
    for (const auto& h : heads)
        if (h.size() != width()) throw Error("MLPParams: head has the wrong width");
}

MLPParams init_network(const NetworkSpec& spec, Index input_dim, Index width, int head_count, std::uint64_t seed) {
    spec.validate();
    if (spec.bias_variance != 0.0) throw Error("init_network: only bias_variance = 0 is supported");
    if (width < 1) throw Error("init_network: width must be >= 1");
    if (input_dim < 1) throw Error("init_network: input dimension must be >= 1");
    if (head_count < 1) throw Error("init_network: need at least one head");
    auto rng = make_stream(seed, StreamDomain::NetworkInit, 0);
    MLPParams p;
    p.depth = spec.depth;
    p.weight_variance = spec.weight_variance;
    p.readin = sample_normal(input_dim, width, rng);
    for (int k = 0; k + 1 < spec.depth; ++k) p.hidden.push_back(sample_normal(width, width, rng));
    p.init_head = sample_normal(width, rng);
    p.heads.assign(static_cast<std::size_t>(head_count), p.init_head);
    return p;
}

Matrix features(const MLPParams& params, const SampleMatrix& x) {
    require_input(params, x, "features");
    return run_forward(params, x).phi;
}

Vector forward_with_head(const MLPParams& params, const SampleMatrix& x, const Vector& head) {
    if (head.size() != params.width()) throw Error("forward: head has the wrong width");
    return features(params, x) * head;
}

Vector forward(const MLPParams& params, const SampleMatrix& x, int head) {
    if (head < 0 || static_cast<std::size_t>(head) >= params.heads.size())
        throw Error("forward: unknown head " + std::to_string(head));
    return forward_with_head(params, x, params.heads[static_cast<std::size_t>(head)]);
}

Matrix empirical_ntk(const MLPParams& params, const SampleMatrix& xa, const SampleMatrix& xb, NtkScope scope,
                     int head) {
    require_input(params, xa, "empirical_ntk");
    require_input(params, xb, "empirical_ntk");
    if (head < 0 || static_cast<std::size_t>(head) >= params.heads.size())
        throw Error("empirical_ntk: unknown head " + std::to_string(head));
    const ForwardCache ca = run_forward(params, xa);
    const ForwardCache cb = run_forward(params, xb);
    Matrix out = ca.phi * cb.phi.transpose();
    if (scope == NtkScope::HeadOnly || params.hidden.empty()) return out;

    const double s = params.scale();
    const Vector& w = params.heads[static_cast<std::size_t>(head)];
    Matrix da = s * (relu_mask(ca.pre.back()).array().rowwise() * w.transpose().array()).matrix();
    Matrix db = s * (relu_mask(cb.pre.back()).array().rowwise() * w.transpose().array()).matrix();
    for (std::size_t k = params.hidden.size(); k-- > 0;) {
        out += (s * s) * (ca.act[k] * cb.act[k].transpose()).cwiseProduct(da * db.transpose());
        if (k > 0) {
            da = (s * (da * params.hidden[k].transpose())).cwiseProduct(relu_mask(ca.pre[k]));
            db = (s * (db * params.hidden[k].transpose())).cwiseProduct(relu_mask(cb.pre[k]));
        }
    }
    return out;
}

void TrainConfig::validate() const {
    if (outer_rate < 0.0 || outer_steps < 0 || inner_rate < 0.0 || inner_steps < 0)
        throw Error("TrainConfig: rates and steps must be nonnegative");
}

namespace {

void mtl_loss_and_grad_into(const MLPParams& params, const TrainingSet& train, const Offsets& offsets,
                            LossAndGrad& out) {
    if (params.heads.size() != static_cast<std::size_t>(train.num_tasks()))
        throw Error("mtl_loss_and_grad: need one head per training task");
    require_offsets(offsets, train, "mtl_loss_and_grad");
    require_input(params, train.stacked_inputs(), "mtl_loss_and_grad");
    const ForwardCache c = run_forward(params, train.stacked_inputs());
    const Vector& y = train.stacked_labels();
    out.loss = 0.0;
    Matrix phi_bar(c.phi.rows(), c.phi.cols());
    out.grad.heads.resize(params.heads.size());
    for (std::size_t i = 0; i < train.blocks().size(); ++i) {
        const TaskBlock& b = train.blocks()[i];
        const auto phi = c.phi.middleRows(b.begin, b.count);
        const Vector r = phi * params.heads[i] - block_offsets(offsets, b) - y.segment(b.begin, b.count);
        out.loss += 0.5 * r.squaredNorm();
        out.grad.heads[i] = phi.transpose() * r;
        phi_bar.middleRows(b.begin, b.count) = r * params.heads[i].transpose();
    }
    body_backward(params, c, phi_bar, out.grad.hidden);
}

void anil_loss_and_grad_into(const MLPParams& params, const TrainingSet& train, double inner_rate, int inner_steps,
                             const Offsets& offsets, LossAndGrad& out) {
    if (params.heads.size() != 1) throw Error("anil_loss_and_grad: expects a single shared head");
    if (inner_rate < 0.0 || inner_steps < 0) throw Error("anil_loss_and_grad: inner rate and steps must be nonnegative");
    require_offsets(offsets, train, "anil_loss_and_grad");
    require_input(params, train.stacked_inputs(), "anil_loss_and_grad");
    const ForwardCache c = run_forward(params, train.stacked_inputs());
    const Vector& y = train.stacked_labels();
    const Vector& w0 = params.heads.front();
    const auto steps = static_cast<std::size_t>(inner_steps);

    out.loss = 0.0;
    Matrix phi_bar(c.phi.rows(), c.phi.cols());
    Vector head_grad = Vector::Zero(w0.size());
    std::vector<Vector> w(steps + 1), r(steps + 1);
    for (const TaskBlock& b : train.blocks()) {
        const auto phi = c.phi.middleRows(b.begin, b.count);
        const Vector target = block_offsets(offsets, b) + y.segment(b.begin, b.count);
        w[0] = w0;
        for (std::size_t k = 0;; ++k) {
            r[k] = phi * w[k] - target;
            if (k == steps) break;
            w[k + 1] = w[k] - inner_rate * (phi.transpose() * r[k]);
        }
        if (!w[steps].allFinite()) throw Error("anil_loss_and_grad: inner loop diverged");
        out.loss += 0.5 * r[steps].squaredNorm();

        Matrix pbar = r[steps] * w[steps].transpose();
        Vector wbar = phi.transpose() * r[steps];
        for (std::size_t k = steps; k-- > 0;) {
            const Vector vbar = -inner_rate * wbar;
            pbar += r[k] * vbar.transpose();
            const Vector rbar = phi * vbar;
            pbar += rbar * w[k].transpose();
            wbar += phi.transpose() * rbar;
        }
        phi_bar.middleRows(b.begin, b.count) = pbar;
        head_grad += wbar;
    }
    body_backward(params, c, phi_bar, out.grad.hidden);
    out.grad.heads = {head_grad};
}

}  // namespace

LossAndGrad mtl_loss_and_grad(const MLPParams& params, const TrainingSet& train, const Offsets& offsets) {
    LossAndGrad out;
    mtl_loss_and_grad_into(params, train, offsets, out);
    return out;
}

LossAndGrad anil_loss_and_grad(const MLPParams& params, const TrainingSet& train, double inner_rate, int inner_steps,
                               const Offsets& offsets) {
    LossAndGrad out;
    anil_loss_and_grad_into(params, train, inner_rate, inner_steps, offsets, out);
    return out;
}

HeadLossAndGrad fine_tune_loss_and_grad(const Matrix& support_features, const Vector& head, const Vector& targets) {
    if (support_features.cols() != head.size() || support_features.rows() != targets.size())
        throw Error("fine_tune_loss_and_grad: shape mismatch");
    const Vector r = support_features * head - targets;
    return {0.5 * r.squaredNorm(), support_features.transpose() * r};
}

Offsets init_offsets(const MLPParams& params, const TrainingSet& train) {
    const std::size_t heads = params.heads.size();
    if (heads != 1 && heads != static_cast<std::size_t>(train.num_tasks()))
        throw Error("init_offsets: need one shared head or one head per task");
    const Matrix phi = features(params, train.stacked_inputs());
    Offsets out(phi.rows());
    for (std::size_t i = 0; i < train.blocks().size(); ++i) {
        const TaskBlock& b = train.blocks()[i];
        out.segment(b.begin, b.count) = phi.middleRows(b.begin, b.count) * params.heads[heads == 1 ? 0 : i];
    }
    return out;
}

double default_outer_rate(const MLPParams& params, const TrainingSet& train) {
    const Matrix ntk = empirical_ntk(params, train.stacked_inputs(), train.stacked_inputs());
    const double top = sym_eig(ntk).eigenvalues.maxCoeff();
    if (!(top > 0.0)) throw Error("default_outer_rate: empirical kernel has no positive eigenvalue");
    return 1.0 / top;
}

TrainResult train_mtl(MLPParams params, const TrainingSet& train, const TrainConfig& cfg) {
    cfg.validate();
    params.validate();
    const Offsets offsets = cfg.center_outputs ? init_offsets(params, train) : Offsets{};
    const double eta = cfg.outer_rate > 0.0 ? cfg.outer_rate : default_outer_rate(params, train);
    return run_descent(
        std::move(params), cfg, eta, true,
        [&](const MLPParams& p, LossAndGrad& lg) { mtl_loss_and_grad_into(p, train, offsets, lg); }, "train_mtl");
}

TrainResult train_anil(MLPParams params, const TrainingSet& train, const TrainConfig& cfg) {
    cfg.validate();
    params.validate();
    const Offsets offsets = cfg.center_outputs ? init_offsets(params, train) : Offsets{};
    const double eta = cfg.outer_rate > 0.0 ? cfg.outer_rate : default_outer_rate(params, train);
    return run_descent(
        std::move(params), cfg, eta, cfg.anil_update_head,
        [&](const MLPParams& p, LossAndGrad& lg) {
            anil_loss_and_grad_into(p, train, cfg.inner_rate, cfg.inner_steps, offsets, lg);
        },
        "train_anil");
}

Vector fine_tune_and_predict(const MLPParams& trained, const TestTask& test, const FineTuneConfig& cfg,
                             const MLPParams* reference) {
    test.validate();
    if (cfg.rate < 0.0 || cfg.steps < 0) throw Error("fine_tune_and_predict: rate and steps must be nonnegative");
    Vector head;
    switch (cfg.head_init) {
        case HeadInit::Shared: head = trained.init_head; break;
        case HeadInit::Zero: head = Vector::Zero(trained.width()); break;
        case HeadInit::Random: {
            auto rng = make_stream(cfg.seed, StreamDomain::HeadInit, 0);
            head = sample_normal(trained.width(), rng);
            break;
        }
    }
    const Matrix support_phi = features(trained, test.support_x);
    const Matrix query_phi = features(trained, test.query_x);
    Vector support_target = test.support_y;
    Vector query_offset = Vector::Zero(query_phi.rows());
    if (reference) {
        support_target += features(*reference, test.support_x) * head;
        query_offset = features(*reference, test.query_x) * head;
    }
    for (int k = 0; k < cfg.steps; ++k) head -= cfg.rate * fine_tune_loss_and_grad(support_phi, head, support_target).grad;
    if (!head.allFinite()) throw Error("fine_tune_and_predict: fine-tuning diverged");
    return query_phi * head - query_offset;
}

}  // namespace metakern
