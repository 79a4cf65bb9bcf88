#include <cmath>
#include <numbers>

#include "doctest.h"
#include "helpers.hpp"
#include "metakern/meta_kernels.hpp"

using namespace metakern;
using testing::random_matrix;
using testing::rel_frobenius;
using testing::small_tasks;

namespace {

NetworkSpec depth(int l) {
    NetworkSpec s;
    s.depth = l;
    return s;
}

AdaptConfig adapt_with(double lambda, double tau, double tau_hat) {
    AdaptConfig a;
    a.inner_rate = lambda;
    a.train_steps = tau;
    a.test_steps = tau_hat;
    return a;
}

TestTask make_test(const Matrix& support_raw, const Vector& support_y, const Matrix& query_raw, const Vector& query_y) {
    TestTask t;
    t.support_raw = support_raw;
    t.query_raw = query_raw;
    t.support_x = normalize_inputs(support_raw);
    t.query_x = normalize_inputs(query_raw);
    t.support_y = support_y;
    t.query_y = query_y;
    return t;
}

TrainingSet zero_labels(const TrainingSet& t) { return t.scaled_labels(0.0); }

struct Instance {
    TrainingSet train;
    TestTask test;
};

Instance instance(int tasks, int points, std::uint64_t seed) {
    const TaskDistributionConfig c = small_tasks(tasks, points, seed);
    return {sample_training_set(c), sample_test_task(c, 0)};
}

}  // namespace

TEST_CASE("mtl_train_kernel with a single task is the plain NTK") {
    const Instance in = instance(1, 5, 3);
    const GramPack g = compute_grampack(in.train.stacked_inputs(), in.train.blocks(), depth(4));
    CHECK(mtl_train_kernel(g) == g.ntk);
}

TEST_CASE("mtl_train_kernel on two orthogonal single-point tasks at L=1 is the identity") {
    Matrix raw = Matrix::Zero(2, 3);
    raw(0, 0) = 1.0;
    raw(1, 1) = 1.0;
    const SampleMatrix x = normalize_inputs(raw);
    const GramPack g = compute_grampack(x, uniform_blocks(2, 1), depth(1));
    CHECK(g.ntk(0, 1) == doctest::Approx(1.0 / std::numbers::pi).epsilon(1e-14));
    CHECK((mtl_train_kernel(g) - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("mtl_train_kernel equals Theta - K + blockdiag(K_ii)") {
    const Instance in = instance(3, 4, 5);
    const GramPack g = compute_grampack(in.train.stacked_inputs(), in.train.blocks(), depth(5));
    std::vector<Matrix> diag;
    for (const auto& b : g.blocks) diag.push_back(g.nngp.block(b.begin, b.begin, b.count, b.count));
    const Matrix expected = g.ntk - g.nngp + block_diagonal(diag);
    const Matrix m = mtl_train_kernel(g);
    CHECK((m - expected).cwiseAbs().maxCoeff() < 1e-13);
    CHECK((m - m.transpose()).cwiseAbs().maxCoeff() == 0.0);
    for (const auto& b : g.blocks)
        CHECK(m.block(b.begin, b.begin, b.count, b.count) == g.ntk.block(b.begin, b.begin, b.count, b.count));
    CHECK(sym_eig(m).eigenvalues.minCoeff() > -1e-9 * m.trace());
}

TEST_CASE("mtl_train_kernel needs a block index") {
    const Instance in = instance(2, 3, 1);
    GramPack g = compute_grampack(in.train.stacked_inputs(), {}, depth(2));
    CHECK_THROWS_AS(mtl_train_kernel(g), Error);
    g.blocks = uniform_blocks(2, 2);
    CHECK_THROWS_AS(mtl_train_kernel(g), Error);
}

TEST_CASE("anil_train_kernel") {
    const Instance in = instance(3, 4, 7);
    const GramPack g = compute_grampack(in.train.stacked_inputs(), in.train.blocks(), depth(3));

    SUBCASE("zero exponent leaves Theta untouched") {
        const AnilTrainKernel a = anil_train_kernel(g, adapt_with(0.1, 0.0, 10.0));
        CHECK(a.kernel == g.ntk);
        for (const auto& d : a.damping_blocks) CHECK(d == Matrix::Identity(4, 4));
    }
    SUBCASE("huge exponent drives the kernel to zero") {
        const AnilTrainKernel a = anil_train_kernel(g, adapt_with(1.0, 1e4, 10.0));
        CHECK(a.kernel.cwiseAbs().maxCoeff() < 1e-8);
    }
    SUBCASE("factorization D Theta D") {
        for (double lt : {0.05, 0.3, 1.0, 4.0}) {
            const AdaptConfig ad = adapt_with(0.1, lt / 0.1, 10.0);
            const CompositeKernels k = composite_kernels(g, ad);
            const Matrix d = k.damping();
            CHECK(rel_frobenius(d * g.ntk * d, k.anil_train) < 1e-10);
            CHECK((k.anil_train - k.anil_train.transpose()).cwiseAbs().maxCoeff() == 0.0);
            for (std::size_t b = 0; b < k.damping_blocks.size(); ++b) {
                const auto& blk = g.blocks[b];
                const Matrix kii = g.nngp.block(blk.begin, blk.begin, blk.count, blk.count);
                const Matrix expd = apply_spectral(kii, [&](double s) { return std::exp(-lt * s); });
                CHECK(rel_frobenius(k.damping_blocks[b], expd) < 1e-12);
            }
        }
    }
}

TEST_CASE("mtl_test_kernel") {
    const Instance in = instance(2, 4, 11);
    const NetworkSpec spec = depth(3);
    const GramPack g = compute_grampack(in.train.stacked_inputs(), in.train.blocks(), spec);
    const TestGram tg = test_gram(in.test, in.train, spec);

    SUBCASE("no test adaptation") {
        const Matrix m = mtl_test_kernel(tg, g, adapt_with(0.1, 0.0, 0.0));
        CHECK(m == tg.query_train.ntk - tg.query_train.nngp);
    }
    SUBCASE("regrouped form") {
        const AdaptConfig ad = adapt_with(0.1, 0.0, 10.0);
        const Matrix t = phi_damping(tg.support_nngp, 0.1, 10.0);
        const Matrix ks = tg.query_support.nngp;
        const Matrix regrouped = tg.query_train.ntk - ks * t * tg.support_train.ntk - tg.query_train.nngp +
                                 ks * t * tg.support_train.nngp;
        CHECK(rel_frobenius(mtl_test_kernel(tg, g, ad), regrouped) < 1e-8);
    }
    SUBCASE("depth mismatch") {
        const TestGram other = test_gram(in.test, in.train, depth(4));
        CHECK_THROWS_AS(mtl_test_kernel(other, g, adapt_with(0.1, 0.0, 10.0)), Error);
    }
}

TEST_CASE("mtl_test_kernel with support equal to query and long adaptation is small") {
    const Instance in = instance(2, 4, 21);
    const NetworkSpec spec = depth(2);
    const TestTask same = make_test(in.test.support_raw, in.test.support_y, in.test.support_raw, in.test.support_y);
    const GramPack g = compute_grampack(in.train.stacked_inputs(), in.train.blocks(), spec);
    const TestGram tg = test_gram(same, in.train, spec);
    const Matrix m = mtl_test_kernel(tg, g, adapt_with(0.1, 0.0, 1e6));
    const Matrix plain = tg.query_train.ntk - tg.query_train.nngp;
    CHECK(m.norm() < 1e-6 * plain.norm());
}

TEST_CASE("anil_test_kernel") {
    const Instance in = instance(3, 3, 13);
    const NetworkSpec spec = depth(4);
    const GramPack g = compute_grampack(in.train.stacked_inputs(), in.train.blocks(), spec);
    const TestGram tg = test_gram(in.test, in.train, spec);

    SUBCASE("zero exponent equals the MTL test kernel") {
        const AdaptConfig ad = adapt_with(0.1, 0.0, 10.0);
        const CompositeKernels k = composite_kernels(g, ad);
        CHECK(anil_test_kernel(tg, k, ad) == mtl_test_kernel(tg, g, ad));
    }
    SUBCASE("no adaptation at all") {
        const AdaptConfig ad = adapt_with(0.1, 0.0, 0.0);
        const CompositeKernels k = composite_kernels(g, ad);
        CHECK(anil_test_kernel(tg, k, ad) == tg.query_train.ntk - tg.query_train.nngp);
    }
    SUBCASE("relation to the MTL kernel through D") {
        const AdaptConfig ad = adapt_with(0.1, 3.0, 10.0);
        const CompositeKernels k = composite_kernels(g, ad);
        const Matrix direct = mtl_test_kernel(tg, g, ad) * k.damping();
        CHECK(rel_frobenius(anil_test_kernel(tg, k, ad), direct) < 1e-10);
    }
    SUBCASE("main-text form drops the NNGP corrections") {
        const AdaptConfig ad = adapt_with(0.1, 3.0, 10.0);
        const CompositeKernels k = composite_kernels(g, ad);
        const Matrix t = phi_damping(tg.support_nngp, 0.1, 10.0);
        const Matrix expected =
            (tg.query_train.ntk - tg.query_support.nngp * t * tg.support_train.ntk) * k.damping();
        CHECK(rel_frobenius(anil_test_kernel(tg, k, ad, AnilTestForm::MainText), expected) < 1e-10);
        CHECK(rel_frobenius(anil_test_kernel(tg, k, ad, AnilTestForm::MainText), anil_test_kernel(tg, k, ad)) > 1e-3);
    }
}

TEST_CASE("g_function") {
    const TestTask t = instance(1, 2, 4).test;
    const TestGram tg = test_gram(t, instance(1, 2, 4).train, depth(2));

    CHECK(g_function(t, tg, adapt_with(0.1, 0.0, 0.0)) == Vector::Zero(t.query_y.size()));

    const Vector regression = tg.query_support.nngp * tg.support_nngp.llt().solve(t.support_y);
    CHECK((g_function(t, tg, adapt_with(1.0, 0.0, 1e6)) - regression).norm() < 1e-6 * regression.norm());

    const Matrix ks = tg.support_nngp;
    CHECK((g_function(ks, ks, t.support_y, 1.0, 1e6) - t.support_y).norm() < 1e-6 * t.support_y.norm());

    CHECK_THROWS_AS(g_function(Matrix(2, 0), Matrix(0, 0), Vector(0), 0.1, 1.0), Error);
}

TEST_CASE("predictors vanish on zero labels") {
    const Instance in = instance(3, 4, 9);
    TestTask test = in.test.scaled_labels(0.0);
    const TrainingSet train = zero_labels(in.train);
    const Prediction p = KernelPredictor(train, depth(5), adapt_with(0.1, 2.0, 10.0)).predict(test);
    CHECK(p.mtl.cwiseAbs().maxCoeff() == 0.0);
    CHECK(p.anil.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("predictors without test adaptation reduce to the kernel regression part") {
    const Instance in = instance(2, 4, 15);
    const NetworkSpec spec = depth(3);
    const AdaptConfig ad = adapt_with(0.1, 0.0, 0.0);
    const Vector f = predict_mtl(in.train, in.test, spec, ad);
    const GramPack g = compute_grampack(in.train.stacked_inputs(), in.train.blocks(), spec);
    const TestGram tg = test_gram(in.test, in.train, spec);
    const Vector expected = (tg.query_train.ntk - tg.query_train.nngp) *
                            mtl_train_kernel(g).ldlt().solve(in.train.stacked_labels());
    CHECK((f - expected).norm() < 1e-7 * expected.norm());
}

TEST_CASE("ANIL at zero training exponent") {
    const Instance in = instance(2, 4, 16);
    const NetworkSpec spec = depth(3);
    const AdaptConfig ad = adapt_with(0.1, 0.0, 10.0);
    const GramPack g = compute_grampack(in.train.stacked_inputs(), in.train.blocks(), spec);
    const TestGram tg = test_gram(in.test, in.train, spec);
    const Vector expected =
        g_function(in.test, tg, ad) + mtl_test_kernel(tg, g, ad) * g.ntk.ldlt().solve(in.train.stacked_labels());
    const Vector f = predict_anil(in.train, in.test, spec, ad);
    CHECK((f - expected).norm() < 1e-7 * expected.norm());
}

TEST_CASE("scalar instances with one training point at L=1 and L=2") {
    Matrix x1(1, 2), xs(1, 2), xq(1, 2);
    x1 << 1.0, 0.0;
    xs << 0.6, 0.8;
    xq << 0.0, 1.0;
    const TaskData task = make_task(x1, (Vector(1) << 2.0).finished());
    const TrainingSet train({task});
    const TestTask test = make_test(xs, (Vector(1) << -1.0).finished(), xq, (Vector(1) << 0.0).finished());

    const double pi = std::numbers::pi;
    auto k1 = [&](double rho) {
        const double t = std::acos(rho);
        return (std::sin(t) + (pi - t) * rho) / pi;
    };
    auto k0 = [&](double rho) { return (pi - std::acos(rho)) / pi; };
    const double lambda = 0.1, tau_hat = 10.0;
    const double t_op = 1.0 - std::exp(-lambda * tau_hat);  // K(s,s) = 1
    const double rho_q1 = 0.0, rho_qs = 0.8, rho_s1 = 0.6;

    // L = 1: Theta = K, so only the support term survives.
    const double g1 = k1(rho_qs) * t_op * -1.0;
    // L = 2: K = k1(k1(rho)), Theta = K + k0(k1(rho)) k1(rho), Theta(x, x) = 2.
    auto kk = [&](double rho) { return k1(k1(rho)); };
    auto th = [&](double rho) { return kk(rho) + k0(k1(rho)) * k1(rho); };
    const double g2 = kk(rho_qs) * t_op * -1.0;
    const double f2 = g2 + ((th(rho_q1) - kk(rho_q1)) - kk(rho_qs) * t_op * (th(rho_s1) - kk(rho_s1))) * 2.0 / 2.0;

    for (double tau : {0.0, 3.0}) {
        const AdaptConfig ad = adapt_with(lambda, tau, tau_hat);
        const Prediction p1 = KernelPredictor(train, depth(1), ad).predict(test);
        CHECK(p1.mtl(0) == doctest::Approx(g1).epsilon(1e-9));
        CHECK(p1.anil(0) == doctest::Approx(g1).epsilon(1e-9));
        const Prediction p2 = KernelPredictor(train, depth(2), ad).predict(test);
        CHECK(p2.mtl(0) == doctest::Approx(f2).epsilon(1e-9));
        CHECK(p2.anil(0) == doctest::Approx(f2).epsilon(1e-9));
    }
}

TEST_CASE("label linearity") {
    const Instance in = instance(3, 4, 19);
    const NetworkSpec spec = depth(6);
    const AdaptConfig ad = adapt_with(0.1, 2.0, 10.0);
    const Prediction base = KernelPredictor(in.train, spec, ad).predict(in.test);
    const Prediction twice = KernelPredictor(in.train.scaled_labels(2.0), spec, ad).predict(in.test.scaled_labels(2.0));
    CHECK((twice.mtl - 2.0 * base.mtl).norm() <= 1e-10 * 2.0 * base.mtl.norm());
    CHECK((twice.anil - 2.0 * base.anil).norm() <= 1e-10 * 2.0 * base.anil.norm());
}

TEST_CASE("continuity of ANIL at zero exponent under finite outer time") {
    const Instance in = instance(3, 4, 23);
    const NetworkSpec spec = depth(4);
    AdaptConfig base = adapt_with(0.1, 0.0, 10.0);
    base.outer_time = OuterTime{0.05, 200.0};
    const Vector f0 = predict_anil(in.train, in.test, spec, base);
    double previous = 1e300;
    for (double lt : {1e-2, 1e-3, 1e-4}) {
        AdaptConfig ad = base;
        ad.train_steps = lt / ad.inner_rate;
        const double d = (predict_anil(in.train, in.test, spec, ad) - f0).norm();
        CHECK(d < previous);
        previous = d;
    }
    CHECK(previous < 1e-3 * f0.norm());
}

TEST_CASE("continuity of ANIL at zero exponent at infinite outer time") {
    const Instance in = instance(3, 4, 23);
    const NetworkSpec spec = depth(4);
    const Vector f0 = predict_anil(in.train, in.test, spec, adapt_with(0.1, 0.0, 10.0));
    for (double lt : {1e-2, 1e-3, 1e-4}) {
        const Vector f = predict_anil(in.train, in.test, spec, adapt_with(0.1, lt / 0.1, 10.0));
        CHECK((f - f0).norm() <= 1e-6 * f0.norm());
    }
}

TEST_CASE("finite outer time approaches the converged predictor") {
    const Instance in = instance(2, 4, 29);
    const NetworkSpec spec = depth(3);
    const AdaptConfig inf = adapt_with(0.1, 1.0, 10.0);
    const Prediction p_inf = KernelPredictor(in.train, spec, inf).predict(in.test);
    AdaptConfig fin = inf;
    fin.outer_time = OuterTime{1.0, 1e7};
    const Prediction p_fin = KernelPredictor(in.train, spec, fin).predict(in.test);
    CHECK((p_fin.mtl - p_inf.mtl).norm() < 1e-4 * p_inf.mtl.norm());
    CHECK((p_fin.anil - p_inf.anil).norm() < 1e-4 * p_inf.anil.norm());
    fin.outer_time = OuterTime{1.0, 0.0};
    const Prediction p_zero = KernelPredictor(in.train, spec, fin).predict(in.test);
    const TestGram tg = test_gram(in.test, in.train, spec);
    CHECK((p_zero.mtl - g_function(in.test, tg, fin)).norm() < 1e-14);
}

TEST_CASE("permutation of task order leaves predictions unchanged") {
    const Instance in = instance(4, 3, 31);
    const NetworkSpec spec = depth(5);
    AdaptConfig ad = adapt_with(0.1, 2.0, 10.0);
    const std::vector<int> order{2, 0, 3, 1};
    const TrainingSet permuted = in.train.permuted(order);
    const Prediction a = KernelPredictor(in.train, spec, ad).predict(in.test);
    const Prediction b = KernelPredictor(permuted, spec, ad).predict(in.test);
    CHECK((a.mtl - b.mtl).norm() < 1e-9 * a.mtl.norm());
    CHECK((a.anil - b.anil).norm() < 1e-9 * a.anil.norm());

    const GramPack g = compute_grampack(in.train.stacked_inputs(), in.train.blocks(), spec);
    const GramPack gp = compute_grampack(permuted.stacked_inputs(), permuted.blocks(), spec);
    for (std::size_t i = 0; i < order.size(); ++i) {
        for (std::size_t j = 0; j < order.size(); ++j) {
            const auto& pi = gp.blocks[i];
            const auto& pj = gp.blocks[j];
            const auto& oi = g.blocks[static_cast<std::size_t>(order[i])];
            const auto& oj = g.blocks[static_cast<std::size_t>(order[j])];
            CHECK((mtl_train_kernel(gp).block(pi.begin, pj.begin, 3, 3) -
                   mtl_train_kernel(g).block(oi.begin, oj.begin, 3, 3))
                      .cwiseAbs()
                      .maxCoeff() < 1e-13);
        }
    }
    CHECK(kernel_inverse_gap(g).gap == doctest::Approx(kernel_inverse_gap(gp).gap).epsilon(1e-6));
}

TEST_CASE("prediction_gap") {
    const Instance in = instance(3, 4, 37);
    const NetworkSpec spec = depth(5);

    SUBCASE("definitional cross-check") {
        const AdaptConfig ad = adapt_with(0.1, 2.0, 10.0);
        const GapResult gap = prediction_gap(in.train, in.test, spec, ad);
        const Vector diff = predict_anil(in.train, in.test, spec, ad) - predict_mtl(in.train, in.test, spec, ad);
        CHECK(gap.l2 == doctest::Approx(diff.norm()).epsilon(1e-12));
        CHECK(gap.rms == doctest::Approx(diff.norm() / std::sqrt(4.0)).epsilon(1e-12));
    }
    SUBCASE("forced identical predictors") {
        PredictorOptions opt;
        opt.mtl_uses_plain_ntk = true;
        CHECK(prediction_gap(in.train, in.test, spec, adapt_with(0.1, 0.0, 10.0), opt).l2 == 0.0);
    }
    SUBCASE("decreasing in depth at zero exponent") {
        double previous = 1e300;
        for (int l : {2, 5, 10, 20, 40}) {
            const double gap = prediction_gap(in.train, in.test, depth(l), adapt_with(0.1, 0.0, 10.0)).l2;
            CHECK(gap < previous);
            previous = gap;
        }
    }
}

TEST_CASE("kernel_inverse_gap") {
    const Instance one = instance(1, 6, 41);
    const GramPack g1 = compute_grampack(one.train.stacked_inputs(), one.train.blocks(), depth(8));
    CHECK(kernel_inverse_gap(g1).gap == 0.0);

    const Instance in = instance(3, 3, 43);
    double previous = 1e300;
    for (int l : {4, 8, 16}) {
        const GramPack g = compute_grampack(in.train.stacked_inputs(), in.train.blocks(), depth(l));
        const InverseGap r = kernel_inverse_gap(g);
        CHECK(r.gap > 0.0);
        CHECK(r.gap < previous);
        previous = r.gap;
    }
}

TEST_CASE("spectra_report") {
    SUBCASE("depth 1 is not asymptotic") {
        const Instance in = instance(2, 5, 47);
        const SpectraReport r = spectra_report(compute_grampack(in.train.stacked_inputs(), in.train.blocks(), depth(1)));
        CHECK_FALSE(r.asymptotic);
        CHECK(r.points == 10);
        CHECK(r.ntk_top_predicted == doctest::Approx(13.0 / 4.0));
        CHECK(r.ntk_bulk_predicted == doctest::Approx(0.75));
        CHECK(r.nngp_top_predicted == doctest::Approx(10.0));
    }
    SUBCASE("trace identity") {
        const Instance in = instance(2, 5, 53);
        const SpectraReport r = spectra_report(compute_grampack(in.train.stacked_inputs(), in.train.blocks(), depth(7)));
        CHECK(r.ntk_top + 9.0 * r.ntk_bulk_mean == doctest::Approx(70.0).epsilon(1e-9));
    }
    SUBCASE("large depth") {
        TaskDistributionConfig c;
        c.num_train_tasks = 2;
        c.seed = 3;
        const TrainingSet t = sample_training_set(c);
        const SpectraReport r = spectra_report(compute_grampack(t.stacked_inputs(), t.blocks(), depth(128)));
        CHECK(r.asymptotic);
        CHECK(r.ntk_top / 128.0 == doctest::Approx(5.75).epsilon(0.15));
        CHECK(r.nngp_top == doctest::Approx(20.0).epsilon(0.10));
    }
}

TEST_CASE("AdaptConfig validation") {
    CHECK_THROWS_AS(adapt_with(-0.1, 1.0, 1.0).validate(), Error);
    AdaptConfig a;
    a.outer_time = OuterTime{-1.0, 1.0};
    CHECK_THROWS_AS(a.validate(), Error);
    const Instance in = instance(2, 3, 1);
    CHECK_THROWS_AS(KernelPredictor(in.train, depth(2), adapt_with(0.1, -1.0, 1.0)), Error);
}
