#include "fallguard/rnn.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fallguard/training.hpp"
#include "test_support.hpp"

namespace fallguard::nn {
namespace {

using testing::finite_difference;
using testing::max_relative_error;

std::vector<std::vector<double>> random_sequences(std::size_t n, std::size_t len, std::uint64_t seed) {
    Rng rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.5);
    std::vector<std::vector<double>> out(n, std::vector<double>(len));
    for (auto& s : out)
        for (auto& v : s) v = u(rng);
    return out;
}

SequenceBatch batch_of(const std::vector<std::vector<double>>& seqs) {
    std::vector<const std::vector<double>*> p;
    for (const auto& s : seqs) p.push_back(&s);
    return SequenceBatch::from_sequences(p);
}

// Scalar loss used by the gradient checks: BCE for the sigmoid head, MSE for the
// linear head, summed over the batch. Returns dLoss/dpre alongside.
double loss_of(const Network& net, const SequenceBatch& x, const std::vector<int>& labels, const MatrixXd& targets,
               MatrixXd* grad_pre) {
    const auto fc = forward(net, x);
    double total = 0.0;
    if (grad_pre) grad_pre->resize(fc.pre.rows(), fc.pre.cols());
    for (Index b = 0; b < x.batch; ++b) {
        if (net.spec().head == HeadKind::SigmoidScalar) {
            const auto lg = bce_from_logit(fc.pre(0, b), labels[static_cast<std::size_t>(b)]);
            total += lg.loss;
            if (grad_pre) (*grad_pre)(0, b) = lg.grad;
        } else {
            const auto lg = mse_loss(fc.output.col(b), targets.col(b));
            total += lg.loss;
            if (grad_pre) grad_pre->col(b) = lg.grad;
        }
    }
    return total;
}

double gradient_check(const NetworkSpec& spec, std::uint64_t seed, std::size_t batch = 2, std::size_t steps = 7) {
    Network net = init_weights(spec, seed);
    // Non-zero biases so every term of the gradient is exercised.
    Rng rng(seed + 1);
    std::uniform_real_distribution<double> u(-0.3, 0.3);
    for (const auto& dirs : net.layout().layers)
        for (const auto& d : dirs) {
            auto b = net.block(d.b);
            for (Index i = 0; i < b.rows(); ++i) b(i, 0) += u(rng);
        }
    net.block(net.layout().head_b)(0, 0) = 0.1;
    const auto seqs = random_sequences(batch, steps, seed + 2);
    const auto x = batch_of(seqs);
    std::vector<int> labels;
    for (std::size_t b = 0; b < batch; ++b) labels.push_back(static_cast<int>(b % 2));
    MatrixXd targets = MatrixXd::Random(spec.output_dim, static_cast<Index>(batch));

    MatrixXd gp;
    loss_of(net, x, labels, targets, &gp);
    const VectorXd analytic = backward(net, forward(net, x), gp);
    const VectorXd numeric = finite_difference(
        [&](const VectorXd& p) {
            Network probe = net;
            probe.params() = p;
            return loss_of(probe, x, labels, targets, nullptr);
        },
        net.params());
    return max_relative_error(analytic, numeric);
}

TEST(InitWeights, DeterministicPerSeed) {
    const auto spec = NetworkSpec::detector(LayerKind::LSTM, 8);
    EXPECT_EQ(init_weights(spec, 42).params(), init_weights(spec, 42).params());
    EXPECT_NE(init_weights(spec, 42).params(), init_weights(spec, 43).params());
}

TEST(InitWeights, BiasesZeroExceptLstmForgetGate) {
    for (auto kind : {LayerKind::GRU, LayerKind::LSTM, LayerKind::BiLSTM}) {
        const Index h = 6;
        const auto net = init_weights(NetworkSpec::detector(kind, h), 7);
        for (const auto& d : net.layout().layers[0]) {
            const auto b = net.block(d.b);
            for (Index i = 0; i < b.rows(); ++i) {
                const bool forget = kind != LayerKind::GRU && i >= h && i < 2 * h;
                EXPECT_EQ(b(i, 0), forget ? 1.0 : 0.0) << to_string(kind) << " row " << i;
            }
        }
        EXPECT_EQ(net.block(net.layout().head_b)(0, 0), 0.0);
    }
}

TEST(InitWeights, KernelsWithinGlorotBound) {
    const auto net = init_weights(NetworkSpec::detector(LayerKind::GRU, 60), 3);
    std::size_t count = 0;
    for (const auto& blk : net.layout().blocks) {
        if (blk.cols == 1 && blk.name.ends_with(".b")) continue;
        const double bound = std::sqrt(6.0 / static_cast<double>(blk.rows + blk.cols));
        const auto m = Network::view(net.params(), blk);
        EXPECT_LE(m.cwiseAbs().maxCoeff(), bound) << blk.name;
        count += static_cast<std::size_t>(m.size());
    }
    EXPECT_GE(count, 10000u);
}

TEST(GruCell, ZeroWeightsGiveHalfGatesAndZeroState) {
    const MatrixXd W = MatrixXd::Zero(9, 2), U = MatrixXd::Zero(9, 3);
    const VectorXd b = VectorXd::Zero(9);
    const auto s = gru_cell(VectorXd::Constant(2, 0.7), VectorXd::Zero(3), W, U, b);
    EXPECT_TRUE(s.z.isApproxToConstant(0.5));
    EXPECT_TRUE(s.r.isApproxToConstant(0.5));
    EXPECT_EQ(s.candidate, VectorXd::Zero(3));
    EXPECT_EQ(s.h, VectorXd::Zero(3));
}

TEST(GruCell, SaturatedUpdateGateTakesCandidate) {
    MatrixXd W = MatrixXd::Random(6, 1), U = MatrixXd::Random(6, 2);
    VectorXd b = VectorXd::Random(6);
    b.head(2).setConstant(1000.0);
    VectorXd x(1);
    x << 0.4;
    const auto s = gru_cell(x, VectorXd::Zero(2), W, U, b);
    const VectorXd expected = (W.bottomRows(2) * x + b.tail(2)).array().tanh().matrix();
    EXPECT_EQ(s.h, expected);
}

TEST(GruCell, MatchesHandComputedTwoUnitExample) {
    MatrixXd W(6, 1), U(6, 2);
    VectorXd b(6), x(1), h(2);
    W << 0.1, -0.2, 0.3, 0.4, -0.5, 0.6;
    U << 0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.7, 0.8, -0.9, 0.1, 0.2, -0.3;
    b << 0.01, -0.02, 0.03, -0.04, 0.05, -0.06;
    x << 0.5;
    h << 0.1, -0.2;
    const auto s = gru_cell(x, h, W, U, b);
    // Scalar reference evaluation of the same equations.
    EXPECT_NEAR(s.h[0], -0.08129666671014252, 1e-12);
    EXPECT_NEAR(s.h[1], 0.010518839914551381, 1e-12);
}

TEST(GruCell, RejectsDimensionMismatch) {
    EXPECT_THROW(gru_cell(VectorXd::Zero(2), VectorXd::Zero(3), MatrixXd::Zero(9, 1), MatrixXd::Zero(9, 3),
                          VectorXd::Zero(9)),
                 DataError);
}

TEST(LstmCell, ZeroEverythingGivesZeroState) {
    const auto s = lstm_cell(VectorXd::Zero(1), VectorXd::Zero(4), VectorXd::Zero(4), MatrixXd::Zero(16, 1),
                             MatrixXd::Zero(16, 4), VectorXd::Zero(16));
    EXPECT_EQ(s.h, VectorXd::Zero(4));
    EXPECT_EQ(s.c, VectorXd::Zero(4));
}

TEST(LstmCell, SaturatedGatesCarryMemoryExactly) {
    const Index H = 3;
    MatrixXd W = MatrixXd::Random(4 * H, 1), U = MatrixXd::Random(4 * H, H);
    VectorXd b = VectorXd::Zero(4 * H);
    b.segment(0, H).setConstant(-1000.0);  // input gate closed
    b.segment(H, H).setConstant(1000.0);   // forget gate open
    VectorXd c_prev(H);
    c_prev << 0.3, -1.7, 2.5;
    VectorXd x(1);
    x << 0.2;
    const auto s = lstm_cell(x, VectorXd::Constant(H, 0.1), c_prev, W, U, b);
    EXPECT_EQ(s.c, c_prev);
}

TEST(LstmCell, MatchesHandComputedTwoUnitExample) {
    MatrixXd W(8, 1), U(8, 2);
    VectorXd b(8), x(1), h(2), c(2);
    W << 0.1, -0.2, 0.3, 0.4, -0.5, 0.6, -0.7, 0.8;
    U << 0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.7, 0.8, -0.9, 0.1, 0.2, -0.3, 0.05, 0.15, -0.25, 0.35;
    b << 0.01, -0.02, 1.0, 1.0, 0.05, -0.06, 0.07, -0.08;
    x << 0.5;
    h << 0.1, -0.2;
    c << 0.3, -0.4;
    const auto s = lstm_cell(x, h, c, W, U, b);
    EXPECT_NEAR(s.h[0], 0.03567977464496091, 1e-12);
    EXPECT_NEAR(s.h[1], -0.09027828493539541, 1e-12);
    EXPECT_NEAR(s.c[0], 0.0842828541349003, 1e-12);
    EXPECT_NEAR(s.c[1], -0.16381679119233655, 1e-12);
}

TEST(Forward, ZeroHeadGivesOneHalf) {
    for (auto kind : {LayerKind::GRU, LayerKind::LSTM, LayerKind::BiLSTM}) {
        Network net = init_weights(NetworkSpec::detector(kind, 5), 1);
        net.block(net.layout().head_W).setZero();
        for (const auto& seq : random_sequences(5, 9, 2)) EXPECT_EQ(predict(net, seq)[0], 0.5);
    }
}

TEST(Forward, LengthOneIsOneCellPlusHead) {
    Network net = init_weights(NetworkSpec::detector(LayerKind::GRU, 4), 9);
    const auto& d = net.layout().layers[0][0];
    VectorXd x(1);
    x << 0.8;
    const auto s = gru_cell(x, VectorXd::Zero(4), net.block(d.W), net.block(d.U), net.block(d.b).col(0));
    const double logit = (net.block(net.layout().head_W) * s.h)(0) + net.block(net.layout().head_b)(0, 0);
    EXPECT_NEAR(predict(net, {0.8})[0], sigmoid(logit), 1e-15);
}

// Independent route: unroll the single-step cells per example and compare with
// the batched implementation.
VectorXd unrolled_output(const Network& net, const std::vector<double>& seq) {
    const auto& spec = net.spec();
    std::vector<VectorXd> in;
    for (double v : seq) in.push_back(VectorXd::Constant(1, v));
    VectorXd feat;
    for (std::size_t l = 0; l < spec.layers.size(); ++l) {
        const auto& ls = spec.layers[l];
        const Index H = ls.hidden_units;
        const std::size_t T = in.size();
        std::vector<VectorXd> out(T, VectorXd::Zero(ls.output_dim()));
        feat = VectorXd::Zero(ls.output_dim());
        for (std::size_t d = 0; d < net.layout().layers[l].size(); ++d) {
            const auto& db = net.layout().layers[l][d];
            const MatrixXd W = net.block(db.W), U = net.block(db.U);
            const VectorXd b = net.block(db.b).col(0);
            VectorXd h = VectorXd::Zero(H), c = VectorXd::Zero(H);
            for (std::size_t s = 0; s < T; ++s) {
                const std::size_t t = d == 0 ? s : T - 1 - s;
                if (ls.kind == LayerKind::GRU) {
                    h = gru_cell(in[t], h, W, U, b).h;
                } else {
                    auto st = lstm_cell(in[t], h, c, W, U, b);
                    h = st.h;
                    c = st.c;
                }
                out[t].segment(static_cast<Index>(d) * H, H) = h;
            }
            feat.segment(static_cast<Index>(d) * H, H) = h;
        }
        in = out;
    }
    VectorXd pre = net.block(net.layout().head_W) * feat + net.block(net.layout().head_b).col(0);
    if (spec.head == HeadKind::SigmoidScalar) pre = sigmoid(pre.array()).matrix();
    return pre;
}

TEST(Forward, BatchedMatchesUnrolledCells) {
    const NetworkSpec spec{1, {{LayerKind::BiLSTM, 4}, {LayerKind::GRU, 3}, {LayerKind::LSTM, 5}},
                           HeadKind::LinearVector, 3};
    const auto net = init_weights(spec, 11);
    const auto seqs = random_sequences(4, 6, 12);
    const auto fc = forward(net, batch_of(seqs));
    for (std::size_t b = 0; b < seqs.size(); ++b)
        EXPECT_LT((fc.output.col(static_cast<Index>(b)) - unrolled_output(net, seqs[b])).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(Forward, SingleSequencePredictMatchesUnrolledCells) {
    for (const auto head : {HeadKind::SigmoidScalar, HeadKind::LinearVector}) {
        const NetworkSpec spec{1, {{LayerKind::GRU, 3}, {LayerKind::BiLSTM, 4}, {LayerKind::LSTM, 5}}, head,
                               head == HeadKind::LinearVector ? 3 : 1};
        const auto net = init_weights(spec, 21);
        for (const auto& s : random_sequences(3, 9, 22))
            EXPECT_LT((predict(net, s) - unrolled_output(net, s)).cwiseAbs().maxCoeff(), 1e-13);
    }
    const auto bi = init_weights(NetworkSpec::detector(LayerKind::BiLSTM, 4), 3);
    const auto s = random_sequences(1, 6, 4)[0];
    EXPECT_LT(std::abs(predict(bi, s)[0] - unrolled_output(bi, s)[0]), 1e-13);
    EXPECT_THROW(predict(bi, {}), DataError);
}

TEST(Forward, BiLstmPalindromeWithTiedWeightsHasEqualFinalStates) {
    Network net = init_weights(NetworkSpec::detector(LayerKind::BiLSTM, 4), 5);
    const auto& dirs = net.layout().layers[0];
    for (auto [a, b] : {std::pair{dirs[0].W, dirs[1].W}, {dirs[0].U, dirs[1].U}, {dirs[0].b, dirs[1].b}})
        net.block(b) = net.block(a);
    const std::vector<double> pal{0.1, 0.4, -0.3, 0.9, -0.3, 0.4, 0.1};
    const auto fc = forward(net, SequenceBatch::single(pal));
    EXPECT_EQ(fc.features.topRows(4), fc.features.bottomRows(4));
}

TEST(Forward, SigmoidOutputStaysInOpenUnitInterval) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Network net = init_weights(NetworkSpec::detector(LayerKind::GRU, 3), seed);
        net.block(net.layout().head_W) *= 5.0;
        for (const auto& s : random_sequences(3, 5, seed)) {
            const double p = predict(net, s)[0];
            EXPECT_GT(p, 0.0);
            EXPECT_LT(p, 1.0);
        }
    }
}

TEST(Forward, BitReproducible) {
    const auto net = init_weights(NetworkSpec::forecaster(4, {{LayerKind::GRU, 6}, {LayerKind::GRU, 6}}), 2);
    const auto x = batch_of(random_sequences(3, 8, 3));
    const auto a = forward(net, x), b = forward(net, x);
    EXPECT_EQ(a.output, b.output);
    MatrixXd g = MatrixXd::Ones(4, 3);
    EXPECT_EQ(backward(net, a, g), backward(net, b, g));
}

TEST(Forward, RejectsWrongInputDimension) {
    const auto net = init_weights(NetworkSpec::detector(LayerKind::GRU, 3), 1);
    SequenceBatch x;
    x.steps = 2;
    x.batch = 1;
    x.data = MatrixXd::Zero(2, 2);
    EXPECT_THROW(forward(net, x), DataError);
}

TEST(Backward, ZeroOutputGradientGivesZeroGradient) {
    const auto net = init_weights(NetworkSpec::detector(LayerKind::BiLSTM, 3), 1);
    const auto fc = forward(net, batch_of(random_sequences(2, 4, 1)));
    EXPECT_TRUE(backward(net, fc, MatrixXd::Zero(1, 2)).isZero(0.0));
}

TEST(Backward, DuplicatedExampleDoublesGradientUnderSum) {
    const auto net = init_weights(NetworkSpec::detector(LayerKind::GRU, 4), 3);
    const auto one = random_sequences(1, 6, 9);
    const auto two = std::vector{one[0], one[0]};
    const VectorXd g1 = backward(net, forward(net, batch_of(one)), MatrixXd::Constant(1, 1, 0.7));
    const VectorXd g2 = backward(net, forward(net, batch_of(two)), MatrixXd::Constant(1, 2, 0.7));
    EXPECT_LT((g2 - 2.0 * g1).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Backward, RejectsCacheFromAnotherNetwork) {
    const auto a = init_weights(NetworkSpec::detector(LayerKind::GRU, 4), 3);
    const auto b = init_weights(NetworkSpec::detector(LayerKind::LSTM, 4), 3);
    const auto fc = forward(a, batch_of(random_sequences(1, 3, 1)));
    EXPECT_THROW(backward(b, fc, MatrixXd::Zero(1, 1)), DataError);
    EXPECT_THROW(backward(a, fc, MatrixXd::Zero(1, 2)), DataError);
}

class GradientCheck : public ::testing::TestWithParam<std::tuple<LayerKind, HeadKind>> {};

TEST_P(GradientCheck, MatchesCentralFiniteDifferences) {
    const auto [kind, head] = GetParam();
    const NetworkSpec spec{1, {{kind, 5}}, head, head == HeadKind::SigmoidScalar ? 1 : 3};
    const double err = gradient_check(spec, 17);
    RecordProperty("max_relative_error", std::to_string(err));
    EXPECT_LT(err, 1e-4);
}

INSTANTIATE_TEST_SUITE_P(AllKinds, GradientCheck,
                         ::testing::Combine(::testing::Values(LayerKind::GRU, LayerKind::LSTM, LayerKind::BiLSTM),
                                            ::testing::Values(HeadKind::SigmoidScalar, HeadKind::LinearVector)));

TEST(GradientCheckStacked, MixedThreeLayerNetwork) {
    const NetworkSpec spec{1, {{LayerKind::GRU, 3}, {LayerKind::BiLSTM, 3}, {LayerKind::LSTM, 4}},
                           HeadKind::LinearVector, 2};
    EXPECT_LT(gradient_check(spec, 23, 3, 5), 1e-4);
}

}  // namespace
}  // namespace fallguard::nn
