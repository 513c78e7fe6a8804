#include "fallguard/training.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "test_support.hpp"

namespace fallguard {
namespace {

using nn::LayerKind;

Dataset toy_detection(std::size_t n, std::size_t window = 20) {
    Dataset ds;
    ds.window = window;
    for (std::size_t i = 0; i < n; ++i) {
        const int label = static_cast<int>(i % 2);
        ds.windows.push_back({std::vector<double>(window, label ? 1.0 : 0.0), label, "toy:" + std::to_string(i)});
    }
    return ds;
}

Dataset toy_forecast(std::size_t n) {
    Dataset ds;
    ds.task = Task::Forecasting;
    ds.window = 10;
    ds.horizon = 3;
    for (std::size_t i = 0; i < n; ++i) {
        const double slope = 0.01 * static_cast<double>(i % 7);
        ForecastPair p;
        for (int k = 0; k < 10; ++k) p.input.push_back(slope * k);
        for (int k = 10; k < 13; ++k) p.target.push_back(slope * k);
        p.source_id = "ramp:" + std::to_string(i);
        ds.pairs.push_back(std::move(p));
    }
    return ds;
}

TEST(BceLoss, Examples) {
    EXPECT_NEAR(bce_loss(0.5, 0).loss, std::log(2.0), 1e-15);
    EXPECT_NEAR(bce_loss(0.5, 1).loss, std::log(2.0), 1e-15);
    EXPECT_NEAR(bce_loss(0.9, 1).loss, 0.10536051565782628, 1e-14);
    EXPECT_LT(bce_loss(1.0 - 1e-12, 1).loss, 1e-11);
    EXPECT_NEAR(bce_from_logit(0.0, 1).loss, std::log(2.0), 1e-15);
    EXPECT_NEAR(bce_from_logit(std::log(9.0), 1).loss, 0.10536051565782628, 1e-14);
}

TEST(BceLoss, GradientsMatchFiniteDifferences) {
    for (double p : {0.1, 0.5, 0.83})
        for (int y : {0, 1}) {
            const double fd = (bce_loss(p + 1e-7, y).loss - bce_loss(p - 1e-7, y).loss) / 2e-7;
            EXPECT_NEAR(bce_loss(p, y).grad, fd, 1e-6 * std::max(1.0, std::abs(fd)));
        }
    for (double z : {-3.0, 0.0, 0.4, 5.0})
        for (int y : {0, 1}) {
            const auto lg = bce_from_logit(z, y);
            EXPECT_NEAR(lg.loss, bce_loss(nn::sigmoid(z), y).loss, 1e-12);
            const double fd = (bce_from_logit(z + 1e-6, y).loss - bce_from_logit(z - 1e-6, y).loss) / 2e-6;
            EXPECT_NEAR(lg.grad, fd, 1e-8);
        }
}

TEST(BceLoss, LogitFormStaysFiniteWhenSaturated) {
    EXPECT_NEAR(bce_from_logit(800.0, 0).loss, 800.0, 1e-9);
    EXPECT_NEAR(bce_from_logit(-800.0, 1).loss, 800.0, 1e-9);
    EXPECT_EQ(bce_from_logit(800.0, 1).loss, 0.0);
    EXPECT_EQ(bce_from_logit(-800.0, 1).grad, -1.0);
}

TEST(MseLoss, ExamplesAndGradient) {
    Eigen::VectorXd a(4), b(4);
    a << 0.1, -0.2, 0.3, 0.9;
    EXPECT_EQ(mse_loss(a, a).loss, 0.0);
    b = a.array() + 0.5;
    EXPECT_NEAR(mse_loss(a, b).loss, 0.25, 1e-15);
    b << 0.0, 0.4, -0.1, 1.0;
    const auto fd = testing::finite_difference([&](const Eigen::VectorXd& x) { return mse_loss(x, b).loss; }, a);
    EXPECT_LT(testing::max_relative_error(mse_loss(a, b).grad, fd), 1e-8);
    EXPECT_THROW(mse_loss(a, Eigen::VectorXd(3)), DataError);
}

TEST(Adam, ZeroGradientLeavesWeightsAndDecaysMoments) {
    TrainConfig cfg;
    Eigen::VectorXd w(3);
    w << 1.0, -2.0, 0.5;
    const Eigen::VectorXd w0 = w;
    AdamState s;
    s.m = Eigen::VectorXd::Constant(3, 0.2);
    s.v = Eigen::VectorXd::Constant(3, 0.04);
    s.step = 10;
    adam_step(w, Eigen::VectorXd::Zero(3), s, cfg);
    EXPECT_EQ(s.step, 11);
    EXPECT_NEAR(s.m(0), 0.9 * 0.2, 1e-15);
    EXPECT_NEAR(s.v(0), 0.999 * 0.04, 1e-15);
    // With stale moments the step is non-zero; from a fresh state it is exactly zero.
    AdamState fresh;
    w = w0;
    adam_step(w, Eigen::VectorXd::Zero(3), fresh, cfg);
    EXPECT_EQ(w, w0);
}

TEST(Adam, ConstantGradientStepTendsToLearningRate) {
    TrainConfig cfg;
    Eigen::VectorXd w = Eigen::VectorXd::Zero(2);
    Eigen::VectorXd g(2);
    g << 0.3, -4.0;
    AdamState s;
    Eigen::VectorXd prev = w;
    for (int k = 0; k < 2000; ++k) {
        prev = w;
        adam_step(w, g, s, cfg);
    }
    const Eigen::VectorXd step = w - prev;
    EXPECT_NEAR(step(0), -cfg.learning_rate, 1e-9);
    EXPECT_NEAR(step(1), cfg.learning_rate, 1e-9);
}

TEST(Metrics, ConfusionIdentities) {
    const Confusion c{30, 50, 5, 15};
    const auto m = metrics_from_confusion(c, 0.2);
    EXPECT_DOUBLE_EQ(m.accuracy * 100, 80.0);
    EXPECT_DOUBLE_EQ(m.recall, 30.0 / 45.0);
    EXPECT_DOUBLE_EQ(m.precision, 30.0 / 35.0);
    const auto none = metrics_from_confusion({0, 10, 0, 0});
    EXPECT_EQ(none.recall, 1.0);
    EXPECT_EQ(none.precision, 1.0);
    EXPECT_FALSE(is_falling(0.5));
    EXPECT_TRUE(is_falling(std::nextafter(0.5, 1.0)));
}

TEST(Evaluate, ConstantAboveThreshold) {
    auto net = nn::Network(nn::NetworkSpec::detector(LayerKind::GRU, 3));
    net.params()(net.params().size() - 1) = 1e-3;  // head.b
    auto ds = toy_detection(10);
    ds.windows[0].label = 1;
    const auto m = evaluate(net, ds);
    EXPECT_DOUBLE_EQ(m.accuracy, 6.0 / 10.0);
    EXPECT_EQ(m.recall, 1.0);
    EXPECT_EQ(m.confusion.fp, 4u);
}

TEST(Evaluate, AgreesWithIndependentTally) {
    const auto net = nn::init_weights(nn::NetworkSpec::detector(LayerKind::LSTM, 4), 21);
    Dataset ds;
    ds.window = 15;
    Rng rng(5);
    for (int i = 0; i < 300; ++i) {
        std::vector<double> a(15);
        for (auto& x : a) x = uniform(rng, -1.0, 2.0);
        ds.windows.push_back({a, static_cast<int>(uniform_int(rng, 0, 1)), ""});
    }
    std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
    double loss = 0.0;
    for (const auto& w : ds.windows) {
        const double p = nn::predict(net, w.angles)(0);
        const bool pred = p > 0.5;
        tp += pred && w.label;
        fp += pred && !w.label;
        fn += !pred && w.label;
        tn += !pred && !w.label;
        loss += w.label ? -std::log(p) : -std::log(1 - p);
    }
    const auto m = evaluate(net, ds, nullptr, 64);
    EXPECT_EQ(m.confusion.tp, tp);
    EXPECT_EQ(m.confusion.tn, tn);
    EXPECT_EQ(m.confusion.fp, fp);
    EXPECT_EQ(m.confusion.fn, fn);
    EXPECT_EQ(m.accuracy, static_cast<double>(tp + tn) / 300.0);
    EXPECT_NEAR(m.loss, loss / 300.0, 1e-12);
}

TEST(EndToEnd, BatchLossGradientMatchesFiniteDifferences) {
    for (const auto& ds : {toy_detection(6, 5), toy_forecast(5)}) {
        const auto spec = ds.task == Task::Detection ? nn::NetworkSpec::detector(LayerKind::BiLSTM, 3)
                                                     : nn::NetworkSpec::forecaster(3, {{LayerKind::GRU, 4}});
        auto net = nn::init_weights(spec, 8);
        std::vector<std::size_t> idx(ds.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        const auto batch = detail::make_batch(ds, idx.data(), idx.size());
        Eigen::MatrixXd grad_pre;
        const auto fc = nn::forward(net, batch);
        detail::batch_loss(ds, idx.data(), idx.size(), fc, &grad_pre, 1.0);
        const Eigen::VectorXd g = nn::backward(net, fc, grad_pre);
        const auto fd = testing::finite_difference(
            [&](const Eigen::VectorXd& p) {
                nn::Network probe = net;
                probe.params() = p;
                return detail::batch_loss(ds, idx.data(), idx.size(), nn::forward(probe, batch), nullptr, 0.0);
            },
            net.params());
        EXPECT_LT(testing::max_relative_error(g, fd), 1e-5);
    }
}

TEST(Train, ZeroEpochsReturnsInitialWeights) {
    TrainConfig cfg;
    cfg.epochs = 0;
    cfg.seed = 17;
    const auto spec = nn::NetworkSpec::detector(LayerKind::GRU, 5);
    const auto res = train(toy_detection(40), spec, cfg);
    EXPECT_TRUE(res.history.empty());
    EXPECT_EQ(res.model.net.params(), nn::init_weights(spec, derive_seed(17, {0})).params());
}

TEST(Train, SeparableToySetReachesPerfectAccuracy) {
    TrainConfig cfg;
    cfg.epochs = 20;
    const auto res = train(toy_detection(512), nn::NetworkSpec::detector(LayerKind::GRU, 5), cfg);
    ASSERT_EQ(res.history.size(), 20u);
    const auto m = evaluate(res.model, toy_detection(64));
    EXPECT_EQ(m.accuracy, 1.0);
    EXPECT_EQ(m.recall, 1.0);
    EXPECT_EQ(m.precision, 1.0);
}

TEST(Train, LossNonIncreasingAtSmallLearningRate) {
    TrainConfig cfg;
    cfg.epochs = 15;
    cfg.learning_rate = 1e-4;
    const auto res = train(toy_detection(256), nn::NetworkSpec::detector(LayerKind::LSTM, 5), cfg);
    for (std::size_t e = 1; e < res.history.size(); ++e)
        EXPECT_LE(res.history[e].loss, res.history[e - 1].loss + 1e-3) << "epoch " << e + 1;
    EXPECT_LT(res.history.back().loss, res.history.front().loss);
}

TEST(Train, BitReproducible) {
    TrainConfig cfg;
    cfg.epochs = 3;
    const auto spec = nn::NetworkSpec::detector(LayerKind::BiLSTM, 4);
    const auto a = train(toy_detection(100), spec, cfg);
    const auto b = train(toy_detection(100), spec, cfg);
    EXPECT_EQ(a.model.net.params(), b.model.net.params());
    EXPECT_EQ(a.history.back().loss, b.history.back().loss);
    cfg.seed = 2;
    EXPECT_NE(train(toy_detection(100), spec, cfg).model.net.params(), a.model.net.params());
}

TEST(Train, StratifiedSplit) {
    auto ds = toy_detection(100);
    const auto sp = split_dataset(ds, 0.2, 4);
    EXPECT_EQ(sp.validation.size(), 20u);
    std::size_t pos = 0;
    for (auto i : sp.validation) pos += ds.windows[i].label;
    EXPECT_EQ(pos, 10u);
}

TEST(Train, RejectsSingleClassAndMismatchedHeads) {
    auto ds = toy_detection(20);
    for (auto& w : ds.windows) w.label = 0;
    TrainConfig cfg;
    cfg.epochs = 1;
    EXPECT_THROW(train(ds, nn::NetworkSpec::detector(LayerKind::GRU, 3), cfg), DataError);
    EXPECT_THROW(train(toy_detection(20), nn::NetworkSpec::forecaster(3, {{LayerKind::GRU, 3}}), cfg), UsageError);
    EXPECT_THROW(train(toy_forecast(20), nn::NetworkSpec::forecaster(4, {{LayerKind::GRU, 3}}), cfg), UsageError);
    EXPECT_THROW(train(Dataset{}, nn::NetworkSpec::detector(LayerKind::GRU, 3), cfg), DataError);
    cfg.adam_beta1 = 1.0;
    EXPECT_THROW(train(toy_detection(20), nn::NetworkSpec::detector(LayerKind::GRU, 3), cfg), UsageError);
}

TEST(Train, ForecasterLearnsRamps) {
    TrainConfig cfg;
    cfg.epochs = 30;
    cfg.learning_rate = 1e-2;
    const auto res = train(toy_forecast(200), nn::NetworkSpec::forecaster(3, {{LayerKind::LSTM, 8}}), cfg);
    EXPECT_LT(res.history.back().metrics.rmse, 0.5 * res.history.front().metrics.rmse);
    EXPECT_TRUE(std::isnan(res.history.back().metrics.accuracy));
}

TEST(History, CsvFormat) {
    EpochRecord r;
    r.epoch = 1;
    r.loss = 0.5;
    r.metrics = metrics_from_confusion({1, 1, 0, 0});
    std::ostringstream os;
    write_history_csv(os, {r});
    EXPECT_EQ(os.str(), "epoch,loss,val_loss,accuracy,recall,precision\n1,0.5,,1,1,1\n");
}

TEST(TrainConfigJson, RoundTrip) {
    TrainConfig cfg;
    cfg.epochs = 7;
    cfg.learning_rate = 0.01;
    const Json j = to_json(cfg);
    TrainConfig back;
    JsonSection s(j, "train");
    read_json(s, back);
    s.finish();
    EXPECT_EQ(to_json(back), j);
}

}  // namespace
}  // namespace fallguard
