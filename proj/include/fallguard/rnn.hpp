#pragma once
/**
 * Recurrent networks written from scratch: GRU, LSTM and bidirectional LSTM layers,
 * stacked, followed by a dense head. Forward evaluation and exact backpropagation
 * through time operate on mini-batches laid out as (features x steps*batch)
 * matrices, column t*batch + b holding example b at step t.
 *
 * All parameters live in one flat vector; ParamLayout names the matrix blocks in it
 * so the optimizer can treat the network as a single vector.
 *
 * Cell conventions:
 *   GRU   z = s(Wz x + Uz h + bz), r = s(Wr x + Ur h + br),
 *         c = tanh(Wh x + Uh (r . h) + bh), h' = (1 - z) . h + z . c
 *         gate rows ordered [z; r; c]
 *   LSTM  i, f, o = s(.), g = tanh(.), c' = f . c + i . g, h' = o . tanh(c')
 *         gate rows ordered [i; f; g; o]
 *   BiLSTM  two LSTMs, the second reading the sequence backwards. Per-step output
 *         is [h_fwd(t); h_bwd(t)]; the head sees both directions' final states.
 */

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fallguard/error.hpp"
#include "fallguard/random.hpp"

namespace fallguard::nn {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class LayerKind { GRU, LSTM, BiLSTM };
enum class HeadKind { SigmoidScalar, LinearVector };

inline const char* to_string(LayerKind k) {
    switch (k) {
        case LayerKind::GRU: return "GRU";
        case LayerKind::LSTM: return "LSTM";
        case LayerKind::BiLSTM: return "BiLSTM";
    }
    return "?";
}

inline Index gate_count(LayerKind k) { return k == LayerKind::GRU ? 3 : 4; }
inline Index direction_count(LayerKind k) { return k == LayerKind::BiLSTM ? 2 : 1; }

struct LayerSpec {
    LayerKind kind = LayerKind::GRU;
    Index hidden_units = 1;

    Index output_dim() const { return direction_count(kind) * hidden_units; }
    bool operator==(const LayerSpec&) const = default;
};

struct NetworkSpec {
    Index input_dim = 1;
    std::vector<LayerSpec> layers;
    HeadKind head = HeadKind::SigmoidScalar;
    Index output_dim = 1;  ///< 1 for SigmoidScalar, H for LinearVector

    Index feature_dim() const { return layers.back().output_dim(); }
    bool operator==(const NetworkSpec&) const = default;

    void validate() const {
        if (input_dim < 1) throw UsageError("input_dim must be >= 1");
        if (layers.empty()) throw UsageError("network needs at least one recurrent layer");
        for (const auto& l : layers)
            if (l.hidden_units < 1) throw UsageError("hidden_units must be >= 1");
        if (head == HeadKind::SigmoidScalar && output_dim != 1)
            throw UsageError("sigmoid head must have output_dim 1");
        if (output_dim < 1) throw UsageError("output_dim must be >= 1");
    }

    static NetworkSpec detector(LayerKind kind, Index hidden) {
        return {1, {{kind, hidden}}, HeadKind::SigmoidScalar, 1};
    }
    static NetworkSpec forecaster(Index horizon, std::vector<LayerSpec> layers) {
        return {1, std::move(layers), HeadKind::LinearVector, horizon};
    }
};

struct ParamBlock {
    std::string name;
    Index rows = 0;
    Index cols = 0;
    Index offset = 0;
    Index size() const { return rows * cols; }
};

/// Block indices of one recurrent direction.
struct DirectionBlocks {
    std::size_t W = 0, U = 0, b = 0;
};

struct ParamLayout {
    std::vector<ParamBlock> blocks;
    std::vector<std::vector<DirectionBlocks>> layers;  ///< [layer][direction]
    std::size_t head_W = 0, head_b = 0;
    Index total = 0;

    static ParamLayout for_spec(const NetworkSpec& spec) {
        spec.validate();
        ParamLayout L;
        auto add = [&](std::string name, Index r, Index c) {
            L.blocks.push_back({std::move(name), r, c, L.total});
            L.total += r * c;
            return L.blocks.size() - 1;
        };
        Index in = spec.input_dim;
        for (std::size_t l = 0; l < spec.layers.size(); ++l) {
            const auto& ls = spec.layers[l];
            const Index gh = gate_count(ls.kind) * ls.hidden_units;
            std::vector<DirectionBlocks> dirs;
            for (Index d = 0; d < direction_count(ls.kind); ++d) {
                const std::string p = "layers." + std::to_string(l) + (d == 0 ? "" : ".reverse") + ".";
                DirectionBlocks db;
                db.W = add(p + "W", gh, in);
                db.U = add(p + "U", gh, ls.hidden_units);
                db.b = add(p + "b", gh, 1);
                dirs.push_back(db);
            }
            L.layers.push_back(std::move(dirs));
            in = ls.output_dim();
        }
        L.head_W = add("head.W", spec.output_dim, in);
        L.head_b = add("head.b", spec.output_dim, 1);
        return L;
    }
};

/// Spec plus flat parameter vector.
class Network {
public:
    Network() = default;
    explicit Network(NetworkSpec spec)
        : spec_(std::move(spec)), layout_(ParamLayout::for_spec(spec_)), params_(VectorXd::Zero(layout_.total)) {}

    const NetworkSpec& spec() const { return spec_; }
    const ParamLayout& layout() const { return layout_; }
    VectorXd& params() { return params_; }
    const VectorXd& params() const { return params_; }

    Eigen::Map<MatrixXd> block(std::size_t i) { return view(params_, layout_.blocks.at(i)); }
    Eigen::Map<const MatrixXd> block(std::size_t i) const { return view(params_, layout_.blocks.at(i)); }

    static Eigen::Map<MatrixXd> view(VectorXd& v, const ParamBlock& b) {
        return {v.data() + b.offset, b.rows, b.cols};
    }
    static Eigen::Map<const MatrixXd> view(const VectorXd& v, const ParamBlock& b) {
        return {v.data() + b.offset, b.rows, b.cols};
    }

private:
    NetworkSpec spec_;
    ParamLayout layout_;
    VectorXd params_;
};

/**
 * Glorot-uniform kernels (bound sqrt(6 / (rows + cols)) per matrix), zero biases
 * except the LSTM forget gate, which starts at 1.
 */
inline Network init_weights(const NetworkSpec& spec, std::uint64_t seed) {
    Network net(spec);
    Rng rng(seed);
    for (std::size_t l = 0; l < net.layout().layers.size(); ++l) {
        const auto& ls = spec.layers[l];
        for (const auto& db : net.layout().layers[l]) {
            for (auto bi : {db.W, db.U}) {
                auto m = net.block(bi);
                const double bound = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
                std::uniform_real_distribution<double> u(-bound, bound);
                for (Index c = 0; c < m.cols(); ++c)
                    for (Index r = 0; r < m.rows(); ++r) m(r, c) = u(rng);
            }
            if (ls.kind != LayerKind::GRU) net.block(db.b).middleRows(ls.hidden_units, ls.hidden_units).setOnes();
        }
    }
    auto hw = net.block(net.layout().head_W);
    const double bound = std::sqrt(6.0 / static_cast<double>(hw.rows() + hw.cols()));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Index c = 0; c < hw.cols(); ++c)
        for (Index r = 0; r < hw.rows(); ++r) hw(r, c) = u(rng);
    return net;
}

// ---------------------------------------------------------------------------
// Single-step cells (one example). The batched forward pass below is an
// independent implementation of the same equations.

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

template <class Derived>
auto sigmoid(const Eigen::ArrayBase<Derived>& x) {
    return (1.0 + (-x).exp()).inverse();
}

struct GruStep {
    VectorXd h, z, r, candidate;
};

struct LstmStep {
    VectorXd h, c, i, f, g, o;
};

namespace detail {

inline void check_cell(Index x, Index h, Index gates, const MatrixXd& W, const MatrixXd& U, const VectorXd& b) {
    if (W.rows() != gates * h || W.cols() != x || U.rows() != gates * h || U.cols() != h || b.size() != gates * h)
        throw DataError("cell weight shapes do not match input/hidden dimensions");
}

}  // namespace detail

inline GruStep gru_cell(const VectorXd& x, const VectorXd& h_prev, const MatrixXd& W, const MatrixXd& U,
                        const VectorXd& b) {
    const Index H = h_prev.size();
    detail::check_cell(x.size(), H, 3, W, U, b);
    GruStep s;
    const VectorXd a = W * x + b;
    s.z = sigmoid((a.segment(0, H) + U.middleRows(0, H) * h_prev).array()).matrix();
    s.r = sigmoid((a.segment(H, H) + U.middleRows(H, H) * h_prev).array()).matrix();
    s.candidate = (a.segment(2 * H, H) + U.middleRows(2 * H, H) * s.r.cwiseProduct(h_prev)).array().tanh().matrix();
    s.h = ((1.0 - s.z.array()) * h_prev.array() + s.z.array() * s.candidate.array()).matrix();
    return s;
}

inline LstmStep lstm_cell(const VectorXd& x, const VectorXd& h_prev, const VectorXd& c_prev, const MatrixXd& W,
                          const MatrixXd& U, const VectorXd& b) {
    const Index H = h_prev.size();
    if (c_prev.size() != H) throw DataError("cell state and hidden state differ in size");
    detail::check_cell(x.size(), H, 4, W, U, b);
    const VectorXd a = W * x + U * h_prev + b;
    LstmStep s;
    s.i = sigmoid(a.segment(0, H).array()).matrix();
    s.f = sigmoid(a.segment(H, H).array()).matrix();
    s.g = a.segment(2 * H, H).array().tanh().matrix();
    s.o = sigmoid(a.segment(3 * H, H).array()).matrix();
    s.c = (s.f.array() * c_prev.array() + s.i.array() * s.g.array()).matrix();
    s.h = (s.o.array() * s.c.array().tanh()).matrix();
    return s;
}

// ---------------------------------------------------------------------------
// Batched forward / backward

struct SequenceBatch {
    Index steps = 0;
    Index batch = 0;
    MatrixXd data;  ///< input_dim x (steps*batch)

    /// Scalar-feature batch from equally long sequences.
    template <class Seq>
    static SequenceBatch from_sequences(const std::vector<const Seq*>& seqs) {
        if (seqs.empty()) throw DataError("empty batch");
        SequenceBatch sb;
        sb.batch = static_cast<Index>(seqs.size());
        sb.steps = static_cast<Index>(seqs.front()->size());
        sb.data.resize(1, sb.steps * sb.batch);
        for (Index b = 0; b < sb.batch; ++b) {
            const auto& s = *seqs[static_cast<std::size_t>(b)];
            if (static_cast<Index>(s.size()) != sb.steps) throw DataError("sequences in a batch differ in length");
            for (Index t = 0; t < sb.steps; ++t) sb.data(0, t * sb.batch + b) = s[static_cast<std::size_t>(t)];
        }
        return sb;
    }

    static SequenceBatch single(const std::vector<double>& seq) {
        std::vector<const std::vector<double>*> v{&seq};
        return from_sequences(v);
    }
};

struct DirectionCache {
    MatrixXd X;      ///< layer input in processing order
    MatrixXd gates;  ///< gate activations, processing order
    MatrixXd Hs;     ///< hidden states, H x (T+1)*B, block 0 is the zero initial state
    MatrixXd Cs;     ///< LSTM cell states, same layout as Hs
    MatrixXd RH;     ///< GRU r . h_prev
    MatrixXd TC;     ///< LSTM tanh(c)
};

struct LayerCache {
    std::vector<DirectionCache> dirs;
    MatrixXd Y;  ///< per-step layer output, time order
};

struct ForwardCache {
    NetworkSpec spec;
    Index steps = 0;
    Index batch = 0;
    std::vector<LayerCache> layers;
    MatrixXd features;  ///< head input
    MatrixXd pre;       ///< head pre-activation (logit for the sigmoid head)
    MatrixXd output;    ///< output_dim x batch
};

namespace detail {

/// Column block t <- block T-1-t.
inline MatrixXd reverse_steps(const MatrixXd& m, Index T, Index B) {
    MatrixXd out(m.rows(), m.cols());
    for (Index t = 0; t < T; ++t) out.middleCols(t * B, B) = m.middleCols((T - 1 - t) * B, B);
    return out;
}

inline void gru_forward(DirectionCache& dc, Eigen::Map<const MatrixXd> W, Eigen::Map<const MatrixXd> U,
                        Eigen::Map<const MatrixXd> b, Index T, Index B) {
    const Index H = U.cols();
    dc.gates.noalias() = W * dc.X;
    dc.gates.colwise() += b.col(0);
    dc.Hs.setZero(H, (T + 1) * B);
    dc.RH.resize(H, T * B);
    MatrixXd rec(2 * H, B), cand(H, B);
    for (Index s = 0; s < T; ++s) {
        auto hprev = dc.Hs.middleCols(s * B, B);
        auto g = dc.gates.middleCols(s * B, B);
        rec.noalias() = U.topRows(2 * H) * hprev;
        g.topRows(2 * H) = sigmoid((g.topRows(2 * H) + rec).array()).matrix();
        dc.RH.middleCols(s * B, B) = g.middleRows(H, H).cwiseProduct(hprev);
        cand.noalias() = U.bottomRows(H) * dc.RH.middleCols(s * B, B);
        g.bottomRows(H) = (g.bottomRows(H) + cand).array().tanh().matrix();
        dc.Hs.middleCols((s + 1) * B, B) =
            hprev + g.topRows(H).cwiseProduct(g.bottomRows(H) - hprev);
    }
}

inline void lstm_forward(DirectionCache& dc, Eigen::Map<const MatrixXd> W, Eigen::Map<const MatrixXd> U,
                         Eigen::Map<const MatrixXd> b, Index T, Index B) {
    const Index H = U.cols();
    dc.gates.noalias() = W * dc.X;
    dc.gates.colwise() += b.col(0);
    dc.Hs.setZero(H, (T + 1) * B);
    dc.Cs.setZero(H, (T + 1) * B);
    dc.TC.resize(H, T * B);
    MatrixXd rec(4 * H, B);
    for (Index s = 0; s < T; ++s) {
        auto g = dc.gates.middleCols(s * B, B);
        rec.noalias() = U * dc.Hs.middleCols(s * B, B);
        g += rec;
        g.topRows(2 * H) = sigmoid(g.topRows(2 * H).array()).matrix();
        g.middleRows(2 * H, H) = g.middleRows(2 * H, H).array().tanh().matrix();
        g.bottomRows(H) = sigmoid(g.bottomRows(H).array()).matrix();
        auto c = dc.Cs.middleCols((s + 1) * B, B);
        c = g.middleRows(H, H).cwiseProduct(dc.Cs.middleCols(s * B, B)) +
            g.topRows(H).cwiseProduct(g.middleRows(2 * H, H));
        dc.TC.middleCols(s * B, B) = c.array().tanh().matrix();
        dc.Hs.middleCols((s + 1) * B, B) = g.bottomRows(H).cwiseProduct(dc.TC.middleCols(s * B, B));
    }
}

/// Returns dA (pre-activation gradients, processing order) and accumulates dU.
inline MatrixXd gru_backward(const DirectionCache& dc, Eigen::Map<const MatrixXd> U, const MatrixXd* dY,
                             const MatrixXd& dfinal, Eigen::Map<MatrixXd> gU, Index T, Index B) {
    const Index H = U.cols();
    MatrixXd dA(3 * H, T * B);
    MatrixXd dh = dfinal;
    MatrixXd dprev(H, B), drh(H, B), dzr(2 * H, B);
    for (Index s = T - 1; s >= 0; --s) {
        if (dY) dh += dY->middleCols(s * B, B);
        const auto g = dc.gates.middleCols(s * B, B);
        const auto z = g.topRows(H).array();
        const auto r = g.middleRows(H, H).array();
        const auto hc = g.bottomRows(H).array();
        const auto hprev = dc.Hs.middleCols(s * B, B).array();
        auto da = dA.middleCols(s * B, B);
        da.bottomRows(H) = (dh.array() * z * (1.0 - hc.square())).matrix();
        drh.noalias() = U.bottomRows(H).transpose() * da.bottomRows(H);
        da.topRows(H) = (dh.array() * (hc - hprev) * z * (1.0 - z)).matrix();
        da.middleRows(H, H) = (drh.array() * hprev * r * (1.0 - r)).matrix();
        dprev = (dh.array() * (1.0 - z) + drh.array() * r).matrix();
        dprev.noalias() += U.topRows(2 * H).transpose() * da.topRows(2 * H);
        dh.swap(dprev);
    }
    gU.topRows(2 * H).noalias() += dA.topRows(2 * H) * dc.Hs.leftCols(T * B).transpose();
    gU.bottomRows(H).noalias() += dA.bottomRows(H) * dc.RH.transpose();
    return dA;
}

inline MatrixXd lstm_backward(const DirectionCache& cache, Eigen::Map<const MatrixXd> U, const MatrixXd* dY,
                              const MatrixXd& dfinal, Eigen::Map<MatrixXd> gU, Index T, Index B) {
    const Index H = U.cols();
    MatrixXd dA(4 * H, T * B);
    MatrixXd dh = dfinal;
    MatrixXd dcell = MatrixXd::Zero(H, B);
    for (Index s = T - 1; s >= 0; --s) {
        if (dY) dh += dY->middleCols(s * B, B);
        const auto g = cache.gates.middleCols(s * B, B);
        const auto i = g.topRows(H).array();
        const auto f = g.middleRows(H, H).array();
        const auto gg = g.middleRows(2 * H, H).array();
        const auto o = g.bottomRows(H).array();
        const auto tc = cache.TC.middleCols(s * B, B).array();
        const auto cprev = cache.Cs.middleCols(s * B, B).array();
        dcell.array() += dh.array() * o * (1.0 - tc.square());
        auto da = dA.middleCols(s * B, B);
        da.topRows(H) = (dcell.array() * gg * i * (1.0 - i)).matrix();
        da.middleRows(H, H) = (dcell.array() * cprev * f * (1.0 - f)).matrix();
        da.middleRows(2 * H, H) = (dcell.array() * i * (1.0 - gg.square())).matrix();
        da.bottomRows(H) = (dh.array() * tc * o * (1.0 - o)).matrix();
        dcell.array() *= f;
        dh.noalias() = U.transpose() * da;
    }
    gU.noalias() += dA * cache.Hs.leftCols(T * B).transpose();
    return dA;
}

}  // namespace detail

/// Batched forward pass; the cache holds everything backward() needs.
inline ForwardCache forward(const Network& net, const SequenceBatch& x) {
    const auto& spec = net.spec();
    const auto& L = net.layout();
    if (x.data.rows() != spec.input_dim) throw DataError("input feature dimension does not match the network");
    if (x.steps < 1 || x.batch < 1 || x.data.cols() != x.steps * x.batch)
        throw DataError("sequence batch must be non-empty and consistently shaped");
    const Index T = x.steps, B = x.batch;
    ForwardCache cache;
    cache.spec = spec;
    cache.steps = T;
    cache.batch = B;
    cache.layers.resize(spec.layers.size());
    const MatrixXd* in = &x.data;
    for (std::size_t l = 0; l < spec.layers.size(); ++l) {
        const auto& ls = spec.layers[l];
        auto& lc = cache.layers[l];
        const Index H = ls.hidden_units;
        lc.Y.resize(ls.output_dim(), T * B);
        lc.dirs.resize(static_cast<std::size_t>(direction_count(ls.kind)));
        for (std::size_t d = 0; d < lc.dirs.size(); ++d) {
            auto& dc = lc.dirs[d];
            const auto& db = L.layers[l][d];
            dc.X = d == 0 ? *in : detail::reverse_steps(*in, T, B);
            if (ls.kind == LayerKind::GRU) detail::gru_forward(dc, net.block(db.W), net.block(db.U), net.block(db.b), T, B);
            else detail::lstm_forward(dc, net.block(db.W), net.block(db.U), net.block(db.b), T, B);
            for (Index s = 0; s < T; ++s) {
                const Index t = d == 0 ? s : T - 1 - s;
                lc.Y.block(static_cast<Index>(d) * H, t * B, H, B) = dc.Hs.middleCols((s + 1) * B, B);
            }
        }
        in = &lc.Y;
    }
    const auto& top = cache.layers.back();
    const Index H = spec.layers.back().hidden_units;
    cache.features.resize(spec.feature_dim(), B);
    for (std::size_t d = 0; d < top.dirs.size(); ++d)
        cache.features.middleRows(static_cast<Index>(d) * H, H) = top.dirs[d].Hs.middleCols(T * B, B);
    cache.pre.noalias() = net.block(L.head_W) * cache.features;
    cache.pre.colwise() += net.block(L.head_b).col(0);
    cache.output = spec.head == HeadKind::SigmoidScalar ? sigmoid(cache.pre.array()).matrix() : cache.pre;
    return cache;
}

/// Output for a single scalar-feature sequence. Same arithmetic as forward() but
/// only the running state is kept, which is what the streaming path needs.
inline VectorXd predict(const Network& net, const std::vector<double>& seq) {
    const auto& spec = net.spec();
    const auto& L = net.layout();
    if (spec.input_dim != 1) throw DataError("input feature dimension does not match the network");
    const Index T = static_cast<Index>(seq.size());
    if (T < 1) throw DataError("sequence batch must be non-empty and consistently shaped");
    MatrixXd in = Eigen::Map<const MatrixXd>(seq.data(), 1, T);
    VectorXd features(spec.feature_dim());
    MatrixXd gates, Y;
    VectorXd h, c, rec, tmp;
    for (std::size_t l = 0; l < spec.layers.size(); ++l) {
        const auto& ls = spec.layers[l];
        const Index H = ls.hidden_units;
        const bool top = l + 1 == spec.layers.size();
        if (!top) Y.resize(ls.output_dim(), T);
        const int dirs = direction_count(ls.kind);
        for (int d = 0; d < dirs; ++d) {
            const auto& db = L.layers[l][static_cast<std::size_t>(d)];
            const auto W = net.block(db.W);
            const auto U = net.block(db.U);
            const auto b = net.block(db.b);
            gates.noalias() = W * in;
            gates.colwise() += b.col(0);
            h.setZero(H);
            c.setZero(H);
            for (Index s = 0; s < T; ++s) {
                const Index t = d == 0 ? s : T - 1 - s;
                auto g = gates.col(t);
                if (ls.kind == LayerKind::GRU) {
                    rec.noalias() = U.topRows(2 * H) * h;
                    g.head(2 * H) = sigmoid((g.head(2 * H) + rec).array()).matrix();
                    tmp = g.segment(H, H).cwiseProduct(h);
                    rec.head(H).noalias() = U.bottomRows(H) * tmp;
                    g.tail(H) = (g.tail(H) + rec.head(H)).array().tanh().matrix();
                    h += g.head(H).cwiseProduct(g.tail(H) - h);
                } else {
                    rec.noalias() = U * h;
                    g += rec;
                    g.head(2 * H) = sigmoid(g.head(2 * H).array()).matrix();
                    g.segment(2 * H, H) = g.segment(2 * H, H).array().tanh().matrix();
                    g.tail(H) = sigmoid(g.tail(H).array()).matrix();
                    c = g.segment(H, H).cwiseProduct(c) + g.head(H).cwiseProduct(g.segment(2 * H, H));
                    h = g.tail(H).cwiseProduct(c.array().tanh().matrix());
                }
                if (!top) Y.block(static_cast<Index>(d) * H, t, H, 1) = h;
            }
            if (top) features.segment(static_cast<Index>(d) * H, H) = h;
        }
        if (!top) in.swap(Y);
    }
    VectorXd pre = net.block(L.head_W) * features;
    pre += net.block(L.head_b).col(0);
    if (spec.head == HeadKind::SigmoidScalar) return sigmoid(pre.array()).matrix();
    return pre;
}

/**
 * Exact gradient of a scalar loss with respect to every parameter, given
 * grad_pre = dLoss/d(head pre-activation) (output_dim x batch). For the sigmoid
 * head this is the gradient with respect to the logit.
 */
inline VectorXd backward(const Network& net, const ForwardCache& cache, const MatrixXd& grad_pre) {
    const auto& spec = net.spec();
    const auto& L = net.layout();
    if (!(cache.spec == spec) || cache.layers.size() != spec.layers.size())
        throw DataError("forward cache was produced by a different network");
    if (grad_pre.rows() != spec.output_dim || grad_pre.cols() != cache.batch)
        throw DataError("output gradient shape does not match the forward batch");
    const Index T = cache.steps, B = cache.batch;
    VectorXd grad = VectorXd::Zero(L.total);
    Network::view(grad, L.blocks[L.head_W]).noalias() = grad_pre * cache.features.transpose();
    Network::view(grad, L.blocks[L.head_b]) = grad_pre.rowwise().sum();
    const MatrixXd dfeat = net.block(L.head_W).transpose() * grad_pre;

    MatrixXd dY;  // gradient w.r.t. the current layer's per-step output (time order)
    for (std::size_t li = spec.layers.size(); li-- > 0;) {
        const auto& ls = spec.layers[li];
        const auto& lc = cache.layers[li];
        const Index H = ls.hidden_units;
        const bool top = li + 1 == spec.layers.size();
        MatrixXd dX;
        if (li > 0) dX = MatrixXd::Zero(lc.dirs[0].X.rows(), T * B);
        for (std::size_t d = 0; d < lc.dirs.size(); ++d) {
            const auto& dc = lc.dirs[d];
            const auto& db = L.layers[li][d];
            const MatrixXd dfinal = top ? MatrixXd(dfeat.middleRows(static_cast<Index>(d) * H, H)) : MatrixXd::Zero(H, B);
            MatrixXd dYd;
            if (!top) {
                dYd = dY.middleRows(static_cast<Index>(d) * H, H);
                if (d == 1) dYd = detail::reverse_steps(dYd, T, B);
            }
            auto gU = Network::view(grad, L.blocks[db.U]);
            const MatrixXd dA = ls.kind == LayerKind::GRU
                                    ? detail::gru_backward(dc, net.block(db.U), top ? nullptr : &dYd, dfinal, gU, T, B)
                                    : detail::lstm_backward(dc, net.block(db.U), top ? nullptr : &dYd, dfinal, gU, T, B);
            Network::view(grad, L.blocks[db.W]).noalias() += dA * dc.X.transpose();
            Network::view(grad, L.blocks[db.b]) += dA.rowwise().sum();
            if (li > 0) {
                MatrixXd dXd = net.block(db.W).transpose() * dA;
                if (d == 1) dXd = detail::reverse_steps(dXd, T, B);
                dX += dXd;
            }
        }
        dY = std::move(dX);
    }
    return grad;
}

}  // namespace fallguard::nn
