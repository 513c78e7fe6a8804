#pragma once
// Model files: a self-describing JSON document holding the network spec, input
// conventions, and every weight matrix as a row-major array.

#include <cmath>
#include <fstream>
#include <string>

#include "fallguard/config_json.hpp"
#include "fallguard/rnn.hpp"

namespace fallguard {

namespace nn {

NLOHMANN_JSON_SERIALIZE_ENUM(LayerKind, {{LayerKind::GRU, "GRU"}, {LayerKind::LSTM, "LSTM"}, {LayerKind::BiLSTM, "BiLSTM"}})
NLOHMANN_JSON_SERIALIZE_ENUM(HeadKind, {{HeadKind::SigmoidScalar, "sigmoid_scalar"}, {HeadKind::LinearVector, "linear_vector"}})

inline void to_json(Json& j, const LayerSpec& l) { j = Json{{"kind", l.kind}, {"hidden_units", l.hidden_units}}; }
inline void from_json(const Json& j, LayerSpec& l) {
    j.at("kind").get_to(l.kind);
    j.at("hidden_units").get_to(l.hidden_units);
}

inline void to_json(Json& j, const NetworkSpec& s) {
    j = Json{{"input_dim", s.input_dim}, {"layers", s.layers}, {"head", s.head}, {"output_dim", s.output_dim}};
}
inline void from_json(const Json& j, NetworkSpec& s) {
    j.at("input_dim").get_to(s.input_dim);
    j.at("layers").get_to(s.layers);
    j.at("head").get_to(s.head);
    j.at("output_dim").get_to(s.output_dim);
}

}  // namespace nn

inline constexpr int kModelFormatVersion = 1;

/// Conventions the network was trained under; the stream detector checks them.
struct InputMeta {
    std::size_t window = 100;
    std::size_t horizon = 0;
    double sensor_rate = 100.0;
    std::string feature = "tilt angle from upward vertical [rad], raw";
};

struct Model {
    nn::Network net;
    InputMeta meta;
    Json provenance = Json::object();
};

inline Json model_to_json(const Model& m) {
    Json weights = Json::object();
    const auto& params = m.net.params();
    for (const auto& b : m.net.layout().blocks) {
        const auto v = nn::Network::view(params, b);
        Json data = Json::array();
        for (nn::Index r = 0; r < b.rows; ++r)
            for (nn::Index c = 0; c < b.cols; ++c) data.push_back(v(r, c));
        weights[b.name] = {{"rows", b.rows}, {"cols", b.cols}, {"data", std::move(data)}};
    }
    return Json{{"format_version", kModelFormatVersion},
                {"spec", m.net.spec()},
                {"input_meta",
                 {{"W", m.meta.window}, {"H", m.meta.horizon}, {"sensor_rate", m.meta.sensor_rate},
                  {"feature", m.meta.feature}}},
                {"weights", std::move(weights)},
                {"provenance", m.provenance}};
}

inline Model model_from_json(const Json& j) {
    try {
        if (j.at("format_version").get<int>() != kModelFormatVersion)
            throw DataError("unsupported model format_version " + j.at("format_version").dump());
        Model m;
        const auto spec = j.at("spec").get<nn::NetworkSpec>();
        try {
            spec.validate();
        } catch (const UsageError& e) {
            throw DataError(std::string("invalid model spec: ") + e.what());
        }
        m.net = nn::Network(spec);
        const auto& im = j.at("input_meta");
        m.meta.window = im.at("W").get<std::size_t>();
        m.meta.horizon = im.at("H").get<std::size_t>();
        m.meta.sensor_rate = im.at("sensor_rate").get<double>();
        m.meta.feature = im.value("feature", m.meta.feature);
        if (spec.head == nn::HeadKind::LinearVector && static_cast<nn::Index>(m.meta.horizon) != spec.output_dim)
            throw DataError("input_meta.H disagrees with the forecasting head size");
        const auto& weights = j.at("weights");
        if (weights.size() != m.net.layout().blocks.size())
            throw DataError("model has " + std::to_string(weights.size()) + " weight blocks, spec implies " +
                            std::to_string(m.net.layout().blocks.size()));
        auto& params = m.net.params();
        for (const auto& b : m.net.layout().blocks) {
            const auto& w = weights.at(b.name);
            if (w.at("rows").get<nn::Index>() != b.rows || w.at("cols").get<nn::Index>() != b.cols)
                throw DataError("weight block '" + b.name + "' has the wrong shape");
            const auto& data = w.at("data");
            if (!data.is_array() || static_cast<nn::Index>(data.size()) != b.size())
                throw DataError("weight block '" + b.name + "' has the wrong element count");
            auto v = nn::Network::view(params, b);
            std::size_t k = 0;
            for (nn::Index r = 0; r < b.rows; ++r)
                for (nn::Index c = 0; c < b.cols; ++c) {
                    const double x = data[k++].get<double>();
                    if (!std::isfinite(x)) throw DataError("non-finite weight in '" + b.name + "'");
                    v(r, c) = x;
                }
        }
        m.provenance = j.value("provenance", Json::object());
        return m;
    } catch (const Json::exception& e) {
        throw DataError(std::string("corrupted model file: ") + e.what());
    }
}

inline void save_model(const std::string& path, const Model& m) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    out << model_to_json(m).dump() << '\n';
    if (!out) throw DataError("write failed for " + path);
}

inline Model load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read model " + path);
    Json j;
    try {
        j = Json::parse(in);
    } catch (const Json::exception& e) {
        throw DataError("corrupted model file " + path + ": " + e.what());
    }
    return model_from_json(j);
}

}  // namespace fallguard
