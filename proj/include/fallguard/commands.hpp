#pragma once
/**
 * The pipeline steps behind the `fallguard` executable. Each command takes fully
 * resolved options, reads and writes files, and reports problems through the
 * Error hierarchy; the executable only parses flags and maps errors to exit codes.
 *
 * Every artifact carries the effective configuration: datasets and models embed
 * it, CSV and JSONL outputs get a `<path>.meta.json` sidecar.
 */

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "fallguard/dataset.hpp"
#include "fallguard/ga_search.hpp"
#include "fallguard/model_io.hpp"
#include "fallguard/realtime.hpp"
#include "fallguard/training.hpp"

namespace fallguard {

// ---------------------------------------------------------------------------
// Run configuration

struct DetectionFileOptions {
    std::size_t window = 100;
    std::size_t stride = 10;
    std::size_t balance_positives = 0;  ///< both zero: keep every window
    std::size_t balance_negatives = 0;
};

struct RunConfig {
    ScenarioConfig scenario;
    DetectionFileOptions detection;
    ForecastOptions forecast;
    TrainConfig train;
    std::vector<nn::LayerSpec> layers;  ///< empty: the task default
    GAConfig ga;
    StreamConfig stream;

    void validate() const {
        scenario.validate();
        train.validate();
        ga.validate();
        if (detection.window == 0 || detection.stride == 0) throw UsageError("detection window and stride must be >= 1");
        if ((detection.balance_positives == 0) != (detection.balance_negatives == 0))
            throw UsageError("balance_positives and balance_negatives must be set together");
        if (forecast.window == 0 || forecast.horizon == 0 || forecast.stride == 0)
            throw UsageError("forecast window, horizon and stride must be >= 1");
        if (!(stream.trigger_lead >= 0.0) || !(stream.rate_tolerance >= 0.0))
            throw UsageError("stream trigger_lead and rate_tolerance must be non-negative");
        for (const auto& l : layers)
            if (l.hidden_units < 1) throw UsageError("hidden_units must be >= 1");
    }
};

inline nn::LayerKind parse_layer_kind(std::string_view s) {
    if (s == "GRU") return nn::LayerKind::GRU;
    if (s == "LSTM") return nn::LayerKind::LSTM;
    if (s == "BiLSTM") return nn::LayerKind::BiLSTM;
    throw UsageError("unknown layer kind '" + std::string(s) + "' (GRU, LSTM, BiLSTM)");
}

/// "GRU-100,GRU-100" -> two GRU layers of 100 units.
inline std::vector<nn::LayerSpec> parse_layers(std::string_view text) {
    std::vector<nn::LayerSpec> out;
    for (auto item : detail::split_csv(text)) {
        const auto dash = item.rfind('-');
        if (dash == std::string_view::npos) throw UsageError("layer '" + std::string(item) + "' is not KIND-UNITS");
        int units = 0;
        const auto num = item.substr(dash + 1);
        auto [ptr, ec] = std::from_chars(num.data(), num.data() + num.size(), units);
        if (ec != std::errc() || ptr != num.data() + num.size() || units < 1)
            throw UsageError("layer '" + std::string(item) + "' has a bad unit count");
        out.push_back({parse_layer_kind(item.substr(0, dash)), units});
    }
    return out;
}

inline std::string layers_label(const std::vector<nn::LayerSpec>& layers) {
    std::string s;
    for (const auto& l : layers) {
        if (!s.empty()) s += ',';
        s += std::string(nn::to_string(l.kind)) + "-" + std::to_string(l.hidden_units);
    }
    return s;
}

inline Json to_json(const RunConfig& c) {
    Json layers = Json::array();
    for (const auto& l : c.layers) layers.push_back({{"kind", nn::to_string(l.kind)}, {"hidden_units", l.hidden_units}});
    return Json{{"scenario", to_json(c.scenario)},
                {"detection",
                 {{"window", c.detection.window},
                  {"stride", c.detection.stride},
                  {"balance_positives", c.detection.balance_positives},
                  {"balance_negatives", c.detection.balance_negatives}}},
                {"forecast",
                 {{"window", c.forecast.window},
                  {"horizon", c.forecast.horizon},
                  {"stride", c.forecast.stride},
                  {"pairs_per_fall", c.forecast.pairs_per_fall},
                  {"min_observed", c.forecast.min_observed}}},
                {"train", to_json(c.train)},
                {"network", {{"layers", layers}}},
                {"ga", to_json(c.ga)},
                {"stream", {{"trigger_lead", c.stream.trigger_lead}, {"rate_tolerance", c.stream.rate_tolerance}}}};
}

/// Reads known sections only; unknown sections or keys are usage errors.
inline RunConfig run_config_from_json(const Json& j) {
    RunConfig c;
    if (!j.is_object()) throw UsageError("config file must hold a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& name = it.key();
        JsonSection s(it.value(), name);
        if (name == "scenario") {
            read_json(s, c.scenario);
        } else if (name == "detection") {
            s.read("window", c.detection.window);
            s.read("stride", c.detection.stride);
            s.read("balance_positives", c.detection.balance_positives);
            s.read("balance_negatives", c.detection.balance_negatives);
        } else if (name == "forecast") {
            s.read("window", c.forecast.window);
            s.read("horizon", c.forecast.horizon);
            s.read("stride", c.forecast.stride);
            s.read("pairs_per_fall", c.forecast.pairs_per_fall);
            s.read("min_observed", c.forecast.min_observed);
        } else if (name == "train") {
            read_json(s, c.train);
        } else if (name == "network") {
            if (s.has("layers")) {
                const auto& arr = s.raw("layers");
                if (!arr.is_array()) throw UsageError("config key 'network.layers' must be an array");
                for (const auto& l : arr) {
                    JsonSection ls(l, "network.layers[]");
                    std::string kind;
                    int units = 0;
                    ls.read("kind", kind);
                    ls.read("hidden_units", units);
                    ls.finish();
                    c.layers.push_back({parse_layer_kind(kind), units});
                }
            }
        } else if (name == "ga") {
            read_json(s, c.ga);
        } else if (name == "stream") {
            s.read("trigger_lead", c.stream.trigger_lead);
            s.read("rate_tolerance", c.stream.rate_tolerance);
        } else {
            throw UsageError("unknown config section '" + name + "'");
        }
        s.finish();
    }
    return c;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot read config file " + path);
    try {
        return run_config_from_json(Json::parse(in));
    } catch (const Json::parse_error& e) {
        throw UsageError("config file " + path + " is not valid JSON: " + e.what());
    }
}

/// Writes `<path>.meta.json` next to a CSV or JSONL output.
inline void write_sidecar(const std::string& path, const Json& meta) {
    std::ofstream out(path + ".meta.json", std::ios::binary);
    if (!out) throw DataError("cannot write " + path + ".meta.json");
    out << meta.dump(2) << '\n';
}

inline std::ofstream open_output(const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    return out;
}

// ---------------------------------------------------------------------------
// simulate

struct SimulateOptions {
    std::vector<double> theta0{0.1};
    std::vector<double> omega0{0.0};
    PendulumParams params;
    double sensor_rate = 100.0;
    double max_t = 10.0;
    bool grid = false;
    std::string out;  ///< file, or directory with grid
};

inline std::string grid_file_name(double theta0, double omega0) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "fall_theta0_%.6g_omega0_%.6g.csv", theta0, omega0);
    return buf;
}

/// Returns the written paths.
inline std::vector<std::string> cmd_simulate(const SimulateOptions& o) {
    if (o.out.empty()) throw UsageError("simulate needs an output path");
    if (o.theta0.empty() || o.omega0.empty()) throw UsageError("theta0 and omega0 need at least one value");
    if (!o.grid && (o.theta0.size() != 1 || o.omega0.size() != 1))
        throw UsageError("several theta0/omega0 values need --grid");
    if (!(o.max_t > 0.0)) throw UsageError("duration must be positive");
    for (double v : o.theta0)
        if (!std::isfinite(v)) throw UsageError("theta0 must be finite");
    for (double v : o.omega0)
        if (!std::isfinite(v)) throw UsageError("omega0 must be finite");
    if (o.grid) std::filesystem::create_directories(o.out);
    std::vector<std::string> written;
    for (double th : o.theta0)
        for (double om : o.omega0) {
            const auto traj = generate_fall(o.params, {th, om, 0.0}, o.sensor_rate, o.max_t);
            for (const auto& s : traj.samples)
                if (!s.finite()) throw NumericError("non-finite state in the simulated trajectory");
            const std::string path = o.grid ? (std::filesystem::path(o.out) / grid_file_name(th, om)).string() : o.out;
            auto out = open_output(path);
            write_trajectory_csv(out, traj);
            if (!out) throw DataError("write failed for " + path);
            write_sidecar(path, {{"theta0", th},
                                 {"omega0", om},
                                 {"length", o.params.length},
                                 {"mass", o.params.mass},
                                 {"gravity", o.params.gravity},
                                 {"inertia_model", o.params.inertia_model},
                                 {"sensor_rate", o.sensor_rate},
                                 {"max_t", o.max_t},
                                 {"terminated_by", to_string(traj.terminated_by)}});
            written.push_back(path);
        }
    return written;
}

// ---------------------------------------------------------------------------
// gen-data

struct GenDataOutputs {
    std::optional<std::string> detection_path;
    std::optional<std::string> forecast_path;
    std::size_t detection_rows = 0;
    std::size_t forecast_rows = 0;
};

inline Dataset generate_detection(const RunConfig& c, unsigned workers) {
    DetectionOptions o;
    o.window = c.detection.window;
    o.stride = c.detection.stride;
    o.workers = workers;
    auto ds = build_detection_dataset(c.scenario, o);
    if (c.detection.balance_positives > 0)
        ds = balanced_subset(ds, c.detection.balance_positives, c.detection.balance_negatives,
                             derive_seed(c.scenario.seed, {100}));
    return ds;
}

inline Dataset generate_forecast(const RunConfig& c, unsigned workers) {
    auto o = c.forecast;
    o.workers = workers;
    return build_forecast_dataset(c.scenario, o);
}

/// Writes `detection.csv` and/or `forecast.csv` (plus metadata) into `out_dir`.
/// Worker count never changes the output.
inline GenDataOutputs cmd_gen_data(const RunConfig& c, const std::string& out_dir, bool detection, bool forecast,
                                   unsigned workers = 1) {
    c.validate();
    if (!detection && !forecast) throw UsageError("nothing to generate");
    if (c.scenario.n_fall + c.scenario.n_nonfall == 0)
        throw DataError("empty dataset: n_fall and n_nonfall are both zero");
    std::filesystem::create_directories(out_dir);
    GenDataOutputs res;
    auto finish = [&](Dataset& ds, const char* file) {
        if (ds.empty()) throw DataError(std::string("generated ") + file + " is empty");
        ds.metadata["run_config"] = to_json(c);
        const auto path = (std::filesystem::path(out_dir) / file).string();
        save_dataset(path, ds);
        return path;
    };
    if (detection) {
        auto ds = generate_detection(c, workers);
        res.detection_rows = ds.size();
        res.detection_path = finish(ds, "detection.csv");
    }
    if (forecast) {
        auto ds = generate_forecast(c, workers);
        res.forecast_rows = ds.size();
        res.forecast_path = finish(ds, "forecast.csv");
    }
    return res;
}

// ---------------------------------------------------------------------------
// train / eval

inline nn::NetworkSpec network_for(Task task, const RunConfig& c, std::size_t horizon) {
    std::vector<nn::LayerSpec> layers = c.layers;
    if (layers.empty())
        layers = task == Task::Detection ? std::vector<nn::LayerSpec>{{nn::LayerKind::GRU, 100}}
                                         : std::vector<nn::LayerSpec>{{nn::LayerKind::GRU, 100}, {nn::LayerKind::GRU, 100}};
    nn::NetworkSpec spec = task == Task::Detection ? nn::NetworkSpec{1, layers, nn::HeadKind::SigmoidScalar, 1}
                                                   : nn::NetworkSpec::forecaster(static_cast<nn::Index>(horizon), layers);
    spec.validate();
    return spec;
}

struct TrainOutputs {
    Model model;
    std::vector<EpochRecord> history;
};

/// Trains on the dataset file and writes the model plus an epoch history CSV.
inline TrainOutputs cmd_train(Task task, const std::string& dataset_path, const RunConfig& c,
                              const std::string& model_path, const std::string& history_path,
                              const EpochCallback& on_epoch = {}) {
    c.validate();
    const auto ds = load_dataset(dataset_path);
    if (ds.task != task)
        throw DataError(dataset_path + " is a " + Json(ds.task).get<std::string>() + " dataset, not " +
                        Json(task).get<std::string>());
    if (ds.empty()) throw DataError(dataset_path + " holds no rows");
    const auto spec = network_for(task, c, ds.horizon);
    auto res = train(ds, spec, c.train, on_epoch);
    res.model.provenance["run_config"] = to_json(c);
    save_model(model_path, res.model);
    auto hist = open_output(history_path);
    write_history_csv(hist, res.history);
    if (!hist) throw DataError("write failed for " + history_path);
    write_sidecar(history_path, {{"run_config", to_json(c)}, {"dataset", ds.metadata}, {"model", model_path}});
    return {std::move(res.model), std::move(res.history)};
}

enum class EvalRows { All, Train, Validation };

/// Metrics report with the confusion matrix for detection models. `Train` and
/// `Validation` re-create the split recorded in the model's training provenance.
inline Json cmd_eval(const Model& model, const Dataset& ds, EvalRows which = EvalRows::All) {
    if (ds.empty()) throw DataError("evaluation dataset is empty");
    std::vector<std::size_t> rows;
    const std::vector<std::size_t>* sel = nullptr;
    if (which != EvalRows::All) {
        if (!model.provenance.contains("train_config"))
            throw UsageError("model has no training provenance to recreate its split");
        TrainConfig tc;
        JsonSection s(model.provenance.at("train_config"), "train_config");
        read_json(s, tc);
        auto split = split_dataset(ds, tc.validation_fraction, derive_seed(tc.seed, {1}));
        rows = which == EvalRows::Train ? split.train : split.validation;
        if (rows.empty()) throw DataError("the requested split is empty");
        sel = &rows;
    }
    const auto m = evaluate(model.net, ds, sel);
    auto num = [](double v) { return std::isnan(v) ? Json(nullptr) : Json(v); };
    Json report{{"task", ds.task}, {"rows", sel ? rows.size() : ds.size()}, {"loss", m.loss}};
    if (ds.task == Task::Detection) {
        report["accuracy"] = num(m.accuracy);
        report["recall"] = num(m.recall);
        report["precision"] = num(m.precision);
        report["confusion"] = {{"tp", m.confusion.tp}, {"tn", m.confusion.tn}, {"fp", m.confusion.fp}, {"fn", m.confusion.fn}};
    } else {
        report["rmse"] = num(m.rmse);
    }
    return report;
}

// ---------------------------------------------------------------------------
// search

inline SearchResult cmd_search(const std::string& dataset_path, const RunConfig& c, const std::string& log_path,
                               const std::string& model_path, unsigned workers = 1) {
    c.validate();
    const auto ds = load_dataset(dataset_path);
    if (ds.empty()) throw DataError(dataset_path + " holds no rows");
    auto ga = c.ga;
    ga.workers = workers;
    auto log = open_output(log_path);
    auto res = search(ds, ga, c.train, [&](const Evaluation& e) { log << to_json(e).dump() << '\n' << std::flush; });
    if (!log) throw DataError("write failed for " + log_path);
    write_sidecar(log_path, {{"run_config", to_json(c)}, {"dataset", ds.metadata}});
    res.best_model.provenance["run_config"] = to_json(c);
    res.best_model.provenance["search"] = {{"best", res.best.label()}, {"fitness", res.best_fitness}};
    save_model(model_path, res.best_model);
    return res;
}

// ---------------------------------------------------------------------------
// stream / convert-imu

namespace detail {

inline std::string_view trim_line(std::string_view s) {
    while (!s.empty() && (s.back() == '\r' || s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    return s;
}

}  // namespace detail

/// Reads `t,theta` lines (an optional `t,theta` header first) and writes one JSON
/// decision per sample once the detector window is full. Returns the number of
/// decisions written.
inline std::size_t cmd_stream(StreamState& state, std::istream& in, std::ostream& out, bool with_forecast = false,
                              bool flush_each = false) {
    std::string raw;
    std::size_t line_no = 0, written = 0;
    bool first = true;
    while (std::getline(in, raw)) {
        ++line_no;
        const auto line = detail::trim_line(raw);
        if (line.empty()) continue;
        if (first && line == "t,theta") {
            first = false;
            continue;
        }
        first = false;
        const auto f = detail::split_csv(line);
        if (f.size() != 2)
            throw DataError("stream line " + std::to_string(line_no) + ": expected 't,theta', got '" + std::string(line) + "'");
        const double t = detail::parse_double(detail::trim_line(f[0]), line_no);
        const double th = detail::parse_double(detail::trim_line(f[1]), line_no);
        Decision d;
        try {
            d = state.push_sample(t, th);
        } catch (const DataError& e) {
            throw DataError("stream line " + std::to_string(line_no) + ": " + e.what());
        }
        if (!d.p_falling) continue;
        out << to_json(d, with_forecast).dump() << '\n';
        if (flush_each) out.flush();
        ++written;
    }
    if (in.bad()) throw DataError("read error on the input stream");
    return written;
}

/// "x", "-y", "z" or three comma-separated components.
inline std::array<double, 3> parse_axis(std::string_view s) {
    std::string_view name = s;
    double sign = 1.0;
    if (!name.empty() && (name.front() == '-' || name.front() == '+')) {
        sign = name.front() == '-' ? -1.0 : 1.0;
        name.remove_prefix(1);
    }
    if (name == "x") return {sign, 0.0, 0.0};
    if (name == "y") return {0.0, sign, 0.0};
    if (name == "z") return {0.0, 0.0, sign};
    const auto f = detail::split_csv(s);
    if (f.size() != 3) throw UsageError("body axis must be x, y, z (optionally signed) or 'ax,ay,az'");
    std::array<double, 3> a{};
    for (std::size_t i = 0; i < 3; ++i) {
        try {
            a[i] = detail::parse_double(detail::trim_line(f[i]), 0);
        } catch (const DataError&) {
            throw UsageError("bad body axis component '" + std::string(f[i]) + "'");
        }
    }
    if (a[0] == 0.0 && a[1] == 0.0 && a[2] == 0.0) throw UsageError("body axis must be non-zero");
    return a;
}

/// `t,qw,qx,qy,qz` (header required) to `t,theta`. Returns the row count.
inline std::size_t cmd_convert_imu(std::istream& in, std::ostream& out, std::array<double, 3> axis = {0.0, 0.0, 1.0}) {
    std::string raw;
    std::size_t line_no = 0, rows = 0;
    bool header = false;
    out << "t,theta\n";
    while (std::getline(in, raw)) {
        ++line_no;
        const auto line = detail::trim_line(raw);
        if (line.empty()) continue;
        if (!header) {
            if (line != "t,qw,qx,qy,qz") throw DataError("IMU file must start with the header 't,qw,qx,qy,qz'");
            header = true;
            continue;
        }
        const auto f = detail::split_csv(line);
        if (f.size() != 5) throw DataError("IMU line " + std::to_string(line_no) + ": expected 5 fields");
        double v[5];
        for (std::size_t i = 0; i < 5; ++i) v[i] = detail::parse_double(detail::trim_line(f[i]), line_no);
        double theta = 0.0;
        try {
            theta = quaternion_to_tilt({v[1], v[2], v[3], v[4]}, axis);
        } catch (const DataError& e) {
            throw DataError("IMU line " + std::to_string(line_no) + ": " + e.what());
        }
        std::string row;
        detail::append_double(row, v[0]);
        row += ',';
        detail::append_double(row, theta);
        out << row << '\n';
        ++rows;
    }
    if (!header) throw DataError("IMU file is empty");
    return rows;
}

}  // namespace fallguard
