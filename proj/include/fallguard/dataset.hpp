#pragma once
/**
 * Detection and forecasting datasets: assembling labeled sequences from scenarios,
 * windowing them, and the CSV + sidecar-JSON file format.
 *
 * Fall sequences are a sway prefix (the subject standing, shifted so it flows into
 * the initial tilt) followed by the passive fall. The fall onset is the first fall
 * sample; windows ending at or after it are labeled falling. The prefix is context
 * only: windows ending inside it are not emitted, so negatives come from sway and
 * recovery recordings.
 */

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "fallguard/config_json.hpp"
#include "fallguard/datagen.hpp"
#include "fallguard/parallel.hpp"

namespace fallguard {

NLOHMANN_JSON_SERIALIZE_ENUM(InertiaModel, {{InertiaModel::UniformRod, "uniform_rod"},
                                            {InertiaModel::PointMass, "point_mass"}})

inline void to_json(Json& j, const Range& r) { j = Json::array({r.min, r.max}); }
inline void from_json(const Json& j, Range& r) {
    if (!j.is_array() || j.size() != 2) throw UsageError("range must be a [min, max] array");
    r.min = j[0].get<double>();
    r.max = j[1].get<double>();
}

inline Json to_json(const ScenarioConfig& c) {
    return Json{{"n_fall", c.n_fall},
                {"n_nonfall", c.n_nonfall},
                {"length_range", c.length_range},
                {"mass_range", c.mass_range},
                {"theta0_range", c.theta0_range},
                {"omega0_range", c.omega0_range},
                {"sensor_rate", c.sensor_rate},
                {"noise_sigma", c.noise_sigma},
                {"bias_drift_rate", c.bias_drift_rate},
                {"seed", c.seed},
                {"inertia_model", c.inertia_model},
                {"recovery_fraction", c.recovery_fraction},
                {"recovery_theta0_range", c.recovery_theta0_range},
                {"recovery_omega0_range", c.recovery_omega0_range},
                {"t_react_range", c.t_react_range},
                {"sway_torque_std", c.sway_torque_std},
                {"torque_limit", c.torque_limit},
                {"nonfall_duration", c.nonfall_duration},
                {"max_fall_time", c.max_fall_time}};
}

inline void read_json(JsonSection& s, ScenarioConfig& c) {
    s.read("n_fall", c.n_fall);
    s.read("n_nonfall", c.n_nonfall);
    s.read("length_range", c.length_range);
    s.read("mass_range", c.mass_range);
    s.read("theta0_range", c.theta0_range);
    s.read("omega0_range", c.omega0_range);
    s.read("sensor_rate", c.sensor_rate);
    s.read("noise_sigma", c.noise_sigma);
    s.read("bias_drift_rate", c.bias_drift_rate);
    s.read("seed", c.seed);
    if (s.has("inertia_model")) {
        const auto& v = s.raw("inertia_model");
        if (v != "uniform_rod" && v != "point_mass")
            throw UsageError("config key 'scenario.inertia_model' must be \"uniform_rod\" or \"point_mass\"");
        c.inertia_model = v.get<InertiaModel>();
    }
    s.read("recovery_fraction", c.recovery_fraction);
    s.read("recovery_theta0_range", c.recovery_theta0_range);
    s.read("recovery_omega0_range", c.recovery_omega0_range);
    s.read("t_react_range", c.t_react_range);
    s.read("sway_torque_std", c.sway_torque_std);
    s.read("torque_limit", c.torque_limit);
    s.read("nonfall_duration", c.nonfall_duration);
    s.read("max_fall_time", c.max_fall_time);
}

enum class SequenceKind { Fall, Sway, Recovery };

/// One simulated subject recording, before noise.
struct LabeledSequence {
    SequenceKind kind = SequenceKind::Sway;
    std::vector<double> angles;  ///< clean tilt angles
    std::vector<double> times;   ///< uniform, fall onset at t = 0
    std::size_t onset_index = 0; ///< first fall sample (falls only)
    std::optional<std::size_t> impact_index;
    double impact_time = 0.0;    ///< first 1 kHz instant with |theta| >= pi/2 (falls only)
    std::string source;
    PendulumParams params;

    bool is_fall() const { return kind == SequenceKind::Fall; }
};

namespace detail {

inline std::string source_name(const char* prefix, std::size_t index) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%s-%06zu", prefix, index);
    return buf;
}

/// `len` sway samples that would continue into `theta_next` at the following sample.
inline std::vector<double> sway_prefix(const PendulumParams& p, double sensor_rate, std::size_t len,
                                       double theta_next, double torque_std, std::uint64_t seed) {
    if (len == 0) return {};
    SwayOptions opts;
    opts.torque_std = torque_std;
    const auto sway = generate_nonfall(p, sensor_rate, static_cast<double>(len) / sensor_rate, seed, opts);
    const double offset = theta_next - sway.samples.at(len).theta;
    std::vector<double> out(len);
    for (std::size_t i = 0; i < len; ++i) out[i] = sway.samples[i].theta + offset;
    return out;
}

inline std::vector<double> uniform_times(std::size_t n, std::size_t origin, double sensor_rate) {
    std::vector<double> t(n);
    for (std::size_t i = 0; i < n; ++i)
        t[i] = (static_cast<double>(i) - static_cast<double>(origin)) / sensor_rate;
    return t;
}

/// Impact instant at 1 kHz resolution, for ground truth.
inline double fine_impact_time(const PendulumParams& p, const PendulumState& initial, double max_t) {
    const auto fine = simulate_fall(p, initial, 1e-3, max_t);
    return fine.terminated_by == Termination::Impact ? fine.back().t : std::numeric_limits<double>::infinity();
}

}  // namespace detail

/**
 * Sway prefix of `prefix_len` samples followed by the passive fall and, optionally,
 * `extra_after_impact` samples of the fall continued past the floor. Returns
 * nothing when the fall times out before reaching the floor.
 */
inline std::optional<LabeledSequence> build_fall_sequence(const Scenario& sc, const ScenarioConfig& cfg,
                                                          std::size_t prefix_len,
                                                          std::size_t extra_after_impact = 0) {
    const auto fall = generate_fall(sc.params, sc.initial, cfg.sensor_rate, cfg.max_fall_time);
    if (fall.terminated_by != Termination::Impact) return std::nullopt;
    LabeledSequence seq;
    seq.kind = SequenceKind::Fall;
    seq.params = sc.params;
    seq.source = detail::source_name("fall", sc.index);
    seq.angles = detail::sway_prefix(sc.params, cfg.sensor_rate, prefix_len, sc.initial.theta, cfg.sway_torque_std,
                                     derive_seed(sc.seed, {1}));
    seq.onset_index = prefix_len;
    for (const auto& s : fall.samples) seq.angles.push_back(s.theta);
    seq.impact_index = seq.angles.size() - 1;
    for (const auto& s : continue_passive(sc.params, fall.back(), cfg.sensor_rate, extra_after_impact))
        seq.angles.push_back(s.theta);
    seq.times = detail::uniform_times(seq.angles.size(), prefix_len, cfg.sensor_rate);
    seq.impact_time = detail::fine_impact_time(sc.params, sc.initial, cfg.max_fall_time);
    return seq;
}

/// Non-fall sequence: a recovery (with probability recovery_fraction, when the
/// draw is recoverable) or plain sway of nonfall_duration seconds.
inline LabeledSequence build_nonfall_sequence(const Scenario& sc, const ScenarioConfig& cfg, std::size_t prefix_len) {
    Rng rng(derive_seed(sc.seed, {2}));
    LabeledSequence seq;
    seq.params = sc.params;
    if (uniform(rng, 0.0, 1.0) < cfg.recovery_fraction) {
        PendulumState init;
        init.theta = uniform(rng, cfg.recovery_theta0_range.min, cfg.recovery_theta0_range.max);
        init.omega = uniform(rng, cfg.recovery_omega0_range.min, cfg.recovery_omega0_range.max);
        const double t_react = uniform(rng, cfg.t_react_range.min, cfg.t_react_range.max);
        RecoveryOptions ropts;
        ropts.torque_limit = cfg.torque_limit;
        auto rec = generate_recovery(sc.params, init, t_react, cfg.sensor_rate, ropts);
        if (rec.recovered) {
            seq.kind = SequenceKind::Recovery;
            seq.source = detail::source_name("recovery", sc.index);
            seq.angles = detail::sway_prefix(sc.params, cfg.sensor_rate, prefix_len, init.theta, cfg.sway_torque_std,
                                             derive_seed(sc.seed, {1}));
            for (const auto& s : rec.trajectory.samples) seq.angles.push_back(s.theta);
            seq.times = detail::uniform_times(seq.angles.size(), prefix_len, cfg.sensor_rate);
            return seq;
        }
    }
    SwayOptions opts;
    opts.torque_std = cfg.sway_torque_std;
    const auto sway = generate_nonfall(sc.params, cfg.sensor_rate, cfg.nonfall_duration, derive_seed(sc.seed, {3}), opts);
    seq.kind = SequenceKind::Sway;
    seq.source = detail::source_name("sway", sc.index);
    seq.angles = sway.angles();
    seq.times = detail::uniform_times(seq.angles.size(), 0, cfg.sensor_rate);
    return seq;
}

/// Sensor-corrupted angles of a sequence, seeded per scenario.
inline std::vector<double> observed_angles(const LabeledSequence& seq, const Scenario& sc, const ScenarioConfig& cfg) {
    return corrupt(seq.angles, seq.times, cfg.noise_sigma, cfg.bias_drift_rate, derive_seed(sc.seed, {4}));
}

enum class Task { Detection, Forecasting };

NLOHMANN_JSON_SERIALIZE_ENUM(Task, {{Task::Detection, "detection"}, {Task::Forecasting, "forecasting"}})

struct Dataset {
    Task task = Task::Detection;
    std::size_t window = 100;
    std::size_t horizon = 0;  ///< 0 for detection
    double sensor_rate = 100.0;
    std::vector<LabeledWindow> windows;  ///< detection
    std::vector<ForecastPair> pairs;     ///< forecasting
    Json metadata = Json::object();

    std::size_t size() const { return task == Task::Detection ? windows.size() : pairs.size(); }
    bool empty() const { return size() == 0; }
    std::size_t count_label(int label) const {
        return static_cast<std::size_t>(
            std::count_if(windows.begin(), windows.end(), [label](const auto& w) { return w.label == label; }));
    }
};

struct DetectionOptions {
    std::size_t window = 100;
    std::size_t stride = 10;
    unsigned workers = 1;
};

struct ForecastOptions {
    std::size_t window = 100;
    std::size_t horizon = 50;
    std::size_t stride = 1;
    std::size_t pairs_per_fall = 1;  ///< 0 keeps every eligible pair
    std::size_t min_observed = 10;   ///< fall samples seen before the first eligible cut
    unsigned workers = 1;
};

inline Dataset build_detection_dataset(const ScenarioConfig& cfg, const DetectionOptions& opts) {
    const auto scenarios = sample_scenarios(cfg);
    std::vector<std::vector<LabeledWindow>> parts(scenarios.size());
    parallel_for(scenarios.size(), opts.workers, [&](std::size_t i) {
        const auto& sc = scenarios[i];
        std::optional<LabeledSequence> seq =
            sc.is_fall ? build_fall_sequence(sc, cfg, opts.window) : build_nonfall_sequence(sc, cfg, opts.window);
        if (!seq) return;
        const auto obs = observed_angles(*seq, sc, cfg);
        auto windows = windowize_detection(obs, opts.window, opts.stride, {seq->is_fall(), seq->onset_index, seq->source});
        if (seq->is_fall())
            std::erase_if(windows, [](const LabeledWindow& w) { return w.label == 0; });
        parts[i] = std::move(windows);
    });
    Dataset ds;
    ds.task = Task::Detection;
    ds.window = opts.window;
    ds.horizon = 0;
    ds.sensor_rate = cfg.sensor_rate;
    for (auto& p : parts)
        for (auto& w : p) ds.windows.push_back(std::move(w));
    ds.metadata = {{"generator", "scenario"},
                   {"config", to_json(cfg)},
                   {"stride", opts.stride},
                   {"seed", cfg.seed}};
    return ds;
}

/// Eligible forecasting cuts of a fall: input ends after `min_observed` fall
/// samples and strictly before the impact sample.
inline std::vector<std::size_t> forecast_cut_starts(const LabeledSequence& seq, const ForecastOptions& opts) {
    std::vector<std::size_t> starts;
    if (!seq.impact_index) return starts;
    const std::size_t first_end = seq.onset_index + opts.min_observed;
    for (std::size_t i = 0; i + opts.window + opts.horizon <= seq.angles.size(); i += opts.stride) {
        const std::size_t end = i + opts.window - 1;
        if (end >= first_end && end < *seq.impact_index) starts.push_back(i);
    }
    return starts;
}

inline Dataset build_forecast_dataset(const ScenarioConfig& cfg, const ForecastOptions& opts) {
    auto scenarios = sample_scenarios(cfg);
    std::vector<std::vector<ForecastPair>> parts(scenarios.size());
    parallel_for(scenarios.size(), opts.workers, [&](std::size_t i) {
        const auto& sc = scenarios[i];
        if (!sc.is_fall) return;
        const auto seq = build_fall_sequence(sc, cfg, opts.window, opts.horizon);
        if (!seq) return;
        auto starts = forecast_cut_starts(*seq, opts);
        if (starts.empty()) return;
        if (opts.pairs_per_fall > 0 && starts.size() > opts.pairs_per_fall) {
            Rng rng(derive_seed(sc.seed, {5}));
            std::shuffle(starts.begin(), starts.end(), rng);
            starts.resize(opts.pairs_per_fall);
            std::sort(starts.begin(), starts.end());
        }
        const auto obs = observed_angles(*seq, sc, cfg);
        for (auto s : starts) {
            ForecastPair fp;
            const auto b = static_cast<std::ptrdiff_t>(s);
            const auto w = static_cast<std::ptrdiff_t>(opts.window);
            const auto h = static_cast<std::ptrdiff_t>(opts.horizon);
            fp.input.assign(obs.begin() + b, obs.begin() + b + w);
            fp.target.assign(seq->angles.begin() + b + w, seq->angles.begin() + b + w + h);
            fp.source_id = seq->source + ":" + std::to_string(s);
            parts[i].push_back(std::move(fp));
        }
    });
    Dataset ds;
    ds.task = Task::Forecasting;
    ds.window = opts.window;
    ds.horizon = opts.horizon;
    ds.sensor_rate = cfg.sensor_rate;
    for (auto& p : parts)
        for (auto& fp : p) ds.pairs.push_back(std::move(fp));
    ds.metadata = {{"generator", "scenario"},
                   {"config", to_json(cfg)},
                   {"stride", opts.stride},
                   {"pairs_per_fall", opts.pairs_per_fall},
                   {"min_observed", opts.min_observed},
                   {"seed", cfg.seed}};
    return ds;
}

/// Random subset with exactly n_pos falling and n_neg non-falling windows, kept in
/// their original order. Throws when a class has too few windows.
inline Dataset balanced_subset(const Dataset& ds, std::size_t n_pos, std::size_t n_neg, std::uint64_t seed) {
    if (ds.task != Task::Detection) throw UsageError("balanced_subset applies to detection datasets");
    std::vector<std::size_t> pos, neg;
    for (std::size_t i = 0; i < ds.windows.size(); ++i) (ds.windows[i].label == 1 ? pos : neg).push_back(i);
    if (pos.size() < n_pos || neg.size() < n_neg)
        throw DataError("not enough windows to balance: have " + std::to_string(pos.size()) + "/" +
                        std::to_string(neg.size()) + ", need " + std::to_string(n_pos) + "/" + std::to_string(n_neg));
    Rng rng(seed);
    std::shuffle(pos.begin(), pos.end(), rng);
    std::shuffle(neg.begin(), neg.end(), rng);
    pos.resize(n_pos);
    neg.resize(n_neg);
    std::vector<std::size_t> keep(pos);
    keep.insert(keep.end(), neg.begin(), neg.end());
    std::sort(keep.begin(), keep.end());
    Dataset out = ds;
    out.windows.clear();
    for (auto i : keep) out.windows.push_back(ds.windows[i]);
    out.metadata["balanced"] = {{"positives", n_pos}, {"negatives", n_neg}, {"seed", seed}};
    return out;
}

// ---------------------------------------------------------------------------
// File format

inline std::string metadata_path(const std::string& csv_path) { return csv_path + ".meta.json"; }

namespace detail {

inline void append_double(std::string& line, double v) {
    char buf[32];
    const int n = std::snprintf(buf, sizeof buf, "%.17g", v);
    line.append(buf, static_cast<std::size_t>(n));
}

inline double parse_double(std::string_view s, std::size_t line_no) {
    double v = 0.0;
    const auto* end = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(s.data(), end, v);
    if (ec != std::errc() || ptr != end || !std::isfinite(v))
        throw DataError("line " + std::to_string(line_no) + ": bad number '" + std::string(s) + "'");
    return v;
}

inline std::vector<std::string_view> split_csv(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto comma = line.find(',', start);
        if (comma == std::string_view::npos) {
            out.push_back(line.substr(start));
            return out;
        }
        out.push_back(line.substr(start, comma - start));
        start = comma + 1;
    }
}

}  // namespace detail

inline Json dataset_metadata(const Dataset& ds) {
    Json meta = ds.metadata;
    meta["task"] = ds.task;
    meta["W"] = ds.window;
    meta["H"] = ds.horizon;
    meta["sensor_rate"] = ds.sensor_rate;
    meta["rows"] = ds.size();
    if (ds.task == Task::Detection) meta["class_counts"] = {{"falling", ds.count_label(1)}, {"not_falling", ds.count_label(0)}};
    return meta;
}

inline void write_dataset_csv(std::ostream& os, const Dataset& ds) {
    std::string line = ds.task == Task::Detection ? "source_id,label" : "source_id";
    for (std::size_t i = 0; i < ds.window; ++i) line += ",a_" + std::to_string(i);
    for (std::size_t i = 0; i < ds.horizon; ++i) line += ",t_" + std::to_string(i);
    os << line << '\n';
    auto emit = [&](const std::string& id, const std::vector<double>& a, const std::vector<double>* b, int label) {
        line = id;
        if (label >= 0) line += label ? ",1" : ",0";
        for (double v : a) line += ',', detail::append_double(line, v);
        if (b)
            for (double v : *b) line += ',', detail::append_double(line, v);
        os << line << '\n';
    };
    if (ds.task == Task::Detection) {
        for (const auto& w : ds.windows) emit(w.source_id, w.angles, nullptr, w.label);
    } else {
        for (const auto& p : ds.pairs) emit(p.source_id, p.input, &p.target, -1);
    }
}

/// Writes `path` (CSV) and `path.meta.json`.
inline void save_dataset(const std::string& path, const Dataset& ds) {
    std::ofstream csv(path, std::ios::binary);
    if (!csv) throw DataError("cannot write " + path);
    write_dataset_csv(csv, ds);
    std::ofstream meta(metadata_path(path), std::ios::binary);
    if (!meta) throw DataError("cannot write " + metadata_path(path));
    meta << dataset_metadata(ds).dump(2) << '\n';
    if (!csv || !meta) throw DataError("write failed for " + path);
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream meta_in(metadata_path(path));
    if (!meta_in) throw DataError("missing dataset metadata " + metadata_path(path));
    Json meta;
    try {
        meta = Json::parse(meta_in);
    } catch (const Json::exception& e) {
        throw DataError("bad dataset metadata: " + std::string(e.what()));
    }
    Dataset ds;
    try {
        ds.task = meta.at("task").get<Task>();
        ds.window = meta.at("W").get<std::size_t>();
        ds.horizon = meta.at("H").get<std::size_t>();
        ds.sensor_rate = meta.at("sensor_rate").get<double>();
    } catch (const Json::exception& e) {
        throw DataError("bad dataset metadata: " + std::string(e.what()));
    }
    if (ds.window == 0 || (ds.task == Task::Forecasting && ds.horizon == 0))
        throw DataError("dataset metadata has zero W or H");
    ds.metadata = meta;
    for (const char* k : {"task", "W", "H", "sensor_rate", "rows", "class_counts"}) ds.metadata.erase(k);

    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read " + path);
    std::string line;
    if (!std::getline(in, line)) throw DataError(path + ": missing header");
    const std::size_t lead = ds.task == Task::Detection ? 2 : 1;
    const std::size_t cols = lead + ds.window + ds.horizon;
    if (detail::split_csv(line).size() != cols) throw DataError(path + ": header does not match W/H metadata");
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto f = detail::split_csv(line);
        if (f.size() != cols)
            throw DataError(path + ": line " + std::to_string(line_no) + " has " + std::to_string(f.size()) +
                            " fields, expected " + std::to_string(cols));
        if (ds.task == Task::Detection) {
            LabeledWindow w;
            w.source_id = std::string(f[0]);
            if (f[1] != "0" && f[1] != "1") throw DataError(path + ": line " + std::to_string(line_no) + " bad label");
            w.label = f[1] == "1" ? 1 : 0;
            w.angles.reserve(ds.window);
            for (std::size_t i = 0; i < ds.window; ++i) w.angles.push_back(detail::parse_double(f[lead + i], line_no));
            ds.windows.push_back(std::move(w));
        } else {
            ForecastPair p;
            p.source_id = std::string(f[0]);
            for (std::size_t i = 0; i < ds.window; ++i) p.input.push_back(detail::parse_double(f[lead + i], line_no));
            for (std::size_t i = 0; i < ds.horizon; ++i)
                p.target.push_back(detail::parse_double(f[lead + ds.window + i], line_no));
            ds.pairs.push_back(std::move(p));
        }
    }
    if (meta.contains("rows") && meta["rows"].get<std::size_t>() != ds.size())
        throw DataError(path + ": row count disagrees with metadata");
    if (ds.task == Task::Detection && meta.contains("class_counts") &&
        meta["class_counts"].value("falling", std::size_t{0}) != ds.count_label(1))
        throw DataError(path + ": class counts disagree with metadata");
    return ds;
}

}  // namespace fallguard
