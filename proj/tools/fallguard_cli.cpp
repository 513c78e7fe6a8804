// fallguard: command-line entry point for the fall detection pipeline.

#include <CLI11.hpp>

#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <type_traits>

#include "fallguard/commands.hpp"

using namespace fallguard;

namespace {

// Flags that override values from the --config file. A flag only applies when it
// was actually given on the command line.
class Overrides {
public:
    template <class Get>
    CLI::Option* add(CLI::App* app, const std::string& flag, Get get, const std::string& help) {
        using T = std::remove_reference_t<decltype(get(std::declval<RunConfig&>()))>;
        auto value = std::make_shared<T>();
        auto* opt = app->add_option(flag, *value, help);
        apply_.push_back([value, opt, get](RunConfig& c) {
            if (opt->count() > 0) get(c) = *value;
        });
        return opt;
    }

    void layers(CLI::App* app) {
        auto text = std::make_shared<std::string>();
        auto* opt = app->add_option("--layers", *text, "hidden layers, e.g. GRU-100,GRU-100");
        apply_.push_back([text, opt](RunConfig& c) {
            if (opt->count() > 0) c.layers = parse_layers(*text);
        });
    }

    RunConfig resolve(const std::string& config_path) const {
        RunConfig c = config_path.empty() ? RunConfig{} : load_run_config(config_path);
        for (const auto& f : apply_) f(c);
        c.validate();
        return c;
    }

private:
    std::vector<std::function<void(RunConfig&)>> apply_;
};

void scenario_flags(CLI::App* app, Overrides& o) {
    o.add(app, "--n-fall", [](RunConfig& c) -> auto& { return c.scenario.n_fall; }, "fall scenarios");
    o.add(app, "--n-nonfall", [](RunConfig& c) -> auto& { return c.scenario.n_nonfall; }, "non-fall scenarios");
    o.add(app, "--seed", [](RunConfig& c) -> auto& { return c.scenario.seed; }, "scenario seed");
    o.add(app, "--noise-sigma", [](RunConfig& c) -> auto& { return c.scenario.noise_sigma; }, "sensor noise std [rad]");
    o.add(app, "--bias-drift-rate", [](RunConfig& c) -> auto& { return c.scenario.bias_drift_rate; }, "[rad/s]");
    o.add(app, "--sensor-rate", [](RunConfig& c) -> auto& { return c.scenario.sensor_rate; }, "[Hz]");
    o.add(app, "--recovery-fraction", [](RunConfig& c) -> auto& { return c.scenario.recovery_fraction; },
          "share of non-fall scenarios that are recoveries");
    o.add(app, "--window", [](RunConfig& c) -> auto& { return c.detection.window; }, "detection window W");
    o.add(app, "--stride", [](RunConfig& c) -> auto& { return c.detection.stride; }, "detection window stride");
    o.add(app, "--balance-positives", [](RunConfig& c) -> auto& { return c.detection.balance_positives; },
          "keep this many falling windows");
    o.add(app, "--balance-negatives", [](RunConfig& c) -> auto& { return c.detection.balance_negatives; },
          "keep this many non-falling windows");
    o.add(app, "--fc-window", [](RunConfig& c) -> auto& { return c.forecast.window; }, "forecast input window W");
    o.add(app, "--horizon", [](RunConfig& c) -> auto& { return c.forecast.horizon; }, "forecast horizon H");
    o.add(app, "--pairs-per-fall", [](RunConfig& c) -> auto& { return c.forecast.pairs_per_fall; },
          "forecast pairs per fall, 0 for all");
}

void train_flags(CLI::App* app, Overrides& o, bool with_seed) {
    o.add(app, "--epochs", [](RunConfig& c) -> auto& { return c.train.epochs; }, "training epochs");
    o.add(app, "--batch-size", [](RunConfig& c) -> auto& { return c.train.batch_size; }, "mini-batch size");
    o.add(app, "--lr", [](RunConfig& c) -> auto& { return c.train.learning_rate; }, "Adam learning rate");
    o.add(app, "--validation-fraction", [](RunConfig& c) -> auto& { return c.train.validation_fraction; },
          "held-out share for validation");
    if (with_seed) o.add(app, "--seed", [](RunConfig& c) -> auto& { return c.train.seed; }, "training seed");
}

int run(int argc, char** argv) {
    CLI::App app{"Fall detection and forecasting on simulated tilt angles"};
    app.require_subcommand(1);
    std::string config_path;
    unsigned workers = 1;

    // simulate
    auto* sim = app.add_subcommand("simulate", "simulate passive falls to t,theta,omega CSV");
    SimulateOptions so;
    std::string inertia = "uniform_rod";
    sim->add_option("--theta0", so.theta0, "initial angle(s) [rad]")->delimiter(',');
    sim->add_option("--omega0", so.omega0, "initial angular velocity(ies) [rad/s]")->delimiter(',');
    sim->add_option("--length", so.params.length, "body length [m]");
    sim->add_option("--mass", so.params.mass, "body mass [kg]");
    sim->add_option("--inertia", inertia, "uniform_rod or point_mass")
        ->check(CLI::IsMember({"uniform_rod", "point_mass"}));
    sim->add_option("--rate", so.sensor_rate, "output sample rate [Hz]");
    sim->add_option("--duration", so.max_t, "maximum simulated time [s]");
    sim->add_flag("--grid", so.grid, "one file per (theta0, omega0) pair; --out is a directory");
    sim->add_option("-o,--out", so.out, "output CSV (or directory with --grid)")->required();

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate detection and forecasting datasets");
    Overrides gen_o;
    std::string gen_out, gen_task = "both";
    gen->add_option("--config", config_path, "JSON run configuration");
    scenario_flags(gen, gen_o);
    gen->add_option("--task", gen_task, "detect, forecast or both")->check(CLI::IsMember({"detect", "forecast", "both"}));
    gen->add_option("--workers", workers, "generation threads (output does not depend on it)");
    gen->add_option("-o,--out", gen_out, "output directory")->required();

    // train
    auto* tr = app.add_subcommand("train", "train a detector or forecaster");
    Overrides tr_o;
    std::string tr_task, tr_data, tr_model, tr_hist;
    tr->add_option("task", tr_task, "detect or forecast")->required()->check(CLI::IsMember({"detect", "forecast"}));
    tr->add_option("--config", config_path, "JSON run configuration");
    tr->add_option("-d,--dataset", tr_data, "dataset CSV")->required();
    tr->add_option("-o,--model", tr_model, "output model JSON")->required();
    tr->add_option("--history", tr_hist, "history CSV (default: <model>.history.csv)");
    train_flags(tr, tr_o, true);
    tr_o.layers(tr);

    // search
    auto* se = app.add_subcommand("search", "genetic search over detector architectures");
    Overrides se_o;
    std::string se_data, se_log, se_model;
    se->add_option("--config", config_path, "JSON run configuration");
    se->add_option("-d,--dataset", se_data, "detection dataset CSV")->required();
    se->add_option("--log", se_log, "evaluation log (JSON lines)")->required();
    se->add_option("-o,--model", se_model, "best model JSON")->required();
    se->add_option("--workers", workers, "parallel evaluations (output does not depend on it)");
    se_o.add(se, "--population", [](RunConfig& c) -> auto& { return c.ga.population; }, "genomes per generation");
    se_o.add(se, "--generations", [](RunConfig& c) -> auto& { return c.ga.generations; }, "generations");
    se_o.add(se, "--eval-epochs", [](RunConfig& c) -> auto& { return c.ga.eval_epochs; }, "epochs per evaluation");
    se_o.add(se, "--mutation-rate", [](RunConfig& c) -> auto& { return c.ga.mutation_rate; }, "per-gene rate");
    se_o.add(se, "--elitism", [](RunConfig& c) -> auto& { return c.ga.elitism; }, "genomes kept unchanged");
    se_o.add(se, "--weight-accuracy", [](RunConfig& c) -> auto& { return c.ga.weight_accuracy; }, "fitness weight");
    se_o.add(se, "--weight-recall", [](RunConfig& c) -> auto& { return c.ga.weight_recall; }, "fitness weight");
    se_o.add(se, "--seed", [](RunConfig& c) -> auto& { return c.ga.seed; }, "search seed");
    train_flags(se, se_o, false);

    // stream
    auto* st = app.add_subcommand("stream", "run detection and forecasting over a t,theta stream");
    Overrides st_o;
    std::string st_det, st_fc, st_in = "-";
    bool st_forecast = false;
    st->add_option("--config", config_path, "JSON run configuration");
    st->add_option("--detector", st_det, "detector model JSON")->required();
    st->add_option("--forecaster", st_fc, "forecaster model JSON");
    st->add_option("-i,--input", st_in, "input file, '-' for standard input");
    st->add_flag("--with-forecast", st_forecast, "include the forecast in each decision");
    st_o.add(st, "--trigger-lead", [](RunConfig& c) -> auto& { return c.stream.trigger_lead; }, "[s]");
    st_o.add(st, "--rate-tolerance", [](RunConfig& c) -> auto& { return c.stream.rate_tolerance; },
             "relative sample period deviation that raises rate_warning");

    // convert-imu
    auto* ci = app.add_subcommand("convert-imu", "quaternion CSV to tilt angle CSV");
    std::string ci_in = "-", ci_out = "-", ci_axis = "z";
    ci->add_option("-i,--input", ci_in, "t,qw,qx,qy,qz CSV, '-' for standard input");
    ci->add_option("-o,--out", ci_out, "t,theta CSV, '-' for standard output");
    ci->add_option("--axis", ci_axis, "body axis along the torso: x, y, z, -x, ... or 'ax,ay,az'");

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a model on a dataset");
    std::string ev_model, ev_data, ev_rows = "all", ev_out = "-";
    ev->add_option("-m,--model", ev_model, "model JSON")->required();
    ev->add_option("-d,--dataset", ev_data, "dataset CSV")->required();
    ev->add_option("--rows", ev_rows, "all, or the train/validation split recorded in the model")
        ->check(CLI::IsMember({"all", "train", "validation"}));
    ev->add_option("-o,--out", ev_out, "report JSON, '-' for standard output");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : static_cast<int>(ErrorKind::Usage);
    }

    if (*sim) {
        so.params.inertia_model = inertia == "point_mass" ? InertiaModel::PointMass : InertiaModel::UniformRod;
        for (const auto& p : cmd_simulate(so)) std::cerr << "wrote " << p << '\n';
    } else if (*gen) {
        const auto c = gen_o.resolve(config_path);
        const auto r = cmd_gen_data(c, gen_out, gen_task != "forecast", gen_task != "detect", workers);
        if (r.detection_path) std::cerr << "wrote " << *r.detection_path << " (" << r.detection_rows << " windows)\n";
        if (r.forecast_path) std::cerr << "wrote " << *r.forecast_path << " (" << r.forecast_rows << " pairs)\n";
    } else if (*tr) {
        const auto c = tr_o.resolve(config_path);
        const Task task = tr_task == "detect" ? Task::Detection : Task::Forecasting;
        const std::string hist = tr_hist.empty() ? tr_model + ".history.csv" : tr_hist;
        cmd_train(task, tr_data, c, tr_model, hist, [](const EpochRecord& r) {
            std::cerr << "epoch " << r.epoch << " loss " << r.loss;
            if (!std::isnan(r.metrics.accuracy)) std::cerr << " accuracy " << r.metrics.accuracy << " recall " << r.metrics.recall;
            if (!std::isnan(r.metrics.rmse)) std::cerr << " rmse " << r.metrics.rmse;
            std::cerr << '\n';
        });
    } else if (*se) {
        const auto c = se_o.resolve(config_path);
        const auto r = cmd_search(se_data, c, se_log, se_model, workers);
        std::cerr << "best " << r.best.label() << " fitness " << r.best_fitness << '\n';
    } else if (*st) {
        const auto c = st_o.resolve(config_path);
        auto det = std::make_shared<const Model>(load_model(st_det));
        std::shared_ptr<const Model> fc;
        if (!st_fc.empty()) fc = std::make_shared<const Model>(load_model(st_fc));
        StreamConfig sc = c.stream;
        sc.sensor_rate = det->meta.sensor_rate;
        StreamState state(det, fc, sc);
        if (st_in == "-") {
            cmd_stream(state, std::cin, std::cout, st_forecast, true);
        } else {
            std::ifstream in(st_in);
            if (!in) throw DataError("cannot read " + st_in);
            cmd_stream(state, in, std::cout, st_forecast, true);
        }
    } else if (*ci) {
        const auto axis = parse_axis(ci_axis);
        std::ifstream fin;
        std::ofstream fout;
        if (ci_in != "-") {
            fin.open(ci_in);
            if (!fin) throw DataError("cannot read " + ci_in);
        }
        if (ci_out != "-") fout = open_output(ci_out);
        cmd_convert_imu(ci_in == "-" ? std::cin : fin, ci_out == "-" ? std::cout : fout, axis);
    } else if (*ev) {
        const auto model = load_model(ev_model);
        const auto ds = load_dataset(ev_data);
        const EvalRows rows = ev_rows == "train" ? EvalRows::Train : ev_rows == "validation" ? EvalRows::Validation : EvalRows::All;
        const auto report = cmd_eval(model, ds, rows).dump(2);
        if (ev_out == "-") {
            std::cout << report << '\n';
        } else {
            auto out = open_output(ev_out);
            out << report << '\n';
        }
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const Error& e) {
        std::cerr << "fallguard: " << e.what() << '\n';
        return e.exit_code();
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "fallguard: " << e.what() << '\n';
        return static_cast<int>(ErrorKind::Data);
    } catch (const std::exception& e) {
        std::cerr << "fallguard: " << e.what() << '\n';
        return static_cast<int>(ErrorKind::Data);
    }
}
